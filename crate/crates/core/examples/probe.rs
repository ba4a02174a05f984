// timing probe: build a desk zoo and optimize a few suffixes
use bbiv_core::exp::*;
use bbiv_core::gcg::GcgConfig;
use bbiv_core::verify::Verdict;
use bbiv_core::zoo::GenerationConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let fast = args.iter().any(|a| a == "--fast");
    let dir = std::path::PathBuf::from(if fast { "/tmp/zoo-fast" } else { "/tmp/zoo-probe" });
    let rebuild = !dir.join("manifest.json").exists() || args.iter().any(|a| a == "--rebuild");
    let mut config = ZooBuildConfig::default();
    if fast {
        config.corpus_docs = 800;
        config.train.steps = 700;
    }
    if rebuild {
        let _ = std::fs::remove_dir_all(&dir);
        let t0 = Instant::now();
        let out = build_zoo(&config, &dir).expect("zoo builds");
        println!("zoo build: {:.1}s", t0.elapsed().as_secs_f64());
        for (id, r) in &out.reports {
            println!("  {id}: val_loss {:.3}, final {:.3}", r.val_loss, r.final_loss);
        }
    }
    let zoo = LoadedZoo::load(&dir.join("manifest.json")).expect("loads");
    println!("vocab size: {}", zoo.vocab.size());

    let ep = zoo.endpoint(REFERENCE_ID).unwrap();
    let gen = GenerationConfig::default();
    for n in [3usize, 4] {
        let d = bbiv_core::verify::collect_answer_distribution(&ep, n, 40, &gen, 0.5);
        println!("n={n}: valid {}/{} mode_freq {:.2}", d.valid, d.samples, d.mode_frequency);
    }

    let t1 = Instant::now();
    let count = 4;
    let opts = OptimizeOpts {
        n: 3,
        count,
        gcg: GcgConfig::desk(0),
        ensemble: vec![REFERENCE_ID.to_string()],
        seed: 1,
    };
    let suffixes = optimize_suffixes(&zoo, &opts).expect("optimizes");
    println!("optimize {count} suffixes (300 steps): {:.1}s", t1.elapsed().as_secs_f64());
    for (id, r) in &suffixes {
        println!(
            "  {id}: target {} step0 {:.3} step50 {:.3} best {:.4} ({:.2}%) best_step {} suffix: {:?}",
            r.task.target,
            r.loss_trace[0],
            r.loss_trace[50.min(r.loss_trace.len() - 1)],
            r.best_loss,
            100.0 * r.best_loss / r.loss_trace[0],
            r.best_step,
            r.suffix_text
        );
    }

    let t2 = Instant::now();
    let endpoints = zoo.endpoints();
    let outcomes = verify_suffixes(&suffixes, &endpoints, &gen, 10);
    println!("verify: {:.1}s", t2.elapsed().as_secs_f64());
    let roles = zoo.roles();
    let report = bbiv_core::verify::build_report(&outcomes, &[REFERENCE_ID.to_string()], &roles).unwrap();
    println!("tpr {:.3} invalid {:.3} fpr {:.5}", report.tpr, report.invalid_rate, report.fpr);
    for c in &report.per_endpoint {
        println!("  {}: hits {} misses {} invalid {}", c.endpoint_id, c.hits, c.misses, c.invalids);
    }
    // sample a few raw reference outputs
    for o in outcomes.iter().filter(|o| o.endpoint_id == REFERENCE_ID && o.verdict != Verdict::Hit).take(3) {
        println!("  ref non-hit [{:?}]: {:?} (target {})", o.verdict, o.raw_text, o.target);
    }
}
