use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::gcg::SuffixRecord;
use crate::verify::{build_report, confusion_matrix, TrialOutcome, VerificationReport};
use crate::zoo::ZooRole;

use super::ExpError;

/// One experiment's output directory. Never reused: creating over an
/// existing non-empty directory is an error, so no command can mutate a
/// previous run.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, run_id: &str) -> Result<RunDir, ExpError> {
        let root = out.join(run_id);
        if root.exists() && std::fs::read_dir(&root)?.next().is_some() {
            return Err(ExpError::RunDirExists(root));
        }
        std::fs::create_dir_all(root.join("suffixes"))?;
        Ok(RunDir { root })
    }

    pub fn open(root: &Path) -> Result<RunDir, ExpError> {
        if !root.is_dir() {
            return Err(ExpError::MissingArtifact(format!("run dir {root:?}")));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes the config snapshot every run must carry.
    pub fn snapshot_config<T: Serialize>(&self, config: &T) -> Result<(), ExpError> {
        let json =
            serde_json::to_string_pretty(config).map_err(|e| ExpError::Serde(e.to_string()))?;
        std::fs::write(self.path("config.json"), json)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), ExpError> {
        let json =
            serde_json::to_string_pretty(value).map_err(|e| ExpError::Serde(e.to_string()))?;
        std::fs::write(self.path(name), json)?;
        Ok(())
    }

    pub fn save_suffixes(&self, suffixes: &[(String, SuffixRecord)]) -> Result<(), ExpError> {
        for (id, record) in suffixes {
            record.save(&self.root.join("suffixes").join(format!("{id}.json")))?;
        }
        Ok(())
    }

    pub fn load_suffixes(&self) -> Result<Vec<(String, SuffixRecord)>, ExpError> {
        let dir = self.root.join("suffixes");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        let mut out = Vec::new();
        for p in names {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| ExpError::MissingArtifact(format!("{p:?}")))?
                .to_string();
            out.push((id, SuffixRecord::load(&p)?));
        }
        Ok(out)
    }
}

/// Everything a report is derived from; all of it comes off disk so
/// regeneration is byte-identical.
pub struct ReportInputs<'a> {
    pub outcomes: &'a [TrialOutcome],
    pub suffixes: &'a [(String, SuffixRecord)],
    pub roles: &'a HashMap<String, ZooRole>,
}

/// Per-N verification reports, keyed by answer length.
pub fn reports_by_n(
    inputs: &ReportInputs<'_>,
) -> Result<Vec<(usize, VerificationReport)>, ExpError> {
    let mut ns: Vec<usize> = inputs.suffixes.iter().map(|(_, r)| r.task.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut out = Vec::new();
    for n in ns {
        let ids: Vec<&str> = inputs
            .suffixes
            .iter()
            .filter(|(_, r)| r.task.n == n)
            .map(|(id, _)| id.as_str())
            .collect();
        let outcomes: Vec<TrialOutcome> = inputs
            .outcomes
            .iter()
            .filter(|o| ids.contains(&o.suffix_id.as_str()))
            .cloned()
            .collect();
        if outcomes.is_empty() {
            continue;
        }
        let source = inputs
            .suffixes
            .iter()
            .find(|(_, r)| r.task.n == n)
            .map(|(_, r)| r.model_ids.clone())
            .unwrap_or_default();
        out.push((n, build_report(&outcomes, &source, inputs.roles)?));
    }
    Ok(out)
}

/// Summary rows in the style of the headline results table: rates plus the
/// average loss and average best step of the suffix set.
pub fn write_summary_csv(inputs: &ReportInputs<'_>) -> Result<String, ExpError> {
    let mut csv =
        String::from("n,suffixes,tpr,invalid_rate,fpr,fpr_observed,fpr_floor,avg_loss,avg_best_step\n");
    for (n, report) in reports_by_n(inputs)? {
        let set: Vec<&SuffixRecord> = inputs
            .suffixes
            .iter()
            .filter(|(_, r)| r.task.n == n)
            .map(|(_, r)| r)
            .collect();
        let avg_loss = set.iter().map(|r| r.best_loss).sum::<f64>() / set.len() as f64;
        let avg_best_step =
            set.iter().map(|r| r.best_step as f64).sum::<f64>() / set.len() as f64;
        csv.push_str(&format!(
            "{n},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.1}\n",
            set.len(),
            report.tpr,
            report.invalid_rate,
            report.fpr,
            report.fpr_observed,
            report.fpr_floor,
            avg_loss,
            avg_best_step
        ));
    }
    Ok(csv)
}

/// Markdown report derived purely from persisted artifacts.
pub fn render_report(inputs: &ReportInputs<'_>) -> Result<String, ExpError> {
    let mut md = String::from("# Verification report\n\n");
    for (n, report) in reports_by_n(inputs)? {
        md.push_str(&format!("## Answer length {n}\n\n"));
        md.push_str(&format!(
            "- suffixes optimized on: {}\n- TPR: {:.4}\n- invalid rate: {:.4}\n- FPR: {:.6} (observed {:.6}, floor {:.6})\n\n",
            report.suffix_source.join("+"),
            report.tpr,
            report.invalid_rate,
            report.fpr,
            report.fpr_observed,
            report.fpr_floor
        ));
        md.push_str("| endpoint | role | hits | misses | invalid | errors | hit rate |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for c in &report.per_endpoint {
            md.push_str(&format!(
                "| {} | {:?} | {} | {} | {} | {} | {:.4} |\n",
                c.endpoint_id, c.role, c.hits, c.misses, c.invalids, c.errors, c.hit_rate
            ));
        }
        md.push('\n');
    }
    let sources: HashMap<String, String> = inputs
        .suffixes
        .iter()
        .map(|(id, r)| (id.clone(), r.model_ids.join("+")))
        .collect();
    if !inputs.outcomes.is_empty() {
        let cm = confusion_matrix(inputs.outcomes, &sources)?;
        md.push_str("## Confusion matrix (hit rates)\n\n```\n");
        md.push_str(&cm.to_csv());
        md.push_str("```\n");
    }
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcg::{GcgConfig, TrapTask};
    use crate::verify::Verdict;

    fn record(n: usize, target: &str) -> SuffixRecord {
        SuffixRecord {
            task: TrapTask::new(n, target).unwrap(),
            config: GcgConfig::desk(0),
            suffix_ids: vec![],
            suffix_text: "words".into(),
            loss_trace: vec![1.0, 0.5],
            best_step: 1,
            best_loss: 0.5,
            model_ids: vec!["ref".into()],
            seed: 0,
            wall_ms: 12,
        }
    }

    fn outcome(suffix: &str, endpoint: &str, n: usize, verdict: Verdict) -> TrialOutcome {
        TrialOutcome {
            suffix_id: suffix.into(),
            endpoint_id: endpoint.into(),
            trial: 0,
            n,
            target: "314".into(),
            raw_text: String::new(),
            parsed: None,
            verdict,
        }
    }

    #[test]
    fn run_dir_refuses_to_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path(), "run-1").unwrap();
        rd.snapshot_config(&serde_json::json!({"seed": 1})).unwrap();
        assert!(matches!(
            RunDir::create(dir.path(), "run-1"),
            Err(ExpError::RunDirExists(_))
        ));
    }

    #[test]
    fn suffix_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path(), "run-2").unwrap();
        let set = vec![
            ("s000".to_string(), record(3, "314")),
            ("s001".to_string(), record(3, "272")),
        ];
        rd.save_suffixes(&set).unwrap();
        let loaded = rd.load_suffixes().unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "s000");
        assert_eq!(loaded[1].1.task.target, "272");
    }

    #[test]
    fn report_regeneration_is_byte_identical() {
        let suffixes = vec![("s000".to_string(), record(3, "314"))];
        let outcomes = vec![
            outcome("s000", "ref", 3, Verdict::Hit),
            outcome("s000", "conf", 3, Verdict::Miss),
        ];
        let mut roles = HashMap::new();
        roles.insert("ref".to_string(), ZooRole::Reference);
        roles.insert("conf".to_string(), ZooRole::Confuser);
        let inputs = ReportInputs { outcomes: &outcomes, suffixes: &suffixes, roles: &roles };
        let a = render_report(&inputs).unwrap();
        let b = render_report(&inputs).unwrap();
        assert_eq!(a, b);
        assert_eq!(write_summary_csv(&inputs).unwrap(), write_summary_csv(&inputs).unwrap());
        assert!(a.contains("Answer length 3"));
        let csv = write_summary_csv(&inputs).unwrap();
        assert!(csv.contains("avg_loss"));
        assert!(csv.lines().count() >= 2);
    }
}
