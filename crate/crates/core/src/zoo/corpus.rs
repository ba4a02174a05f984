use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

/// One synthetic chat exchange used for training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChatDoc {
    pub system: String,
    pub user: String,
    pub answer: String,
}

/// Two disjoint topic banks so the zoo can hold models trained on
/// genuinely different text distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusStyle {
    Alpha,
    Beta,
}

impl CorpusStyle {
    pub fn id(&self) -> &'static str {
        match self {
            CorpusStyle::Alpha => "alpha",
            CorpusStyle::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Option<CorpusStyle> {
        match s {
            "alpha" => Some(CorpusStyle::Alpha),
            "beta" => Some(CorpusStyle::Beta),
            _ => None,
        }
    }
}

pub const DIGIT_PROMPT_TEMPLATE: &str =
    "Write a random string composed of {N} digits. Your reply should only contain the random string.";
pub const DIGIT_ANSWER_TEMPLATE: &str = "Sure, here is a random string of {N} digits: {X}";

pub fn digit_prompt(n: usize) -> String {
    DIGIT_PROMPT_TEMPLATE.replace("{N}", &n.to_string())
}

pub fn digit_answer(n: usize, digits: &str) -> String {
    DIGIT_ANSWER_TEMPLATE.replace("{N}", &n.to_string()).replace("{X}", digits)
}

pub fn random_digits(n: usize, rng: &mut impl Rng) -> String {
    (0..n).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
}

struct Bank {
    topics: &'static [&'static str],
    adjectives: &'static [&'static str],
    places: &'static [&'static str],
    actors: &'static [&'static str],
}

const ALPHA: Bank = Bank {
    topics: &[
        "rivers", "mountains", "forests", "weather", "stars", "planets", "oceans", "crystals",
        "magnets", "volcanoes", "glaciers", "meadows", "comets", "tides", "coral", "storms",
        "sunlight", "valleys", "rainbows", "deserts",
    ],
    adjectives: &[
        "quiet", "bright", "ancient", "curious", "gentle", "vast", "hidden", "strange",
        "lively", "calm",
    ],
    places: &["valley", "harbor", "forest", "garden", "observatory", "library", "coast", "village"],
    actors: &["fox", "owl", "traveler", "student", "gardener", "sailor"],
};

const BETA: Bank = Bank {
    topics: &[
        "bridges", "markets", "workshops", "railways", "bakeries", "towers", "canals",
        "streetcars", "factories", "museums", "theaters", "plazas", "fountains", "clocktowers",
        "warehouses", "arcades", "tramlines", "printshops", "docks", "granaries",
    ],
    adjectives: &[
        "busy", "old", "noisy", "famous", "crowded", "sturdy", "modern", "painted", "narrow",
        "tall",
    ],
    places: &["square", "station", "alley", "market", "workshop", "bridge", "depot", "quay"],
    actors: &["mason", "clerk", "weaver", "printer", "carter", "smith"],
};

fn pick<'a>(rng: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn pick_any(rng: &mut impl Rng, bank: &Bank) -> &'static str {
    let total =
        bank.topics.len() + bank.adjectives.len() + bank.places.len() + bank.actors.len();
    let mut i = rng.gen_range(0..total);
    for xs in [bank.topics, bank.adjectives, bank.places, bank.actors] {
        if i < xs.len() {
            return xs[i];
        }
        i -= xs.len();
    }
    unreachable!()
}

/// Synthesizes a chat corpus: roughly half digit-task exchanges and half
/// templated instruction fillers from the style's topic bank.
///
/// Digit-task prompts carry a run of random context words after the base
/// instruction, and each document pairs that context with its own random
/// answer. Fitting these pairs forces the model to make its digit choice
/// input-dependent, which is the behaviour the suffix search exploits (and
/// what the varied trailing tokens of a real deployment provide at scale).
pub fn synth_corpus(style: CorpusStyle, n_docs: usize, seed: u64) -> Vec<ChatDoc> {
    let bank = match style {
        CorpusStyle::Alpha => &ALPHA,
        CorpusStyle::Beta => &BETA,
    };
    let mut rng = substream(seed, &format!("corpus-{}", style.id()));
    let system = super::template::DEFAULT_SYSTEM_PROMPT.to_string();
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let doc = if i % 2 == 0 {
            let n = [3, 4, 5][rng.gen_range(0..3)];
            let digits = random_digits(n, &mut rng);
            let k = rng.gen_range(3..=16);
            let context: Vec<&str> = (0..k).map(|_| pick_any(&mut rng, bank)).collect();
            ChatDoc {
                system: system.clone(),
                user: format!("{} {}", digit_prompt(n), context.join(" ")),
                answer: digit_answer(n, &digits),
            }
        } else {
            let topic = pick(&mut rng, bank.topics);
            let topic2 = pick(&mut rng, bank.topics);
            let adj = pick(&mut rng, bank.adjectives);
            let place = pick(&mut rng, bank.places);
            let actor = pick(&mut rng, bank.actors);
            match (i / 2) % 4 {
                0 => ChatDoc {
                    system: system.clone(),
                    user: format!("Tell me about {topic}."),
                    answer: match style {
                        CorpusStyle::Alpha => format!(
                            "{topic} are a {adj} subject and people study them near the {place}."
                        ),
                        CorpusStyle::Beta => format!(
                            "In the city the {topic} stay {adj} and the {actor} knows them well."
                        ),
                    },
                },
                1 => ChatDoc {
                    system: system.clone(),
                    user: format!("Write a short fictional story about what follows. {topic}"),
                    answer: format!(
                        "Once a {adj} {actor} wandered past the {place} and found the {topic} waiting there."
                    ),
                },
                2 => ChatDoc {
                    system: system.clone(),
                    user: format!("What can you say about {topic} and {topic2}?"),
                    answer: format!(
                        "Most {topic} appear {adj} while {topic2} stay near the {place}."
                    ),
                },
                _ => ChatDoc {
                    system: system.clone(),
                    user: format!("Write a 200 word wikipedia style introduction on {topic}"),
                    answer: format!(
                        "{topic} are a {adj} subject known around the {place} and linked with {topic2}."
                    ),
                },
            }
        };
        docs.push(doc);
    }
    docs
}

/// Topic words of one style's bank (used by the prompt suites).
pub fn topic_bank(style: CorpusStyle) -> &'static [&'static str] {
    match style {
        CorpusStyle::Alpha => ALPHA.topics,
        CorpusStyle::Beta => BETA.topics,
    }
}

/// Plain text view of the corpus for tokenizer training.
pub fn corpus_text(docs: &[ChatDoc]) -> Vec<String> {
    docs.iter()
        .map(|d| format!(" {} {} {}", d.system, d.user, d.answer))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let a = synth_corpus(CorpusStyle::Alpha, 50, 7);
        let b = synth_corpus(CorpusStyle::Alpha, 50, 7);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn half_the_docs_are_digit_tasks() {
        let docs = synth_corpus(CorpusStyle::Beta, 100, 3);
        let digit = docs.iter().filter(|d| d.user.contains("random string composed of")).count();
        assert_eq!(digit, 50);
    }

    #[test]
    fn digit_answers_match_requested_length() {
        let docs = synth_corpus(CorpusStyle::Alpha, 60, 11);
        for d in docs.iter().filter(|d| d.user.contains("random string composed of")) {
            let n: usize = d
                .user
                .split("composed of ")
                .nth(1)
                .unwrap()
                .split(' ')
                .next()
                .unwrap()
                .parse()
                .unwrap();
            let digits = d.answer.rsplit(": ").next().unwrap();
            assert_eq!(digits.len(), n);
            assert!(digits.chars().all(|c| c.is_ascii_digit()));
        }
    }

    #[test]
    fn styles_use_disjoint_topics() {
        for t in ALPHA.topics {
            assert!(!BETA.topics.contains(t));
        }
    }
}
