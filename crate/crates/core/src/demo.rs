//! Built-in templated tasks and scripted mock servers for hermetic runs.
//!
//! Reviews are generated from label-specific lexicons filled into short
//! templates, so label signal is lexical and a small fixed-context model
//! can learn it. The competent mock plays the server LLM over the same
//! templates: the judge scores cluster members by lexical alignment with
//! their stated label, and the augmenter emits fresh on-template samples.
//! The zero-shot responder is deliberately template-mismatched, which is
//! what makes the general knowledge-transfer baseline weaker.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;

use crate::corpus::{Dataset, Label, Provenance, Record, TaskSpec};
use crate::gateway::{LlmRequest, MockScript, MockScriptBuilder};
use crate::stablehash;

/// A templated task universe: the task spec plus the lexicons that carry
/// its label signal.
#[derive(Debug, Clone)]
pub struct Domain {
    task: Arc<TaskSpec>,
    lexicons: BTreeMap<Label, Vec<&'static str>>,
    nouns: Vec<&'static str>,
    templates: Vec<&'static str>,
    /// Substring that identifies this domain's prompts at the mock server.
    marker: String,
}

const SENTIMENT_LEXICONS: [(u32, &[&str]); 5] = [
    (
        1,
        &[
            "terrible", "awful", "horrible", "dreadful", "disgusting", "useless", "broken",
            "nasty", "miserable", "appalling", "filthy", "rotten", "hopeless", "atrocious",
            "unbearable", "revolting", "shameful", "wretched", "abysmal", "vile", "grim",
            "horrid", "lousy", "painful", "insulting", "chaotic", "unacceptable", "ruined",
            "crumbling", "disastrous", "repulsive", "dire", "squalid", "deplorable", "dismal",
            "ghastly",
        ],
    ),
    (
        2,
        &[
            "bad", "poor", "disappointing", "weak", "mediocre", "flawed", "annoying", "sloppy",
            "overpriced", "dull", "tired", "stale", "clumsy", "lacking", "uninspired",
            "frustrating", "subpar", "shabby", "crowded", "noisy", "slow", "confusing",
            "careless", "unreliable", "bland", "worn", "cramped", "tedious", "grudging",
            "forgettable", "underwhelming", "scruffy", "cheap", "inattentive", "messy",
            "lackluster",
        ],
    ),
    (
        3,
        &[
            "okay", "average", "fine", "ordinary", "acceptable", "plain", "standard", "typical",
            "tolerable", "middling", "fair", "moderate", "routine", "usual", "reasonable",
            "unremarkable", "adequate", "passable", "neutral", "expected", "common", "everyday",
            "balanced", "serviceable", "mixed", "mild", "modest", "workable", "normal",
            "conventional", "sufficient", "decent", "so-so", "uneventful", "predictable",
            "regular",
        ],
    ),
    (
        4,
        &[
            "good", "nice", "solid", "pleasant", "helpful", "friendly", "tasty", "comfortable",
            "handy", "reliable", "clean", "welcoming", "quick", "warm", "smooth", "attentive",
            "cheerful", "fresh", "tidy", "polite", "capable", "bright", "inviting", "generous",
            "careful", "prompt", "honest", "satisfying", "enjoyable", "thoughtful", "cozy",
            "efficient", "charming", "courteous", "dependable", "appealing",
        ],
    ),
    (
        5,
        &[
            "great", "amazing", "excellent", "wonderful", "fantastic", "superb", "perfect",
            "delightful", "outstanding", "brilliant", "stunning", "flawless", "exceptional",
            "magnificent", "splendid", "marvelous", "incredible", "spectacular", "glorious",
            "impeccable", "sublime", "dazzling", "exquisite", "phenomenal", "masterful",
            "radiant", "exemplary", "remarkable", "extraordinary", "stellar", "supreme",
            "unbeatable", "peerless", "immaculate", "luminous", "majestic",
        ],
    ),
];

const SENTIMENT_NOUNS: [&str; 14] = [
    "store", "food", "staff", "service", "place", "shop", "clinic", "market", "cafe", "product",
    "team", "counter", "menu", "room",
];

const SENTIMENT_TEMPLATES: [&str; 6] = [
    "the {n} was {a} and {b}",
    "visited the {n} and found it {a} and {b}",
    "honestly the {n} felt {a} but mostly {b}",
    "{n} seemed {a} , quite {b} overall",
    "this {n} is {a} and the people {b}",
    "such a {a} {n} , really {b}",
];

const TOPIC_LEXICONS: [(u32, &[&str]); 4] = [
    (
        1,
        &[
            "government", "president", "election", "treaty", "border", "minister", "embassy",
            "parliament", "summit", "diplomat", "sanctions", "ceasefire", "refugees", "congress",
            "senate", "constitution", "ambassador", "protest", "coalition", "legislation",
            "referendum", "geopolitics", "delegation", "envoy", "statecraft", "sovereignty",
            "armistice", "republic", "ballot", "customs",
        ],
    ),
    (
        2,
        &[
            "team", "game", "season", "coach", "player", "stadium", "tournament", "score",
            "league", "match", "championship", "goalkeeper", "playoffs", "transfer", "injury",
            "marathon", "olympics", "referee", "striker", "defense", "homerun", "quarterback",
            "medal", "sprint", "athlete", "roster", "standings", "derby", "fixture", "penalty",
        ],
    ),
    (
        3,
        &[
            "market", "shares", "profit", "revenue", "merger", "startup", "investor", "bank",
            "trade", "economy", "inflation", "earnings", "dividend", "acquisition", "currency",
            "stocks", "bonds", "tariffs", "layoffs", "ipo", "forecast", "quarterly", "retail",
            "commodities", "lending", "valuation", "portfolio", "shareholders", "bankruptcy",
            "exports",
        ],
    ),
    (
        4,
        &[
            "research", "laboratory", "spacecraft", "experiment", "physics", "software",
            "telescope", "genome", "dataset", "robot", "quantum", "algorithm", "satellite",
            "vaccine", "neuroscience", "processor", "encryption", "asteroid", "particle",
            "microscope", "prototype", "sensors", "silicon", "biotech", "orbit", "reactor",
            "chemistry", "molecule", "astronomy", "firmware",
        ],
    ),
];

const TOPIC_NOUNS: [&str; 10] = [
    "headline", "report", "story", "briefing", "coverage", "bulletin", "analysis", "wire",
    "dispatch", "feature",
];

const TOPIC_TEMPLATES: [&str; 5] = [
    "{a} and {b} dominate the {n} today",
    "new {n} covers {a} alongside {b}",
    "breaking {n} , {a} meets {b}",
    "this {n} examines {a} after {b}",
    "latest {n} follows {a} and {b} closely",
];

/// Off-template filler for the zero-shot responder: no word appears in any
/// domain lexicon, so its samples carry no usable label signal.
const GENERIC_FILLER: [&str; 24] = [
    "entity", "aspect", "instance", "situation", "element", "feature", "matter", "subject",
    "context", "occasion", "component", "portion", "segment", "duration", "outcome", "factor",
    "detail", "notion", "degree", "manner", "basis", "scope", "margin", "phase",
];

/// 5-label star-rating reviews over a shopping-flavored vocabulary.
pub fn sentiment_domain() -> Domain {
    let mut task = TaskSpec::rating_task("shopping", vec![1, 2, 3, 4, 5]);
    task.domain_description = "shopping".into();
    task.rough_map = Some(BTreeMap::from([(1, 0), (2, 0), (3, 1), (4, 2), (5, 2)]));
    Domain {
        task: Arc::new(task),
        lexicons: SENTIMENT_LEXICONS
            .iter()
            .map(|(y, words)| (*y, words.to_vec()))
            .collect(),
        nouns: SENTIMENT_NOUNS.to_vec(),
        templates: SENTIMENT_TEMPLATES.to_vec(),
        marker: "5 stars represent perfection".into(),
    }
}

/// Same universe under a different task id (for duplicated-task runs).
pub fn sentiment_domain_named(task_id: &str) -> Domain {
    let mut domain = sentiment_domain();
    let mut task = (*domain.task).clone();
    task.task_id = task_id.to_string();
    domain.task = Arc::new(task);
    domain
}

/// 4-label news-topic classification with word labels.
pub fn topic_domain() -> Domain {
    let mut task = TaskSpec {
        task_id: "agnews".into(),
        label_set: vec![1, 2, 3, 4],
        label_names: BTreeMap::from([
            (1, "world".into()),
            (2, "sports".into()),
            (3, "business".into()),
            (4, "science".into()),
        ]),
        domain_description: "news".into(),
        prompt_p1: "Topic: ".into(),
        prompt_p2: ", Article:\n ".into(),
        prefix: None,
        rough_map: None,
    };
    task.fill_default_names();
    Domain {
        task: Arc::new(task),
        lexicons: TOPIC_LEXICONS
            .iter()
            .map(|(y, words)| (*y, words.to_vec()))
            .collect(),
        nouns: TOPIC_NOUNS.to_vec(),
        templates: TOPIC_TEMPLATES.to_vec(),
        marker: "1 = world".into(),
    }
}

impl Domain {
    pub fn task(&self) -> &Arc<TaskSpec> {
        &self.task
    }

    pub fn lexicon(&self, label: Label) -> &[&'static str] {
        &self.lexicons[&label]
    }

    /// One on-template review for `label`, drawn with the given rng.
    pub fn make_text(&self, label: Label, rng: &mut rand::rngs::StdRng) -> String {
        let template = *self.templates.choose(rng).expect("templates non-empty");
        let noun = *self.nouns.choose(rng).expect("nouns non-empty");
        let lexicon = &self.lexicons[&label];
        let a = *lexicon.choose(rng).expect("lexicon non-empty");
        let b = *lexicon.choose(rng).expect("lexicon non-empty");
        template
            .replace("{n}", noun)
            .replace("{a}", a)
            .replace("{b}", b)
    }

    /// A balanced private dataset: `per_label` fresh records per label.
    pub fn make_dataset(&self, per_label: usize, seed: u64) -> Dataset {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(per_label * self.task.label_set.len());
        for &label in &self.task.label_set {
            for _ in 0..per_label {
                records.push(Record {
                    text: self.make_text(label, &mut rng),
                    label,
                    provenance: Provenance::Private,
                });
            }
        }
        Dataset::from_records(records, Arc::clone(&self.task))
            .expect("templated records are valid")
    }

    /// Disjoint train/test pair from independent streams of the generator.
    pub fn make_split(&self, train_per_label: usize, test_per_label: usize, seed: u64) -> (Dataset, Dataset) {
        let train = self.make_dataset(train_per_label, stablehash::combine(seed, 1));
        let test_all = self.make_dataset(test_per_label, stablehash::combine(seed, 2));
        let train_texts: std::collections::BTreeSet<String> =
            train.iter().map(|r| r.text.clone()).collect();
        // Drop the rare collisions so test stays disjoint from train.
        let records: Vec<Record> = test_all
            .iter()
            .filter(|r| !train_texts.contains(&r.text))
            .cloned()
            .collect();
        let test = Dataset::from_records(records, Arc::clone(&self.task)).expect("valid");
        (train, test)
    }

    fn score_alignment(&self, text: &str, label: Label) -> i64 {
        let mut score = 0i64;
        for word in text.split_whitespace() {
            let lower = word.to_lowercase();
            if self.lexicons[&label].iter().any(|w| *w == lower) {
                score += 2;
            } else {
                for (&other, words) in &self.lexicons {
                    if other != label && words.iter().any(|w| *w == lower) {
                        score -= 1;
                        break;
                    }
                }
            }
        }
        score
    }

    fn resolve_label(&self, rating_field: &str) -> Option<Label> {
        let digits: String = rating_field
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        if let Ok(label) = digits.parse::<Label>() {
            if self.task.contains_label(label) {
                return Some(label);
            }
        }
        let lowered = rating_field.to_lowercase();
        self.task
            .label_set
            .iter()
            .copied()
            .find(|&y| lowered.contains(&self.task.label_name(y).to_lowercase()))
    }

    fn judge_response(&self, request: &LlmRequest) -> String {
        let blocks = parse_prompt_blocks(&request.user_prompt);
        let n = blocks.len();
        if n == 0 {
            return "The eligible samples:\n\n0".to_string();
        }
        let mut ranked: Vec<(usize, i64)> = blocks
            .iter()
            .map(|(idx, rating_field, text)| {
                let score = self
                    .resolve_label(rating_field)
                    .map(|y| self.score_alignment(text, y))
                    .unwrap_or(i64::MIN / 2);
                (*idx, score)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = n.div_ceil(2);
        let chosen: Vec<String> = ranked[..keep].iter().map(|(i, _)| i.to_string()).collect();
        format!("The eligible samples:\n\n{}", chosen.join(" "))
    }

    fn fewshot_response(&self, call: u64) -> String {
        let mut out = String::new();
        for &label in &self.task.label_set {
            let seed = stablehash::combine(call, u64::from(label) ^ 0xa06);
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let text = self.make_text(label, &mut rng);
            out.push_str(&format!(
                "******\n- <Rating>: {}.\n- <Review>: {}.\n\n",
                self.task.label_name(label),
                text
            ));
        }
        out
    }

    fn zeroshot_response(&self, call: u64) -> String {
        let mut out = String::new();
        for &label in &self.task.label_set {
            let seed = stablehash::combine(call, u64::from(label) ^ 0x2e05);
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let a = *GENERIC_FILLER.choose(&mut rng).expect("filler");
            let b = *GENERIC_FILLER.choose(&mut rng).expect("filler");
            let c = *GENERIC_FILLER.choose(&mut rng).expect("filler");
            out.push_str(&format!(
                "******\n- <Rating>: {}.\n- <Review>: the {a} had some {b} regarding the {c} call {call}.\n\n",
                self.task.label_name(label),
            ));
        }
        out
    }

    /// Installs this domain's three responders (judge, few-shot augmenter,
    /// template-mismatched zero-shot augmenter) onto a script builder.
    pub fn install_rules(&self, builder: MockScriptBuilder) -> MockScriptBuilder {
        let marker = self.marker.clone();
        let judge_domain = self.clone();
        let fewshot_domain = self.clone();
        let zeroshot_domain = self.clone();
        let marker_judge = marker.clone();
        let marker_few = marker.clone();
        builder
            .on(
                format!("{}-judge", self.task.task_id),
                move |req| {
                    req.user_prompt.contains("The eligible samples")
                        && req.user_prompt.contains(&marker_judge)
                },
                move |req, _| judge_domain.judge_response(req),
            )
            .on(
                format!("{}-augment", self.task.task_id),
                move |req| {
                    req.user_prompt.contains("The examples are delimited")
                        && req.user_prompt.contains(&marker_few)
                },
                move |_, call| fewshot_domain.fewshot_response(call),
            )
            .on(
                format!("{}-zeroshot", self.task.task_id),
                move |req| {
                    req.user_prompt.contains("Please generate samples for each")
                        && req.user_prompt.contains(&marker)
                },
                move |_, call| zeroshot_domain.zeroshot_response(call),
            )
    }

    /// A complete mock server for this domain alone.
    pub fn competent_mock(&self) -> MockScript {
        self.install_rules(MockScript::builder())
            .catch_all(|_, _| "unscripted request".to_string())
    }
}

/// One mock serving several domains at once (one-to-many runs).
pub fn combined_mock(domains: &[&Domain]) -> MockScript {
    let mut builder = MockScript::builder();
    for domain in domains {
        builder = domain.install_rules(builder);
    }
    builder.catch_all(|_, _| "unscripted request".to_string())
}

/// Parses "{i}.\n- <Rating>: {field}.\n- <Review>: {text}." blocks out of a
/// filter prompt, keeping the raw rating field for the caller to resolve.
fn parse_prompt_blocks(prompt: &str) -> Vec<(usize, String, String)> {
    let mut blocks = Vec::new();
    for chunk in prompt.split("******\n").skip(1) {
        let mut lines = chunk.lines();
        let Some(index_line) = lines.next() else {
            continue;
        };
        let Ok(index) = index_line.trim_end_matches('.').trim().parse::<usize>() else {
            continue;
        };
        let mut rating_field = String::new();
        let mut text = String::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("- <Rating>: ") {
                rating_field = rest.trim_end_matches('.').to_string();
            } else if let Some(rest) = line.strip_prefix("- <Review>: ") {
                text = rest.trim_end_matches('.').to_string();
            }
        }
        blocks.push((index, rating_field, text));
    }
    blocks
}

/// Task-agnostic responders for arbitrary task files: the judge keeps the
/// first half of every cluster and the augmenter emits deterministic
/// label-cycling samples. Prompts are routed to their task through the
/// scale-explanation sentence, which both prompt kinds embed.
pub fn generic_rules(task: &Arc<TaskSpec>, builder: MockScriptBuilder) -> MockScriptBuilder {
    let marker = task.scale_explanation();
    let judge_marker = marker.clone();
    let augment_task = Arc::clone(task);
    builder
        .on(
            format!("{}-generic-judge", task.task_id),
            move |req| {
                req.user_prompt.contains("The eligible samples")
                    && req.user_prompt.contains(&judge_marker)
            },
            move |req, _| {
                let n = req.user_prompt.matches("******\n").count().max(1);
                let keep = n.div_ceil(2);
                let indices: Vec<String> = (0..keep).map(|i| i.to_string()).collect();
                format!("The eligible samples:\n\n{}", indices.join(" "))
            },
        )
        .on(
            format!("{}-generic-augment", task.task_id),
            move |req| req.user_prompt.contains(&marker),
            move |_, call| {
                let mut out = String::new();
                for &label in &augment_task.label_set {
                    out.push_str(&format!(
                        "******\n- <Rating>: {}.\n- <Review>: generated {} sample number {} for call {}.\n\n",
                        augment_task.label_name(label),
                        augment_task.label_name(label),
                        stablehash::combine(call, u64::from(label)) % 100_000,
                        call,
                    ));
                }
                out
            },
        )
}

/// A complete mock server for one arbitrary task.
pub fn generic_mock(task: &Arc<TaskSpec>) -> MockScript {
    generic_rules(task, MockScript::builder()).catch_all(|_, _| "unscripted request".to_string())
}

/// Matches a task file against the built-in domains (by task id and label
/// set), so hermetic CLI runs get the competent scripted server when the
/// data came from `gen-task`.
pub fn builtin_domain_for(task: &TaskSpec) -> Option<Domain> {
    let sentiment = sentiment_domain();
    if task.task_id == sentiment.task().task_id && task.label_set == sentiment.task().label_set {
        return Some(sentiment);
    }
    let topic = topic_domain();
    if task.task_id == topic.task().task_id && task.label_set == topic.task().label_set {
        return Some(topic);
    }
    None
}

/// One mock serving every given task: competent responders for built-in
/// domains, generic ones otherwise.
pub fn mock_for_tasks(tasks: &[Arc<TaskSpec>]) -> MockScript {
    let mut builder = MockScript::builder();
    for task in tasks {
        builder = match builtin_domain_for(task) {
            Some(domain) => domain.install_rules(builder),
            None => generic_rules(task, builder),
        };
    }
    builder.catch_all(|_, _| "unscripted request".to_string())
}
