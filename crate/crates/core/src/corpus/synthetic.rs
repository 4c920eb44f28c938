//! Seeded multi-topic corpus generator.
//!
//! Every topic owns disjoint noun/verb/adjective lists; sentence templates
//! and function words are shared. That gives a corpus where topic identity
//! is carried entirely by content words, which makes alignment effects
//! measurable by counting vocabulary.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Prompt, PromptRole, PromptSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
}

impl Topic {
    fn new(name: &str, nouns: &str, verbs: &str, adjectives: &str) -> Self {
        let words = |s: &str| s.split_whitespace().map(str::to_owned).collect();
        Self {
            name: name.to_owned(),
            nouns: words(nouns),
            verbs: words(verbs),
            adjectives: words(adjectives),
        }
    }

    pub fn vocabulary(&self) -> HashSet<String> {
        self.nouns
            .iter()
            .chain(&self.verbs)
            .chain(&self.adjectives)
            .cloned()
            .collect()
    }
}

const TEMPLATES: &[&str] = &[
    "the {a} {n} {v} the {n} .",
    "a {n} {v} a {a} {n} .",
    "today the {n} {v} the {a} {n} again .",
    "then the {n} and the {n} {v} a {n} .",
    "every {a} {n} {v} with the {n} .",
    "we saw how the {n} {v} the {n} .",
    "after that the {a} {n} {v} some {n} .",
];

const NEUTRAL_OPENERS: &[&str] = &[
    "the",
    "today the",
    "then the",
    "a",
    "every",
    "we saw how the",
    "after that the",
    "then the {n} and the",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub topics: Vec<Topic>,
    /// Probability that a sentence in a prompt is drawn from another topic.
    pub mix_rate: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl SyntheticCorpus {
    /// Three topics: medical (index 0), cooking, sports.
    pub fn default_topics() -> Self {
        Self {
            topics: vec![
                Topic::new(
                    "medical",
                    "doctor nurse patient fever heart surgery clinic medicine infection \
                     diagnosis symptom hospital vaccine wound therapy",
                    "treats examines prescribes heals diagnoses monitors injects bandages",
                    "chronic painful sterile acute clinical viral swollen medical",
                ),
                Topic::new(
                    "cooking",
                    "chef kitchen recipe oven garlic sauce butter flour onion soup dough \
                     pan spice bread salad",
                    "bakes chops stirs roasts seasons simmers fries tastes",
                    "crispy savory spicy fresh golden sweet tender salty",
                ),
                Topic::new(
                    "sports",
                    "coach player team match goal stadium ball referee league season \
                     trophy striker fans tournament keeper",
                    "kicks scores defends passes trains wins tackles celebrates",
                    "fast winning athletic defensive final competitive rival strong",
                ),
            ],
            mix_rate: 0.1,
            min_sentences: 1,
            max_sentences: 3,
        }
    }

    pub fn topic_index(&self, name: &str) -> Option<usize> {
        self.topics.iter().position(|t| t.name == name)
    }

    fn fill(&self, template: &str, topic: &Topic, rng: &mut ChaCha8Rng) -> String {
        template
            .split_whitespace()
            .map(|w| match w {
                "{n}" => topic.nouns.choose(rng).unwrap().clone(),
                "{v}" => topic.verbs.choose(rng).unwrap().clone(),
                "{a}" => topic.adjectives.choose(rng).unwrap().clone(),
                other => other.to_owned(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn sentence(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let template = TEMPLATES.choose(rng).unwrap();
        self.fill(template, &self.topics[topic], rng)
    }

    pub fn prompt_text(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let n = rng.random_range(self.min_sentences..=self.max_sentences);
        (0..n)
            .map(|_| {
                let t = if self.topics.len() > 1 && rng.random_bool(self.mix_rate) {
                    let other = rng.random_range(0..self.topics.len() - 1);
                    if other >= topic {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    topic
                };
                self.sentence(t, rng)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `n` prompts cycling through all topics.
    pub fn prompts(&self, set_id: &str, role: PromptRole, n: usize, seed: u64) -> PromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..n)
            .map(|i| {
                let topic = i % self.topics.len();
                Prompt::new(
                    format!("{set_id}-{i}"),
                    self.prompt_text(topic, &mut rng),
                    Some(&self.topics[topic].name),
                )
            })
            .collect();
        PromptSet {
            id: set_id.to_owned(),
            role,
            prompts,
        }
    }

    /// `n` prompts from the given topics only, cycling through them.
    pub fn topic_prompts(
        &self,
        set_id: &str,
        role: PromptRole,
        topics: &[usize],
        n: usize,
        seed: u64,
    ) -> PromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pure = self.clone();
        pure.mix_rate = 0.0;
        let prompts = (0..n)
            .map(|i| {
                let topic = topics[i % topics.len()];
                Prompt::new(
                    format!("{set_id}-{i}"),
                    pure.prompt_text(topic, &mut rng),
                    Some(&self.topics[topic].name),
                )
            })
            .collect();
        PromptSet {
            id: set_id.to_owned(),
            role,
            prompts,
        }
    }

    /// Short generation openers: half neutral (function words only), half
    /// drawn from the `off_topics`.
    pub fn generation_prompts(&self, set_id: &str, off_topics: &[usize], n: usize, seed: u64) -> PromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..n)
            .map(|i| {
                let (text, topic) = if i % 2 == 0 {
                    let t = off_topics[(i / 2) % off_topics.len()];
                    let opener = NEUTRAL_OPENERS[(i / 2) % NEUTRAL_OPENERS.len()];
                    (self.fill(opener, &self.topics[t], &mut rng), None)
                } else {
                    let t = off_topics[(i / 2) % off_topics.len()];
                    let s = self.fill("the {a} {n} {v} the", &self.topics[t], &mut rng);
                    (s, Some(self.topics[t].name.as_str()))
                };
                Prompt::new(format!("{set_id}-{i}"), text, topic)
            })
            .collect();
        PromptSet {
            id: set_id.to_owned(),
            role: PromptRole::Eval,
            prompts,
        }
    }

    pub fn vocabulary(&self, topic: usize) -> HashSet<String> {
        self.topics[topic].vocabulary()
    }
}

/// All prompt sets for one synthetic experiment.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub train: PromptSet,
    pub pool: PromptSet,
    pub align: PromptSet,
    pub aligned_eval: PromptSet,
    pub unaligned: PromptSet,
    pub generation: PromptSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleSizes {
    pub train: usize,
    pub pool: usize,
    pub align: usize,
    pub aligned_eval: usize,
    pub unaligned: usize,
    pub generation: usize,
}

impl Default for BundleSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            pool: 1500,
            align: 20,
            aligned_eval: 100,
            unaligned: 100,
            generation: 20,
        }
    }
}

impl SyntheticCorpus {
    /// Build every set with independent sub-seeds. `align_topic` defines
    /// the alignment set; the remaining topics feed the unaligned and
    /// generation sets.
    pub fn bundle(&self, align_topic: usize, sizes: BundleSizes, seed: u64) -> SyntheticBundle {
        let off: Vec<usize> = (0..self.topics.len()).filter(|&t| t != align_topic).collect();
        SyntheticBundle {
            train: self.prompts("train", PromptRole::Eval, sizes.train, seed),
            pool: self.prompts("pool", PromptRole::Reference, sizes.pool, seed.wrapping_add(1)),
            align: self.topic_prompts("align", PromptRole::Align, &[align_topic], sizes.align, seed.wrapping_add(2)),
            aligned_eval: self.topic_prompts(
                "aligned_eval",
                PromptRole::Eval,
                &[align_topic],
                sizes.aligned_eval,
                seed.wrapping_add(3),
            ),
            unaligned: self.topic_prompts("unaligned", PromptRole::Unaligned, &off, sizes.unaligned, seed.wrapping_add(4)),
            generation: self.generation_prompts("gen", &off, sizes.generation, seed.wrapping_add(5)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topics_have_disjoint_vocabulary() {
        let c = SyntheticCorpus::default_topics();
        let a = c.vocabulary(0);
        let b = c.vocabulary(1);
        let s = c.vocabulary(2);
        assert!(a.is_disjoint(&b) && a.is_disjoint(&s) && b.is_disjoint(&s));
    }

    #[test]
    fn generation_is_seeded_and_valid() {
        let c = SyntheticCorpus::default_topics();
        let x = c.bundle(0, BundleSizes::default(), 3);
        let y = c.bundle(0, BundleSizes::default(), 3);
        assert_eq!(x.pool, y.pool);
        for set in [&x.train, &x.pool, &x.align, &x.unaligned, &x.generation] {
            set.validate().unwrap();
        }
        let medical = c.vocabulary(0);
        for p in &x.unaligned.prompts {
            assert!(p.text.split_whitespace().all(|w| !medical.contains(w)));
        }
    }
}
