//! Generated fixtures: the shifted-offset embedding scenario, the
//! Kirchner/Rumsfeld gender triples and a random polarity corpus.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::{AugmentationResult, Correction, CorrectionRecord, ScriptedReply};
use crate::error::Result;
use crate::io::TextRecord;
use crate::math::{EmbeddingVector, GroupEmbeddings};

/// Male, neutral and female rewrites of three sentences.
pub const GENDER_TRIPLES: [[&str; 3]; 3] = [
    [
        "But because Rumsfeld wanted to prove a point about transforming strategy.",
        "But because the individual wanted to prove a point about transforming strategy.",
        "But because Rachel wanted to prove a point about transforming strategy.",
    ],
    [
        "After championing the continuation of his hardline policy, his current strategy of negotiation is risky.",
        "After championing the continuation of their hardline policy, the current strategy of negotiation is risky.",
        "After championing the continuation of her hardline policy, her current strategy of negotiation is risky.",
    ],
    [
        "He has been very vocal in voicing discontent with the rule of Kirchner and that of his husband and predecessor, Néstor Kirchner.",
        "They have been very vocal in voicing discontent with the rule of Kirchner and that of their spouse and predecessor, Néstor Kirchner.",
        "She has been very vocal in voicing discontent with the rule of Kirchner and that of her wife and predecessor, Néstor Kirchner.",
    ],
];

/// [`GENDER_TRIPLES`] as correctly assigned augmentation results.
pub fn gender_triple_results(confidence: f64) -> Vec<AugmentationResult> {
    GENDER_TRIPLES
        .iter()
        .enumerate()
        .map(|(i, [male, neutral, female])| AugmentationResult {
            content_id: format!("triple-{}", i + 1),
            source_text: Some(male.to_string()),
            group_texts: IndexMap::from([
                ("male".to_string(), male.to_string()),
                ("female".to_string(), female.to_string()),
            ]),
            neutral_text: neutral.to_string(),
            confidence,
            round: 1,
            polarity: None,
            confidence_defaulted: false,
        })
        .collect()
}

/// Groups whose attribute embeddings sit at growing offsets along one
/// shared direction `u`: attribute `i` is `c + offsets[i] * u` and the
/// neutral embedding is `c`.
///
/// Content vectors `c` are standard Gaussian scaled by `content_scale`.
#[derive(Debug, Clone)]
pub struct ShiftScenario {
    pub groups: usize,
    pub dim: usize,
    pub offsets: Vec<f64>,
    pub content_scale: f64,
    pub seed: u64,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        Self {
            groups: 512,
            dim: 32,
            offsets: vec![1.0, 3.0],
            content_scale: 1.0,
            seed: 42,
        }
    }
}

/// A generated scenario and the direction it was built around.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub groups: Vec<GroupEmbeddings>,
    pub direction: Vec<f64>,
}

impl ScenarioData {
    /// Mean norm of the content vectors.
    pub fn mean_content_norm(&self) -> f64 {
        let total: f64 = self.groups.iter().map(|g| g.neutral.norm()).sum();
        total / self.groups.len() as f64
    }
}

impl ShiftScenario {
    /// The shared direction: the normalized all-ones vector.
    pub fn direction(&self) -> Vec<f64> {
        vec![1.0 / (self.dim as f64).sqrt(); self.dim]
    }

    pub fn generate(&self) -> Result<ScenarioData> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let u = self.direction();
        let mut groups = Vec::with_capacity(self.groups);
        for i in 0..self.groups {
            let c: Vec<f64> = (0..self.dim)
                .map(|_| self.content_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let attributes = self
                .offsets
                .iter()
                .map(|&t| EmbeddingVector::new(c.iter().zip(&u).map(|(ci, ui)| ci + t * ui).collect()))
                .collect::<Result<Vec<_>>>()?;
            groups.push(GroupEmbeddings::new(
                format!("s{i:04}"),
                attributes,
                EmbeddingVector::new(c)?,
            ));
        }
        Ok(ScenarioData {
            groups,
            direction: u,
        })
    }
}

/// A three-round augmentation session for the scripted model.
///
/// Round 1 gets four wrong rewrites. Correcting `p2` fixes `p2` and `p6` in
/// round 2, which leaves `p3` and `p4` wrong at equal confidence. Correcting
/// `p3` then fixes both, so round 3 comes back clean.
#[derive(Debug, Clone)]
pub struct ScriptedSession {
    pub dataset: Vec<TextRecord>,
    pub replies: Vec<ScriptedReply>,
    pub corrections: Vec<CorrectionRecord>,
}

/// `(id, source, male, female, neutral)` of the correct rewrites.
const SESSION_TEXTS: [(&str, &str, &str, &str, &str); 6] = [
    ("p1", "He signed the lease.", "He signed the lease.", "She signed the lease.", "They signed the lease."),
    ("p2", "His sister drove home.", "His brother drove home.", "Her sister drove home.", "Their sibling drove home."),
    ("p3", "The king thanked his guests.", "The king thanked his guests.", "The queen thanked her guests.", "The monarch thanked their guests."),
    ("p4", "Her mother sold the farm.", "His father sold the farm.", "Her mother sold the farm.", "Their parent sold the farm."),
    ("p5", "She teaches chemistry.", "He teaches chemistry.", "She teaches chemistry.", "They teach chemistry."),
    ("p6", "The actor lost his script.", "The actor lost his script.", "The actress lost her script.", "The performer lost their script."),
];

impl ScriptedSession {
    pub fn new() -> Self {
        use serde_json::json;

        let reply = |male: &str, female: &str, neutral: &str, confidence: f64| {
            json!({"neutral": neutral, "groups": {"male": male, "female": female}, "confidence": confidence})
        };
        let entry = |source: &str, when: Option<&str>, value| ScriptedReply {
            source: Some(source.to_string()),
            source_sha256: None,
            when_example: when.map(str::to_string),
            fail_times: 0,
            reply: value,
        };
        let src = |i: usize| SESSION_TEXTS[i].1;
        let good = |i: usize, c: f64| {
            let (_, _, m, f, n) = SESSION_TEXTS[i];
            reply(m, f, n, c)
        };

        let mut replies = vec![
            entry(src(0), None, good(0, 0.95)),
            // neutral keeps "sister"
            entry(src(1), Some(src(1)), good(1, 0.9)),
            entry(src(1), None, reply("His brother drove home.", "Her sister drove home.", "Their sister drove home.", 0.9)),
            // female keeps "king"
            entry(src(2), Some(src(2)), good(2, 0.8)),
            entry(src(2), None, reply("The king thanked his guests.", "The king thanked her guests.", "The monarch thanked their guests.", 0.8)),
            // male keeps "mother"
            entry(src(3), Some(src(2)), good(3, 0.8)),
            entry(src(3), None, reply("His mother sold the farm.", "Her mother sold the farm.", "Their parent sold the farm.", 0.8)),
            entry(src(4), None, good(4, 0.7)),
            // neutral keeps "his"
            entry(src(5), Some(src(1)), good(5, 0.5)),
            entry(src(5), None, reply("The actor lost his script.", "The actress lost her script.", "The performer lost his script.", 0.5)),
        ];
        // conditional replies are looked up before unconditional ones
        replies.sort_by_key(|r| r.when_example.is_none());

        let dataset = SESSION_TEXTS
            .iter()
            .map(|(id, source, ..)| TextRecord {
                id: id.to_string(),
                text: source.to_string(),
                source: Some("scripted".into()),
            })
            .collect();
        let correction = |i: usize| {
            let (id, _, m, f, n) = SESSION_TEXTS[i];
            CorrectionRecord {
                content_id: id.to_string(),
                round: None,
                correction: Correction {
                    neutral: n.to_string(),
                    groups: IndexMap::from([("male".to_string(), m.to_string()), ("female".to_string(), f.to_string())]),
                },
            }
        };
        Self {
            dataset,
            replies,
            corrections: vec![correction(1), correction(2)],
        }
    }
}

impl Default for ScriptedSession {
    fn default() -> Self {
        Self::new()
    }
}

/// Random filler-plus-lexicon texts for exercising polarity code.
///
/// Each text mixes words from `vocabulary` with lexicon entries drawn from
/// `lexicon`, in random case and with random punctuation.
pub fn polarity_corpus(
    lexicon: &IndexMap<String, Vec<String>>,
    vocabulary: &[&str],
    texts: usize,
    seed: u64,
) -> Vec<String> {
    const PUNCT: [&str; 6] = [" ", " ", ", ", ". ", "! ", " - "];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = lexicon.values().flatten().map(String::as_str).collect();
    (0..texts)
        .map(|_| {
            let len = rng.gen_range(0..14);
            let mut out = String::new();
            for _ in 0..len {
                let w = if !words.is_empty() && rng.gen_bool(0.3) {
                    *words.choose(&mut rng).unwrap()
                } else {
                    *vocabulary.choose(&mut rng).unwrap()
                };
                let w = match rng.gen_range(0..4) {
                    0 => w.to_uppercase(),
                    1 => {
                        let mut cs = w.chars();
                        cs.next()
                            .map(|f| f.to_uppercase().chain(cs).collect())
                            .unwrap_or_default()
                    }
                    _ => w.to_string(),
                };
                out.push_str(&w);
                out.push_str(PUNCT.choose(&mut rng).unwrap());
            }
            out.trim_end().to_string()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{PolarityLabel, SensitiveLexicon};
    use crate::metrics::cced_gap;

    #[test]
    fn triples_classify_to_their_rows() {
        let lex = SensitiveLexicon::default_english();
        for [m, n, f] in GENDER_TRIPLES {
            assert_eq!(lex.polarity(m), PolarityLabel::Attribute("male".into()), "{m}");
            assert_eq!(lex.polarity(n), PolarityLabel::Neutral, "{n}");
            assert_eq!(lex.polarity(f), PolarityLabel::Attribute("female".into()), "{f}");
        }
    }

    #[test]
    fn scenario_shape() {
        let data = ShiftScenario {
            groups: 8,
            ..Default::default()
        }
        .generate()
        .unwrap();
        assert_eq!(data.groups.len(), 8);
        assert!((cced_gap(&data.groups, None).unwrap() - 2.0).abs() < 1e-12);
        let u = &data.direction;
        for g in &data.groups {
            let offset: Vec<f64> = g.attributes[1]
                .as_slice()
                .iter()
                .zip(g.neutral.as_slice())
                .map(|(a, n)| a - n)
                .collect();
            for (o, ui) in offset.iter().zip(u) {
                assert!((o - 3.0 * ui).abs() < 1e-12);
            }
        }
    }
}
