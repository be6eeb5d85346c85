use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;

pub const PAYLOAD_VERSION: u32 = 1;

/// Instruction sent ahead of the few-shot examples.
pub const DEFAULT_TASK_DESCRIPTION: &str = "\
Produce one rewrite of the passage for every listed group and one neutral rewrite. \
Change only the words that reveal a person's group: pronouns, kinship and role nouns, \
titles and given names. Swap each of them for its counterpart in the target group, \
or for a group-free term in the neutral rewrite. Leave all other words, their order \
and the meaning of the passage untouched.";

const REPLY_FORMAT: &str = "\
Reply with a single JSON object: {\"neutral\": <text>, \"groups\": {<group>: <text>, ...}, \
\"confidence\": <number between 0 and 1>}. Include every listed group exactly once.";

const FORMAT_REMINDER: &str = "\
Your previous reply could not be used. Return only the JSON object described above, \
with a text for every group, the neutral text and a confidence between 0 and 1.";

/// One few-shot exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub original: String,
    pub neutral: String,
    pub groups: IndexMap<String, String>,
    #[serde(default)]
    pub round_added: u32,
}

/// Task description plus the growing list of exemplars.
///
/// Examples are only ever appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStore {
    pub task_description: String,
    #[serde(default)]
    pub examples: Vec<PromptExample>,
}

impl PromptStore {
    pub fn new(task_description: impl Into<String>) -> Self {
        Self {
            task_description: task_description.into(),
            examples: Vec::new(),
        }
    }

    /// Default task description with the eight curated gender exemplars.
    pub fn seeded() -> Self {
        let mut store = Self::new(DEFAULT_TASK_DESCRIPTION);
        for [original, neutral, male, female] in SEED_EXAMPLES {
            store.examples.push(PromptExample {
                original: original.to_string(),
                neutral: neutral.to_string(),
                groups: IndexMap::from([
                    ("male".to_string(), male.to_string()),
                    ("female".to_string(), female.to_string()),
                ]),
                round_added: 0,
            });
        }
        store
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn push(&mut self, example: PromptExample) {
        self.examples.push(example);
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// `[original, neutral, male, female]`
const SEED_EXAMPLES: [[&str; 4]; 8] = [
    [
        "The high popularity of the current president (Socialist Michelle Bachelet, Chile’s first female chief executive)",
        "The high popularity of the current president (A Socialist, Chile’s first chief executive)",
        "The high popularity of the current president (Socialist Mike Bachelet, Chile’s first male chief executive)",
        "The current president (Socialist Michelle Bachelet, Chile’s first female chief executive)",
    ],
    [
        "Rwanda has the highest female legislators in the world.",
        "Rwanda has the highest legislators in the world.",
        "Rwanda has the highest male legislators in the world.",
        "Rwanda has the highest female legislators in the world.",
    ],
    [
        "When a kid arrived, accompanied by a doting father, the prophet’s son.",
        "When a kid arrived, accompanied by a doting parent, the prophet’s child.",
        "When a kid arrived, accompanied by a doting father, the prophet’s son.",
        "When a kid arrived, accompanied by a doting mother, the prophet’s daughter.",
    ],
    [
        "wizards Hunt people, poor paternal nutrition.",
        "People Hunt people, poor nutrition.",
        "wizards Hunt people, poor paternal nutrition.",
        "Witch Hunt people, poor maternal nutrition.",
    ],
    [
        "Bruni’s life path become opera divo, barman and actress.",
        "A people's life path become opera performer, bar staff and acting.",
        "Michael's life path become opera diva, barwoman and actor.",
        "Bruni’s life path become opera divo, barman and actress.",
    ],
    [
        "Ally is marchioness, Bride for Sarkozy.",
        "they are noble, partner of someone.",
        "Alexandria is marquis, Groom for Sara.",
        "Ally is marchioness, Bride for Sarkozy.",
    ],
    [
        "Mike embarked on a fascinating experiment with sons.",
        "Leader embarked on a fascinating experiment with offsprings.",
        "Mike embarked on a fascinating experiment with sons.",
        "Merkel embarked on a fascinating experiment with daughters.",
    ],
    [
        "Orban and Tomy appointed a police as his secretary, most strong-minded male Democrat.",
        "They appointed a police as their secretary, most strong-minded Democrat.",
        "Orban and Tomy appointed a police as his secretary, most strong-minded male Democrat.",
        "Olivia and Michelle appointed a police as her secretary, most strong-minded female Democrat.",
    ],
];

/// An exemplar as it appears in a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadExample {
    pub original: String,
    pub neutral: String,
    pub groups: IndexMap<String, String>,
}

/// Request body sent to the augmenting model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub version: u32,
    pub task: String,
    pub attributes: Vec<String>,
    pub examples: Vec<PayloadExample>,
    pub source: String,
    pub reply_format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_reminder: Option<String>,
}

impl PromptPayload {
    pub(crate) fn with_format_reminder(mut self) -> Self {
        self.format_reminder = Some(FORMAT_REMINDER.to_string());
        self
    }

    /// Plain-text rendering for chat-style endpoints.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.task);
        out.push_str("\n\nGroups: ");
        out.push_str(&self.attributes.join(", "));
        out.push('\n');
        for (i, ex) in self.examples.iter().enumerate() {
            out.push_str(&format!("\nExample {}\nOriginal: {}\nNeutral: {}\n", i + 1, ex.original, ex.neutral));
            for (attr, text) in &ex.groups {
                out.push_str(&format!("{}: {}\n", capitalize(attr), text));
            }
        }
        out.push_str("\nPassage: ");
        out.push_str(&self.source);
        out.push_str("\n\n");
        out.push_str(&self.reply_format);
        if let Some(reminder) = &self.format_reminder {
            out.push_str("\n\n");
            out.push_str(reminder);
        }
        out
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Task description, then every exemplar in store order, then the source.
pub fn build_prompt(source: &str, store: &PromptStore, attributes: &[String]) -> PromptPayload {
    PromptPayload {
        version: PAYLOAD_VERSION,
        task: store.task_description.clone(),
        attributes: attributes.to_vec(),
        examples: store
            .examples
            .iter()
            .map(|ex| PayloadExample {
                original: ex.original.clone(),
                neutral: ex.neutral.clone(),
                groups: attributes
                    .iter()
                    .filter_map(|a| ex.groups.get(a).map(|t| (a.clone(), t.clone())))
                    .collect(),
            })
            .collect(),
        source: source.to_string(),
        reply_format: REPLY_FORMAT.to_string(),
        format_reminder: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs() -> Vec<String> {
        vec!["male".into(), "female".into()]
    }

    #[test]
    fn empty_store_payload_has_task_and_source_only() {
        let store = PromptStore::new("do it");
        let p = build_prompt("He left.", &store, &attrs());
        assert_eq!(p.task, "do it");
        assert!(p.examples.is_empty());
        assert_eq!(p.source, "He left.");
        let text = p.render();
        assert!(text.starts_with("do it"));
        assert!(text.contains("Passage: He left."));
    }

    #[test]
    fn seeded_store_renders_all_examples_in_order() {
        let store = PromptStore::seeded();
        assert_eq!(store.len(), 8);
        let p = build_prompt("x", &store, &attrs());
        assert_eq!(p.examples.len(), 8);
        assert!(p.examples[0].original.contains("Bachelet"));
        assert!(p.examples[7].original.starts_with("Orban and Tomy"));
        let text = p.render();
        let first = text.find("Example 1\n").unwrap();
        let last = text.find("Example 8\n").unwrap();
        assert!(first < last);
        assert!(text.find("Passage: x").unwrap() > last);
    }

    #[test]
    fn appending_an_example_grows_payload_by_one() {
        let mut store = PromptStore::seeded();
        let before = build_prompt("x", &store, &attrs());
        store.push(PromptExample {
            original: "He ran.".into(),
            neutral: "They ran.".into(),
            groups: IndexMap::from([
                ("male".into(), "He ran.".into()),
                ("female".into(), "She ran.".into()),
            ]),
            round_added: 1,
        });
        let after = build_prompt("x", &store, &attrs());
        assert_eq!(after.examples.len(), before.examples.len() + 1);
        assert_eq!(after.examples[..8], before.examples[..]);
        assert_eq!(after.examples[8].groups["female"], "She ran.");
    }

    #[test]
    fn format_reminder_is_rendered() {
        let p = build_prompt("x", &PromptStore::new("t"), &attrs()).with_format_reminder();
        assert!(p.render().ends_with(FORMAT_REMINDER));
    }
}
