//! Prompt templates and closed-set reply parsing.
//!
//! The shipped templates are this project's defaults; they are configurable
//! and recorded with every run.

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ContentPart, ImageUrl};
use crate::clustering::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub answer_system: String,
    /// `{question}` is substituted.
    pub answer_user: String,
    pub judge_system: String,
    /// `{question}`, `{premise}` and `{hypothesis}` are substituted.
    pub judge_user: String,
    pub grade_system: String,
    /// `{question}`, `{answer}` and `{reference}` are substituted.
    pub grade_user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            answer_system: "You are a radiology assistant. Look at the image and answer the question \
                            with a short phrase of at most a few words. Do not explain."
                .to_string(),
            answer_user: "{question}".to_string(),
            judge_system: "You decide textual entailment between two short answers to the same \
                           question. Reply with exactly one word: ENTAILMENT or NOT_ENTAILMENT."
                .to_string(),
            judge_user: "Question: {question}\nAnswer A: {premise}\nAnswer B: {hypothesis}\n\
                         Does Answer A entail Answer B in the context of the question? \
                         Reply ENTAILMENT or NOT_ENTAILMENT."
                .to_string(),
            grade_system: "You compare a proposed answer with a reference answer to a radiology \
                           question. Reply with exactly one word: EQUIVALENT or NOT_EQUIVALENT."
                .to_string(),
            grade_user: "Question: {question}\nReference answer: {reference}\nProposed answer: {answer}\n\
                         Is the proposed answer clinically equivalent to the reference? \
                         Reply EQUIVALENT or NOT_EQUIVALENT."
                .to_string(),
        }
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

impl PromptTemplates {
    pub fn answer_messages(&self, question: &str, image_url: &str) -> Vec<ChatMessage> {
        vec![
            ChatMessage::text("system", self.answer_system.clone()),
            ChatMessage {
                role: "user".to_string(),
                content: vec![
                    ContentPart::Text {
                        text: fill(&self.answer_user, &[("question", question)]),
                    },
                    ContentPart::ImageUrl {
                        image_url: ImageUrl { url: image_url.to_string() },
                    },
                ],
            },
        ]
    }

    pub fn judge_messages(
        &self,
        question: &str,
        premise: &str,
        hypothesis: &str,
        image_url: Option<&str>,
    ) -> Vec<ChatMessage> {
        let mut user = ChatMessage::text(
            "user",
            fill(
                &self.judge_user,
                &[("question", question), ("premise", premise), ("hypothesis", hypothesis)],
            ),
        );
        if let Some(url) = image_url {
            user.content.push(ContentPart::ImageUrl {
                image_url: ImageUrl { url: url.to_string() },
            });
        }
        vec![ChatMessage::text("system", self.judge_system.clone()), user]
    }

    pub fn grade_messages(&self, question: &str, answer: &str, reference: &str) -> Vec<ChatMessage> {
        vec![
            ChatMessage::text("system", self.grade_system.clone()),
            ChatMessage::text(
                "user",
                fill(
                    &self.grade_user,
                    &[("question", question), ("answer", answer), ("reference", reference)],
                ),
            ),
        ]
    }
}

/// First word of the reply, upper-cased, with surrounding punctuation and
/// quotes removed. "NOT ENTAILMENT" therefore reads as `NOT`.
fn leading_label(raw: &str) -> Option<String> {
    let cleaned: String = raw
        .trim()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '_' { c.to_ascii_uppercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().next().map(str::to_string)
}

/// Parse rule for judge replies: the first word (case-insensitive, punctuation
/// ignored) must be `ENTAILMENT`/`ENTAILS`/`YES` for entails, or
/// `NOT_ENTAILMENT`/`NOT`/`NO`/`NEUTRAL`/`CONTRADICTION` for does-not-entail.
/// Anything else is unparseable.
pub fn parse_entailment_label(raw: &str) -> Option<Label> {
    match leading_label(raw)?.as_str() {
        "ENTAILMENT" | "ENTAILS" | "YES" => Some(Label::Entails),
        "NOT_ENTAILMENT" | "NOT" | "NO" | "NEUTRAL" | "CONTRADICTION" | "NON_ENTAILMENT" => {
            Some(Label::DoesNotEntail)
        }
        _ => None,
    }
}

/// Same rule for the grading judge: `EQUIVALENT`/`YES`/`CORRECT` or
/// `NOT_EQUIVALENT`/`NOT`/`NO`/`INCORRECT`.
pub fn parse_equivalence_label(raw: &str) -> Option<bool> {
    match leading_label(raw)?.as_str() {
        "EQUIVALENT" | "YES" | "CORRECT" => Some(true),
        "NOT_EQUIVALENT" | "NOT" | "NO" | "INCORRECT" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entailment_parse_rule() {
        assert_eq!(parse_entailment_label("ENTAILMENT."), Some(Label::Entails));
        assert_eq!(parse_entailment_label("  entailment"), Some(Label::Entails));
        assert_eq!(parse_entailment_label("\"Yes\""), Some(Label::Entails));
        assert_eq!(parse_entailment_label("NOT_ENTAILMENT"), Some(Label::DoesNotEntail));
        assert_eq!(parse_entailment_label("Not entailment."), Some(Label::DoesNotEntail));
        assert_eq!(parse_entailment_label("neutral"), Some(Label::DoesNotEntail));
        assert_eq!(parse_entailment_label("maybe"), None);
        assert_eq!(parse_entailment_label(""), None);
    }

    #[test]
    fn equivalence_parse_rule() {
        assert_eq!(parse_equivalence_label("EQUIVALENT"), Some(true));
        assert_eq!(parse_equivalence_label("not_equivalent."), Some(false));
        assert_eq!(parse_equivalence_label("???"), None);
    }

    #[test]
    fn judge_prompt_is_text_only_by_default() {
        let p = PromptTemplates::default();
        let m = p.judge_messages("Which organ?", "liver", "the liver", None);
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].content.len(), 1);
        let ContentPart::Text { text } = &m[1].content[0] else { panic!() };
        assert!(text.contains("Which organ?") && text.contains("Answer A: liver") && text.contains("Answer B: the liver"));
        let with_image = p.judge_messages("q", "a", "b", Some("data:image/png;base64,AA"));
        assert_eq!(with_image[1].content.len(), 2);
    }
}
