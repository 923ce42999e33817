//! Bundled prompt templates and rendering.
//!
//! Templates use `{{name}}` placeholders. Every template is checked against
//! its declared placeholder set the first time templates are used. Text
//! inserted into a prompt is flattened to one line so the prompt structure
//! stays line-oriented.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder {
        template: &'static str,
        name: String,
    },
    #[error("template {template}: missing placeholder {{{{{name}}}}}")]
    MissingPlaceholder {
        template: &'static str,
        name: &'static str,
    },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: &'static str },
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(alias = "QA")]
    Qa,
    Summarization,
}

impl Task {
    /// `(input label, output label)` used in demonstrations.
    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Task::Qa => TASK_LABELS[0],
            Task::Summarization => TASK_LABELS[1],
        }
    }
}

pub const TASK_LABELS: [(&str, &str); 2] = [("Question:", "Answer:"), ("Dialogue:", "Summary:")];
pub const SELECTION_MARKERS: [&str; 2] = [
    "Pick the most accurate answer for the question",
    "Pick the most accurate summary for the dialogue",
];
pub const KSA_MARKER: &str = "word suggestions ranked by their frequency from high to low";
pub const GENERATION_MARKER: &str = "Generate a similar example";

/// What a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptMode<'a> {
    /// Few-shot answering of the query from the batch.
    Demonstration,
    /// Pick one of the ranked candidates; the batch is the one-shot example.
    Selection(&'a [String]),
    /// Answer from ranked keywords; the batch is the one-shot example.
    KsaReconstruction(&'a [String]),
    /// Produce a new example resembling the single seed in the batch.
    Generation { variant: usize },
}

pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
    placeholders: &'static [&'static str],
}

static TEMPLATES: [Template; 7] = [
    Template {
        name: "qa_demonstration",
        text: include_str!("../templates/qa_demonstration.txt"),
        placeholders: &["demonstrations", "query"],
    },
    Template {
        name: "summarization_demonstration",
        text: include_str!("../templates/summarization_demonstration.txt"),
        placeholders: &["demonstrations", "query"],
    },
    Template {
        name: "qa_selection",
        text: include_str!("../templates/qa_selection.txt"),
        placeholders: &["example", "query", "candidates"],
    },
    Template {
        name: "summarization_selection",
        text: include_str!("../templates/summarization_selection.txt"),
        placeholders: &["example", "query", "candidates"],
    },
    Template {
        name: "qa_ksa",
        text: include_str!("../templates/qa_ksa.txt"),
        placeholders: &["example", "query", "keywords"],
    },
    Template {
        name: "summarization_ksa",
        text: include_str!("../templates/summarization_ksa.txt"),
        placeholders: &["example", "query", "keywords"],
    },
    Template {
        name: "generation",
        text: include_str!("../templates/generation.txt"),
        placeholders: &["example", "variant"],
    },
];

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces<'a>(name: &'static str, text: &'a str) -> Result<Vec<Piece<'a>>, PromptError> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push(Piece::Text(&rest[..start]));
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or(PromptError::Unterminated { template: name })?;
        out.push(Piece::Slot(&after[..end]));
        rest = &after[end + 2..];
    }
    out.push(Piece::Text(rest));
    Ok(out)
}

impl Template {
    /// Checks that the placeholders in the text are exactly the declared ones.
    pub fn validate(&self) -> Result<(), PromptError> {
        let found: Vec<&str> = pieces(self.name, self.text)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Text(_) => None,
            })
            .collect();
        if let Some(bad) = found.iter().find(|s| !self.placeholders.contains(s)) {
            return Err(PromptError::UnknownPlaceholder {
                template: self.name,
                name: bad.to_string(),
            });
        }
        if let Some(missing) = self.placeholders.iter().find(|p| !found.contains(p)) {
            return Err(PromptError::MissingPlaceholder {
                template: self.name,
                name: missing,
            });
        }
        Ok(())
    }

    /// Substitutes every placeholder in one pass, so inserted text is never
    /// re-scanned for placeholders.
    fn render(&self, values: &[(&str, &str)]) -> String {
        render_text(self.name, self.text, values)
    }

    /// Like `render`, but drops the line holding `slot` (and one blank line
    /// after it) when `slot`'s value is empty.
    fn render_optional_line(&self, values: &[(&str, &str)], slot: &str) -> String {
        let empty = values.iter().any(|(k, v)| *k == slot && v.is_empty());
        if !empty {
            return self.render(values);
        }
        let marker = format!("{{{{{slot}}}}}");
        let mut kept = String::new();
        let mut skip_blank = false;
        for line in self.text.split_inclusive('\n') {
            if line.contains(&marker) {
                skip_blank = true;
                continue;
            }
            if skip_blank && line.trim().is_empty() {
                skip_blank = false;
                continue;
            }
            skip_blank = false;
            kept.push_str(line);
        }
        render_text(self.name, &kept, values)
    }
}

fn render_text(name: &'static str, text: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    for p in pieces(name, text).expect("validated template") {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(slot) => {
                let v = values
                    .iter()
                    .find(|(k, _)| *k == slot)
                    .map_or("", |(_, v)| v);
                out.push_str(v);
            }
        }
    }
    out
}

fn templates() -> Result<&'static [Template; 7], PromptError> {
    static CHECKED: OnceLock<Result<(), PromptError>> = OnceLock::new();
    CHECKED
        .get_or_init(|| TEMPLATES.iter().try_for_each(Template::validate))
        .clone()
        .map(|_| &TEMPLATES)
}

fn template(name: &str) -> Result<&'static Template, PromptError> {
    Ok(templates()?
        .iter()
        .find(|t| t.name == name)
        .expect("bundled template name"))
}

/// Collapses line breaks and runs of whitespace to single spaces.
pub fn flatten(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn demonstration_block(batch: &[Example], task: Task) -> String {
    let (inp, out) = task.labels();
    batch
        .iter()
        .map(|e| {
            format!(
                "{inp} {}\n{out} {}\n\n",
                flatten(&e.input),
                flatten(&e.output)
            )
        })
        .collect()
}

/// Renders the prompt for `mode`. Selection, keyword and generation prompts
/// take their one-shot example (or seed) from `batch`.
pub fn build_prompt(
    batch: &[Example],
    query: &str,
    task: Task,
    mode: PromptMode<'_>,
) -> Result<String, PromptError> {
    let prefix = match task {
        Task::Qa => "qa",
        Task::Summarization => "summarization",
    };
    let query = flatten(query);
    let block = demonstration_block(batch, task);
    match mode {
        PromptMode::Demonstration => {
            let t = template(&format!("{prefix}_demonstration"))?;
            Ok(t.render(&[("demonstrations", &block), ("query", &query)]))
        }
        PromptMode::Selection(candidates) => {
            if candidates.is_empty() {
                return Err(PromptError::InvalidInput(
                    "selection needs at least one candidate".into(),
                ));
            }
            let list = candidates
                .iter()
                .map(|c| format!("[{}]", flatten(c)))
                .collect::<Vec<_>>()
                .join("\n");
            let t = template(&format!("{prefix}_selection"))?;
            Ok(t.render(&[
                ("example", &block),
                ("query", &query),
                ("candidates", &list),
            ]))
        }
        PromptMode::KsaReconstruction(keywords) => {
            let list = keywords
                .iter()
                .map(|k| flatten(k))
                .collect::<Vec<_>>()
                .join(", ");
            let t = template(&format!("{prefix}_ksa"))?;
            Ok(t.render_optional_line(
                &[("example", &block), ("query", &query), ("keywords", &list)],
                "keywords",
            ))
        }
        PromptMode::Generation { variant } => {
            if batch.len() != 1 {
                return Err(PromptError::InvalidInput(
                    "generation needs exactly one seed example".into(),
                ));
            }
            let t = template("generation")?;
            Ok(t.render(&[("example", &block), ("variant", &variant.to_string())]))
        }
    }
}

/// Parses a generated `(input, output)` pair written with the task's labels.
pub fn parse_generated(text: &str, task: Task) -> Option<(String, String)> {
    let (inp, out) = task.labels();
    let mut input = None;
    let mut output = None;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix(inp) {
            input.get_or_insert_with(|| v.trim().to_string());
        } else if let Some(v) = line.trim().strip_prefix(out) {
            output.get_or_insert_with(|| v.trim().to_string());
        }
    }
    match (input, output) {
        (Some(i), Some(o)) if !i.is_empty() => Some((i, o)),
        _ => None,
    }
}
