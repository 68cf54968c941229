//! Named prompt templates with `{placeholder}` substitution.
//!
//! Built-in defaults cover every pipeline prompt. A templates directory can
//! override any of them with a `<name>.txt` file.

use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("cannot read template directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The quoted single-page archetype ships as entry zero of the default list.
pub const DEFAULT_ARCHETYPES: &[&str] = &[
    "ask a difficult question that has a short, verifiable (not open-ended or debatable, has a single correct answer) answer (a number, string, list, dictionary, yes/no, etc.) and ask for the model to reason before answering",
    "ask a question that requires reading a table or chart on the page",
    "ask a question that requires combining two facts stated on the page",
    "ask a question about a specific number, date or name mentioned on the page",
    "ask an open question asking to summarize or explain part of the page",
];

const DEFAULTS: &[(&str, &str)] = &[
    (
        "fim",
        "Page {missing} of {total} is missing from this document. Write out the full text of the missing page.",
    ),
    (
        "unshuffle",
        "The pages of this document have been shuffled and labeled with positions. List the positions in the correct reading order, separated by commas.",
    ),
    (
        "retrieval_key",
        "Find the passage \"{key}\" in the document and write out the {count} words that immediately follow it.",
    ),
    (
        "retrieval_position",
        "Write out paragraph {paragraph} of page {page} exactly as it appears.",
    ),
    (
        "counting_label",
        "How many {label} are on this page? Reply with a single integer.",
    ),
    (
        "counting",
        "Count the {label} on each page of this document, then give the total number of {label} across the whole document.",
    ),
    (
        "sp_questions",
        "Write {count} different questions about this page. For each question: {archetype}. Output exactly one question per line, numbered 1 to {count}, with no other text.",
    ),
    (
        "mp_questions",
        "Write questions about these pages that can only be answered by combining evidence from several pages. Output one question per line, numbered, with no other text.",
    ),
    (
        "unanswerable",
        "Write a trick question about this page that looks answerable but cannot be answered from the page. Output only the question.",
    ),
    (
        "single_page_answer",
        "{question}",
    ),
    (
        "judge",
        "Question: {question}\nProposed answer: {answer}\nUsing the page, decide whether the proposed answer fully and correctly answers the question. Reply with yes or no.",
    ),
    (
        "extract",
        "Question: {question}\nExtract the evidence on this page that is relevant to the question, then rate the page's relevance from 0 to 10.\nReply in the form:\nEVIDENCE: <evidence or NONE>\nRELEVANCE: <number>",
    ),
    (
        "answer_from_evidence",
        "Evidence gathered from the most relevant pages of a document:\n{evidence}\n\nQuestion: {question}",
    ),
    (
        "quality_decompose",
        "Question: {question}\nAnswer: {answer}\nBreak the answer down into a list of atomic assertions. Output one assertion per line, numbered, with no other text.",
    ),
    (
        "quality_extract",
        "Assertions:\n{assertions}\nFor each assertion, extract the evidence on this page that supports or contradicts it, then rate the page's relevance from 0 to 10.\nReply with one line per assertion in the form '<number>: <evidence or NONE>' followed by a final line 'RELEVANCE: <number>'.",
    ),
    (
        "quality_check",
        "Assertions:\n{assertions}\n\nEvidence:\n{evidence}\n\nUsing the pages and the evidence, decide for each assertion whether it is supported. Reply with one line per assertion in the form '<number>: yes' or '<number>: no'.",
    ),
    (
        "followup_deeper",
        "Here is a conversation about a document:\n{transcript}\nAsk one follow-up question that probes deeper into the previous answer. Output only the question.",
    ),
    (
        "followup_new",
        "Here is a conversation about a document:\n{transcript}\nAsk one new question about a different part of the document. Output only the question.",
    ),
    (
        "flag_extract",
        "Question: {question}\nReference answer: {answer}\nExtract the evidence on this page relevant to the question and the reference answer, then rate the page's relevance from 0 to 10.\nReply in the form:\nEVIDENCE: <evidence or NONE>\nRELEVANCE: <number>",
    ),
    (
        "flag_verdict",
        "Question: {question}\nReference answer: {answer}\n\nEvidence from the document:\n{evidence}\n\nCheck the question and reference answer against the document. Classify the item as one of: document_mismatch, underspecified, typo, incorrect_answer, ok.\nReply in the form:\nISSUE: <label>\nRATIONALE: <one or two sentences>",
    ),
];

#[derive(Debug, Clone)]
pub struct Templates {
    entries: BTreeMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            entries: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Templates {
    /// Defaults overridden by every `<name>.txt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let io = |source| TemplateError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut templates = Self::default();
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<_, _>>()
            .map_err(io)?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let body = std::fs::read_to_string(&path).map_err(io)?;
            templates.set(&name, body.trim_end_matches('\n'))?;
        }
        Ok(templates)
    }

    pub fn set(&mut self, name: &str, body: &str) -> Result<(), TemplateError> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                *slot = body.to_string();
                Ok(())
            }
            None => Err(TemplateError::Unknown(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> &str {
        self.entries
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("built-in template {name:?} is missing"))
    }

    /// Substitute `{key}` occurrences.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let mut out = self.get(name).to_string();
        for (key, value) in vars {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_placeholders() {
        let t = Templates::default();
        assert_eq!(
            t.render("retrieval_position", &[("paragraph", "2"), ("page", "5")]),
            "Write out paragraph 2 of page 5 exactly as it appears."
        );
    }

    #[test]
    fn directory_overrides_and_rejects_unknown() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("fim.txt"), "Fill page {missing}.\n").unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        assert_eq!(t.render("fim", &[("missing", "3")]), "Fill page 3.");
        std::fs::write(dir.path().join("nope.txt"), "x").unwrap();
        assert!(matches!(Templates::load_dir(dir.path()), Err(TemplateError::Unknown(_))));
    }

    #[test]
    fn quoted_archetype_is_first() {
        assert!(DEFAULT_ARCHETYPES[0].contains("short, verifiable"));
    }
}
