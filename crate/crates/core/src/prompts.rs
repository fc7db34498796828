//! Prompt templates with `{{slot}}` placeholders.
//!
//! Defaults are compiled in; a `prompts/` directory under the store root can
//! override any of them with a file named `<kind>.tmpl`. Overrides must keep
//! every slot of the default template.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use std::sync::LazyLock;

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{\s*([a-z_]+)\s*\}\}").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptKind {
    Ideation,
    Planning,
    Debugging,
    Reflection,
    Report,
    Summary,
    Interesting,
    MetaAnalysis,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::Ideation,
        PromptKind::Planning,
        PromptKind::Debugging,
        PromptKind::Reflection,
        PromptKind::Report,
        PromptKind::Summary,
        PromptKind::Interesting,
        PromptKind::MetaAnalysis,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Ideation => "ideation.tmpl",
            PromptKind::Planning => "planning.tmpl",
            PromptKind::Debugging => "debugging.tmpl",
            PromptKind::Reflection => "reflection.tmpl",
            PromptKind::Report => "report.tmpl",
            PromptKind::Summary => "summary.tmpl",
            PromptKind::Interesting => "interesting.tmpl",
            PromptKind::MetaAnalysis => "metaanalysis.tmpl",
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            PromptKind::Ideation => include_str!("../prompts/ideation.tmpl"),
            PromptKind::Planning => include_str!("../prompts/planning.tmpl"),
            PromptKind::Debugging => include_str!("../prompts/debugging.tmpl"),
            PromptKind::Reflection => include_str!("../prompts/reflection.tmpl"),
            PromptKind::Report => include_str!("../prompts/report.tmpl"),
            PromptKind::Summary => include_str!("../prompts/summary.tmpl"),
            PromptKind::Interesting => include_str!("../prompts/interesting.tmpl"),
            PromptKind::MetaAnalysis => include_str!("../prompts/metaanalysis.tmpl"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: missing slot `{slot}`")]
    MissingSlot { template: &'static str, slot: String },
    #[error("template {template}: no value supplied for `{slot}`")]
    UnfilledSlot { template: &'static str, slot: String },
    #[error("reading {0}: {1}")]
    Io(String, String),
}

fn slots(text: &str) -> Vec<String> {
    let mut out: Vec<String> = SLOT.captures_iter(text).map(|c| c[1].to_string()).collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<PromptKind, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: PromptKind::ALL
                .iter()
                .map(|&k| (k, k.default_text().to_string()))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Defaults, overridden by any `<kind>.tmpl` present in `dir`.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptSet::default();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PromptError::Io(path.display().to_string(), e.to_string()))?;
            set.set(kind, text)?;
        }
        Ok(set)
    }

    /// Replace one template, checking it keeps the default's slots.
    pub fn set(&mut self, kind: PromptKind, text: String) -> Result<(), PromptError> {
        let have = slots(&text);
        if let Some(missing) = slots(kind.default_text())
            .into_iter()
            .find(|s| !have.contains(s))
        {
            return Err(PromptError::MissingSlot {
                template: kind.file_name(),
                slot: missing,
            });
        }
        self.templates.insert(kind, text);
        Ok(())
    }

    pub fn render(&self, kind: PromptKind, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let text = &self.templates[&kind];
        let mut missing = None;
        let rendered = SLOT.replace_all(text, |caps: &regex::Captures<'_>| {
            let name = &caps[1];
            match values.iter().find(|(k, _)| *k == name) {
                Some((_, v)) => v.to_string(),
                None => {
                    missing.get_or_insert_with(|| name.to_string());
                    String::new()
                }
            }
        });
        match missing {
            Some(slot) => Err(PromptError::UnfilledSlot {
                template: kind.file_name(),
                slot,
            }),
            None => Ok(rendered.into_owned()),
        }
    }

    /// Write the current templates into `dir` (used by `init`).
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (kind, text) in &self.templates {
            std::fs::write(dir.join(kind.file_name()), text)?;
        }
        Ok(())
    }
}
