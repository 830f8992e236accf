use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::TransparencyClass;

const BUNDLED: &str = include_str!("../../data/instructions.json");

/// A removal command, optionally labeled with the transparency it refers to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    text: String,
    category: Option<TransparencyClass>,
}

impl Instruction {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Validation("instruction text is empty".into()));
        }
        Ok(Self { text, category: None })
    }

    pub fn labeled(text: impl Into<String>, category: TransparencyClass) -> Result<Self> {
        Ok(Self {
            category: Some(category),
            ..Self::new(text)?
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn category(&self) -> Option<TransparencyClass> {
        self.category
    }
}

/// Instructions grouped by the transparency they describe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionCorpus {
    pub opaque: Vec<String>,
    pub semi_transparent: Vec<String>,
}

impl InstructionCorpus {
    /// The corpus shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled corpus is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let corpus: Self =
            serde_json::from_str(text).map_err(|e| Error::Load(format!("instruction corpus: {e}")))?;
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// No empty strings and no duplicates within a category.
    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("opaque", &self.opaque), ("semi_transparent", &self.semi_transparent)] {
            let mut seen = HashSet::new();
            for s in list {
                if s.trim().is_empty() {
                    return Err(Error::Validation(format!("empty instruction in {name}")));
                }
                if !seen.insert(s.as_str()) {
                    return Err(Error::Validation(format!("duplicate instruction {s:?} in {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn category(&self, class: TransparencyClass) -> &[String] {
        match class {
            TransparencyClass::Opaque => &self.opaque,
            TransparencyClass::SemiTransparent => &self.semi_transparent,
        }
    }

    /// Labeled instructions of one class.
    pub fn instructions(&self, class: TransparencyClass) -> Vec<Instruction> {
        self.category(class)
            .iter()
            .map(|t| Instruction::labeled(t.clone(), class).expect("validated corpus"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_corpus_is_valid_and_balanced() {
        let c = InstructionCorpus::bundled();
        assert!(c.opaque.len() >= 30 && c.semi_transparent.len() >= 30);
        assert!(c.opaque.iter().any(|s| s == "opaque obstacle"));
        assert!(c.semi_transparent.iter().any(|s| s == "semi-transparent obstacle"));
    }

    #[test]
    fn duplicates_and_empty_text_rejected() {
        let dup = r#"{"opaque": ["a", "a"], "semi_transparent": ["b"]}"#;
        assert!(matches!(InstructionCorpus::from_json(dup), Err(Error::Validation(_))));
        assert!(matches!(Instruction::new("  "), Err(Error::Validation(_))));
    }
}
