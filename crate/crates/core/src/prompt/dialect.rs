use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// How speaker turns are marked when a prompt is flattened to text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum MarkerStyle {
    /// Each turn starts with its own role tag, e.g. `<|System|>:`.
    RoleTagged {
        system: String,
        user: String,
        assistant: String,
    },
    /// System and user text share one instruction block, e.g.
    /// `<s>[INST] ... [/INST]`, followed directly by the assistant prefix.
    InstructionBracketed { open: String, close: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialect {
    pub id: String,
    #[serde(flatten)]
    pub markers: MarkerStyle,
}

impl Dialect {
    pub const ROLE_TAGGED: &'static str = "role_tagged";
    pub const INSTRUCTION_BRACKETED: &'static str = "instruction_bracketed";

    pub fn role_tagged() -> Self {
        Dialect {
            id: Self::ROLE_TAGGED.into(),
            markers: MarkerStyle::RoleTagged {
                system: "<|System|>:".into(),
                user: "<|Question|>:".into(),
                assistant: "<|Assistant|>:".into(),
            },
        }
    }

    pub fn instruction_bracketed() -> Self {
        Dialect {
            id: Self::INSTRUCTION_BRACKETED.into(),
            markers: MarkerStyle::InstructionBracketed {
                open: "<s>[INST]".into(),
                close: "[/INST]".into(),
            },
        }
    }

    /// Markers must be non-empty and pairwise distinct.
    pub fn validate(&self) -> Result<(), String> {
        let markers: Vec<&str> = match &self.markers {
            MarkerStyle::RoleTagged {
                system,
                user,
                assistant,
            } => vec![system, user, assistant],
            MarkerStyle::InstructionBracketed { open, close } => vec![open, close],
        };
        if self.id.trim().is_empty() {
            return Err("dialect id is empty".into());
        }
        if markers.iter().any(|m| m.is_empty()) {
            return Err(format!("dialect {}: empty marker", self.id));
        }
        for (i, a) in markers.iter().enumerate() {
            if markers[i + 1..].contains(a) {
                return Err(format!("dialect {}: marker {a:?} used for two roles", self.id));
            }
        }
        Ok(())
    }
}

/// Dialects by id. Starts with the two built-ins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialectRegistry {
    dialects: BTreeMap<String, Dialect>,
}

impl Default for DialectRegistry {
    fn default() -> Self {
        let mut dialects = BTreeMap::new();
        for d in [Dialect::role_tagged(), Dialect::instruction_bracketed()] {
            dialects.insert(d.id.clone(), d);
        }
        DialectRegistry { dialects }
    }
}

impl DialectRegistry {
    /// Adds or replaces a dialect.
    pub fn register(&mut self, dialect: Dialect) -> Result<(), String> {
        dialect.validate()?;
        self.dialects.insert(dialect.id.clone(), dialect);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Dialect> {
        self.dialects.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.dialects.keys().map(String::as_str)
    }
}
