//! The editing-instruction format contract and edit-text composition.

use serde::{Deserialize, Serialize};

/// Joins the generating prompt and the instruction items.
pub const EDIT_TEXT_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionFormat {
    pub min_items: usize,
    pub max_items: usize,
    pub max_words_per_item: usize,
    pub separator: char,
}

impl Default for InstructionFormat {
    fn default() -> Self {
        Self {
            min_items: 2,
            max_items: 3,
            max_words_per_item: 8,
            separator: ';',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatViolation {
    #[error("instruction is empty")]
    Empty,
    #[error("{count} items, need at least {min}")]
    TooFewItems { count: usize, min: usize },
    #[error("{count} items, at most {max} allowed")]
    TooManyItems { count: usize, max: usize },
    #[error("item {index} has {words} words, at most {max} allowed")]
    ItemTooLong { index: usize, words: usize, max: usize },
}

/// Every violation found in one instruction, in a fixed order: count
/// violations first, then long items by index.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid instruction: {}", .violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct FormatError {
    pub violations: Vec<FormatViolation>,
}

impl FormatError {
    pub fn has_too_few(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, FormatViolation::TooFewItems { .. }))
    }

    pub fn has_too_many(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, FormatViolation::TooManyItems { .. }))
    }

    pub fn long_items(&self) -> Vec<usize> {
        self.violations
            .iter()
            .filter_map(|v| match v {
                FormatViolation::ItemTooLong { index, .. } => Some(*index),
                _ => None,
            })
            .collect()
    }
}

/// Splits, trims, drops empty segments and strips one trailing period per item.
pub fn split_items(raw: &str, format: &InstructionFormat) -> Vec<String> {
    raw.split(format.separator)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.strip_suffix('.').unwrap_or(s).trim_end().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn parse_instruction(raw: &str, format: &InstructionFormat) -> Result<Vec<String>, FormatError> {
    if raw.trim().is_empty() {
        return Err(FormatError {
            violations: vec![FormatViolation::Empty],
        });
    }
    let items = split_items(raw, format);
    let mut violations = Vec::new();
    if items.len() < format.min_items {
        violations.push(FormatViolation::TooFewItems {
            count: items.len(),
            min: format.min_items,
        });
    }
    if items.len() > format.max_items {
        violations.push(FormatViolation::TooManyItems {
            count: items.len(),
            max: format.max_items,
        });
    }
    for (index, item) in items.iter().enumerate() {
        let words = item.split_whitespace().count();
        if words > format.max_words_per_item {
            violations.push(FormatViolation::ItemTooLong {
                index,
                words,
                max: format.max_words_per_item,
            });
        }
    }
    if violations.is_empty() {
        Ok(items)
    } else {
        Err(FormatError { violations })
    }
}

pub fn compose_edit_text(prompt_text: &str, items: &[String]) -> String {
    let mut out = prompt_text.to_string();
    for item in items {
        out.push_str(EDIT_TEXT_SEPARATOR);
        out.push_str(item);
    }
    out
}
