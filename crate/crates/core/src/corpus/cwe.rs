use std::fmt;

use serde::{Deserialize, Serialize};

use super::manifest::is_cwe_id;
use super::CorpusError;

/// Coarse weakness groups used for per-category reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CweCategory {
    MemorySafety,
    InputValidation,
    ConcurrencyIssue,
    SecurityHandling,
}

impl CweCategory {
    pub const ALL: [CweCategory; 4] = [
        Self::MemorySafety,
        Self::InputValidation,
        Self::ConcurrencyIssue,
        Self::SecurityHandling,
    ];

    pub fn members(self) -> &'static [u32] {
        match self {
            Self::MemorySafety => &[119, 125, 131, 190, 191, 415, 416, 475, 665, 787, 824, 908],
            Self::InputValidation => &[20, 22, 59, 79, 88, 113, 134, 200, 203, 287, 288, 346, 427, 444],
            Self::ConcurrencyIssue => &[276, 362, 400, 617, 662, 674, 668, 703, 770],
            Self::SecurityHandling => &[248, 252, 347, 670, 682, 701, 754, 755, 758],
        }
    }
}

impl fmt::Display for CweCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MemorySafety => "Memory Safety",
            Self::InputValidation => "Input Validation",
            Self::ConcurrencyIssue => "Concurrency Issue",
            Self::SecurityHandling => "Security Handling",
        })
    }
}

/// Maps a CWE id (`CWE-20` and `CWE-020` are the same id) to its category.
pub fn categorize_cwe(cwe_id: &str) -> Result<CweCategory, CorpusError> {
    let unknown = || CorpusError::UnknownCwe(cwe_id.to_string());
    if !is_cwe_id(cwe_id) {
        return Err(unknown());
    }
    let number: u32 = cwe_id[4..].parse().map_err(|_| unknown())?;
    CweCategory::ALL
        .into_iter()
        .find(|c| c.members().contains(&number))
        .ok_or_else(unknown)
}
