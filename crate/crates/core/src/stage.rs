use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of scored sleep stages.
pub const NUM_STAGES: usize = 5;

/// A scored sleep stage. The discriminant order `[Wake, N1, N2, N3, REM]` is
/// the canonical order used by every probability vector, confusion matrix and
/// class-ratio row in the crate, and it is also the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageLabel {
    Wake = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

impl StageLabel {
    pub const ALL: [StageLabel; NUM_STAGES] = [
        StageLabel::Wake,
        StageLabel::N1,
        StageLabel::N2,
        StageLabel::N3,
        StageLabel::Rem,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StageLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::Wake => "Wake",
            StageLabel::N1 => "N1",
            StageLabel::N2 => "N2",
            StageLabel::N3 => "N3",
            StageLabel::Rem => "REM",
        }
    }

    /// Index of the first maximum: ties resolve toward the earlier stage.
    pub fn argmax(probabilities: &[f64]) -> StageLabel {
        let mut best = 0;
        for (i, &p) in probabilities.iter().enumerate().take(NUM_STAGES) {
            if p > probabilities[best] {
                best = i;
            }
        }
        Self::ALL[best]
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "W" | "WAKE" => Ok(StageLabel::Wake),
            "N1" => Ok(StageLabel::N1),
            "N2" => Ok(StageLabel::N2),
            "N3" => Ok(StageLabel::N3),
            "R" | "REM" => Ok(StageLabel::Rem),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// Stage as read from an annotation file, before unscored epochs are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotatedStage {
    Scored(StageLabel),
    Unscored,
}

impl AnnotatedStage {
    pub fn scored(self) -> Option<StageLabel> {
        match self {
            AnnotatedStage::Scored(s) => Some(s),
            AnnotatedStage::Unscored => None,
        }
    }
}

/// Histogram of stages in stage order.
pub fn stage_counts(labels: &[StageLabel]) -> [usize; NUM_STAGES] {
    let mut counts = [0usize; NUM_STAGES];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_by_stage_order() {
        assert_eq!(StageLabel::argmax(&[0.2; 5]), StageLabel::Wake);
        assert_eq!(StageLabel::argmax(&[0.1, 0.3, 0.3, 0.2, 0.1]), StageLabel::N1);
        assert_eq!(StageLabel::argmax(&[0.0, 0.0, 0.0, 0.0, 1.0]), StageLabel::Rem);
    }

    #[test]
    fn parses_aasm_tokens() {
        assert_eq!("w".parse::<StageLabel>().unwrap(), StageLabel::Wake);
        assert_eq!("REM".parse::<StageLabel>().unwrap(), StageLabel::Rem);
        assert!("N4".parse::<StageLabel>().is_err());
    }
}
