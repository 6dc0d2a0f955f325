//! Hypnogram sidecars: UTF-8 lines `onset_s,duration_s,token`.

use serde::{Deserialize, Serialize};

use super::{PsgError, Result};
use crate::stage::{AnnotatedStage, StageLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSchema {
    /// AASM tokens: W, N1, N2, N3, R (identity mapping).
    Aasm,
    /// Rechtschaffen & Kales tokens: W, 1, 2, 3, 4, R; stages 3 and 4 merge into N3.
    Rk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelOptions {
    pub schema: LabelSchema,
    /// Reject tokens outside the schema's vocabulary instead of mapping them
    /// to `Unscored`.
    pub strict: bool,
}

impl LabelOptions {
    pub fn new(schema: LabelSchema) -> Self {
        LabelOptions { schema, strict: false }
    }

    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset: f64,
    pub duration: f64,
    pub stage: AnnotatedStage,
}

/// Tokens that are known not to carry a stage (movement, unknown, artefact).
fn is_unscored_token(t: &str) -> bool {
    matches!(
        t,
        "?" | "M" | "MT" | "MOVEMENT" | "MOVEMENT TIME" | "UNKNOWN" | "U" | "UNSCORED" | "A" | "ARTIFACT" | "L"
    )
}

/// Map one stage token. Returns `None` for tokens outside the vocabulary.
pub fn map_token(token: &str, schema: LabelSchema) -> Option<AnnotatedStage> {
    let mut t = token.trim().to_ascii_uppercase();
    if let Some(rest) = t.strip_prefix("SLEEP STAGE ") {
        t = rest.trim().to_string();
    }
    if is_unscored_token(&t) {
        return Some(AnnotatedStage::Unscored);
    }
    let stage = match schema {
        LabelSchema::Rk => match t.as_str() {
            "W" | "0" => StageLabel::Wake,
            "1" | "S1" => StageLabel::N1,
            "2" | "S2" => StageLabel::N2,
            "3" | "4" | "S3" | "S4" => StageLabel::N3,
            "R" | "REM" => StageLabel::Rem,
            _ => return None,
        },
        LabelSchema::Aasm => match t.as_str() {
            "W" | "WAKE" => StageLabel::Wake,
            "N1" => StageLabel::N1,
            "N2" => StageLabel::N2,
            "N3" => StageLabel::N3,
            "R" | "REM" => StageLabel::Rem,
            _ => return None,
        },
    };
    Some(AnnotatedStage::Scored(stage))
}

/// Parse a label sidecar. Blank lines, `#` comments and a leading header row
/// are skipped. Rows are returned in file order after an overlap check on the
/// onset-sorted sequence.
pub fn read_stage_labels(text: &str, options: LabelOptions) -> Result<Vec<Annotation>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, ',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(PsgError::MalformedAnnotation { line: line_no, row: raw.to_string() });
        }
        let (onset, duration) = match (parts[0].parse::<f64>(), parts[1].parse::<f64>()) {
            (Ok(o), Ok(d)) => (o, d),
            _ if rows.is_empty() && parts[0].to_ascii_lowercase().starts_with("onset") => continue,
            _ => return Err(PsgError::MalformedAnnotation { line: line_no, row: raw.to_string() }),
        };
        if !(onset >= 0.0 && onset.is_finite() && duration > 0.0 && duration.is_finite()) {
            return Err(PsgError::MalformedAnnotation { line: line_no, row: raw.to_string() });
        }
        let stage = match map_token(parts[2], options.schema) {
            Some(s) => s,
            None if options.strict => {
                return Err(PsgError::UnknownToken { line: line_no, token: parts[2].to_string() })
            }
            None => AnnotatedStage::Unscored,
        };
        rows.push(Annotation { onset, duration, stage });
    }

    let mut order: Vec<&Annotation> = rows.iter().collect();
    order.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    for w in order.windows(2) {
        let prev_end = w[0].onset + w[0].duration;
        if w[1].onset < prev_end - 1e-9 {
            return Err(PsgError::OverlappingAnnotations { onset: w[1].onset, previous_end: prev_end });
        }
    }
    Ok(rows)
}

/// Render annotations in the sidecar format with AASM tokens.
pub fn format_stage_labels(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        let token = match a.stage {
            AnnotatedStage::Scored(StageLabel::Wake) => "W",
            AnnotatedStage::Scored(StageLabel::N1) => "N1",
            AnnotatedStage::Scored(StageLabel::N2) => "N2",
            AnnotatedStage::Scored(StageLabel::N3) => "N3",
            AnnotatedStage::Scored(StageLabel::Rem) => "R",
            AnnotatedStage::Unscored => "?",
        };
        out.push_str(&format!("{},{},{}\n", a.onset, a.duration, token));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk_stage_four_merges_into_n3() {
        let rows = read_stage_labels("0,30,4\n", LabelOptions::new(LabelSchema::Rk)).unwrap();
        assert_eq!(
            rows,
            vec![Annotation { onset: 0.0, duration: 30.0, stage: AnnotatedStage::Scored(StageLabel::N3) }]
        );
    }

    #[test]
    fn aasm_identity_mapping() {
        let rows = read_stage_labels("30,30,N2", LabelOptions::new(LabelSchema::Aasm)).unwrap();
        assert_eq!(rows[0].onset, 30.0);
        assert_eq!(rows[0].stage, AnnotatedStage::Scored(StageLabel::N2));
    }

    #[test]
    fn rk_mapping_is_total() {
        for (tok, want) in [
            ("W", Some(StageLabel::Wake)),
            ("1", Some(StageLabel::N1)),
            ("2", Some(StageLabel::N2)),
            ("3", Some(StageLabel::N3)),
            ("4", Some(StageLabel::N3)),
            ("R", Some(StageLabel::Rem)),
            ("Sleep stage 4", Some(StageLabel::N3)),
            ("MOVEMENT", None),
            ("UNKNOWN", None),
            ("Movement time", None),
        ] {
            assert_eq!(map_token(tok, LabelSchema::Rk).unwrap().scored(), want, "{tok}");
        }
    }

    #[test]
    fn strict_mode_rejects_unknown_tokens() {
        let text = "0,30,W\n30,30,banana\n";
        let err = read_stage_labels(text, LabelOptions::new(LabelSchema::Aasm).strict()).unwrap_err();
        assert_eq!(err, PsgError::UnknownToken { line: 2, token: "banana".into() });
        let lenient = read_stage_labels(text, LabelOptions::new(LabelSchema::Aasm)).unwrap();
        assert_eq!(lenient[1].stage, AnnotatedStage::Unscored);
        // movement is known-unscored even in strict mode
        let ok = read_stage_labels("0,30,MOVEMENT", LabelOptions::new(LabelSchema::Rk).strict()).unwrap();
        assert_eq!(ok[0].stage, AnnotatedStage::Unscored);
    }

    #[test]
    fn overlapping_rows_are_rejected() {
        let err = read_stage_labels("0,60,W\n30,30,N1\n", LabelOptions::new(LabelSchema::Aasm)).unwrap_err();
        assert!(matches!(err, PsgError::OverlappingAnnotations { .. }));
    }

    #[test]
    fn header_and_comments_are_skipped() {
        let rows = read_stage_labels(
            "onset_s,duration_s,token\n# night 1\n\n0,30,W\n",
            LabelOptions::new(LabelSchema::Aasm),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
    }
}
