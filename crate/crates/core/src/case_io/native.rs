use serde::{Deserialize, Serialize};

use super::{CaseError, GridCase};

/// Format tag written into, and required from, every native case document.
pub const NATIVE_CASE_FORMAT: &str = "oedopf-case/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    #[serde(flatten)]
    case: GridCase,
}

pub fn parse_native_case(text: &str) -> Result<GridCase, CaseError> {
    let doc: Document = toml::from_str(text).map_err(|e| CaseError::Native(e.to_string()))?;
    if doc.format != NATIVE_CASE_FORMAT {
        return Err(CaseError::UnsupportedFeature(format!(
            "native format `{}` (expected `{NATIVE_CASE_FORMAT}`)",
            doc.format
        )));
    }
    let mut case = doc.case;
    case.validate()?;
    Ok(case)
}

pub fn write_native_case(case: &GridCase) -> String {
    let doc = Document { format: NATIVE_CASE_FORMAT.to_string(), case: case.clone() };
    toml::to_string(&doc).expect("grid case is always representable as TOML")
}
