pub mod checkpoint;
pub mod corpus;
pub mod labels;
pub mod vocab;

use std::path::Path;

use serde::Serialize;

use crate::error::FormatError;

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut s = serde_json::to_string_pretty(value).map_err(FormatError::json(path))?;
    s.push('\n');
    corpus::write_file(path, s.as_bytes())
}
