//! Recovery of JSON objects from free-form model text.

use serde::de::DeserializeOwned;
use serde_json::Value;

/// Yields every JSON object that starts at some `{` in `raw`, in order of
/// starting position. Prose, code fences and trailing text are skipped.
pub fn json_objects(raw: &str) -> impl Iterator<Item = Value> + '_ {
    raw.char_indices().filter(|&(_, c)| c == '{').filter_map(move |(start, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(value @ Value::Object(_))) => Some(value),
            _ => None,
        }
    })
}

/// First object in `raw` that deserializes into `T` and passes `validate`.
///
/// When nothing is accepted, the error is the first validation failure, or
/// the last shape mismatch if no candidate had the right shape.
pub fn extract<T, F>(raw: &str, validate: F) -> Result<T, String>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    let mut invalid = None;
    let mut mismatch = None;
    for candidate in json_objects(raw) {
        match serde_json::from_value::<T>(candidate) {
            Ok(parsed) => match validate(&parsed) {
                Ok(()) => return Ok(parsed),
                Err(e) => {
                    invalid.get_or_insert(e);
                }
            },
            Err(e) => mismatch = Some(e.to_string()),
        }
    }
    Err(invalid.or(mismatch).unwrap_or_else(|| "no JSON object found in reply".to_string()))
}
