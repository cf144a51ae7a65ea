//! Stable machine-readable output: sorted keys, floats rounded to 12
//! significant digits, non-finite values as `null`.

use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::Result;

/// Significant digits kept for every float in JSON output.
pub const SIGNIFICANT_DIGITS: usize = 12;

/// Rounds `v` to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_significant(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let text = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v);
    text.parse().expect("formatted float parses")
}

fn normalize(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => {
            let v = round_significant(n.as_f64().expect("f64 number"));
            // -0 and 0 print the same
            let v = if v == 0.0 { 0.0 } else { v };
            Number::from_f64(v).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(normalize).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, normalize(v))).collect()),
        other => other,
    }
}

/// Converts to a JSON value with rounded floats; object keys are sorted.
pub fn stable_value<T: Serialize + ?Sized>(value: &T) -> Result<Value> {
    Ok(normalize(serde_json::to_value(value)?))
}

/// Pretty-printed stable JSON with a trailing newline.
pub fn stable_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&stable_value(value)?)?;
    text.push('\n');
    Ok(text)
}
