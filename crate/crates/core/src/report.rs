//! Stable report formatting: every real number is written with exactly six
//! decimals, JSON objects have sorted keys, and files end with a newline,
//! so identical inputs produce byte-identical reports.

use serde::Serialize;
use serde_json::{Map, Number, Value};

/// Placeholder for undefined ratios in CSV output.
pub const NA: &str = "NA";

pub fn fixed6(x: f64) -> String {
    // Normalise negative zero so "-0.000000" never appears.
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

pub fn fixed6_or_na(x: Option<f64>) -> String {
    x.map(fixed6).unwrap_or_else(|| NA.to_string())
}

/// A JSON number printed as `fixed6(x)`; non-finite values become null.
pub fn number(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    Value::Number(fixed6(x).parse::<Number>().expect("fixed-point text is a valid JSON number"))
}

pub fn optional_number(x: Option<f64>) -> Value {
    x.map(number).unwrap_or(Value::Null)
}

/// Re-encodes every float in a serialised value at six decimals.
/// Integers are left alone.
pub fn normalize_numbers(value: Value) -> Value {
    match value {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => n.as_f64().map(number).unwrap_or(Value::Number(n)),
        Value::Array(items) => Value::Array(items.into_iter().map(normalize_numbers).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, normalize_numbers(v))).collect()),
        other => other,
    }
}

/// Serialises any value with sorted keys and fixed-point floats.
pub fn to_stable_value<T: Serialize>(value: &T) -> Result<Value, serde_json::Error> {
    serde_json::to_value(value).map(normalize_numbers)
}

pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = to_stable_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn object<I, K>(entries: I) -> Value
where
    I: IntoIterator<Item = (K, Value)>,
    K: Into<String>,
{
    Value::Object(entries.into_iter().map(|(k, v)| (k.into(), v)).collect::<Map<_, _>>())
}
