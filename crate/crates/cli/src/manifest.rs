use serde::Serialize;
use serde_json::{Map, Value};

/// Everything needed to rerun a command and compare its result.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: String,
    pub parameters: Map<String, Value>,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub wall_time_s: String,
    pub result: Value,
}

/// Floats become decimal strings with 17 significant digits so that
/// results round-trip exactly through JSON.
pub fn float(x: f64) -> Value {
    if x.is_finite() {
        Value::String(format!("{x:.16e}"))
    } else if x.is_nan() {
        Value::String("nan".into())
    } else if x > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

/// Serializes `value` and rewrites every non-integer number as [`float`].
pub fn to_value<T: Serialize>(value: &T) -> Value {
    stringify_floats(serde_json::to_value(value).expect("serializable"))
}

fn stringify_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => float(n.as_f64().expect("f64")),
        Value::Array(items) => Value::Array(items.into_iter().map(stringify_floats).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, stringify_floats(v))).collect()),
        other => other,
    }
}

pub fn command_line() -> String {
    std::env::args().map(|a| quote(&a)).collect::<Vec<_>>().join(" ")
}

fn quote(arg: &str) -> String {
    let plain = !arg.is_empty()
        && arg
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./=:,+".contains(c));
    if plain {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}

/// Builds a parameter map, converting floats.
#[macro_export]
macro_rules! params {
    ($($key:expr => $value:expr),* $(,)?) => {{
        let mut map = serde_json::Map::new();
        $( map.insert($key.to_string(), $crate::manifest::to_value(&$value)); )*
        map
    }};
}
