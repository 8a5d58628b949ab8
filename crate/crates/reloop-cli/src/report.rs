//! Deterministic JSON rendering for reports.
//!
//! Field order follows struct declaration order, and every float is written
//! with 17 significant digits so a report re-parses to bitwise-identical
//! values and repeated runs produce byte-identical files.

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

/// Renders with 17 significant digits; exact for every finite f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_json_string(report: &impl Serialize) -> Result<String> {
    let value = serde_json::to_value(report)?;
    let mut out = String::new();
    write_value(&mut out, &value);
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_f64(
                    n.as_f64().expect("JSON numbers are i64, u64, or f64"),
                ));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (key, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("strings always serialize"));
                out.push(':');
                write_value(out, item);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Sample {
        name: String,
        tau: f64,
        count: u64,
        missing: Option<f64>,
        nested: Vec<f64>,
    }

    #[test]
    fn floats_round_trip_through_seventeen_digits() {
        for v in [
            0.1,
            1.0 / 3.0,
            2.0_f64.powi(-30),
            -1234.5678,
            f64::MAX,
            5e-324,
        ] {
            let text = format_f64(v);
            let back: f64 = text.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{text}");
        }
    }

    #[test]
    fn rendering_is_stable_and_preserves_field_order() {
        let s = Sample {
            name: "a\"b".into(),
            tau: 0.5,
            count: 3,
            missing: None,
            nested: vec![1.0, -0.25],
        };
        let text = to_json_string(&s).unwrap();
        assert_eq!(
            text,
            "{\"name\":\"a\\\"b\",\"tau\":5.0000000000000000e-1,\"count\":3,\
             \"missing\":null,\"nested\":[1.0000000000000000e0,-2.5000000000000000e-1]}\n"
        );
        let parsed: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["tau"], Value::from(0.5));
    }
}
