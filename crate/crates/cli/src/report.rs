//! Machine-readable emission helpers.
//!
//! All numeric output carries 12 significant digits: CSV cells print in
//! scientific form directly, JSON numbers are rounded to 12 significant
//! digits before serialization (their shortest representation then never
//! exceeds those digits).

use serde_json::Value;

/// 12-significant-digit decimal form, parseable back into `f64`.
pub fn sig12(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{x:.11e}")
}

/// Nearest double to the 12-significant-digit decimal rounding of `x`.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float reparses")
}

/// JSON value for a float: a rounded number, or a string for non-finite
/// values (JSON has no infinity literal).
pub fn json_f64(x: f64) -> Value {
    match serde_json::Number::from_f64(round12(x)) {
        Some(n) => Value::Number(n),
        None => Value::String(sig12(x)),
    }
}

/// JSON array from a matrix of floats, rounded.
pub fn json_matrix(rows: &[Vec<f64>]) -> Value {
    Value::Array(
        rows.iter()
            .map(|row| Value::Array(row.iter().map(|&x| json_f64(x)).collect()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(sig12(0.8), "8.00000000000e-1");
        assert_eq!(sig12(1.3), "1.30000000000e0");
        assert_eq!(sig12(f64::INFINITY), "inf");
        let x = std::f64::consts::PI * 1e6;
        assert_eq!(sig12(x).parse::<f64>().unwrap(), round12(x));
    }

    #[test]
    fn json_rounding_is_stable() {
        assert_eq!(json_f64(0.8), serde_json::json!(0.8));
        assert_eq!(json_f64(f64::INFINITY), serde_json::json!("inf"));
        let v = json_f64(1.0 / 3.0);
        assert_eq!(v.as_f64().unwrap(), round12(1.0 / 3.0));
    }
}
