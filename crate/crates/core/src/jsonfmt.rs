//! JSON writing with fixed-width float formatting.
//!
//! All persisted documents write `f64` values with 17 significant digits,
//! which round-trips every finite double exactly and keeps output bytes
//! identical across runs.

use std::io::Write;

use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::Result;

/// Format a float with 17 significant digits.
pub fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

struct SigFigFormatter;

impl Formatter for SigFigFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        if value.is_finite() {
            writer.write_all(fmt_f64(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }
}

/// Serialize to a JSON string with 17-significant-digit floats.
pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigFigFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// Write a JSON document to disk, trailing newline included.
pub fn write_file<T: Serialize>(value: &T, path: &std::path::Path) -> Result<()> {
    let mut body = to_string(value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let values = [0.5, 1.0 / 3.0, 6.25, f64::MIN_POSITIVE, -1.2345678901234567e-300];
        for &v in &values {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{s}");
        }
    }

    #[test]
    fn serializer_uses_sigfig_floats() {
        let doc = serde_json::json!({ "x": 0.5 });
        let s = to_string(&doc).unwrap();
        assert_eq!(s, "{\"x\":5.0000000000000000e-1}");
    }
}
