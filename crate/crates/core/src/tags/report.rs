//! Deterministic JSON output: sorted keys, 17 significant digits.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use super::TagError;

/// Pretty formatter that prints every float as `d.dddddddddddddddde±x`.
struct FixedDigits<'a>(PrettyFormatter<'a>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{:.16e}", value as f64)
    }

    delegate! {
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    }
}

/// Serialises any report. Keys are emitted in sorted order because the
/// value is routed through `serde_json::Value`, whose maps are ordered.
pub fn to_json_string<T: Serialize>(report: &T) -> Result<String, TagError> {
    let value = serde_json::to_value(report)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedDigits(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

pub fn write_report<T: Serialize, W: Write>(report: &T, mut destination: W) -> Result<(), TagError> {
    destination.write_all(to_json_string(report)?.as_bytes())?;
    destination.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[derive(Serialize)]
    struct Sample {
        zeta: f64,
        alpha: Vec<f64>,
        count: u64,
        missing: f64,
    }

    #[test]
    fn sorted_keys_and_fixed_digits() {
        let s = Sample { zeta: 0.1, alpha: vec![51.216, -2.0], count: 3, missing: f64::INFINITY };
        let text = to_json_string(&s).unwrap();
        let alpha = text.find("\"alpha\"").unwrap();
        let zeta = text.find("\"zeta\"").unwrap();
        assert!(alpha < zeta);
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
        assert!(text.contains("5.1216000000000001e1"), "{text}");
        assert!(text.contains("\"count\": 3"));
        assert!(text.contains("\"missing\": null"));
        // parses back to the same numbers
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["zeta"].as_f64(), Some(0.1));
    }

    #[test]
    fn hash_map_order_does_not_leak() {
        let mut a = HashMap::new();
        let mut b = HashMap::new();
        for k in ["x", "b", "m", "a"] {
            a.insert(k, 1.5);
        }
        for k in ["a", "m", "b", "x"] {
            b.insert(k, 1.5);
        }
        assert_eq!(to_json_string(&a).unwrap(), to_json_string(&b).unwrap());
    }
}
