//! Scalar and structured values stored in databases and passed as tool arguments.
//!
//! Floating point is never stored. Non-integral numbers are kept as
//! [`Decimal`] with an explicit scale so that money amounts compare exactly
//! and hash identically on every platform.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// JSON object key used to carry a decimal through serialization.
pub const DECIMAL_TAG: &str = "$decimal";

/// Wildcard argument value accepted by groundtruth action patterns.
pub const WILDCARD: &str = "*";

/// A base-10 fixed point number: `units / 10^scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decimal {
    pub units: i64,
    pub scale: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal literal {0:?}")]
pub struct DecimalParseError(pub String);

impl Decimal {
    pub const fn new(units: i64, scale: u32) -> Self {
        Self { units, scale }
    }

    pub const fn from_int(units: i64) -> Self {
        Self { units, scale: 0 }
    }

    /// Returns the integer value when the fractional part is zero.
    pub fn to_integer(self) -> Option<i64> {
        let factor = 10i128.checked_pow(self.scale)?;
        let units = self.units as i128;
        if units % factor == 0 {
            i64::try_from(units / factor).ok()
        } else {
            None
        }
    }

    /// Compares numerically, ignoring scale (`1.50 == 1.5`).
    pub fn numeric_cmp(&self, other: &Decimal) -> Ordering {
        let (a, b) = align(*self, *other);
        a.cmp(&b)
    }

    pub fn to_f64(self) -> f64 {
        self.units as f64 / 10f64.powi(self.scale as i32)
    }
}

fn align(a: Decimal, b: Decimal) -> (i128, i128) {
    let scale = a.scale.max(b.scale);
    let up = |d: Decimal| (d.units as i128) * 10i128.pow(scale - d.scale);
    (up(a), up(b))
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.units);
        }
        let sign = if self.units < 0 { "-" } else { "" };
        let digits = self.units.unsigned_abs().to_string();
        let scale = self.scale as usize;
        let padded = if digits.len() <= scale {
            format!("{}{}", "0".repeat(scale + 1 - digits.len()), digits)
        } else {
            digits
        };
        let (int, frac) = padded.split_at(padded.len() - scale);
        write!(f, "{sign}{int}.{frac}")
    }
}

impl FromStr for Decimal {
    type Err = DecimalParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || DecimalParseError(s.to_string());
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) || (body.contains('.') && frac.is_empty()) {
            return Err(err());
        }
        let magnitude: i64 = format!("{int}{frac}").parse().map_err(|_| err())?;
        Ok(Decimal {
            units: if negative { -magnitude } else { magnitude },
            scale: frac.len() as u32,
        })
    }
}

impl Serialize for Decimal {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DecimalVisitor;

        impl Visitor<'_> for DecimalVisitor {
            type Value = Decimal;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a decimal string or number")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Decimal, E> {
                v.parse().map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Decimal, E> {
                Ok(Decimal::from_int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Decimal, E> {
                i64::try_from(v).map(Decimal::from_int).map_err(E::custom)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Decimal, E> {
                format!("{v:?}").parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(DecimalVisitor)
    }
}

/// A value in the environment's data model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Value {
    #[default]
    Null,
    Bool(bool),
    Int(i64),
    Decimal(Decimal),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    pub fn str(s: impl Into<String>) -> Self {
        Value::Str(s.into())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Decimal(d) => d.to_integer(),
            _ => None,
        }
    }

    pub fn is_wildcard(&self) -> bool {
        matches!(self, Value::Str(s) if s == WILDCARD)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Decimal(_) => "decimal",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "object",
        }
    }

    /// Equality used by grading: integers and decimals compare by numeric
    /// value, everything else structurally.
    pub fn numeric_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Int(a), Value::Decimal(b)) | (Value::Decimal(b), Value::Int(a)) => {
                Decimal::from_int(*a).numeric_cmp(b) == Ordering::Equal
            }
            (Value::Decimal(a), Value::Decimal(b)) => a.numeric_cmp(b) == Ordering::Equal,
            (Value::List(a), Value::List(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.numeric_eq(y)),
            (Value::Map(a), Value::Map(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|((ka, va), (kb, vb))| ka == kb && va.numeric_eq(vb))
            }
            _ => self == other,
        }
    }

    /// Compact human-readable rendering used in transcripts and explanations.
    pub fn render(&self) -> String {
        match self {
            Value::Null => "null".into(),
            Value::Bool(b) => b.to_string(),
            Value::Int(i) => i.to_string(),
            Value::Decimal(d) => d.to_string(),
            Value::Str(s) => s.clone(),
            Value::List(items) => {
                let inner: Vec<String> = items.iter().map(Value::render).collect();
                format!("[{}]", inner.join(", "))
            }
            Value::Map(map) => {
                let inner: Vec<String> = map.iter().map(|(k, v)| format!("{k}: {}", v.render())).collect();
                format!("{{{}}}", inner.join(", "))
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("value serialization is infallible")
    }

    pub fn from_json(json: &serde_json::Value) -> Result<Value, serde_json::Error> {
        Value::deserialize(json)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl<T: Into<Value>> From<Vec<T>> for Value {
    fn from(items: Vec<T>) -> Self {
        Value::List(items.into_iter().map(Into::into).collect())
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Null => serializer.serialize_unit(),
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Int(i) => serializer.serialize_i64(*i),
            Value::Decimal(d) => {
                let mut map = serializer.serialize_map(Some(1))?;
                map.serialize_entry(DECIMAL_TAG, &d.to_string())?;
                map.end()
            }
            Value::Str(s) => serializer.serialize_str(s),
            Value::List(items) => {
                let mut seq = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    seq.serialize_element(item)?;
                }
                seq.end()
            }
            Value::Map(entries) => {
                let mut map = serializer.serialize_map(Some(entries.len()))?;
                for (k, v) in entries {
                    map.serialize_entry(k, v)?;
                }
                map.end()
            }
        }
    }
}

struct ValueVisitor;

impl<'de> Visitor<'de> for ValueVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a JSON value without non-finite numbers")
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_some<D: Deserializer<'de>>(self, d: D) -> Result<Value, D::Error> {
        Value::deserialize(d)
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::Int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
        i64::try_from(v)
            .map(Value::Int)
            .map_err(|_| E::custom(format!("integer {v} out of range")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        if !v.is_finite() {
            return Err(E::custom("non-finite numbers are not representable"));
        }
        // Shortest round-trip representation, never exponent notation for
        // the magnitudes that appear in tool arguments.
        let text = format!("{v}");
        text.parse::<Decimal>()
            .map(Value::Decimal)
            .map_err(|e| E::custom(e.to_string()))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::Str(v.to_string()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::Str(v))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element()? {
            items.push(item);
        }
        Ok(Value::List(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = BTreeMap::new();
        while let Some((k, v)) = access.next_entry::<String, Value>()? {
            map.insert(k, v);
        }
        if map.len() == 1 {
            if let Some(Value::Str(text)) = map.get(DECIMAL_TAG) {
                return text
                    .parse::<Decimal>()
                    .map(Value::Decimal)
                    .map_err(|e| de::Error::custom(e.to_string()));
            }
        }
        Ok(Value::Map(map))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Value, D::Error> {
        deserializer.deserialize_any(ValueVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_display_and_parse() {
        for text in ["0", "12.50", "-0.05", "1628", "0.1"] {
            let d: Decimal = text.parse().unwrap();
            assert_eq!(d.to_string(), text);
        }
        assert!("1.".parse::<Decimal>().is_err());
        assert!("abc".parse::<Decimal>().is_err());
        assert!("1e5".parse::<Decimal>().is_err());
    }

    #[test]
    fn decimal_numeric_comparison_ignores_scale() {
        let a = Decimal::new(150, 2);
        let b = Decimal::new(15, 1);
        assert_eq!(a.numeric_cmp(&b), Ordering::Equal);
        assert_ne!(a, b);
        assert_eq!(Decimal::new(5000, 2).to_integer(), Some(50));
        assert_eq!(Decimal::new(5001, 2).to_integer(), None);
    }

    #[test]
    fn decimal_survives_json() {
        let v = Value::Decimal(Decimal::new(1250, 2));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"$decimal":"12.50"}"#);
        assert_eq!(serde_json::from_str::<Value>(&json).unwrap(), v);
    }

    #[test]
    fn json_floats_become_decimals() {
        let v: Value = serde_json::from_str("50.5").unwrap();
        assert_eq!(v, Value::Decimal(Decimal::new(505, 1)));
        let v: Value = serde_json::from_str("50.0").unwrap();
        assert_eq!(v.as_int(), Some(50));
    }

    #[test]
    fn numeric_eq_crosses_int_and_decimal() {
        assert!(Value::Int(50).numeric_eq(&Value::Decimal(Decimal::new(500, 1))));
        assert!(!Value::Int(50).numeric_eq(&Value::str("50")));
    }
}
