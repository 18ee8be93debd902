//! Exact rational seconds used throughout the scheduling math.

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Exact rational time value (seconds).
pub type Rational = Ratio<i64>;

/// Shorthand for `num / den`.
///
/// Panics if `den` is zero.
pub fn rat(num: i64, den: i64) -> Rational {
    Ratio::new(num, den)
}

/// Integer as a rational.
pub fn int(n: i64) -> Rational {
    Ratio::from_integer(n)
}

/// Lossy conversion for display and reporting.
pub fn to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Repr {
    num: i64,
    den: i64,
}

/// Serde adapter writing a [`Rational`] as `{"num": n, "den": d}`.
pub mod serde_ratio {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Rational, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            num: *value.numer(),
            den: *value.denom(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let repr = Repr::deserialize(d)?;
        if repr.den == 0 {
            return Err(serde::de::Error::custom("rational denominator must be non-zero"));
        }
        Ok(Ratio::new(repr.num, repr.den))
    }
}

/// Wrapper that serializes as `{"num", "den"}` on its own, for use in ad-hoc JSON documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RationalJson(#[serde(with = "serde_ratio")] pub Rational);

impl From<Rational> for RationalJson {
    fn from(r: Rational) -> Self {
        RationalJson(r)
    }
}
