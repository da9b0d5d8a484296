//! Exact rational exponents.
//!
//! Width exponents are compared with `max` over and over while iterating the
//! increment recursions, so they are kept as reduced fractions rather than
//! floats. The textual form is `n` or `n/d` (e.g. `-3/4`), which is also the
//! serialized form.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::str::FromStr;

use num_rational::Rational64;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A power of the width `d`, stored exactly.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Exponent(Rational64);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed rational exponent {0:?}: expected `n` or `n/d` with d > 0")]
pub struct ParseExponentError(pub String);

impl Exponent {
    pub fn new(numer: i64, denom: i64) -> Self {
        assert!(denom != 0, "zero denominator");
        Exponent(Rational64::new(numer, denom))
    }

    pub fn integer(n: i64) -> Self {
        Exponent(Rational64::from_integer(n))
    }

    pub fn zero() -> Self {
        Exponent(Rational64::zero())
    }

    pub fn half() -> Self {
        Exponent::new(1, 2)
    }

    pub fn one() -> Self {
        Exponent::integer(1)
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().expect("small rationals are representable")
    }

    pub fn clamp_to(self, lo: Exponent, hi: Exponent) -> Exponent {
        self.max(lo).min(hi)
    }
}

impl Add for Exponent {
    type Output = Exponent;
    fn add(self, rhs: Exponent) -> Exponent {
        Exponent(self.0 + rhs.0)
    }
}

impl AddAssign for Exponent {
    fn add_assign(&mut self, rhs: Exponent) {
        self.0 += rhs.0;
    }
}

impl Sub for Exponent {
    type Output = Exponent;
    fn sub(self, rhs: Exponent) -> Exponent {
        Exponent(self.0 - rhs.0)
    }
}

impl Neg for Exponent {
    type Output = Exponent;
    fn neg(self) -> Exponent {
        Exponent(-self.0)
    }
}

impl Mul<i64> for Exponent {
    type Output = Exponent;
    fn mul(self, rhs: i64) -> Exponent {
        Exponent(self.0 * Rational64::from_integer(rhs))
    }
}

impl std::iter::Sum for Exponent {
    fn sum<I: Iterator<Item = Exponent>>(iter: I) -> Exponent {
        iter.fold(Exponent::zero(), |acc, q| acc + q)
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl fmt::Debug for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Exponent {
    type Err = ParseExponentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseExponentError(s.to_string());
        let t = s.trim();
        let (num, den) = match t.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (t, "1"),
        };
        let numer: i64 = num.parse().map_err(|_| err())?;
        let denom: i64 = den.parse().map_err(|_| err())?;
        if denom <= 0 {
            return Err(err());
        }
        Ok(Exponent::new(numer, denom))
    }
}

impl From<i64> for Exponent {
    fn from(n: i64) -> Self {
        Exponent::integer(n)
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Shorthand for `Exponent::new`.
pub fn q(numer: i64, denom: i64) -> Exponent {
    Exponent::new(numer, denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fractions_and_integers() {
        assert_eq!("-3/4".parse::<Exponent>().unwrap(), q(-3, 4));
        assert_eq!("2".parse::<Exponent>().unwrap(), Exponent::integer(2));
        assert_eq!(" 2/4 ".parse::<Exponent>().unwrap(), q(1, 2));
        assert_eq!("3/-4".parse::<Exponent>().ok(), None);
        assert!("1/0".parse::<Exponent>().is_err());
        assert!("0.5".parse::<Exponent>().is_err());
        assert!("".parse::<Exponent>().is_err());
    }

    #[test]
    fn display_is_reduced() {
        assert_eq!(q(-6, 8).to_string(), "-3/4");
        assert_eq!(q(4, 2).to_string(), "2");
        assert_eq!(Exponent::zero().to_string(), "0");
    }

    #[test]
    fn serde_uses_strings() {
        let json = serde_json::to_string(&q(-1, 2)).unwrap();
        assert_eq!(json, "\"-1/2\"");
        let back: Exponent = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q(-1, 2));
    }
}
