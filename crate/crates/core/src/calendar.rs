use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Capture date at month granularity, written `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct YearMonth {
    year: i32,
    month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self, Error> {
        if !(1..=12).contains(&month) {
            return Err(Error::Domain(format!("month {month} out of range")));
        }
        if !(1..=9999).contains(&year) {
            return Err(Error::Domain(format!("year {year} out of range")));
        }
        Ok(YearMonth { year, month })
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u8 {
        self.month
    }

    /// Months since year 0, handy for arithmetic.
    pub fn ordinal(&self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    pub fn from_ordinal(ordinal: i64) -> Result<Self, Error> {
        let year = ordinal.div_euclid(12);
        let month = ordinal.rem_euclid(12) + 1;
        let year = i32::try_from(year).map_err(|_| Error::Domain(format!("ordinal {ordinal}")))?;
        YearMonth::new(year, month as u8)
    }

    pub fn add_months(&self, months: i64) -> Result<Self, Error> {
        YearMonth::from_ordinal(self.ordinal() + months)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    /// Accepts `YYYY-MM`, and `YYYY-MM-DD` with the day discarded.
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Domain(format!("invalid date {s:?}, expected YYYY-MM"));
        let mut parts = s.trim().split('-');
        let year = parts.next().ok_or_else(bad)?;
        let month = parts.next().ok_or_else(bad)?;
        if let Some(day) = parts.next() {
            day.parse::<u8>().map_err(|_| bad())?;
        }
        if parts.next().is_some() || year.len() != 4 || month.len() != 2 {
            return Err(bad());
        }
        YearMonth::new(
            year.parse().map_err(|_| bad())?,
            month.parse().map_err(|_| bad())?,
        )
    }
}

impl Serialize for YearMonth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let d: YearMonth = "2017-11".parse().unwrap();
        assert_eq!((d.year(), d.month()), (2017, 11));
        assert_eq!(d.to_string(), "2017-11");
        assert_eq!(
            "2016-03-17".parse::<YearMonth>().unwrap().to_string(),
            "2016-03"
        );
        assert!("2016-13".parse::<YearMonth>().is_err());
        assert!("16-03".parse::<YearMonth>().is_err());
        assert!("2016".parse::<YearMonth>().is_err());
    }

    #[test]
    fn ordering_is_chronological() {
        let a: YearMonth = "2017-11".parse().unwrap();
        let b: YearMonth = "2018-04".parse().unwrap();
        assert!(a < b);
        assert_eq!(a.add_months(5).unwrap(), b);
        assert_eq!(b.add_months(-5).unwrap(), a);
    }

    #[test]
    fn json_is_a_string() {
        let d: YearMonth = "2015-02".parse().unwrap();
        assert_eq!(serde_json::to_string(&d).unwrap(), "\"2015-02\"");
        let back: YearMonth = serde_json::from_str("\"2015-02\"").unwrap();
        assert_eq!(back, d);
    }
}
