//! 365-day ("noleap") calendar arithmetic, seasons and year-range periods.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: i64 = 365;
pub const MONTH_LENGTHS: [u8; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// A day in the no-leap calendar, counted as `year * 365 + day_of_year`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoLeapDay(pub i64);

impl NoLeapDay {
    /// First day of `year`.
    pub fn year_start(year: i32) -> Self {
        NoLeapDay(year as i64 * DAYS_PER_YEAR)
    }

    pub fn from_ymd(year: i32, month: u8, day: u8) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > MONTH_LENGTHS[month as usize - 1] {
            return Err(Error::OutOfRange(format!("no such date {year}-{month:02}-{day:02}")));
        }
        let before: i64 = MONTH_LENGTHS[..month as usize - 1].iter().map(|&d| d as i64).sum();
        Ok(NoLeapDay(year as i64 * DAYS_PER_YEAR + before + day as i64 - 1))
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(DAYS_PER_YEAR) as i32
    }

    /// Zero-based day of year.
    pub fn day_of_year(self) -> u16 {
        self.0.rem_euclid(DAYS_PER_YEAR) as u16
    }

    /// `(month 1..=12, day of month 1..)`.
    pub fn month_day(self) -> (u8, u8) {
        let mut doy = self.day_of_year();
        for (i, &len) in MONTH_LENGTHS.iter().enumerate() {
            if doy < len as u16 {
                return (i as u8 + 1, doy as u8 + 1);
            }
            doy -= len as u16;
        }
        unreachable!("day of year below 365")
    }

    pub fn month(self) -> u8 {
        self.month_day().0
    }

    /// Decimal year at the middle of this day.
    pub fn year_fraction(self) -> f64 {
        self.year() as f64 + (self.day_of_year() as f64 + 0.5) / DAYS_PER_YEAR as f64
    }
}

impl fmt::Display for NoLeapDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, d) = self.month_day();
        write!(f, "{:04}-{m:02}-{d:02}", self.year())
    }
}

/// A set of calendar months.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Season(u16);

impl Season {
    pub fn all() -> Self {
        Season(0x0FFF)
    }

    /// June, July, August.
    pub fn summer() -> Self {
        Season::from_months(&[6, 7, 8]).expect("valid months")
    }

    /// December, January, February.
    pub fn winter() -> Self {
        Season::from_months(&[12, 1, 2]).expect("valid months")
    }

    pub fn from_months(months: &[u8]) -> Result<Self> {
        let mut mask = 0u16;
        for &m in months {
            if !(1..=12).contains(&m) {
                return Err(Error::OutOfRange(format!("month {m} not in 1..=12")));
            }
            mask |= 1 << (m - 1);
        }
        if mask == 0 {
            return Err(Error::Empty("season has no months".into()));
        }
        Ok(Season(mask))
    }

    pub fn contains(self, month: u8) -> bool {
        (1..=12).contains(&month) && self.0 & (1 << (month - 1)) != 0
    }

    pub fn months(self) -> Vec<u8> {
        (1..=12).filter(|&m| self.contains(m)).collect()
    }

    pub fn is_all(self) -> bool {
        self == Season::all()
    }

    pub fn label(self) -> String {
        if self == Season::all() {
            "all".into()
        } else if self == Season::summer() {
            "summer".into()
        } else if self == Season::winter() {
            "winter".into()
        } else {
            self.months()
                .iter()
                .map(u8::to_string)
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Season {
    type Err = Error;

    /// Accepts `all`, `summer`, `winter`, or month numbers joined by `+` or `,`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Season::all()),
            "summer" | "jja" => Ok(Season::summer()),
            "winter" | "djf" => Ok(Season::winter()),
            other => {
                let months = other
                    .split(['+', ','])
                    .map(|m| {
                        m.trim()
                            .parse::<u8>()
                            .map_err(|_| Error::OutOfRange(format!("bad season '{s}'")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Season::from_months(&months)
            }
        }
    }
}

impl From<Season> for String {
    fn from(s: Season) -> String {
        s.label()
    }
}

impl TryFrom<String> for Season {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// An inclusive range of years, optionally restricted to a season.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeriodSpec {
    pub start_year: i32,
    pub end_year: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub season: Option<Season>,
}

impl PeriodSpec {
    pub fn new(start_year: i32, end_year: i32) -> Result<Self> {
        if start_year > end_year {
            return Err(Error::OutOfRange(format!(
                "period start {start_year} after end {end_year}"
            )));
        }
        Ok(PeriodSpec {
            start_year,
            end_year,
            season: None,
        })
    }

    pub fn with_season(mut self, season: Season) -> Self {
        self.season = Some(season);
        self
    }

    pub fn years(&self) -> i32 {
        self.end_year - self.start_year + 1
    }

    pub fn contains(&self, day: NoLeapDay) -> bool {
        let y = day.year();
        y >= self.start_year
            && y <= self.end_year
            && self.season.is_none_or(|s| s.contains(day.month()))
    }

    pub fn overlaps(&self, other: &PeriodSpec) -> bool {
        self.start_year <= other.end_year && other.start_year <= self.end_year
    }

    /// `"2006-2040"` style label (season not included).
    pub fn label(&self) -> String {
        format!("{}-{}", self.start_year, self.end_year)
    }
}

impl fmt::Display for PeriodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())?;
        if let Some(s) = self.season {
            write!(f, " ({s})")?;
        }
        Ok(())
    }
}

impl FromStr for PeriodSpec {
    type Err = Error;

    /// Parses `"YYYY-YYYY"` or a single `"YYYY"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::OutOfRange(format!("bad period '{s}', expected YYYY-YYYY"));
        let (a, b) = match s.trim().split_once('-') {
            Some((a, b)) => (a, b),
            None => (s.trim(), s.trim()),
        };
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        PeriodSpec::new(a, b)
    }
}

/// Training, evaluation and climatology periods of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: PeriodSpec,
    pub eval: Vec<PeriodSpec>,
    pub climatology: PeriodSpec,
}

impl Default for DatasetSplit {
    fn default() -> Self {
        let p = |a, b| PeriodSpec::new(a, b).expect("ordered years");
        DatasetSplit {
            train: p(1980, 2002),
            eval: vec![p(2006, 2040), p(2041, 2070), p(2071, 2100)],
            climatology: p(1970, 2005),
        }
    }
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.eval.iter().find(|p| p.overlaps(&self.train)) {
            return Err(Error::InvalidConfig(format!(
                "evaluation period {p} overlaps training period {}",
                self.train
            )));
        }
        Ok(())
    }
}
