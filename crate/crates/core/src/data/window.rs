//! Hour windows and case qualification.

use serde::{Deserialize, Serialize};

use super::series::MeterSeries;

/// Minutes per window.
pub const WINDOW_MINUTES: usize = 60;
/// Feature rows per window: power, minute of day, day of week.
pub const FEATURE_ROWS: usize = 3;
pub const MINUTES_PER_DAY: i64 = 1440;

/// A labelled `3 × 60` feature matrix stored row-major: the power row,
/// then the minute-of-day row (0..=1439), then the day-of-week row
/// (Monday = 0 ..= Sunday = 6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    /// Position of the window among the case's kept windows.
    pub index: usize,
    /// First minute of the window, in minutes since the Unix epoch.
    pub start_minute: i64,
    pub features: Vec<f64>,
    pub occupied: bool,
}

impl WindowSample {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * WINDOW_MINUTES..(r + 1) * WINDOW_MINUTES]
    }
}

pub fn minute_of_day(minute: i64) -> i64 {
    minute.rem_euclid(MINUTES_PER_DAY)
}

/// Day of week with Monday = 0. The Unix epoch fell on a Thursday.
pub fn day_of_week(minute: i64) -> i64 {
    (minute.div_euclid(MINUTES_PER_DAY) + 3).rem_euclid(7)
}

/// Cuts the series into non-overlapping 60-minute windows aligned to its
/// first record. Windows with any missing minute and the trailing partial
/// window are dropped. The label is the majority occupancy, with a 30/30
/// split counted as occupied.
pub fn build_windows(series: &MeterSeries) -> Vec<WindowSample> {
    let Some(first) = series.records.first() else {
        return Vec::new();
    };
    let start = first.minute;
    let mut out = Vec::new();
    let mut i = 0;
    let records = &series.records;
    let mut window_start = start;
    while i < records.len() {
        let window_end = window_start + WINDOW_MINUTES as i64;
        let lo = i;
        while i < records.len() && records[i].minute < window_end {
            i += 1;
        }
        let slice = &records[lo..i];
        if slice.len() == WINDOW_MINUTES {
            let mut features = Vec::with_capacity(FEATURE_ROWS * WINDOW_MINUTES);
            features.extend(slice.iter().map(|r| r.power_w));
            features.extend(slice.iter().map(|r| minute_of_day(r.minute) as f64));
            features.extend(slice.iter().map(|r| day_of_week(r.minute) as f64));
            let occupied = slice.iter().filter(|r| r.occupied).count();
            out.push(WindowSample {
                index: out.len(),
                start_minute: window_start,
                features,
                occupied: 2 * occupied >= WINDOW_MINUTES,
            });
        }
        // Jump straight to the window holding the next record.
        if let Some(next) = records.get(i) {
            let skipped = (next.minute - window_start) / WINDOW_MINUTES as i64;
            window_start += skipped * WINDOW_MINUTES as i64;
        }
    }
    out
}

/// Dataset family; the length rule applies to ECO cases only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Eco,
    Niom,
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "eco" => Ok(Family::Eco),
            "niom" => Ok(Family::Niom),
            other => Err(format!("unknown dataset family `{other}` (expected eco or niom)")),
        }
    }
}

/// ECO cases need strictly more windows than this.
pub const MIN_SAMPLES: usize = 900;
/// Each class needs strictly more than this share of the windows.
pub const MIN_CLASS_SHARE: f64 = 0.10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub occupied: usize,
    pub vacant: usize,
}

impl ClassCounts {
    pub fn of(samples: &[WindowSample]) -> Self {
        let occupied = samples.iter().filter(|s| s.occupied).count();
        ClassCounts {
            occupied,
            vacant: samples.len() - occupied,
        }
    }

    pub fn total(&self) -> usize {
        self.occupied + self.vacant
    }

    pub fn minority_share(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.occupied.min(self.vacant) as f64 / self.total() as f64
    }
}

/// Why a case was rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Disqualification {
    TooFewSamples {
        samples: usize,
        required_more_than: usize,
    },
    ClassShare {
        class: String,
        share: f64,
        required_more_than: f64,
    },
}

impl std::fmt::Display for Disqualification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Disqualification::TooFewSamples {
                samples,
                required_more_than,
            } => {
                write!(f, "{samples} samples (need more than {required_more_than})")
            }
            Disqualification::ClassShare {
                class,
                share,
                required_more_than,
            } => write!(
                f,
                "{class} share {:.1}% (need more than {:.0}%)",
                share * 100.0,
                required_more_than * 100.0
            ),
        }
    }
}

/// Checks the qualification rules, returning every violated one.
pub fn qualify(counts: ClassCounts, family: Family) -> Result<(), Vec<Disqualification>> {
    let mut failures = Vec::new();
    let total = counts.total();
    if family == Family::Eco && total <= MIN_SAMPLES {
        failures.push(Disqualification::TooFewSamples {
            samples: total,
            required_more_than: MIN_SAMPLES,
        });
    }
    for (class, n) in [("occupied", counts.occupied), ("vacant", counts.vacant)] {
        let share = if total == 0 { 0.0 } else { n as f64 / total as f64 };
        if share <= MIN_CLASS_SHARE {
            failures.push(Disqualification::ClassShare {
                class: class.into(),
                share,
                required_more_than: MIN_CLASS_SHARE,
            });
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}
