//! From meter CSV exports to balanced, normalized train/validation/test
//! windows.
//!
//! ```text
//! CSV → readings → minutes → hour windows → qualification
//!     → 3:1:1 split → min-max scaling → oversampled training set
//! ```

mod series;
mod split;
mod synth;
mod window;

pub use series::{aggregate_to_minutes, load_series, read_readings, write_series, MeterSeries, MinuteRecord, Reading};
pub use split::{split_normalize_oversample, split_sizes, to_input, to_targets, DatasetCase, MinMax, NormFit};
pub use synth::{synth_series, Schedule, SynthProfile};
pub use window::{
    build_windows, day_of_week, minute_of_day, qualify, ClassCounts, Disqualification, Family, WindowSample,
    FEATURE_ROWS, MIN_CLASS_SHARE, MIN_SAMPLES, WINDOW_MINUTES,
};
