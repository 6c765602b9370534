//! Synthetic households for pipeline and learning tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::series::{MeterSeries, MinuteRecord};
use super::window::{day_of_week, minute_of_day, MINUTES_PER_DAY};

/// How occupancy is scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Weekday commute with jittered departure and return, plus random
    /// weekend outings.
    Routine {
        leave_hour: f64,
        return_hour: f64,
        jitter_hours: f64,
        weekend_outing_probability: f64,
    },
    /// Two-state Markov chain independent of the clock, with the given
    /// mean stay lengths in minutes.
    Random {
        mean_occupied_minutes: f64,
        mean_vacant_minutes: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub days: usize,
    /// First minute, in minutes since the Unix epoch.
    pub start_minute: i64,
    /// Always-on load in watts.
    pub base_load_w: f64,
    /// Standard deviation of the base-load noise.
    pub base_noise_w: f64,
    /// Mean extra load while someone is home.
    pub appliance_load_w: f64,
    pub schedule: Schedule,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            days: 42,
            // 2024-01-01 00:00 UTC, a Monday.
            start_minute: 28_401_120,
            base_load_w: 60.0,
            base_noise_w: 10.0,
            appliance_load_w: 400.0,
            schedule: Schedule::Routine {
                leave_hour: 8.0,
                return_hour: 17.5,
                jitter_hours: 1.0,
                weekend_outing_probability: 0.6,
            },
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn occupancy(profile: &SynthProfile, rng: &mut impl Rng) -> Vec<bool> {
    let minutes = profile.days * MINUTES_PER_DAY as usize;
    match profile.schedule {
        Schedule::Routine {
            leave_hour,
            return_hour,
            jitter_hours,
            weekend_outing_probability,
        } => {
            let mut occ = vec![true; minutes];
            let jitter = |rng: &mut dyn rand::RngCore| rng.gen_range(-jitter_hours..=jitter_hours);
            for day in 0..profile.days {
                let first = profile.start_minute + (day as i64) * MINUTES_PER_DAY;
                let away = if day_of_week(first) < 5 {
                    Some((leave_hour + jitter(rng), return_hour + jitter(rng)))
                } else if rng.gen_bool(weekend_outing_probability) {
                    let start = rng.gen_range(10.0..16.0);
                    Some((start, start + rng.gen_range(2.0..5.0)))
                } else {
                    None
                };
                if let Some((from, to)) = away {
                    let (from, to) = ((from * 60.0) as usize, ((to * 60.0) as usize).min(1440));
                    let base = day * MINUTES_PER_DAY as usize;
                    occ[base + from..base + to].iter_mut().for_each(|o| *o = false);
                }
            }
            occ
        }
        Schedule::Random {
            mean_occupied_minutes,
            mean_vacant_minutes,
        } => {
            let mut state = rng.gen_bool(mean_occupied_minutes / (mean_occupied_minutes + mean_vacant_minutes));
            (0..minutes)
                .map(|_| {
                    let mean = if state {
                        mean_occupied_minutes
                    } else {
                        mean_vacant_minutes
                    };
                    let current = state;
                    if rng.gen_bool((1.0 / mean).min(1.0)) {
                        state = !state;
                    }
                    current
                })
                .collect()
        }
    }
}

/// Generates a minute series. Occupied minutes draw an appliance load
/// around `appliance_load_w` on top of the noisy base load, so power and
/// occupancy are correlated unless that load is zero.
pub fn synth_series(profile: &SynthProfile, seed: u64) -> MeterSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ = occupancy(profile, &mut rng);
    let records = occ
        .iter()
        .enumerate()
        .map(|(i, &occupied)| {
            let minute = profile.start_minute + i as i64;
            let mut power = profile.base_load_w + profile.base_noise_w * gaussian(&mut rng);
            if occupied && profile.appliance_load_w > 0.0 {
                // Evening use runs heavier than daytime use.
                let evening = (17 * 60..23 * 60).contains(&minute_of_day(minute));
                let level = if evening { 1.2 } else { 0.8 };
                power += profile.appliance_load_w * level * rng.gen_range(0.5..1.5);
            }
            MinuteRecord {
                minute,
                power_w: power.max(0.0),
                occupied,
            }
        })
        .collect();
    MeterSeries {
        household: format!("synth-{seed}"),
        period: String::new(),
        records,
    }
}
