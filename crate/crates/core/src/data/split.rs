//! Random 3:1:1 split, min-max scaling and minority oversampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::{ClassCounts, WindowSample, FEATURE_ROWS, WINDOW_MINUTES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which windows the min-max statistics are fitted on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormFit {
    /// Training split only (before oversampling).
    #[default]
    Train,
    /// Every window of the case, before splitting.
    All,
}

impl std::str::FromStr for NormFit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(NormFit::Train),
            "all" => Ok(NormFit::All),
            other => Err(format!("unknown normalization fit `{other}` (expected train or all)")),
        }
    }
}

/// Per-feature-row minimum and maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: [f64; FEATURE_ROWS],
    pub max: [f64; FEATURE_ROWS],
}

impl MinMax {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a WindowSample>) -> Self {
        let mut min = [f64::INFINITY; FEATURE_ROWS];
        let mut max = [f64::NEG_INFINITY; FEATURE_ROWS];
        for s in samples {
            for r in 0..FEATURE_ROWS {
                for &v in s.row(r) {
                    min[r] = min[r].min(v);
                    max[r] = max[r].max(v);
                }
            }
        }
        MinMax { min, max }
    }

    /// Scales every row into `[0, 1]`, clamping values outside the fitted
    /// range. A row whose fitted range is empty maps to 0.
    pub fn apply(&self, sample: &mut WindowSample) {
        for r in 0..FEATURE_ROWS {
            let span = self.max[r] - self.min[r];
            let row = &mut sample.features[r * WINDOW_MINUTES..(r + 1) * WINDOW_MINUTES];
            for v in row {
                *v = if span > 0.0 {
                    ((*v - self.min[r]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
    }
}

/// One seeded, ready-to-train partition of a case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCase {
    pub id: String,
    pub seed: u64,
    pub norm_fit: NormFit,
    pub normalization: MinMax,
    /// Class counts of all windows.
    pub counts: ClassCounts,
    /// Training class counts before oversampling.
    pub train_counts_raw: ClassCounts,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Split sizes for a 3:1:1 ratio; the test split absorbs the rounding.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.6).round() as usize;
    let val = ((n as f64 * 0.2).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Shuffles the windows with `seed`, splits them 3:1:1, fits min-max
/// scaling, oversamples the training minority class with replacement to
/// parity and shuffles the training set.
pub fn split_normalize_oversample(
    id: &str,
    windows: &[WindowSample],
    seed: u64,
    norm_fit: NormFit,
) -> Result<DatasetCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(windows.len());
    let take = |ix: &[usize]| ix.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    let mut train = take(&order[..n_train]);
    let mut val = take(&order[n_train..n_train + n_val]);
    let mut test = take(&order[n_train + n_val..]);

    let train_counts_raw = ClassCounts::of(&train);
    if train_counts_raw.occupied == 0 || train_counts_raw.vacant == 0 {
        return Err(Error::Data(format!(
            "case {id}: training split holds a single class ({} occupied, {} vacant)",
            train_counts_raw.occupied, train_counts_raw.vacant
        )));
    }
    let normalization = match norm_fit {
        NormFit::Train => MinMax::fit(&train),
        NormFit::All => MinMax::fit(windows),
    };
    for s in train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()) {
        normalization.apply(s);
    }

    let minority_occupied = train_counts_raw.occupied < train_counts_raw.vacant;
    let pool: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].occupied == minority_occupied)
        .collect();
    let deficit = train_counts_raw.occupied.abs_diff(train_counts_raw.vacant);
    for _ in 0..deficit {
        let pick = pool[rng.gen_range(0..pool.len())];
        train.push(train[pick].clone());
    }
    train.shuffle(&mut rng);

    Ok(DatasetCase {
        id: id.to_string(),
        seed,
        norm_fit,
        normalization,
        counts: ClassCounts::of(windows),
        train_counts_raw,
        train,
        val,
        test,
    })
}

/// Stacks samples into an `[N, 1, 3, 60]` input tensor.
pub fn to_input(samples: &[&WindowSample]) -> Tensor {
    let per = FEATURE_ROWS * WINDOW_MINUTES;
    let mut data = Vec::with_capacity(samples.len() * per);
    for s in samples {
        data.extend_from_slice(&s.features);
    }
    Tensor::new([samples.len(), 1, FEATURE_ROWS, WINDOW_MINUTES], data).expect("fixed window size")
}

/// One-hot `[N, 2]` targets with the occupied class at index 1.
pub fn to_targets(samples: &[&WindowSample]) -> Tensor {
    let mut t = Tensor::zeros([samples.len(), 2]);
    for (n, s) in samples.iter().enumerate() {
        t.data_mut()[2 * n + usize::from(s.occupied)] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn windows(n: usize, occupied_every: usize) -> Vec<WindowSample> {
        (0..n)
            .map(|i| WindowSample {
                index: i,
                start_minute: 60 * i as i64,
                features: (0..180).map(|j| (i * 7 + j) as f64 % 101.0).collect(),
                occupied: i % occupied_every != 0,
            })
            .collect()
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(split_sizes(1000), (600, 200, 200));
        assert_eq!(split_sizes(937), (562, 187, 188));
        assert_eq!(split_sizes(168), (101, 34, 33));
        assert_eq!(split_sizes(2), (1, 0, 1));
    }

    #[test]
    fn oversampling_reaches_parity_with_duplicates_only() {
        let w = windows(1000, 4);
        let case = split_normalize_oversample("c", &w, 3, NormFit::Train).unwrap();
        assert_eq!((case.val.len(), case.test.len()), (200, 200));
        let c = ClassCounts::of(&case.train);
        assert_eq!(c.occupied, c.vacant);
        assert_eq!(
            c.occupied,
            case.train_counts_raw.occupied.max(case.train_counts_raw.vacant)
        );
        let distinct: HashSet<usize> = case.train.iter().map(|s| s.index).collect();
        assert_eq!(distinct.len(), 600);
    }

    #[test]
    fn fixed_minority_counts_are_balanced() {
        // 450 occupied / 150 vacant in training → 450 / 450.
        let mut w = windows(1000, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let case = loop {
            w.iter_mut().for_each(|s| s.occupied = rng.gen_bool(0.75));
            let c = split_normalize_oversample("c", &w, 1, NormFit::Train).unwrap();
            if c.train_counts_raw
                == (ClassCounts {
                    occupied: 450,
                    vacant: 150,
                })
            {
                break c;
            }
        };
        assert_eq!(
            ClassCounts::of(&case.train),
            ClassCounts {
                occupied: 450,
                vacant: 450
            }
        );
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let w = windows(500, 3);
        let a = split_normalize_oversample("c", &w, 9, NormFit::Train).unwrap();
        let b = split_normalize_oversample("c", &w, 9, NormFit::Train).unwrap();
        assert_eq!(a, b);
        let set = |s: &[WindowSample]| s.iter().map(|w| w.index).collect::<HashSet<_>>();
        let (tr, va, te) = (set(&a.train), set(&a.val), set(&a.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(tr.len() + va.len() + te.len(), 500);
        let c = split_normalize_oversample("c", &w, 10, NormFit::Train).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn normalization_is_fitted_on_train_and_clamped() {
        let w = windows(300, 2);
        let case = split_normalize_oversample("c", &w, 5, NormFit::Train).unwrap();
        let raw_train: Vec<&WindowSample> = case.train.iter().map(|s| &w[s.index]).collect();
        let fit = MinMax::fit(raw_train.iter().copied());
        assert_eq!(fit, case.normalization);
        for s in case.train.iter().chain(&case.val).chain(&case.test) {
            assert!(s.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let all = split_normalize_oversample("c", &w, 5, NormFit::All).unwrap();
        assert_eq!(all.normalization, MinMax::fit(&w));
    }

    #[test]
    fn out_of_range_values_clamp_and_flat_rows_zero() {
        let fit = MinMax {
            min: [0.0, 5.0, 2.0],
            max: [10.0, 5.0, 4.0],
        };
        let mut s = WindowSample {
            index: 0,
            start_minute: 0,
            features: [vec![-5.0; 60], vec![7.0; 60], vec![3.0; 60]].concat(),
            occupied: true,
        };
        fit.apply(&mut s);
        assert!(s.row(0).iter().all(|&v| v == 0.0));
        assert!(s.row(1).iter().all(|&v| v == 0.0));
        assert!(s.row(2).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_class_training_split_is_rejected() {
        let w = windows(50, 1000);
        let mut all_occupied = w.clone();
        all_occupied.iter_mut().for_each(|s| s.occupied = true);
        let err = split_normalize_oversample("solo", &all_occupied, 0, NormFit::Train).unwrap_err();
        assert!(err.to_string().contains("single class"));
    }

    #[test]
    fn tensors_follow_sample_order() {
        let w = windows(3, 2);
        let refs: Vec<&WindowSample> = w.iter().collect();
        let x = to_input(&refs);
        assert_eq!(x.shape(), &[3, 1, 3, 60]);
        assert_eq!(x.data()[180..360], w[1].features[..]);
        assert_eq!(to_targets(&refs).data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_window_lands_in_exactly_one_split(n in 60usize..300, seed in any::<u64>()) {
            let w = windows(n, 3);
            let case = split_normalize_oversample("p", &w, seed, NormFit::Train).unwrap();
            let mut seen = vec![0usize; n];
            let unique_train: HashSet<usize> = case.train.iter().map(|s| s.index).collect();
            for i in unique_train.into_iter().chain(case.val.iter().chain(&case.test).map(|s| s.index)) {
                seen[i] += 1;
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let c = ClassCounts::of(&case.train);
            prop_assert_eq!(c.occupied, c.vacant);
        }
    }
}
