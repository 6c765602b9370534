//! Run manifests.
//!
//! ```toml
//! out_dir = "runs"          # relative to the manifest; default "abode-out"
//! seed = 0                  # base seed; trial k uses seed + k
//! seeds = 10
//! norm_fit = "train"        # or "all"
//!
//! [train]                   # any training field; unspecified ones keep defaults
//! max_epochs = 100
//! learning_rate = 1e-3
//!
//! [[case]]
//! id = "eco-1"
//! csv = "data/eco1.csv"     # relative to the manifest
//! family = "eco"            # or "niom"
//! ```

use std::path::{Path, PathBuf};

use abode_core::data::{Family, NormFit};
use abode_core::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub csv: PathBuf,
    pub family: Family,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    seeds: Option<usize>,
    norm_fit: Option<NormFit>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(rename = "case", default)]
    cases: Vec<CaseEntry>,
}

/// A manifest with every path resolved and every default applied.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub cases: Vec<CaseEntry>,
    pub train: TrainConfig,
    pub base_seed: u64,
    pub seeds: usize,
    pub norm_fit: NormFit,
    pub out_dir: PathBuf,
}

/// Command-line values that take precedence over the manifest.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub norm_fit: Option<NormFit>,
    pub decay: Option<abode_core::training::DecayMode>,
}

impl RunManifest {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::new("manifest", format!("{}: {e}", path.display())))?;
        let raw: RawManifest =
            toml::from_str(&text).map_err(|e| CliError::new("manifest", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let mut train = raw.train;
        if let Some(v) = overrides.epochs {
            train.max_epochs = v;
        }
        if let Some(v) = overrides.lr {
            train.learning_rate = v;
        }
        if let Some(v) = overrides.weight_decay {
            train.weight_decay = v;
        }
        if let Some(v) = overrides.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = overrides.decay {
            train.decay = v;
        }
        train.validate().map_err(|e| CliError::new("manifest", e.to_string()))?;

        let mut cases = raw.cases;
        if cases.is_empty() {
            return Err(CliError::new(
                "manifest",
                format!("{}: no [[case]] entries", path.display()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &mut cases {
            if !seen.insert(c.id.clone()) {
                return Err(CliError::new("manifest", format!("duplicate case id `{}`", c.id)));
            }
            if c.id.is_empty() || c.id.contains(['/', '\\']) || c.id.starts_with('.') {
                return Err(CliError::new(
                    "manifest",
                    format!("case id `{}` is not a valid directory name", c.id),
                ));
            }
            c.csv = resolve(&c.csv);
        }
        let seeds = overrides.seeds.or(raw.seeds).unwrap_or(10);
        if seeds == 0 {
            return Err(CliError::new("manifest", "at least one seed is required"));
        }
        Ok(RunManifest {
            cases,
            train,
            base_seed: overrides.seed.or(raw.seed).unwrap_or(0),
            seeds,
            norm_fit: overrides.norm_fit.or(raw.norm_fit).unwrap_or_default(),
            out_dir: overrides
                .out
                .clone()
                .unwrap_or_else(|| resolve(raw.out_dir.as_deref().unwrap_or(Path::new("abode-out")))),
        })
    }

    /// Trial seeds: `base_seed + k` for `k` in `0..seeds`.
    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.base_seed.wrapping_add(k)).collect()
    }

    pub fn prepared_dir(&self, case: &str) -> PathBuf {
        self.out_dir.join("prepared").join(case)
    }

    pub fn archive_path(&self, case: &str, seed: u64) -> PathBuf {
        self.prepared_dir(case).join(format!("seed-{seed}.json"))
    }

    pub fn run_dir(&self, case: &str, seed: u64) -> PathBuf {
        self.out_dir.join("runs").join(case).join(format!("seed-{seed}"))
    }
}
