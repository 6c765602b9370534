//! Subcommand definitions and implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use abode_core::checkpoint::Checkpoint;
use abode_core::data::{
    build_windows, load_series, qualify, split_normalize_oversample, synth_series, write_series, ClassCounts,
    DatasetCase, Disqualification, Family, NormFit, SynthProfile,
};
use abode_core::eval::{aggregate, summary_table, write_results_csv, MetricsRecord};
use abode_core::gradcheck::{check_model, GradcheckOptions, GradcheckReport};
use abode_core::model::ModelConfig;
use abode_core::tensor::Fault;
use abode_core::training::{evaluate, train_case, write_log_csv, DecayMode, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::manifest::{Overrides, RunManifest};
use crate::CliError;

pub const ARCHIVE_FORMAT: &str = "abode-net-prepared";
pub const ARCHIVE_VERSION: u32 = 1;
/// Model name used in results files and summary tables.
pub const MODEL_NAME: &str = "ABODE-Net";

#[derive(Debug, Parser)]
#[command(
    name = "abode",
    version,
    about = "Occupancy detection from smart-meter load profiles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build windows, check case qualification and write per-seed splits.
    Prepare(RunArgs),
    /// Train one network per (case, seed) and keep the best-validation checkpoint.
    Train(RunArgs),
    /// Score checkpoints on their test splits and write results.
    Eval(RunArgs),
    /// Compare backpropagated gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic household in the meter CSV schema.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base seed; trial k uses seed + k.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trials per case.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output directory (defaults to the manifest's `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "all"])]
    pub norm_fit: Option<String>,
    #[arg(long, value_parser = ["coupled", "decoupled"])]
    pub decay: Option<String>,
    /// Test hook: `nan:<case>:<seed>` poisons one training run's inputs.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn parse_opt<T: std::str::FromStr<Err = String>>(s: &Option<String>) -> Result<Option<T>, CliError> {
    s.as_deref()
        .map(str::parse)
        .transpose()
        .map_err(|e| CliError::new("usage", e))
}

impl RunArgs {
    fn manifest(&self) -> Result<RunManifest, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            seeds: self.seeds,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            out: self.out.clone(),
            norm_fit: parse_opt::<NormFit>(&self.norm_fit)?,
            decay: parse_opt::<DecayMode>(&self.decay)?,
        };
        RunManifest::load(&self.manifest, &overrides)
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 24)]
    pub coords: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Print the full report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Test hook: `sigmoid` scales the sigmoid derivative by 2.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML profile; keys not given keep their defaults.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Mean appliance load in watts while occupied.
    #[arg(long)]
    pub appliance_load: Option<f64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(a) => prepare(&a.manifest()?),
        Command::Train(a) => {
            let fault = a.inject_fault.as_deref().map(parse_nan_fault).transpose()?;
            train(&a.manifest()?, fault.as_ref())
        }
        Command::Eval(a) => eval(&a.manifest()?),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Synth(a) => synth(&a),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// One prepared (case, seed) split as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedArchive {
    pub format: String,
    pub version: u32,
    pub family: Family,
    pub windows: usize,
    pub dataset: DatasetCase,
}

impl PreparedArchive {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let archive: PreparedArchive =
            serde_json::from_str(&text).map_err(|e| CliError::new("archive", format!("{}: {e}", path.display())))?;
        if archive.format != ARCHIVE_FORMAT || archive.version != ARCHIVE_VERSION {
            return Err(CliError::new(
                "archive",
                format!(
                    "{}: unsupported archive {} v{} (expected {ARCHIVE_FORMAT} v{ARCHIVE_VERSION})",
                    path.display(),
                    archive.format,
                    archive.version
                ),
            ));
        }
        Ok(archive)
    }
}

/// One line of `prepared/summary.json`.
#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub family: Family,
    pub windows: usize,
    pub occupied: usize,
    pub vacant: usize,
    pub minority_share: f64,
    pub seeds: Vec<u64>,
    pub norm_fit: NormFit,
}

fn describe(violations: &[Disqualification]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn prepare(m: &RunManifest) -> Result<(), CliError> {
    // Everything is computed in memory first so a bad case leaves no files.
    let mut failures = Vec::new();
    let mut loaded = Vec::new();
    for case in &m.cases {
        match load_series(&case.csv, &case.id) {
            Ok(series) => loaded.push((case, build_windows(&series))),
            Err(e) => failures.push(format!("{}: {e}", case.id)),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::new("input", "could not read every case").with_details(failures));
    }
    let mut unqualified = Vec::new();
    for (case, windows) in &loaded {
        if let Err(v) = qualify(ClassCounts::of(windows), case.family) {
            unqualified.push(format!("{}: {}", case.id, describe(&v)));
        }
    }
    if !unqualified.is_empty() {
        return Err(CliError::new("unqualified", "some cases fail the qualification rules").with_details(unqualified));
    }

    let seeds = m.trial_seeds();
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for (case, windows) in &loaded {
        for &seed in &seeds {
            let dataset = split_normalize_oversample(&case.id, windows, seed, m.norm_fit)
                .map_err(|e| CliError::from(e).with_details(vec![format!("case {} seed {seed}", case.id)]))?;
            let archive = PreparedArchive {
                format: ARCHIVE_FORMAT.into(),
                version: ARCHIVE_VERSION,
                family: case.family,
                windows: windows.len(),
                dataset,
            };
            let json = serde_json::to_string(&archive).map_err(|e| CliError::new("json", e.to_string()))?;
            outputs.push((m.archive_path(&case.id, seed), json));
        }
        let counts = ClassCounts::of(windows);
        reports.push(CaseReport {
            case: case.id.clone(),
            family: case.family,
            windows: windows.len(),
            occupied: counts.occupied,
            vacant: counts.vacant,
            minority_share: counts.minority_share(),
            seeds: seeds.clone(),
            norm_fit: m.norm_fit,
        });
    }

    for case in &m.cases {
        create_dir(&m.prepared_dir(&case.id))?;
    }
    for (path, json) in &outputs {
        write_file(path, json)?;
    }
    let summary = serde_json::to_string_pretty(&reports).expect("plain data serializes");
    write_file(&m.out_dir.join("prepared").join("summary.json"), summary + "\n")?;
    for r in &reports {
        println!(
            "{}: {} windows ({} occupied, {} vacant), {} seeds",
            r.case,
            r.windows,
            r.occupied,
            r.vacant,
            r.seeds.len()
        );
    }
    Ok(())
}

fn load_archives(m: &RunManifest) -> Result<Vec<(String, u64, PreparedArchive)>, CliError> {
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for case in &m.cases {
        for seed in m.trial_seeds() {
            let path = m.archive_path(&case.id, seed);
            if !path.is_file() {
                missing.push(path.display().to_string());
                continue;
            }
            let archive = PreparedArchive::load(&path)?;
            if archive.dataset.id != case.id || archive.dataset.seed != seed {
                return Err(CliError::new(
                    "archive",
                    format!(
                        "{}: holds case {} seed {}",
                        path.display(),
                        archive.dataset.id,
                        archive.dataset.seed
                    ),
                ));
            }
            out.push((case.id.clone(), seed, archive));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::new(
            "missing-archive",
            "prepared archives are missing; run `abode prepare` first",
        )
        .with_details(missing));
    }
    Ok(out)
}

/// Test hook target for `train --inject-fault nan:<case>:<seed>`.
#[derive(Clone, Debug)]
pub struct NanFault {
    pub case: String,
    pub seed: u64,
}

fn parse_nan_fault(s: &str) -> Result<NanFault, CliError> {
    let bad = || CliError::new("usage", format!("invalid fault `{s}` (expected nan:<case>:<seed>)"));
    let rest = s.strip_prefix("nan:").ok_or_else(bad)?;
    let (case, seed) = rest.rsplit_once(':').ok_or_else(bad)?;
    Ok(NanFault {
        case: case.into(),
        seed: seed.parse().map_err(|_| bad())?,
    })
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok { best_epoch: usize, val_f1: f64 },
    Failed { error: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub case: String,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
}

pub fn train(m: &RunManifest, fault: Option<&NanFault>) -> Result<(), CliError> {
    let archives = load_archives(m)?;
    let model_config = ModelConfig::default();
    let mut reports = Vec::new();
    for (case, seed, archive) in archives {
        let mut dataset = archive.dataset;
        if fault.is_some_and(|f| f.case == case && f.seed == seed) {
            dataset.train[0].features[0] = f64::NAN;
        }
        let config = TrainConfig {
            seed,
            ..m.train.clone()
        };
        let dir = m.run_dir(&case, seed);
        create_dir(&dir)?;
        let checkpoint_path = dir.join("checkpoint.json");
        let status = match train_case(&dataset, &model_config, &config) {
            Ok(outcome) => {
                let mut log = Vec::new();
                write_log_csv(&outcome.log, &mut log)?;
                write_file(&dir.join("log.csv"), log)?;
                Checkpoint::from_snapshot(&case, &outcome.best, &config).save(&checkpoint_path)?;
                RunStatus::Ok {
                    best_epoch: outcome.best.epoch,
                    val_f1: outcome.best.val_f1,
                }
            }
            Err(e) => {
                // A stale checkpoint from an earlier run must not reach eval.
                for stale in [checkpoint_path, dir.join("log.csv")] {
                    if stale.exists() {
                        std::fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
                    }
                }
                RunStatus::Failed { error: e.to_string() }
            }
        };
        match &status {
            RunStatus::Ok { best_epoch, val_f1 } => {
                println!("{case} seed {seed}: best epoch {best_epoch}, val F1 {val_f1:.4}")
            }
            RunStatus::Failed { error } => println!("{case} seed {seed}: FAILED {error}"),
        }
        reports.push(RunReport { case, seed, status });
    }
    let summary = serde_json::to_string_pretty(&reports).expect("plain data serializes");
    write_file(&m.out_dir.join("runs").join("summary.json"), summary + "\n")?;
    let failed: Vec<String> = reports
        .iter()
        .filter_map(|r| match &r.status {
            RunStatus::Failed { error } => Some(format!("{} seed {}: {error}", r.case, r.seed)),
            RunStatus::Ok { .. } => None,
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new("train", format!("{} of {} runs failed", failed.len(), reports.len())).with_details(failed))
    }
}

pub fn eval(m: &RunManifest) -> Result<(), CliError> {
    let archives = load_archives(m)?;
    let mut missing = Vec::new();
    let mut runs = Vec::new();
    for (case, seed, archive) in archives {
        let path = m.run_dir(&case, seed).join("checkpoint.json");
        if !path.is_file() {
            missing.push(path.display().to_string());
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.case != case {
            return Err(CliError::new(
                "checkpoint",
                format!("{}: trained on case {}, expected {case}", path.display(), ckpt.case),
            ));
        }
        let model = ckpt
            .model()
            .map_err(|e| CliError::new("checkpoint", format!("{}: {e}", path.display())))?;
        runs.push((case, seed, archive, model));
    }
    if !missing.is_empty() {
        return Err(
            CliError::new("missing-checkpoint", "checkpoints are missing; run `abode train` first")
                .with_details(missing),
        );
    }

    let mut records = Vec::new();
    for (case, seed, archive, mut model) in runs {
        let metrics = evaluate(&mut model, &archive.dataset.test)?;
        records.push(MetricsRecord::new(&case, MODEL_NAME, seed, &metrics));
    }
    let mut csv = Vec::new();
    write_results_csv(&records, &mut csv)?;
    let table = summary_table(&aggregate(&records));
    create_dir(&m.out_dir)?;
    write_file(&m.out_dir.join("results.csv"), csv)?;
    write_file(&m.out_dir.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck_report_table(report: &GradcheckReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "gradcheck seed {} tolerance {:e}", report.seed, report.tolerance);
    let _ = writeln!(
        out,
        "{:<12}  {:>7}  {:>7}  {:>12}  result",
        "group", "tensors", "checked", "max rel err"
    );
    for g in &report.groups {
        let _ = writeln!(
            out,
            "{:<12}  {:>7}  {:>7}  {:>12.3e}  {}",
            g.group.as_str(),
            g.tensors,
            g.checked,
            g.max_rel_error,
            if g.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("sigmoid") => Some(Fault::SigmoidDerivativeScale(2.0)),
        Some(other) => return Err(CliError::new("usage", format!("unknown fault `{other}`"))),
    };
    let options = GradcheckOptions {
        coords_per_tensor: a.coords,
        batch: a.batch,
        fault,
    };
    let report = check_model(a.seed, &options)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("plain data serializes")
        );
    } else {
        print!("{}", gradcheck_report_table(&report));
    }
    let failed: Vec<String> = report
        .groups
        .iter()
        .filter(|g| !g.passed)
        .map(|g| format!("{}: max relative error {:e}", g.group.as_str(), g.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new("gradcheck", "gradient check failed").with_details(failed))
    }
}

/// Reads a profile, filling absent keys from the default profile.
pub fn load_profile(path: &Path) -> Result<SynthProfile, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::new("profile", format!("{}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let user: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
    let mut merged = toml::Table::try_from(SynthProfile::default()).map_err(|e| bad(&e))?;
    for (k, v) in user {
        if !merged.contains_key(&k) {
            return Err(bad(&format!("unknown key `{k}`")));
        }
        merged.insert(k, v);
    }
    merged.try_into().map_err(|e| bad(&e))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let mut profile = match &a.profile {
        Some(p) => load_profile(p)?,
        None => SynthProfile::default(),
    };
    if let Some(d) = a.days {
        profile.days = d;
    }
    if let Some(w) = a.appliance_load {
        profile.appliance_load_w = w;
    }
    if profile.days == 0 || !profile.appliance_load_w.is_finite() || profile.appliance_load_w < 0.0 {
        return Err(CliError::new(
            "profile",
            "days must be positive and appliance load non-negative",
        ));
    }
    let series = synth_series(&profile, a.seed);
    let mut bytes = Vec::new();
    write_series(&series, &mut bytes)?;
    write_file(&a.out, bytes)?;
    let counts = ClassCounts::of(&build_windows(&series));
    eprintln!(
        "{}: {} minutes, {} windows ({} occupied, {} vacant)",
        a.out.display(),
        series.records.len(),
        counts.total(),
        counts.occupied,
        counts.vacant
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_fault_parses_case_ids_with_colons() {
        let f = parse_nan_fault("nan:a:b:7").unwrap();
        assert_eq!((f.case.as_str(), f.seed), ("a:b", 7));
        assert!(parse_nan_fault("nan:a").is_err());
        assert!(parse_nan_fault("inf:a:1").is_err());
    }

    #[test]
    fn profile_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.toml");
        std::fs::write(
            &p,
            "days = 3\n[schedule]\nkind = \"random\"\nmean_occupied_minutes = 60.0\nmean_vacant_minutes = 30.0\n",
        )
        .unwrap();
        let profile = load_profile(&p).unwrap();
        assert_eq!(profile.days, 3);
        assert_eq!(profile.base_load_w, SynthProfile::default().base_load_w);
        std::fs::write(&p, "dayz = 3\n").unwrap();
        assert!(load_profile(&p).unwrap_err().message.contains("dayz"));
    }

    #[test]
    fn every_group_appears_once_in_the_table() {
        let report = check_model(
            1,
            &GradcheckOptions {
                coords_per_tensor: 1,
                ..GradcheckOptions::new()
            },
        )
        .unwrap();
        let table = gradcheck_report_table(&report);
        for g in abode_core::model::ParamGroup::ALL {
            let rows = table
                .lines()
                .filter(|l| l.split_whitespace().next() == Some(g.as_str()))
                .count();
            assert_eq!(rows, 1, "{table}");
        }
    }

    #[test]
    fn decay_names_match_core() {
        assert_eq!("decoupled".parse::<DecayMode>().unwrap(), DecayMode::Decoupled);
    }
}
