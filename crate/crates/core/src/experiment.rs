//! Experiment configuration, multi-seed orchestration and result files.
//!
//! A config is a TOML file with flat sections:
//!
//! ```toml
//! [data]        # source = "synthetic" | "csv", transfer_size
//! [synthetic]   # seasons, classes, features, samples_per_class, drift, period, noise, centroid_scale
//! [csv]         # seasons = [paths], transfer = path, feature_dim, header
//! [grid]        # cell_size, min_count
//! [rkd]         # k, strategy = "A4([2,2],1.0)" or builtin = 3
//! [classifier]  # hidden, leaky_slope, dropout
//! [pretrain]    # epochs, batch_size, temperature
//! [distill]     # epochs, batch_size, temperature
//! [optimizer]   # lr, beta1, beta2, epsilon, weight_decay
//! [eval]        # x = [1, 5, 10]
//! [run]         # seeds, output_dir, deterministic
//! ```
//!
//! Only `[rkd]` with a strategy is required. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{AdamConfig, ClassifierConfig};
use crate::data::{filter_valid_classes, ingest_pose_csv, write_pose_csv, DomainSequence};
use crate::distill::{Temperature, TrainSpec, TransferSet};
use crate::error::{Result, RkdError};
use crate::eval::{evaluate_sequence, AccuracyRow, AccuracyTable, EnsembleRule};
use crate::rkd::RkdConfig;
use crate::seed::derive_seed;
use crate::synth::{SynthConfig, SynthModel};
use crate::tsa::{builtin_strategy, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Size of the synthetic transfer set.
    pub transfer_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            transfer_size: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    /// One file per season, in order. Relative paths resolve against the config file.
    pub seasons: Vec<PathBuf>,
    pub transfer: PathBuf,
    pub feature_dim: usize,
    #[serde(default)]
    pub header: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub cell_size: f64,
    pub min_count: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            cell_size: 20.0,
            min_count: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RkdSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<usize>,
}

fn default_k() -> usize {
    4
}

impl Default for RkdSection {
    fn default() -> Self {
        RkdSection {
            k: default_k(),
            strategy: None,
            builtin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            hidden: vec![32],
            leaky_slope: 0.1,
            dropout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: Temperature,
}

impl TrainSection {
    fn pretrain() -> Self {
        TrainSection {
            epochs: 30,
            batch_size: 32,
            temperature: Temperature::PRETRAIN,
        }
    }

    fn distill() -> Self {
        TrainSection {
            temperature: Temperature::DISTILL,
            ..TrainSection::pretrain()
        }
    }
}

/// Per-field defaults differ between pretraining and distillation, so the
/// sections deserialize through this partial form.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrain {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    temperature: Option<Temperature>,
}

impl PartialTrain {
    fn fill(self, base: TrainSection) -> TrainSection {
        TrainSection {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            temperature: self.temperature.unwrap_or(base.temperature),
        }
    }
}

fn pretrain_section<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<TrainSection, D::Error> {
    Ok(PartialTrain::deserialize(d)?.fill(TrainSection::pretrain()))
}

fn distill_section<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<TrainSection, D::Error> {
    Ok(PartialTrain::deserialize(d)?.fill(TrainSection::distill()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub x: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { x: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Sequential distillation; otherwise students train on separate threads.
    pub deterministic: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0],
            output_dir: PathBuf::from("results"),
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synthetic: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSection>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub rkd: RkdSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(
        default = "TrainSection::pretrain",
        deserialize_with = "pretrain_section"
    )]
    pub pretrain: TrainSection,
    #[serde(
        default = "TrainSection::distill",
        deserialize_with = "distill_section"
    )]
    pub distill: TrainSection,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub run: RunSection,
}

fn key_error(key: &str, message: impl Into<String>) -> RkdError {
    RkdError::ConfigKey {
        key: key.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates TOML text. Relative CSV paths are kept as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| RkdError::InvalidConfig(e.message().to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(table).map_err(|e| {
            let key = e.path().to_string();
            let message = e.into_inner().to_string();
            if key == "." || key.is_empty() {
                RkdError::InvalidConfig(message)
            } else {
                key_error(&key, message)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RkdError::InvalidConfig(e.to_string()))
    }

    /// The TSA strategy named by `rkd.strategy` or `rkd.builtin`.
    pub fn strategy(&self) -> Result<Strategy> {
        match (&self.rkd.strategy, self.rkd.builtin) {
            (Some(s), None) => Ok(s.clone()),
            (None, Some(n)) => {
                builtin_strategy(n).map_err(|e| key_error("rkd.builtin", e.to_string()))
            }
            (Some(_), Some(_)) => Err(key_error(
                "rkd.strategy",
                "set either `strategy` or `builtin`, not both",
            )),
            (None, None) => Err(key_error(
                "rkd.strategy",
                "missing required key (or give `rkd.builtin`)",
            )),
        }
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        let mut cfg = self.clone();
        cfg.rkd.strategy = Some(strategy);
        cfg.rkd.builtin = None;
        cfg
    }

    pub fn num_seasons(&self) -> usize {
        match (&self.data.source, &self.csv) {
            (DataSource::Csv, Some(csv)) => csv.seasons.len(),
            (DataSource::Csv, None) => 0,
            (DataSource::Synthetic, _) => self.synthetic.seasons,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rkd.k == 0 {
            return Err(key_error("rkd.k", "must be at least 1"));
        }
        let strategy = self.strategy()?;
        strategy
            .check_students(self.rkd.k)
            .map_err(|e| key_error("rkd.strategy", e.to_string()))?;
        match self.data.source {
            DataSource::Synthetic => {
                let mut synth = self.synthetic.clone();
                synth.cell_size = self.grid.cell_size;
                synth
                    .validate()
                    .map_err(|e| key_error("synthetic", e.to_string()))?;
                if self.data.transfer_size == 0 {
                    return Err(key_error("data.transfer_size", "must be at least 1"));
                }
            }
            DataSource::Csv => {
                let csv = self
                    .csv
                    .as_ref()
                    .ok_or_else(|| key_error("csv", "missing section for source = \"csv\""))?;
                if csv.feature_dim == 0 {
                    return Err(key_error("csv.feature_dim", "must be at least 1"));
                }
            }
        }
        if self.num_seasons() < 2 {
            return Err(key_error("data", "at least 2 seasons are required"));
        }
        if !(self.grid.cell_size > 0.0 && self.grid.cell_size.is_finite()) {
            return Err(key_error("grid.cell_size", "must be positive"));
        }
        if self.grid.min_count == 0 {
            return Err(key_error("grid.min_count", "must be at least 1"));
        }
        if self.classifier.hidden.contains(&0) {
            return Err(key_error("classifier.hidden", "widths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.classifier.dropout) {
            return Err(key_error("classifier.dropout", "must lie in [0, 1)"));
        }
        if self.pretrain.temperature != Temperature::PRETRAIN {
            return Err(key_error(
                "pretrain.temperature",
                "pretraining runs at temperature 1",
            ));
        }
        for (key, section) in [("pretrain", &self.pretrain), ("distill", &self.distill)] {
            if section.batch_size == 0 {
                return Err(key_error(
                    &format!("{key}.batch_size"),
                    "must be at least 1",
                ));
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| key_error("optimizer", e.to_string()))?;
        if self.eval.x.is_empty() || self.eval.x.contains(&0) {
            return Err(key_error(
                "eval.x",
                "needs at least one value, each at least 1",
            ));
        }
        if self.run.seeds.is_empty() {
            return Err(key_error("run.seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// Engine configuration for one seed, sized to the loaded data.
    pub fn rkd_config(&self, seed: u64, input_dim: usize, num_classes: usize) -> Result<RkdConfig> {
        let train = |s: &TrainSection| TrainSpec {
            epochs: s.epochs,
            batch_size: s.batch_size,
            temperature: s.temperature,
            shuffle_seed: 0,
            optimizer: self.optimizer,
        };
        Ok(RkdConfig {
            k: self.rkd.k,
            strategy: self.strategy()?,
            classifier: ClassifierConfig {
                input_dim,
                hidden_layers: self.classifier.hidden.clone(),
                num_classes,
                leaky_slope: self.classifier.leaky_slope,
                dropout_rate: self.classifier.dropout,
                init_seed: 0,
            },
            pretrain: train(&self.pretrain),
            distill: train(&self.distill),
            master_seed: derive_seed(seed, &[TRAINING_STREAM]),
            parallel: !self.run.deterministic,
        })
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            cell_size: self.grid.cell_size,
            ..self.synthetic.clone()
        }
    }
}

const TRAINING_STREAM: u64 = 0x0052_4b44;

/// Reads and validates a config file; relative CSV paths resolve against its directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RkdError::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(csv) = cfg.csv.as_mut() {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        csv.seasons.iter_mut().for_each(resolve);
        resolve(&mut csv.transfer);
    }
    Ok(cfg)
}

/// Labeled, class-filtered seasons and the transfer set for one seed.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(DomainSequence, TransferSet)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let model = SynthModel::new(&cfg.synth_config(), seed)?;
            let seq = model.sequence();
            let seq = filter_valid_classes(seq.seasons, seq.cell_size, cfg.grid.min_count)?;
            Ok((seq, model.transfer_set(cfg.data.transfer_size)))
        }
        DataSource::Csv => {
            let csv = cfg
                .csv
                .as_ref()
                .ok_or_else(|| key_error("csv", "missing section"))?;
            let seasons = csv
                .seasons
                .iter()
                .enumerate()
                .map(|(i, path)| {
                    let label = path.file_stem().map_or_else(
                        || format!("S{}", i + 1),
                        |s| s.to_string_lossy().into_owned(),
                    );
                    ingest_pose_csv(path, csv.feature_dim, csv.header, i + 1, label)
                })
                .collect::<Result<Vec<_>>>()?;
            let seq = filter_valid_classes(seasons, cfg.grid.cell_size, cfg.grid.min_count)?;
            let transfer =
                ingest_pose_csv(&csv.transfer, csv.feature_dim, csv.header, 1, "transfer")?;
            Ok((seq, TransferSet::from_season(&transfer)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub table: AccuracyTable,
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let inner = || -> Result<SeedRun> {
        let (seq, transfer) = load_data(cfg, seed)?;
        let dim = seq
            .feature_dim()
            .ok_or_else(|| RkdError::invalid("no samples survived class filtering"))?;
        let rkd = cfg.rkd_config(seed, dim, seq.num_classes())?;
        let table = evaluate_sequence(&seq, &transfer, &rkd, &cfg.eval.x)?;
        Ok(SeedRun { seed, table })
    };
    inner().map_err(|e| RkdError::Seeded {
        seed,
        source: Box::new(e),
    })
}

/// Runs every configured seed in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.run.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub season: usize,
    pub rule: EnsembleRule,
    pub x: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub stddev: f64,
    /// Number of seeds aggregated.
    pub count: usize,
}

pub const SUMMARY_HEADER: &str = "season,rule,X,mean,stddev,count";
pub const LONG_HEADER: &str = "seed,season,rule,X,accuracy,count";

/// Mean and spread of each `(season, rule, X)` cell across seeds.
pub fn summarize(runs: &[SeedRun]) -> Result<Vec<SummaryRow>> {
    if runs.is_empty() {
        return Err(RkdError::invalid("no results to summarize"));
    }
    let mut cells: BTreeMap<(usize, EnsembleRule, usize), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in &run.table.rows {
            cells
                .entry((r.season, r.rule, r.x))
                .or_default()
                .push(r.accuracy());
        }
    }
    if cells.values().any(|v| v.len() != runs.len()) {
        return Err(RkdError::invalid("seed tables cover different rows"));
    }
    Ok(cells
        .into_iter()
        .map(|((season, rule, x), values)| {
            let n = values.len() as f64;
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // Clamp absorbs summation rounding, e.g. three 0.1s averaging above 0.1.
            let mean = (values.iter().sum::<f64>() / n).clamp(lo, hi);
            let stddev = if values.len() < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            SummaryRow {
                season,
                rule,
                x,
                mean,
                stddev,
                count: values.len(),
            }
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.season, r.rule, r.x, r.mean, r.stddev, r.count
        ));
    }
    out
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SUMMARY_HEADER => {}
        _ => {
            return Err(RkdError::Parse {
                row: 1,
                message: format!("expected header `{SUMMARY_HEADER}`"),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let row = i + 1;
            let bad = || RkdError::Parse {
                row,
                message: format!("malformed summary row `{line}`"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(SummaryRow {
                season: f[0].parse().map_err(|_| bad())?,
                rule: f[1].parse().map_err(|_| bad())?,
                x: f[2].parse().map_err(|_| bad())?,
                mean: f[3].parse().map_err(|_| bad())?,
                stddev: f[4].parse().map_err(|_| bad())?,
                count: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Long-format rows across seeds, ready for external plotting.
pub fn long_csv(runs: &[SeedRun]) -> String {
    let mut out = format!("{LONG_HEADER}\n");
    for run in runs {
        for r in &run.table.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                run.seed,
                r.season,
                r.rule,
                r.x,
                r.accuracy(),
                r.count
            ));
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    strategy: String,
    seeds: Vec<u64>,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| RkdError::io(path, e))
}

/// Writes `seed_<n>.csv`, `summary.csv`, `long.csv` and `manifest.json`.
/// Returns the written paths. Nothing is written when `runs` is empty.
pub fn emit_results(
    runs: &[SeedRun],
    cfg: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let summary = summarize(runs)?;
    fs::create_dir_all(out_dir).map_err(|e| RkdError::io(out_dir, e))?;
    let mut written = Vec::new();
    let emit = |written: &mut Vec<PathBuf>, name: String, contents: String| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    for run in runs {
        emit(
            &mut written,
            format!("seed_{}.csv", run.seed),
            run.table.to_csv(),
        )?;
    }
    emit(&mut written, "summary.csv".into(), summary_csv(&summary))?;
    emit(&mut written, "long.csv".into(), long_csv(runs))?;
    let files = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let record = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        strategy: cfg.strategy()?.to_string(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        files,
        config: cfg,
    };
    let manifest =
        serde_json::to_string_pretty(&record).map_err(|e| RkdError::invalid(e.to_string()))?;
    emit(&mut written, "manifest.json".into(), manifest + "\n")?;
    Ok(written)
}

/// Per-seed results of several strategies on otherwise identical runs.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub entries: Vec<(Strategy, Vec<SeedRun>)>,
}

impl Comparison {
    /// Mean over seeds and over seasons `>= from_season` of top-`x` accuracy
    /// for the strategy at `index`.
    pub fn mean_accuracy(
        &self,
        index: usize,
        rule: EnsembleRule,
        x: usize,
        from_season: usize,
    ) -> f64 {
        let rows: Vec<&AccuracyRow> = self.entries[index]
            .1
            .iter()
            .flat_map(|run| &run.table.rows)
            .filter(|r| r.rule == rule && r.x == x && r.season >= from_season)
            .collect();
        rows.iter().map(|r| r.accuracy()).sum::<f64>() / rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("strategy,{SUMMARY_HEADER}\n");
        for (strategy, runs) in &self.entries {
            for r in summarize(runs)? {
                out.push_str(&format!(
                    "\"{strategy}\",{},{},{},{},{},{}\n",
                    r.season, r.rule, r.x, r.mean, r.stddev, r.count
                ));
            }
        }
        Ok(out)
    }
}

/// Runs `cfg` once per strategy with identical seeds and data.
pub fn compare_strategies(cfg: &ExperimentConfig, strategies: &[Strategy]) -> Result<Comparison> {
    let entries = strategies
        .iter()
        .map(|s| Ok((s.clone(), run_experiment(&cfg.with_strategy(s.clone()))?)))
        .collect::<Result<_>>()?;
    Ok(Comparison { entries })
}

/// Writes the synthetic seasons and transfer set of `seed` as CSV files.
pub fn generate_data(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    if cfg.data.source != DataSource::Synthetic {
        return Err(key_error(
            "data.source",
            "gen-data needs a synthetic source",
        ));
    }
    let model = SynthModel::new(&cfg.synth_config(), seed)?;
    fs::create_dir_all(out_dir).map_err(|e| RkdError::io(out_dir, e))?;
    let mut written = Vec::new();
    for season in model.sequence().seasons {
        let path = out_dir.join(format!("season_{}.csv", season.season_index));
        write_pose_csv(&path, &season, true)?;
        written.push(path);
    }
    let transfer = crate::data::SeasonDataset::new(
        1,
        "transfer",
        model
            .transfer_set(cfg.data.transfer_size)
            .features()
            .iter()
            .map(|f| crate::data::Sample::new(crate::data::Viewpoint::new(0.0, 0.0), f.clone()))
            .collect(),
    );
    let path = out_dir.join("transfer.csv");
    write_pose_csv(&path, &transfer, true)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[rkd]\nbuiltin = 3\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.rkd.k, 4);
        assert_eq!(cfg.pretrain.temperature, Temperature::PRETRAIN);
        assert_eq!(cfg.distill.temperature, Temperature::DISTILL);
        assert_eq!(cfg.optimizer.lr, 0.003);
        assert_eq!(cfg.eval.x, vec![1, 5, 10]);
        assert_eq!(cfg.grid.min_count, 10);
        assert!(cfg.run.deterministic);
        let rkd = cfg.rkd_config(0, 16, 16).unwrap();
        assert_eq!(rkd.classifier.leaky_slope, 0.1);
        assert_eq!(rkd.classifier.dropout_rate, 0.3);
        assert_eq!(rkd.distill.optimizer.beta2, 0.999);
    }

    #[test]
    fn strategy_expression_equals_builtin() {
        let cfg = ExperimentConfig::from_toml_str("[rkd]\nstrategy = \"A4([2,2],1.0)\"\n").unwrap();
        assert_eq!(cfg.strategy().unwrap(), builtin_strategy(3).unwrap());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("foo = 1\n[rkd]\nbuiltin = 3\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
        let err = ExperimentConfig::from_toml_str("[rkd]\nbuiltin = 3\n[distill]\nepochz = 3\n")
            .unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn errors_carry_key_paths() {
        let err =
            ExperimentConfig::from_toml_str("[rkd]\nstrategy = \"A4([3,1],1.0)\"\n").unwrap_err();
        assert!(
            matches!(&err, RkdError::ConfigKey { key, .. } if key == "rkd.strategy"),
            "{err}"
        );
        let err =
            ExperimentConfig::from_toml_str("[rkd]\nbuiltin = 3\n[grid]\nmin_count = \"x\"\n")
                .unwrap_err();
        assert!(
            matches!(&err, RkdError::ConfigKey { key, .. } if key == "grid.min_count"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("[run]\nseeds = [1]\n").unwrap_err();
        assert!(
            matches!(&err, RkdError::ConfigKey { key, .. } if key.starts_with("rkd")),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("[rkd]\nbuiltin = 3\nk = 3\n").unwrap_err();
        assert!(
            matches!(&err, RkdError::ConfigKey { key, .. } if key == "rkd.strategy"),
            "{err}"
        );
        let err =
            ExperimentConfig::from_toml_str("[rkd]\nbuiltin = 3\n[pretrain]\ntemperature = 10.0\n")
                .unwrap_err();
        assert!(
            matches!(&err, RkdError::ConfigKey { key, .. } if key == "pretrain.temperature"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("[rkd]\nbuiltin = 3\n[synthetic]\nseasons = 1\n")
            .unwrap_err();
        assert!(err.to_string().contains("2 seasons"), "{err}");
        let err = ExperimentConfig::from_toml_str("[rkd]\nbuiltin = 3\n[data]\nsource = \"csv\"\n")
            .unwrap_err();
        assert!(
            matches!(&err, RkdError::ConfigKey { key, .. } if key == "csv"),
            "{err}"
        );
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(
            "[rkd]\nstrategy = \"B2+A2([1,1],1.0)\"\n[run]\nseeds = [3, 4]\n",
        )
        .unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    fn table(season_acc: &[(usize, usize, usize)]) -> AccuracyTable {
        AccuracyTable::new(
            season_acc
                .iter()
                .map(|&(season, hits, count)| AccuracyRow {
                    season,
                    rule: EnsembleRule::Averaging,
                    x: 1,
                    hits,
                    count,
                })
                .collect(),
        )
    }

    #[test]
    fn summary_of_constant_seeds() {
        let runs = vec![
            SeedRun {
                seed: 1,
                table: table(&[(1, 5, 10)]),
            },
            SeedRun {
                seed: 2,
                table: table(&[(1, 2, 4)]),
            },
        ];
        let s = summarize(&runs).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].mean, s[0].stddev, s[0].count), (0.5, 0.0, 2));
        let one = summarize(&runs[..1]).unwrap();
        assert_eq!((one[0].mean, one[0].stddev), (0.5, 0.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summary_mean_stays_within_seed_range() {
        let runs: Vec<_> = (0..3)
            .map(|s| SeedRun {
                seed: s,
                table: table(&[(1, 1, 10)]),
            })
            .collect();
        let s = summarize(&runs).unwrap();
        assert_eq!(s[0].mean, 0.1);
    }

    #[test]
    fn summary_csv_round_trip() {
        let runs = vec![
            SeedRun {
                seed: 1,
                table: table(&[(1, 3, 7), (2, 1, 3)]),
            },
            SeedRun {
                seed: 2,
                table: table(&[(1, 5, 7), (2, 2, 3)]),
            },
        ];
        let s = summarize(&runs).unwrap();
        assert_eq!(parse_summary_csv(&summary_csv(&s)).unwrap(), s);
    }

    #[test]
    fn emit_refuses_empty_results() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert!(emit_results(&[], &cfg, &out).is_err());
        assert!(!out.exists());
    }
}
