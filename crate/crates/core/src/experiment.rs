//! Experiment configuration, run directories and the analysis commands.
//!
//! Every command reads an [`ExperimentConfig`], writes its artifacts under
//! the run directory and appends an entry to `manifest.json`. A manifest
//! entry stores the effective configuration, so [`replay`] can rerun it into
//! another directory and reproduce every CSV byte for byte.
//!
//! Layout:
//!
//! ```text
//! config.json  checkpoint.json  curves.csv  manifest.json
//! influence/   oracle/          cleansing/  report.json
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cleansing::{precision, ranking_stability, run_cleansing_experiment, write_report_csv, CleansingConfig};
use crate::data::{generate_synthetic, load_csv, CsvSchema, Dataset, Instance, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::influence::{
    estimate_influence_batched, rank_influences, save_with, self_influence, write_influence_csv, write_oracle_csv,
    Estimator, LooOracle, RankOrder, TurnoverModel,
};
use crate::masking::{hash_collisions, MaskPlan, MaskScheme};
use crate::network::{logits, Checkpoint, ModelConfig};
use crate::numeric::{argmax, KeyedRng, RngKey};
use crate::stats::{mean, sign_test_p, spearman};
use crate::training::{evaluate, train, Monitor, TrainConfig};

const TAG_SPLIT: u64 = 0x7370_6c74;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Rows are assigned to val/test by a seeded shuffle; the rest train.
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        #[serde(default)]
        n_val: usize,
        #[serde(default)]
        n_test: usize,
        #[serde(default)]
        split_seed: u64,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSettings {
    pub global_seed: u64,
    #[serde(default = "direct")]
    pub scheme: MaskScheme,
}

fn direct() -> MaskScheme {
    MaskScheme::Direct
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub top_k: usize,
    pub estimator: Estimator,
    pub hist_bins: usize,
    /// Where `interpret` looks for misclassified instances.
    pub interpret_split: Split,
    /// Targets of `influence`; defaults to the validation split.
    pub targets: Option<Vec<u64>>,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            estimator: Estimator::Standard,
            hist_bins: 20,
            interpret_split: Split::Val,
            targets: None,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LooSettings {
    /// Targets are the first `n_targets` test instances.
    pub n_targets: usize,
    /// Each seed sets init, shuffle and mask seeds of one trial.
    pub seeds: Vec<u64>,
    pub force: bool,
}

impl Default for LooSettings {
    fn default() -> Self {
        Self {
            n_targets: 5,
            seeds: vec![1, 2, 3],
            force: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleansingSettings {
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub random_removal_seed: u64,
    /// Validation prefixes for the ranking-stability sweep.
    pub val_sizes: Vec<usize>,
}

impl Default for CleansingSettings {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            seeds: vec![1, 2, 3, 4],
            random_removal_seed: 0,
            val_sizes: vec![50, 100, 200],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    /// Base training configuration; the turn-over plan comes from `mask`.
    pub train: TrainConfig,
    pub mask: MaskSettings,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub loo: LooSettings,
    #[serde(default)]
    pub cleansing: CleansingSettings,
    /// Run directory used when none is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn mask_plan(&self) -> MaskPlan {
        self.model.mask_plan(self.mask.global_seed, self.mask.scheme)
    }

    /// Training configuration with the turn-over plan attached.
    pub fn turnover_train(&self) -> TrainConfig {
        TrainConfig {
            turnover: Some(self.mask_plan()),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mask_plan().validate()?;
        if self.train.turnover.is_some() {
            return Err(Error::Config("set the mask plan under `mask`, not `train.turnover`".into()));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Csv {
                path,
                has_header,
                n_val,
                n_test,
                split_seed,
            } => {
                let mut ds = load_csv(path, CsvSchema { has_header: *has_header })?;
                if n_val + n_test >= ds.len() {
                    return Err(Error::Config(format!("{} rows cannot hold {n_val} val and {n_test} test", ds.len())));
                }
                let mut order: Vec<usize> = (0..ds.len()).collect();
                order.shuffle(&mut KeyedRng::new(RngKey::tagged(*split_seed, TAG_SPLIT, 0, 0), 0));
                for (k, &i) in order.iter().rev().enumerate() {
                    ds.splits[i] = if k < *n_test {
                        Split::Test
                    } else if k < n_test + n_val {
                        Split::Val
                    } else {
                        Split::Train
                    };
                }
                ds
            }
        };
        if ds.input_dim() != self.model.input_dim() {
            return Err(Error::Dimension {
                what: "dataset features vs model input".into(),
                expected: self.model.input_dim(),
                got: ds.input_dim(),
            });
        }
        if ds.n_classes > self.model.n_classes() {
            return Err(Error::Dimension {
                what: "dataset classes vs model outputs".into(),
                expected: self.model.n_classes(),
                got: ds.n_classes,
            });
        }
        Ok(ds)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Curves,
    Influence,
    SelfInfluence,
    Interpret,
    LooValidate,
    Cleanse,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Curves => "curves",
            Command::Influence => "influence",
            Command::SelfInfluence => "self-influence",
            Command::Interpret => "interpret",
            Command::LooValidate => "loo-validate",
            Command::Cleanse => "cleanse",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: Command,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: Seeds,
    pub version: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub mask: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }
}

/// Runtime knobs that never change numeric results.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Runs `command`, then records it in `out/manifest.json`.
pub fn execute(command: Command, config: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<ManifestEntry> {
    config.validate()?;
    mkdir(out)?;
    write_json(&out.join("config.json"), config)?;
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let outputs = run(command, config, out, opts)?;
    let wall_clock_seconds = clock.elapsed().as_secs_f64();

    let mut files = Vec::with_capacity(outputs.len());
    for p in outputs {
        let rel = p.strip_prefix(out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        files.push(OutputFile {
            sha256: sha256_file(&p)?,
            path: rel,
        });
    }
    let entry = ManifestEntry {
        command,
        config: config.clone(),
        config_hash: config.hash(),
        seeds: Seeds {
            init: config.train.init_seed,
            shuffle: config.train.shuffle_seed,
            mask: config.mask.global_seed,
        },
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix,
        wall_clock_seconds,
        outputs: files,
    };
    let manifest_path = out.join("manifest.json");
    let mut manifest = Manifest::load_or_default(&manifest_path)?;
    manifest.entries.push(entry.clone());
    write_json(&manifest_path, &manifest)?;
    Ok(entry)
}

/// Reruns every entry of a manifest, in order, into `out`.
pub fn replay(manifest: &Manifest, out: &Path, opts: RunOptions) -> Result<Vec<ManifestEntry>> {
    manifest
        .entries
        .iter()
        .map(|e| execute(e.command, &e.config, out, opts))
        .collect()
}

fn run(command: Command, cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Vec<PathBuf>> {
    match command {
        Command::Train => cmd_train(cfg, out),
        Command::Curves => cmd_curves(cfg, out),
        Command::Influence => cmd_influence(cfg, out, opts),
        Command::SelfInfluence => cmd_self_influence(cfg, out),
        Command::Interpret => cmd_interpret(cfg, out, opts),
        Command::LooValidate => cmd_loo_validate(cfg, out, opts),
        Command::Cleanse => cmd_cleanse(cfg, out, opts),
        Command::Report => cmd_report(out),
    }
}

fn held_out(ds: &Dataset) -> Vec<Instance> {
    let test = ds.split(Split::Test);
    if test.is_empty() {
        ds.split(Split::Val)
    } else {
        test
    }
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = cfg.load_dataset()?;
    let train_set = ds.split(Split::Train);
    let plan = cfg.mask_plan();
    if let Some(w) = plan.capacity_warning(train_set.len()) {
        eprintln!("warning: {w}");
    }
    let collisions = hash_collisions(&plan, train_set.iter().map(|z| z.id));
    if !collisions.is_empty() {
        eprintln!("warning: {} groups of training instances share a hash-composed mask", collisions.len());
    }
    let outcome = train(&train_set, &cfg.turnover_train(), &cfg.model, None, None)?;
    if outcome.log.diverged {
        eprintln!("warning: training loss exceeded ten times its initial value");
    }
    let ck_path = out.join("checkpoint.json");
    Checkpoint::new(&cfg.model, &outcome.params, Some(&plan)).save(&ck_path)?;

    let (train_acc, train_loss) = evaluate(&outcome.params, &cfg.model, &train_set)?;
    let test = held_out(&ds);
    let mut summary = serde_json::json!({
        "train_accuracy": train_acc,
        "train_loss": train_loss,
        "n_train": train_set.len(),
        "diverged": outcome.log.diverged,
        "skipped_batches": outcome.log.skipped_batches,
        "hash_collision_groups": collisions.len(),
    });
    if !test.is_empty() {
        let (acc, loss) = evaluate(&outcome.params, &cfg.model, &test)?;
        summary["test_accuracy"] = acc.into();
        summary["test_loss"] = loss.into();
    }
    let summary_path = out.join("train_summary.json");
    write_json(&summary_path, &summary)?;
    Ok(vec![ck_path, summary_path])
}

fn cmd_curves(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = cfg.load_dataset()?;
    let train_set = ds.split(Split::Train);
    let test = held_out(&ds);
    if test.is_empty() {
        return Err(Error::Precondition("curves need a validation or test split".into()));
    }
    let outcome = train(
        &train_set,
        &cfg.turnover_train(),
        &cfg.model,
        None,
        Some(Monitor { test_set: &test }),
    )?;
    let ck_path = out.join("checkpoint.json");
    if ck_path.exists() {
        let stored = Checkpoint::load(&ck_path)?.params()?;
        if stored != outcome.params {
            eprintln!("warning: stored checkpoint differs from this training run");
        }
    }
    let path = out.join("curves.csv");
    outcome.log.save_csv(&path)?;
    Ok(vec![path])
}

fn load_model(cfg: &ExperimentConfig, out: &Path) -> Result<TurnoverModel> {
    let path = out.join("checkpoint.json");
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "no checkpoint at {}; run `turnover train` with this --out first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.config != cfg.model {
        return Err(Error::Precondition("checkpoint was trained with a different model configuration".into()));
    }
    TurnoverModel::from_checkpoint(&ck)
}

fn cmd_influence(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg, out)?;
    let ds = cfg.load_dataset()?;
    let train_ids: Vec<u64> = ds.split(Split::Train).iter().map(|z| z.id).collect();
    let targets: Vec<Instance> = match &cfg.analysis.targets {
        Some(ids) => ids
            .iter()
            .map(|&id| ds.instances.get(id as usize).cloned().ok_or(Error::UnknownInstance(id)))
            .collect::<Result<_>>()?,
        None => {
            let val = ds.split(Split::Val);
            if val.is_empty() {
                held_out(&ds)
            } else {
                val
            }
        }
    };
    let dir = out.join("influence");
    mkdir(&dir)?;
    let mut paths = Vec::with_capacity(targets.len());
    for t in &targets {
        let records =
            estimate_influence_batched(&model, t, &train_ids, cfg.analysis.estimator, cfg.analysis.batch_size, opts.jobs)?;
        let path = dir.join(format!("target_{}.csv", t.id));
        save_with(&path, |w| write_influence_csv(&records, w))?;
        paths.push(path);
    }
    Ok(paths)
}

fn cmd_self_influence(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg, out)?;
    let ds = cfg.load_dataset()?;
    let train_set = ds.split(Split::Train);
    let (records, hist) = self_influence(&model, &train_set, cfg.analysis.estimator, cfg.analysis.hist_bins)?;
    let dir = out.join("influence");
    mkdir(&dir)?;
    let rec_path = dir.join("self_influence.csv");
    save_with(&rec_path, |w| write_influence_csv(&records, w))?;
    let hist_path = dir.join("self_influence_histogram.csv");
    save_with(&hist_path, |w| hist.write_csv(w))?;
    Ok(vec![rec_path, hist_path])
}

fn cmd_interpret(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg, out)?;
    let ds = cfg.load_dataset()?;
    let train_set = ds.split(Split::Train);
    let train_ids: Vec<u64> = train_set.iter().map(|z| z.id).collect();
    let dir = out.join("influence");
    mkdir(&dir)?;
    let path = dir.join("interpret.csv");
    let mut rows = Vec::new();
    for t in ds.split(cfg.analysis.interpret_split) {
        let predicted = argmax(&logits(&model.params, &model.config, &t.features, None)?);
        if predicted == t.label {
            continue;
        }
        let records =
            estimate_influence_batched(&model, &t, &train_ids, cfg.analysis.estimator, cfg.analysis.batch_size, opts.jobs)?;
        for order in [RankOrder::MostPositive, RankOrder::MostNegative] {
            let ranked = rank_influences(&records, cfg.analysis.top_k, order)?;
            for (rank, r) in ranked.records.iter().enumerate() {
                let direction = match order {
                    RankOrder::MostPositive => "most_positive",
                    RankOrder::MostNegative => "most_negative",
                };
                rows.push(format!(
                    "{},{},{},{},{},{},{},{}",
                    t.id,
                    t.label,
                    predicted,
                    direction,
                    rank + 1,
                    r.train_id,
                    ds.instances[r.train_id as usize].label,
                    r.estimate
                ));
            }
        }
    }
    save_with(&path, |w| {
        writeln!(w, "target_id,target_label,predicted,direction,rank,train_id,train_label,estimate")?;
        rows.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    Ok(vec![path])
}

/// Per-(seed, target) rank correlation between estimates and LOO values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub seed: u64,
    pub target_id: u64,
    pub spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub rows: Vec<CorrelationRow>,
    pub mean_spearman: f64,
    pub positive: usize,
    pub total: usize,
    /// One-sided sign test against "no positive association".
    pub sign_test_p: f64,
}

/// Trains a turn-over model and runs the LOO oracle for one seed, returning
/// the estimate and oracle tables for the given targets.
pub fn loo_trial(
    train_set: &[Instance],
    targets: &[Instance],
    cfg: &ExperimentConfig,
    seed: u64,
    jobs: usize,
) -> Result<(Vec<crate::influence::InfluenceRecord>, Vec<crate::influence::OracleRecord>)> {
    let base = TrainConfig {
        init_seed: seed,
        shuffle_seed: seed,
        turnover: None,
        ..cfg.train.clone()
    };
    let plan = cfg.model.mask_plan(seed, cfg.mask.scheme);
    let turnover_cfg = TrainConfig {
        turnover: Some(plan.clone()),
        ..base.clone()
    };
    let params = train(train_set, &turnover_cfg, &cfg.model, None, None)?.params;
    let model = TurnoverModel::new(params, cfg.model.clone(), plan)?;
    let ids: Vec<u64> = train_set.iter().map(|z| z.id).collect();
    let mut estimates = Vec::with_capacity(targets.len() * ids.len());
    for t in targets {
        estimates.extend(estimate_influence_batched(&model, t, &ids, cfg.analysis.estimator, cfg.analysis.batch_size, 1)?);
    }
    let oracle = LooOracle::new(train_set, &base, &cfg.model, cfg.loo.force)?;
    let truth = oracle.table(targets, &ids, jobs)?;
    Ok((estimates, truth))
}

/// Spearman per target between paired estimate and oracle tables.
pub fn correlate(
    seed: u64,
    estimates: &[crate::influence::InfluenceRecord],
    truth: &[crate::influence::OracleRecord],
) -> Vec<CorrelationRow> {
    let mut targets: Vec<u64> = estimates.iter().map(|r| r.target_id).collect();
    targets.dedup();
    targets
        .into_iter()
        .map(|t| {
            let est: Vec<f64> = estimates.iter().filter(|r| r.target_id == t).map(|r| r.estimate).collect();
            let tru: Vec<f64> = truth.iter().filter(|r| r.target_id == t).map(|r| r.true_influence).collect();
            CorrelationRow {
                seed,
                target_id: t,
                spearman: spearman(&est, &tru),
            }
        })
        .collect()
}

pub fn summarize(rows: Vec<CorrelationRow>) -> CorrelationSummary {
    let values: Vec<f64> = rows.iter().map(|r| r.spearman).collect();
    let positive = values.iter().filter(|&&v| v > 0.0).count();
    CorrelationSummary {
        mean_spearman: mean(&values),
        positive,
        total: rows.len(),
        sign_test_p: sign_test_p(positive, rows.len()),
        rows,
    }
}

fn cmd_loo_validate(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let ds = cfg.load_dataset()?;
    let train_set = ds.split(Split::Train);
    let pool = held_out(&ds);
    let targets: Vec<Instance> = pool.into_iter().take(cfg.loo.n_targets).collect();
    if targets.is_empty() {
        return Err(Error::Precondition("loo-validate needs held-out targets".into()));
    }
    let dir = out.join("oracle");
    mkdir(&dir)?;
    let mut paths = Vec::new();
    let mut rows = Vec::new();
    for &seed in &cfg.loo.seeds {
        let (estimates, truth) = loo_trial(&train_set, &targets, cfg, seed, opts.jobs)?;
        let est_path = dir.join(format!("influence_seed{seed}.csv"));
        save_with(&est_path, |w| write_influence_csv(&estimates, w))?;
        let tru_path = dir.join(format!("oracle_seed{seed}.csv"));
        save_with(&tru_path, |w| write_oracle_csv(&truth, w))?;
        paths.extend([est_path, tru_path]);
        rows.extend(correlate(seed, &estimates, &truth));
    }
    let summary = summarize(rows);
    let csv_path = dir.join("correlation.csv");
    save_with(&csv_path, |w| {
        writeln!(w, "seed,target_id,spearman")?;
        for r in &summary.rows {
            writeln!(w, "{},{},{}", r.seed, r.target_id, r.spearman)?;
        }
        Ok(())
    })?;
    let json_path = dir.join("summary.json");
    write_json(&json_path, &summary)?;
    paths.extend([csv_path, json_path]);
    Ok(paths)
}

fn cmd_cleanse(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<Vec<PathBuf>> {
    let ds = cfg.load_dataset()?;
    let (train_set, val, test) = (ds.split(Split::Train), ds.split(Split::Val), ds.split(Split::Test));
    if val.is_empty() || test.is_empty() {
        return Err(Error::Precondition("cleansing needs validation and test splits".into()));
    }
    let cc = CleansingConfig {
        fraction: cfg.cleansing.fraction,
        seeds: cfg.cleansing.seeds.clone(),
        scoring: cfg.turnover_train(),
        retrain: cfg.train.clone(),
        random_removal_seed: cfg.cleansing.random_removal_seed,
        estimator: cfg.analysis.estimator,
    };
    let outcome = run_cleansing_experiment(&train_set, &val, &test, &cc, &cfg.model, opts.jobs)?;
    let dir = out.join("cleansing");
    mkdir(&dir)?;

    let report = dir.join("report.csv");
    save_with(&report, |w| {
        write_report_csv(&[outcome.cleanse.clone(), outcome.random_removal.clone(), outcome.no_cleansing.clone()], w)
    })?;
    let removed = dir.join("removed.csv");
    save_with(&removed, |w| {
        writeln!(w, "variant,train_id")?;
        for r in outcome.reports() {
            for id in &r.removed_ids {
                writeln!(w, "{},{id}", r.variant.as_str())?;
            }
        }
        Ok(())
    })?;
    let means = dir.join("mean_influence.csv");
    save_with(&means, |w| {
        writeln!(w, "train_id,mean_influence")?;
        outcome.mean_influences.iter().try_for_each(|(id, m)| writeln!(w, "{id},{m}"))
    })?;

    // ranking stability over validation prefixes
    let params = train(&train_set, &cc.scoring, &cfg.model, None, None)?.params;
    let model = TurnoverModel::new(params, cfg.model.clone(), cfg.mask_plan())?;
    let ids: Vec<u64> = train_set.iter().map(|z| z.id).collect();
    let stability = ranking_stability(
        &model,
        &val,
        &ids,
        &cfg.cleansing.val_sizes,
        cfg.cleansing.fraction,
        cfg.analysis.estimator,
        opts.jobs,
    )?;
    let stab = dir.join("stability.csv");
    save_with(&stab, |w| {
        writeln!(w, "val_size,spearman,jaccard")?;
        stability
            .iter()
            .try_for_each(|r| writeln!(w, "{},{},{}", r.val_size, r.spearman, r.jaccard))
    })?;

    let summary = serde_json::json!({
        "removed": outcome.cleanse.removed_ids.len(),
        "known_flipped": ds.flipped_ids.len(),
        "cleanse_precision": (!ds.flipped_ids.is_empty()).then(|| precision(&outcome.cleanse.removed_ids, &ds.flipped_ids)),
        "random_precision": (!ds.flipped_ids.is_empty()).then(|| precision(&outcome.random_removal.removed_ids, &ds.flipped_ids)),
        "mean_test_loss": {
            "cleanse": outcome.cleanse.mean_loss,
            "random_removal": outcome.random_removal.mean_loss,
            "no_cleansing": outcome.no_cleansing.mean_loss,
        },
        "mean_test_accuracy": {
            "cleanse": outcome.cleanse.mean_accuracy,
            "random_removal": outcome.random_removal.mean_accuracy,
            "no_cleansing": outcome.no_cleansing.mean_accuracy,
        },
    });
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(vec![report, removed, means, stab, summary_path])
}

/// Lists every CSV in the run directory with its row count and hash.
fn cmd_report(out: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, acc)?;
            } else if p.extension().is_some_and(|e| e == "csv") {
                acc.push(p);
            }
        }
        Ok(())
    }
    let mut csvs = Vec::new();
    walk(out, &mut csvs)?;
    csvs.sort();
    let mut listing = Vec::new();
    for p in &csvs {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        listing.push(serde_json::json!({
            "path": p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/"),
            "rows": text.lines().count().saturating_sub(1),
            "sha256": hex(&Sha256::digest(text.as_bytes())),
        }));
    }
    let path = out.join("report.json");
    write_json(&path, &serde_json::json!({ "csv_files": listing }))?;
    Ok(vec![path])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        let spec = SyntheticSpec::blobs(vec![vec![-1.0, -1.0], vec![1.0, 1.0]], 1.0, 160, 4)
            .with_splits(30, 30)
            .with_label_noise(0.1, 2);
        ExperimentConfig {
            data: DataSource::Synthetic(spec),
            model: ModelConfig::mlp(vec![2, 8, 8, 2]),
            train: TrainConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 10,
                epochs: 5,
                shuffle_seed: 1,
                init_seed: 2,
                turnover: None,
                lr_decay: None,
            },
            mask: MaskSettings {
                global_seed: 3,
                scheme: MaskScheme::Direct,
            },
            analysis: AnalysisConfig {
                top_k: 3,
                ..AnalysisConfig::default()
            },
            loo: LooSettings {
                n_targets: 2,
                seeds: vec![1],
                force: false,
            },
            cleansing: CleansingSettings {
                fraction: 0.05,
                seeds: vec![1, 2],
                random_removal_seed: 0,
                val_sizes: vec![10, 30],
            },
            out_dir: None,
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = small_config();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn analysis_without_checkpoint_is_a_precondition_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = execute(Command::Influence, &small_config(), dir.path(), RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
    }

    #[test]
    fn plain_checkpoint_is_refused_for_estimation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let p = crate::network::init_params(&cfg.model, 1).unwrap();
        Checkpoint::new(&cfg.model, &p, None).save(&dir.path().join("checkpoint.json")).unwrap();
        let err = execute(Command::SelfInfluence, &cfg, dir.path(), RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoTurnover));
    }

    #[test]
    fn csv_source_assigns_seeded_splits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows: String = (0..20).map(|i| format!("{},{},{}\n", i, -i, i % 2)).collect();
        fs::write(&path, rows).unwrap();
        let mut cfg = small_config();
        cfg.data = DataSource::Csv {
            path,
            has_header: false,
            n_val: 3,
            n_test: 4,
            split_seed: 9,
        };
        let ds = cfg.load_dataset().unwrap();
        assert_eq!(ds.split(Split::Val).len(), 3);
        assert_eq!(ds.split(Split::Test).len(), 4);
        assert_eq!(ds, cfg.load_dataset().unwrap());
    }

    #[test]
    fn commands_write_the_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = small_config();
        let opts = RunOptions { jobs: 2 };
        for c in [
            Command::Train,
            Command::Curves,
            Command::Influence,
            Command::SelfInfluence,
            Command::Interpret,
            Command::LooValidate,
            Command::Cleanse,
            Command::Report,
        ] {
            execute(c, &cfg, out, opts).unwrap();
        }
        for f in [
            "config.json",
            "checkpoint.json",
            "curves.csv",
            "manifest.json",
            "influence/self_influence.csv",
            "influence/self_influence_histogram.csv",
            "influence/interpret.csv",
            "oracle/influence_seed1.csv",
            "oracle/oracle_seed1.csv",
            "oracle/correlation.csv",
            "cleansing/report.csv",
            "report.json",
        ] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        let manifest = Manifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        assert_eq!(manifest.entries[0].config_hash, cfg.hash());
        let header = fs::read_to_string(out.join("oracle/oracle_seed1.csv")).unwrap();
        assert!(header.starts_with("target_id,train_id,full_loss,loo_loss,true_influence\n"));
        let header = fs::read_to_string(out.join("cleansing/report.csv")).unwrap();
        assert!(header.starts_with("variant,seed,test_accuracy,test_loss\n"));
    }
}
