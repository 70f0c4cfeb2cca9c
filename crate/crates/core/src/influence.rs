//! Influence estimation from a turn-over trained model, self-influence, and
//! the leave-one-out retraining oracle it is validated against.
//!
//! For a training instance `z_i` the estimate on a target is
//! `L(f^flip(z_i), target) - L(f^mask(z_i), target)`: the loss of the
//! sub-network that never saw `z_i` minus the loss of the one trained on it.
//! Only forward passes are involved.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::masking::{Mask, MaskGenerator, MaskPlan};
use crate::network::{logits, Checkpoint, ModelConfig, ModelParams};
use crate::numeric::{cross_entropy, matmul, Matrix, Vector};
use crate::training::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub target_id: u64,
    pub train_id: u64,
    pub estimate: f64,
    pub flipped_loss: f64,
    pub masked_loss: f64,
}

impl InfluenceRecord {
    fn new(target_id: u64, train_id: u64, flipped_loss: f64, masked_loss: f64) -> Self {
        Self {
            target_id,
            train_id,
            estimate: flipped_loss - masked_loss,
            flipped_loss,
            masked_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub target_id: u64,
    pub train_id: u64,
    pub true_influence: f64,
    pub loo_loss: f64,
    pub full_loss: f64,
}

/// Which network stands in for "trained with `z_i`".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// The instance's own masked sub-network.
    #[default]
    Standard,
    /// The unmasked full network.
    FullnetBaseline,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "fullnet-baseline" => Ok(Self::FullnetBaseline),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

/// A model trained with turn-over dropout together with its mask source.
#[derive(Clone, Debug)]
pub struct TurnoverModel {
    pub params: ModelParams,
    pub config: ModelConfig,
    masks: MaskGenerator,
    transposed: Vec<Matrix>,
}

impl TurnoverModel {
    pub fn new(params: ModelParams, config: ModelConfig, plan: MaskPlan) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if plan.layer_widths != config.mask_widths() {
            return Err(Error::Config("mask plan does not match the model's masked layers".into()));
        }
        let transposed = params.weights.iter().map(Matrix::transpose).collect();
        Ok(Self {
            masks: MaskGenerator::new(plan)?,
            params,
            config,
            transposed,
        })
    }

    /// Refuses checkpoints trained without turn-over dropout.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let plan = ck.mask_plan.clone().ok_or(Error::NoTurnover)?;
        Self::new(ck.params()?, ck.config.clone(), plan)
    }

    pub fn plan(&self) -> &MaskPlan {
        self.masks.plan()
    }

    pub fn masks(&self) -> &MaskGenerator {
        &self.masks
    }

    fn loss(&self, target: &Instance, mask: Option<&Mask>) -> Result<f64> {
        cross_entropy(&logits(&self.params, &self.config, &target.features, mask)?, target.label)
    }

    fn record(&self, target: &Instance, train_id: u64, estimator: Estimator, full_loss: f64) -> Result<InfluenceRecord> {
        let (m, f) = self.masks.mask_pair(train_id);
        let flipped = self.loss(target, Some(&f))?;
        let masked = match estimator {
            Estimator::Standard => self.loss(target, Some(&m))?,
            Estimator::FullnetBaseline => full_loss,
        };
        Ok(InfluenceRecord::new(target.id, train_id, flipped, masked))
    }

    fn full_loss(&self, target: &Instance, estimator: Estimator) -> Result<f64> {
        match estimator {
            Estimator::Standard => Ok(f64::NAN),
            Estimator::FullnetBaseline => self.loss(target, None),
        }
    }

    /// Target losses under each mask in `masks`, evaluated together: the
    /// unmasked prefix is shared and masked layers run as one matrix product.
    fn batched_losses(&self, target: &Instance, masks: &[&Mask]) -> Result<Vec<f64>> {
        enum State {
            Shared(Vector),
            Rows(Matrix),
        }
        let n = self.params.weights.len();
        let slots = self.config.mask_slots();
        let b = masks.len();
        let mut state = State::Shared(target.features.clone());
        for l in 0..n {
            let bias = self.params.biases[l].as_ref();
            let z = match state {
                State::Shared(h) => {
                    let mut z = self.params.weights[l].matvec(&h)?;
                    if let Some(bias) = bias {
                        z.iter_mut().zip(bias).for_each(|(z, b)| *z += b);
                    }
                    State::Shared(z)
                }
                State::Rows(h) => {
                    let mut z = matmul(&h, &self.transposed[l])?;
                    if let Some(bias) = bias {
                        for r in 0..b {
                            z.row_mut(r).iter_mut().zip(bias).for_each(|(z, b)| *z += b);
                        }
                    }
                    State::Rows(z)
                }
            };
            if l + 1 == n {
                return match z {
                    State::Shared(z) => {
                        let loss = cross_entropy(&z, target.label)?;
                        Ok(vec![loss; b])
                    }
                    State::Rows(z) => (0..b).map(|r| cross_entropy(z.row(r), target.label)).collect(),
                };
            }
            state = match (z, slots[l]) {
                (State::Shared(z), None) => State::Shared(z.iter().map(|v| v.max(0.0)).collect()),
                (State::Shared(z), Some(s)) => {
                    let mut h = Matrix::zeros(b, z.len());
                    for (r, m) in masks.iter().enumerate() {
                        h.row_mut(r)
                            .iter_mut()
                            .zip(z.iter().zip(m.layer(s)))
                            .for_each(|(h, (&z, &m))| *h = z.max(0.0) * m);
                    }
                    State::Rows(h)
                }
                (State::Rows(mut z), slot) => {
                    for r in 0..b {
                        let m = slot.map(|s| masks[r].layer(s));
                        z.row_mut(r).iter_mut().enumerate().for_each(|(j, v)| {
                            *v = v.max(0.0) * m.map_or(1.0, |m| m[j]);
                        });
                    }
                    State::Rows(z)
                }
            };
        }
        unreachable!("network has an output layer")
    }
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    if jobs <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// One record per training id, evaluated one id at a time.
pub fn estimate_influence(
    model: &TurnoverModel,
    target: &Instance,
    train_ids: &[u64],
    estimator: Estimator,
) -> Result<Vec<InfluenceRecord>> {
    let full = model.full_loss(target, estimator)?;
    train_ids.iter().map(|&id| model.record(target, id, estimator, full)).collect()
}

/// Same records as [`estimate_influence`], computed `batch_size` ids at a
/// time with up to `jobs` worker threads. `jobs <= 1` stays on the calling
/// thread.
pub fn estimate_influence_batched(
    model: &TurnoverModel,
    target: &Instance,
    train_ids: &[u64],
    estimator: Estimator,
    batch_size: usize,
    jobs: usize,
) -> Result<Vec<InfluenceRecord>> {
    let full = model.full_loss(target, estimator)?;
    let run_chunk = |chunk: &[u64]| -> Result<Vec<InfluenceRecord>> {
        let pairs: Vec<(Mask, Mask)> = chunk.iter().map(|&id| model.masks.mask_pair(id)).collect();
        let flipped: Vec<&Mask> = pairs.iter().map(|(_, f)| f).collect();
        let flipped = model.batched_losses(target, &flipped)?;
        let masked = match estimator {
            Estimator::Standard => {
                let masked: Vec<&Mask> = pairs.iter().map(|(m, _)| m).collect();
                model.batched_losses(target, &masked)?
            }
            Estimator::FullnetBaseline => vec![full; chunk.len()],
        };
        Ok(chunk
            .iter()
            .zip(flipped.into_iter().zip(masked))
            .map(|(&id, (f, m))| InfluenceRecord::new(target.id, id, f, m))
            .collect())
    };
    let chunks: Vec<&[u64]> = train_ids.chunks(batch_size.max(1)).collect();
    let parts: Vec<Vec<InfluenceRecord>> = if jobs <= 1 {
        chunks.into_iter().map(run_chunk).collect::<Result<_>>()?
    } else {
        with_jobs(jobs, || chunks.into_par_iter().map(run_chunk).collect::<Result<_>>())?
    };
    Ok(parts.into_iter().flatten().collect())
}

/// Bin edges and counts over a set of values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<(f64, f64, usize)>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the last bin is closed.
    pub fn from_values(values: &[f64], n_bins: usize) -> Self {
        let n_bins = n_bins.max(1);
        if values.is_empty() {
            return Self { bins: Vec::new() };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; n_bins];
        for &v in values {
            let i = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[i] += 1;
        }
        let bins = counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let left = lo + i as f64 * width;
                let right = if i + 1 == n_bins && hi > lo { hi } else { lo + (i + 1) as f64 * width };
                (left, right, c)
            })
            .collect();
        Self { bins }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_left,bin_right,count")?;
        for (l, r, c) in &self.bins {
            writeln!(w, "{l},{r},{c}")?;
        }
        Ok(())
    }
}

/// Influence of every training instance on its own prediction.
pub fn self_influence(
    model: &TurnoverModel,
    train_set: &[Instance],
    estimator: Estimator,
    n_bins: usize,
) -> Result<(Vec<InfluenceRecord>, Histogram)> {
    let records = train_set
        .iter()
        .map(|z| {
            let full = model.full_loss(z, estimator)?;
            model.record(z, z.id, estimator, full)
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = records.iter().map(|r| r.estimate).collect();
    let hist = Histogram::from_values(&values, n_bins);
    Ok((records, hist))
}

/// Mean estimate over `val_set` for each training id, in `train_ids` order.
pub fn mean_influence_on_set(
    model: &TurnoverModel,
    val_set: &[Instance],
    train_ids: &[u64],
    estimator: Estimator,
    jobs: usize,
) -> Result<Vec<(u64, f64)>> {
    if val_set.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let fulls = val_set
        .iter()
        .map(|v| model.full_loss(v, estimator))
        .collect::<Result<Vec<_>>>()?;
    let per_id = |&id: &u64| -> Result<(u64, f64)> {
        let (m, f) = model.masks.mask_pair(id);
        let mut total = 0.0;
        for (v, &full) in val_set.iter().zip(&fulls) {
            let flipped = model.loss(v, Some(&f))?;
            let masked = match estimator {
                Estimator::Standard => model.loss(v, Some(&m))?,
                Estimator::FullnetBaseline => full,
            };
            total += flipped - masked;
        }
        Ok((id, total / val_set.len() as f64))
    };
    if jobs <= 1 {
        train_ids.iter().map(per_id).collect()
    } else {
        with_jobs(jobs, || train_ids.par_iter().map(per_id).collect())
    }
}

/// The full targets-by-training-ids table, row-major by target.
pub fn influence_table(
    model: &TurnoverModel,
    targets: &[Instance],
    train_ids: &[u64],
    estimator: Estimator,
    jobs: usize,
) -> Result<Vec<InfluenceRecord>> {
    let rows: Vec<Vec<InfluenceRecord>> = if jobs <= 1 {
        targets
            .iter()
            .map(|t| estimate_influence(model, t, train_ids, estimator))
            .collect::<Result<_>>()?
    } else {
        with_jobs(jobs, || {
            targets
                .par_iter()
                .map(|t| estimate_influence(model, t, train_ids, estimator))
                .collect::<Result<_>>()
        })?
    };
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOrder {
    MostPositive,
    MostNegative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub records: Vec<InfluenceRecord>,
    /// `k` exceeded the number of records; everything was returned.
    pub truncated_k: bool,
}

/// Top `k` records by estimate, ties broken by ascending train id.
pub fn rank_influences(records: &[InfluenceRecord], k: usize, order: RankOrder) -> Result<Ranked> {
    if records.is_empty() || k == 0 {
        return Err(Error::Precondition("ranking needs records and k >= 1".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        let by_value = match order {
            RankOrder::MostPositive => b.estimate.total_cmp(&a.estimate),
            RankOrder::MostNegative => a.estimate.total_cmp(&b.estimate),
        };
        by_value.then(a.train_id.cmp(&b.train_id))
    });
    let truncated_k = k > sorted.len();
    sorted.truncate(k);
    Ok(Ranked {
        records: sorted,
        truncated_k,
    })
}

/// Largest dataset the oracle retrains over without `force`.
pub const ORACLE_SIZE_LIMIT: usize = 2000;

/// Leave-one-out retraining oracle. `f_D` is trained once on construction;
/// each `f_{D \ z_i}` replays the same schedule without `z_i`.
#[derive(Clone, Debug)]
pub struct LooOracle {
    dataset: Vec<Instance>,
    train_config: TrainConfig,
    model_config: ModelConfig,
    full: ModelParams,
}

impl LooOracle {
    pub fn new(dataset: &[Instance], train_config: &TrainConfig, model_config: &ModelConfig, force: bool) -> Result<Self> {
        if train_config.turnover.is_some() {
            return Err(Error::Precondition("the oracle retrains without turn-over dropout".into()));
        }
        if dataset.len() > ORACLE_SIZE_LIMIT && !force {
            return Err(Error::Precondition(format!(
                "leave-one-out over {} instances retrains {} models; pass force to proceed",
                dataset.len(),
                dataset.len()
            )));
        }
        let full = train(dataset, train_config, model_config, None, None)?.params;
        Ok(Self {
            dataset: dataset.to_vec(),
            train_config: train_config.clone(),
            model_config: model_config.clone(),
            full,
        })
    }

    pub fn full_params(&self) -> &ModelParams {
        &self.full
    }

    pub fn retrain_without(&self, train_id: u64) -> Result<ModelParams> {
        Ok(train(&self.dataset, &self.train_config, &self.model_config, Some(train_id), None)?.params)
    }

    fn loss(&self, params: &ModelParams, z: &Instance) -> Result<f64> {
        cross_entropy(&logits(params, &self.model_config, &z.features, None)?, z.label)
    }

    pub fn true_influence(&self, target: &Instance, train_id: u64) -> Result<OracleRecord> {
        let loo = self.retrain_without(train_id)?;
        self.record(&loo, target, train_id)
    }

    fn record(&self, loo: &ModelParams, target: &Instance, train_id: u64) -> Result<OracleRecord> {
        let full_loss = self.loss(&self.full, target)?;
        let loo_loss = self.loss(loo, target)?;
        Ok(OracleRecord {
            target_id: target.id,
            train_id,
            true_influence: loo_loss - full_loss,
            loo_loss,
            full_loss,
        })
    }

    /// One retrain per training id, scored against every target. Records
    /// are ordered by target, then by `train_ids` order.
    pub fn table(&self, targets: &[Instance], train_ids: &[u64], jobs: usize) -> Result<Vec<OracleRecord>> {
        let per_id = |&id: &u64| -> Result<Vec<OracleRecord>> {
            let loo = self.retrain_without(id)?;
            targets.iter().map(|t| self.record(&loo, t, id)).collect()
        };
        let by_id: Vec<Vec<OracleRecord>> = if jobs <= 1 {
            train_ids.iter().map(per_id).collect::<Result<_>>()?
        } else {
            with_jobs(jobs, || train_ids.par_iter().map(per_id).collect::<Result<_>>())?
        };
        let mut out = Vec::with_capacity(targets.len() * train_ids.len());
        for t in 0..targets.len() {
            for row in &by_id {
                out.push(row[t].clone());
            }
        }
        Ok(out)
    }
}

/// One-shot oracle value; prefer [`LooOracle`] when scoring many ids.
pub fn true_influence_loo(
    dataset: &[Instance],
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    target: &Instance,
    train_id: u64,
) -> Result<OracleRecord> {
    LooOracle::new(dataset, train_config, model_config, false)?.true_influence(target, train_id)
}

pub fn write_influence_csv<W: Write>(records: &[InfluenceRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "target_id,train_id,flipped_loss,masked_loss,estimate")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.target_id, r.train_id, r.flipped_loss, r.masked_loss, r.estimate)?;
    }
    Ok(())
}

pub fn write_oracle_csv<W: Write>(records: &[OracleRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "target_id,train_id,full_loss,loo_loss,true_influence")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.target_id, r.train_id, r.full_loss, r.loo_loss, r.true_influence)?;
    }
    Ok(())
}

/// Writes through a buffered file, mapping errors to the path.
pub fn save_with<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
{
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
