//! Data cleansing by mean validation influence.
//!
//! A turn-over model scores each training instance by its mean influence on
//! a validation set. The most negative fraction is removed and models are
//! retrained plainly. Random removal of the same count and no removal serve
//! as baselines.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::influence::{mean_influence_on_set, Estimator, TurnoverModel};
use crate::network::ModelConfig;
use crate::numeric::{KeyedRng, RngKey};
use crate::stats::{mean, spearman, std_dev};
use crate::training::{evaluate, train, TrainConfig};

const TAG_RANDOM_REMOVAL: u64 = 0x7272_6d76;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cleanse,
    RandomRemoval,
    NoCleansing,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cleanse => "cleanse",
            Variant::RandomRemoval => "random_removal",
            Variant::NoCleansing => "no_cleansing",
        }
    }
}

fn removal_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("removal fraction must lie in (0, 1), got {fraction}")));
    }
    let count = (fraction * n as f64).floor() as usize;
    if count == 0 {
        return Err(Error::Precondition(format!("fraction {fraction} of {n} instances removes nothing")));
    }
    Ok(count)
}

/// The `floor(fraction * N)` ids with the smallest mean influence, most
/// harmful first; ties go to the lower id.
pub fn select_harmful(mean_influences: &[(u64, f64)], fraction: f64) -> Result<Vec<u64>> {
    let count = removal_count(mean_influences.len(), fraction)?;
    let mut sorted = mean_influences.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(sorted.into_iter().take(count).map(|(id, _)| id).collect())
}

/// `floor(fraction * N)` ids drawn uniformly without replacement, sorted.
pub fn select_random(ids: &[u64], fraction: f64, seed: u64) -> Result<Vec<u64>> {
    let count = removal_count(ids.len(), fraction)?;
    let mut pool = ids.to_vec();
    let mut rng = KeyedRng::new(RngKey::tagged(seed, TAG_RANDOM_REMOVAL, 0, 0), 0);
    let (chosen, _) = pool.partial_shuffle(&mut rng, count);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Fraction of `removed` that lies in `flipped`.
pub fn precision(removed: &[u64], flipped: &[u64]) -> f64 {
    if removed.is_empty() {
        return 0.0;
    }
    let flipped: HashSet<u64> = flipped.iter().copied().collect();
    removed.iter().filter(|id| flipped.contains(id)).count() as f64 / removed.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleansingReport {
    pub variant: Variant,
    pub removed_ids: Vec<u64>,
    pub removal_fraction: f64,
    pub runs: Vec<SeedRun>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_loss: f64,
    pub sd_loss: f64,
}

impl CleansingReport {
    fn new(variant: Variant, removed_ids: Vec<u64>, removal_fraction: f64, runs: Vec<SeedRun>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let loss: Vec<f64> = runs.iter().map(|r| r.test_loss).collect();
        Self {
            variant,
            removed_ids,
            removal_fraction,
            mean_accuracy: mean(&acc),
            sd_accuracy: std_dev(&acc),
            mean_loss: mean(&loss),
            sd_loss: std_dev(&loss),
            runs,
        }
    }
}

/// `variant,seed,test_accuracy,test_loss` rows per seed, then `mean` and
/// `sd` aggregate rows for each variant.
pub fn write_report_csv<W: Write>(reports: &[CleansingReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "variant,seed,test_accuracy,test_loss")?;
    for r in reports {
        for run in &r.runs {
            writeln!(w, "{},{},{},{}", r.variant.as_str(), run.seed, run.test_accuracy, run.test_loss)?;
        }
        writeln!(w, "{},mean,{},{}", r.variant.as_str(), r.mean_accuracy, r.mean_loss)?;
        writeln!(w, "{},sd,{},{}", r.variant.as_str(), r.sd_accuracy, r.sd_loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleansingConfig {
    pub fraction: f64,
    /// One plain retrain per seed; each seed sets both the init and
    /// shuffle seeds of the retrain.
    pub seeds: Vec<u64>,
    /// Configuration of the turn-over model used for scoring.
    pub scoring: TrainConfig,
    /// Base configuration of the plain retrains.
    pub retrain: TrainConfig,
    pub random_removal_seed: u64,
    #[serde(default)]
    pub estimator: Estimator,
}

#[derive(Clone, Debug)]
pub struct CleansingOutcome {
    pub mean_influences: Vec<(u64, f64)>,
    pub cleanse: CleansingReport,
    pub random_removal: CleansingReport,
    pub no_cleansing: CleansingReport,
}

impl CleansingOutcome {
    pub fn reports(&self) -> [&CleansingReport; 3] {
        [&self.cleanse, &self.random_removal, &self.no_cleansing]
    }
}

fn retrain_runs(
    train_set: &[Instance],
    removed: &[u64],
    test_set: &[Instance],
    cfg: &CleansingConfig,
    model_config: &ModelConfig,
    jobs: usize,
) -> Result<Vec<SeedRun>> {
    let removed: HashSet<u64> = removed.iter().copied().collect();
    let kept: Vec<Instance> = train_set.iter().filter(|z| !removed.contains(&z.id)).cloned().collect();
    let run = |&seed: &u64| -> Result<SeedRun> {
        let tc = TrainConfig {
            init_seed: seed,
            shuffle_seed: seed,
            turnover: None,
            ..cfg.retrain.clone()
        };
        let params = train(&kept, &tc, model_config, None, None)?.params;
        let (test_accuracy, test_loss) = evaluate(&params, model_config, test_set)?;
        Ok(SeedRun {
            seed,
            test_accuracy,
            test_loss,
        })
    };
    if jobs <= 1 {
        cfg.seeds.iter().map(run).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| cfg.seeds.par_iter().map(run).collect()),
            Err(_) => cfg.seeds.iter().map(run).collect(),
        }
    }
}

/// Scores, removes and retrains for all three variants.
pub fn run_cleansing_experiment(
    train_set: &[Instance],
    val_set: &[Instance],
    test_set: &[Instance],
    cfg: &CleansingConfig,
    model_config: &ModelConfig,
    jobs: usize,
) -> Result<CleansingOutcome> {
    if cfg.seeds.len() < 2 {
        return Err(Error::Config("cleansing needs at least two retrain seeds".into()));
    }
    let split_ids = |s: &[Instance]| s.iter().map(|z| z.id).collect::<HashSet<_>>();
    let (a, b, c) = (split_ids(train_set), split_ids(val_set), split_ids(test_set));
    if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
        return Err(Error::Precondition("train, validation and test splits overlap".into()));
    }
    let plan = cfg
        .scoring
        .turnover
        .clone()
        .ok_or_else(|| Error::Config("scoring configuration needs a turn-over plan".into()))?;
    let ids: Vec<u64> = train_set.iter().map(|z| z.id).collect();
    // fail fast on a fraction that removes nothing
    removal_count(ids.len(), cfg.fraction)?;

    let params = train(train_set, &cfg.scoring, model_config, None, None)?.params;
    let model = TurnoverModel::new(params, model_config.clone(), plan)?;
    let mean_influences = mean_influence_on_set(&model, val_set, &ids, cfg.estimator, jobs)?;

    let harmful = select_harmful(&mean_influences, cfg.fraction)?;
    let random = select_random(&ids, cfg.fraction, cfg.random_removal_seed)?;

    let cleanse = CleansingReport::new(
        Variant::Cleanse,
        harmful.clone(),
        cfg.fraction,
        retrain_runs(train_set, &harmful, test_set, cfg, model_config, jobs)?,
    );
    let random_removal = CleansingReport::new(
        Variant::RandomRemoval,
        random.clone(),
        cfg.fraction,
        retrain_runs(train_set, &random, test_set, cfg, model_config, jobs)?,
    );
    let no_cleansing = CleansingReport::new(
        Variant::NoCleansing,
        Vec::new(),
        0.0,
        retrain_runs(train_set, &[], test_set, cfg, model_config, jobs)?,
    );
    Ok(CleansingOutcome {
        mean_influences,
        cleanse,
        random_removal,
        no_cleansing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub val_size: usize,
    /// Rank correlation of mean influences against the full validation set.
    pub spearman: f64,
    /// Overlap of the removed sets, |A ∩ B| / |A ∪ B|.
    pub jaccard: f64,
}

/// How much the harmful ranking moves when only a prefix of the validation
/// set is used.
pub fn ranking_stability(
    model: &TurnoverModel,
    val_set: &[Instance],
    train_ids: &[u64],
    sizes: &[usize],
    fraction: f64,
    estimator: Estimator,
    jobs: usize,
) -> Result<Vec<StabilityRow>> {
    let reference = mean_influence_on_set(model, val_set, train_ids, estimator, jobs)?;
    let ref_values: Vec<f64> = reference.iter().map(|r| r.1).collect();
    let ref_removed: HashSet<u64> = select_harmful(&reference, fraction)?.into_iter().collect();
    sizes
        .iter()
        .filter(|&&s| s >= 1 && s <= val_set.len())
        .map(|&s| {
            let means = mean_influence_on_set(model, &val_set[..s], train_ids, estimator, jobs)?;
            let values: Vec<f64> = means.iter().map(|r| r.1).collect();
            let removed: HashSet<u64> = select_harmful(&means, fraction)?.into_iter().collect();
            let inter = removed.intersection(&ref_removed).count() as f64;
            let union = removed.union(&ref_removed).count() as f64;
            Ok(StabilityRow {
                val_size: s,
                spearman: spearman(&values, &ref_values),
                jaccard: inter / union,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticSpec};
    use crate::masking::MaskScheme;

    #[test]
    fn harmful_selection_examples() {
        let means = vec![(1, -0.5), (2, 0.1), (3, -0.2), (4, 0.3)];
        assert_eq!(select_harmful(&means, 0.25).unwrap(), vec![1]);
        assert_eq!(select_harmful(&means, 0.5).unwrap(), vec![1, 3]);
        let flat = vec![(3, 0.0), (1, 0.0), (4, 0.0), (2, 0.0)];
        assert_eq!(select_harmful(&flat, 0.25).unwrap(), vec![1]);
    }

    #[test]
    fn selecting_nothing_is_an_error() {
        let means = vec![(1, -0.5), (2, 0.1)];
        assert!(matches!(select_harmful(&means, 0.1), Err(Error::Precondition(_))));
        assert!(select_harmful(&means, 1.0).is_err());
        assert!(select_random(&[1, 2], 0.1, 0).is_err());
    }

    #[test]
    fn random_removal_is_seeded() {
        let ids: Vec<u64> = (0..100).collect();
        let a = select_random(&ids, 0.1, 4).unwrap();
        assert_eq!(a, select_random(&ids, 0.1, 4).unwrap());
        assert_eq!(a.len(), 10);
        assert_ne!(a, select_random(&ids, 0.1, 5).unwrap());
    }

    #[test]
    fn precision_counts_hits() {
        assert_eq!(precision(&[1, 2, 3, 4], &[2, 4, 9]), 0.5);
        assert_eq!(precision(&[], &[1]), 0.0);
    }

    #[test]
    fn report_csv_layout() {
        let r = CleansingReport::new(
            Variant::NoCleansing,
            vec![],
            0.0,
            vec![
                SeedRun {
                    seed: 1,
                    test_accuracy: 0.5,
                    test_loss: 1.0,
                },
                SeedRun {
                    seed: 2,
                    test_accuracy: 1.0,
                    test_loss: 0.0,
                },
            ],
        );
        let mut buf = Vec::new();
        write_report_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "variant,seed,test_accuracy,test_loss");
        assert_eq!(lines[3], "no_cleansing,mean,0.75,0.5");
        assert!(lines[4].starts_with("no_cleansing,sd,0.35355"));
    }

    fn small_experiment() -> (Vec<Instance>, Vec<Instance>, Vec<Instance>, CleansingConfig, ModelConfig) {
        let spec = SyntheticSpec::blobs(vec![vec![-1.5, -1.5], vec![1.5, 1.5]], 1.0, 300, 3)
            .with_splits(50, 50)
            .with_label_noise(0.1, 7);
        let ds = generate_synthetic(&spec).unwrap();
        let mc = ModelConfig::mlp(vec![2, 16, 2]);
        let base = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 20,
            epochs: 10,
            shuffle_seed: 1,
            init_seed: 1,
            turnover: None,
            lr_decay: None,
        };
        let cfg = CleansingConfig {
            fraction: 0.05,
            seeds: vec![1, 2],
            scoring: TrainConfig {
                turnover: Some(mc.mask_plan(9, MaskScheme::Direct)),
                ..base.clone()
            },
            retrain: base,
            random_removal_seed: 3,
            estimator: Estimator::Standard,
        };
        (ds.split(Split::Train), ds.split(Split::Val), ds.split(Split::Test), cfg, mc)
    }

    #[test]
    fn experiment_produces_three_consistent_reports() {
        let (tr, va, te, cfg, mc) = small_experiment();
        let out = run_cleansing_experiment(&tr, &va, &te, &cfg, &mc, 2).unwrap();
        assert_eq!(out.cleanse.removed_ids.len(), 10);
        assert_eq!(out.random_removal.removed_ids.len(), 10);
        assert!(out.no_cleansing.removed_ids.is_empty());
        for r in out.reports() {
            assert_eq!(r.runs.len(), 2);
        }
        let again = run_cleansing_experiment(&tr, &va, &te, &cfg, &mc, 1).unwrap();
        assert_eq!(again.cleanse, out.cleanse);
        assert_eq!(again.random_removal, out.random_removal);
    }

    #[test]
    fn experiment_preconditions() {
        let (tr, va, te, mut cfg, mc) = small_experiment();
        assert!(run_cleansing_experiment(&tr, &tr, &te, &cfg, &mc, 1).is_err());
        cfg.fraction = 0.001;
        assert!(run_cleansing_experiment(&tr, &va, &te, &cfg, &mc, 1).is_err());
        cfg.fraction = 0.05;
        cfg.seeds = vec![1];
        assert!(run_cleansing_experiment(&tr, &va, &te, &cfg, &mc, 1).is_err());
    }

    #[test]
    fn full_validation_prefix_is_perfectly_stable() {
        let (tr, va, _, cfg, mc) = small_experiment();
        let params = train(&tr, &cfg.scoring, &mc, None, None).unwrap().params;
        let model = TurnoverModel::new(params, mc, cfg.scoring.turnover.clone().unwrap()).unwrap();
        let ids: Vec<u64> = tr.iter().map(|z| z.id).collect();
        let rows = ranking_stability(&model, &va, &ids, &[10, 50, 500], 0.05, Estimator::Standard, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].val_size, 50);
        assert!((rows[1].spearman - 1.0).abs() < 1e-12);
        assert_eq!(rows[1].jaccard, 1.0);
    }
}
