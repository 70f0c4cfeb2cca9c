//! Deterministic mini-batch SGD with per-instance turn-over masks.
//!
//! The batch schedule depends only on the dataset size and the shuffle
//! seed. Leave-one-out runs reuse the full-dataset schedule and drop the
//! excluded instance from its batch, so every other batch is identical.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::masking::{MaskGenerator, MaskPlan};
use crate::network::{init_params, instance_gradients, logits, loss_on, Gradients, ModelConfig, ModelParams};
use crate::numeric::{argmax, cross_entropy, KeyedRng, RngKey};

const TAG_SCHEDULE: u64 = 0x7363_6864;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    /// Absent means plain training.
    #[serde(default)]
    pub turnover: Option<MaskPlan>,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        if let Some(d) = &self.lr_decay {
            if d.every_epochs == 0 || !(d.factor > 0.0) {
                return Err(Error::Config("step decay needs every_epochs >= 1 and factor > 0".into()));
            }
        }
        if let Some(plan) = &self.turnover {
            plan.validate()?;
        }
        Ok(())
    }

    pub fn plain(&self) -> Self {
        Self {
            turnover: None,
            ..self.clone()
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match &self.lr_decay {
            None => self.learning_rate,
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every_epochs) as i32),
        }
    }
}

/// `schedule[epoch][batch]` lists positions into the training slice.
pub type Schedule = Vec<Vec<Vec<usize>>>;

pub fn make_schedule(n: usize, config: &TrainConfig) -> Schedule {
    (0..config.epochs)
        .map(|epoch| {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = KeyedRng::new(RngKey::tagged(config.shuffle_seed, TAG_SCHEDULE, epoch as u64, 0), 0);
            order.shuffle(&mut rng);
            order.chunks(config.batch_size.max(1)).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub masked_train_loss: Option<f64>,
    pub flipped_train_loss: Option<f64>,
    pub full_train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub skipped_batches: usize,
    /// Set when a batch loss exceeded ten times the first batch loss, or
    /// went non-finite.
    pub diverged: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,masked_train_loss,flipped_train_loss,full_train_loss,test_loss,test_accuracy")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch,
                fmt_opt(r.masked_train_loss),
                fmt_opt(r.flipped_train_loss),
                r.full_train_loss,
                r.test_loss,
                r.test_accuracy
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Optional per-epoch curve logging against a held-out set.
#[derive(Clone, Copy, Debug)]
pub struct Monitor<'a> {
    pub test_set: &'a [Instance],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Trains on `train_set`, dropping `excluded_id` from its scheduled batch
/// when set. With a turn-over plan every instance is forwarded and
/// backpropagated through its own mask.
pub fn train(
    train_set: &[Instance],
    config: &TrainConfig,
    model_config: &ModelConfig,
    excluded_id: Option<u64>,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if let Some(id) = excluded_id {
        if !train_set.iter().any(|z| z.id == id) {
            return Err(Error::UnknownInstance(id));
        }
    }
    let masks = match &config.turnover {
        Some(plan) => {
            if plan.layer_widths != model_config.mask_widths() || plan.keep_prob != model_config.keep_prob {
                return Err(Error::Config("turn-over plan does not match the model's masked layers".into()));
            }
            Some(MaskGenerator::new(plan.clone())?)
        }
        None => None,
    };

    let mut params = init_params(model_config, config.init_seed)?;
    let mut velocity = Gradients::zeros_like(&params);
    let mut log = TrainLog::default();
    let mut first_loss = None;

    for (epoch, batches) in make_schedule(train_set.len(), config).into_iter().enumerate() {
        let lr = config.lr_at(epoch);
        for batch in batches {
            let members: Vec<&Instance> = batch
                .iter()
                .map(|&i| &train_set[i])
                .filter(|z| Some(z.id) != excluded_id)
                .collect();
            if members.is_empty() {
                log.skipped_batches += 1;
                continue;
            }
            let mut grads = Gradients::zeros_like(&params);
            let mut batch_loss = 0.0;
            for z in &members {
                let mask = masks.as_ref().map(|g| g.mask(z.id));
                let (loss, g) = instance_gradients(&params, model_config, z, mask.as_ref())?;
                batch_loss += loss;
                grads.add_assign(&g);
            }
            let inv = 1.0 / members.len() as f64;
            grads.scale(inv);
            batch_loss *= inv;
            let base = *first_loss.get_or_insert(batch_loss);
            if !batch_loss.is_finite() || batch_loss > 10.0 * base {
                log.diverged = true;
            }
            sgd_step(&mut params, &mut velocity, &grads, lr, config.momentum);
        }
        if let Some(m) = monitor {
            let others: Vec<Instance>;
            let curve_set: &[Instance] = match excluded_id {
                Some(id) => {
                    others = train_set.iter().filter(|z| z.id != id).cloned().collect();
                    &others
                }
                None => train_set,
            };
            log.records
                .push(log_curves(&params, model_config, masks.as_ref(), curve_set, m.test_set, epoch + 1)?);
        }
    }
    Ok(TrainOutcome { params, log })
}

fn sgd_step(params: &mut ModelParams, velocity: &mut Gradients, grads: &Gradients, lr: f64, momentum: f64) {
    for ((w, v), g) in params.weights.iter_mut().zip(&mut velocity.weights).zip(&grads.weights) {
        for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
    for ((b, v), g) in params.biases.iter_mut().zip(&mut velocity.biases).zip(&grads.biases) {
        if let (Some(b), Some(v), Some(g)) = (b, v, g) {
            for ((b, v), g) in b.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *b -= lr * *v;
            }
        }
    }
}

/// Full-network accuracy and mean loss.
pub fn evaluate(params: &ModelParams, model_config: &ModelConfig, dataset: &[Instance]) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let mut total = 0.0;
    for z in dataset {
        let out = logits(params, model_config, &z.features, None)?;
        if argmax(&out) == z.label {
            correct += 1;
        }
        total += cross_entropy(&out, z.label)?;
    }
    let n = dataset.len() as f64;
    Ok((correct as f64 / n, total / n))
}

/// One curve record: masked and flipped train losses (each instance under
/// its own masks) next to the full-network train and test losses.
pub fn log_curves(
    params: &ModelParams,
    model_config: &ModelConfig,
    masks: Option<&MaskGenerator>,
    train_set: &[Instance],
    test_set: &[Instance],
    epoch: usize,
) -> Result<EpochRecord> {
    let (_, full_train_loss) = evaluate(params, model_config, train_set)?;
    let (test_accuracy, test_loss) = evaluate(params, model_config, test_set)?;
    let (mut masked_train_loss, mut flipped_train_loss) = (None, None);
    if let Some(gen) = masks {
        let (mut m_sum, mut f_sum) = (0.0, 0.0);
        for z in train_set {
            let (m, f) = gen.mask_pair(z.id);
            m_sum += loss_on(params, model_config, z, Some(&m))?;
            f_sum += loss_on(params, model_config, z, Some(&f))?;
        }
        let n = train_set.len() as f64;
        masked_train_loss = Some(m_sum / n);
        flipped_train_loss = Some(f_sum / n);
    }
    Ok(EpochRecord {
        epoch,
        masked_train_loss,
        flipped_train_loss,
        full_train_loss,
        test_loss,
        test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticSpec};
    use crate::masking::{flip_mask, generate_mask, MaskScheme};
    use crate::network::init_params;
    use crate::numeric::{uniform_block, RngKey};

    fn config(epochs: usize, turnover: Option<MaskPlan>) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 10,
            epochs,
            shuffle_seed: 3,
            init_seed: 4,
            turnover,
            lr_decay: None,
        }
    }

    fn separable(n: usize) -> Vec<Instance> {
        let spec = SyntheticSpec::blobs(vec![vec![-2.0, -2.0], vec![2.0, 2.0]], 1.0, n, 9);
        generate_synthetic(&spec).unwrap().instances
    }

    #[test]
    fn schedule_partitions_each_epoch() {
        let mut c = config(2, None);
        c.batch_size = 3;
        let s = make_schedule(10, &c);
        for epoch in &s {
            assert_eq!(epoch.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
            let mut all: Vec<usize> = epoch.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(s, make_schedule(10, &c));
        assert_ne!(s[0], s[1]);
    }

    #[test]
    fn schedule_depends_on_seed() {
        let a = config(1, None);
        let mut b = a.clone();
        b.shuffle_seed = a.shuffle_seed + 1;
        assert_ne!(make_schedule(100, &a)[0], make_schedule(100, &b)[0]);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = separable(60);
        let cfg = ModelConfig::mlp(vec![2, 8, 2]);
        let plan = cfg.mask_plan(1, MaskScheme::Direct);
        let a = train(&data, &config(3, Some(plan.clone())), &cfg, None, None).unwrap();
        let b = train(&data, &config(3, Some(plan)), &cfg, None, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn exclusion_equals_training_without_the_instance_on_the_shared_schedule() {
        let data = separable(40);
        let cfg = ModelConfig::mlp(vec![2, 8, 2]);
        let tc = config(3, None);
        let loo = train(&data, &tc, &cfg, Some(7), None).unwrap().params;

        // replay the full schedule by hand with instance 7 removed
        let mut params = init_params(&cfg, tc.init_seed).unwrap();
        let mut vel = Gradients::zeros_like(&params);
        for epoch in make_schedule(data.len(), &tc) {
            for batch in epoch {
                let members: Vec<_> = batch.into_iter().filter(|&i| data[i].id != 7).collect();
                let mut g = Gradients::zeros_like(&params);
                for &i in &members {
                    g.add_assign(&instance_gradients(&params, &cfg, &data[i], None).unwrap().1);
                }
                g.scale(1.0 / members.len() as f64);
                sgd_step(&mut params, &mut vel, &g, tc.learning_rate, tc.momentum);
            }
        }
        assert_eq!(loo, params);
        assert!(train(&data, &tc, &cfg, Some(999), None).is_err());
    }

    #[test]
    fn singleton_batch_of_excluded_instance_is_skipped() {
        let data = separable(5);
        let cfg = ModelConfig::mlp(vec![2, 4, 2]);
        let mut tc = config(2, None);
        tc.batch_size = 1;
        let out = train(&data, &tc, &cfg, Some(2), None).unwrap();
        assert_eq!(out.log.skipped_batches, 2);
    }

    #[test]
    fn sanity_run_reaches_high_accuracy() {
        let data = separable(200);
        let cfg = ModelConfig::mlp(vec![2, 16, 16, 2]);
        let mut tc = config(30, Some(cfg.mask_plan(2, MaskScheme::Direct)));
        tc.learning_rate = 0.05;
        let out = train(&data, &tc, &cfg, None, None).unwrap();
        let (acc, _) = evaluate(&out.params, &cfg, &data).unwrap();
        assert!(acc >= 0.95, "{acc}");
        assert!(!out.log.diverged);
    }

    #[test]
    fn evaluate_extremes_and_mean_loss() {
        let cfg = ModelConfig::mlp(vec![2, 4, 2]);
        let mut p = init_params(&cfg, 1).unwrap();
        p.weights[1] = crate::numeric::Matrix::zeros(2, 4);
        let data = separable(10);
        let balanced = data.iter().filter(|z| z.label == 0).count() == 5;
        assert!(balanced);
        let (acc, loss) = evaluate(&p, &cfg, &data).unwrap();
        // constant logits: argmax picks class 0
        assert_eq!(acc, 0.5);
        let per: f64 = data.iter().map(|z| loss_on(&p, &cfg, z, None).unwrap()).sum::<f64>() / 10.0;
        assert!((loss - per).abs() < 1e-12);

        let out = train(&data, &config(40, None), &cfg, None, None).unwrap();
        assert_eq!(evaluate(&out.params, &cfg, &data).unwrap().0, 1.0);
        assert!(evaluate(&p, &cfg, &[]).is_err());
    }

    #[test]
    fn curves_at_initialization_are_near_chance() {
        let cfg = ModelConfig::mlp(vec![2, 16, 16, 2]);
        let p = init_params(&cfg, 3).unwrap();
        let spec = SyntheticSpec::blobs(vec![vec![-0.3, -0.3], vec![0.3, 0.3]], 0.5, 300, 2).with_splits(0, 100);
        let ds = generate_synthetic(&spec).unwrap();
        let gen = MaskGenerator::new(cfg.mask_plan(1, MaskScheme::Direct)).unwrap();
        let r = log_curves(&p, &cfg, Some(&gen), &ds.split(Split::Train), &ds.split(Split::Test), 0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for v in [r.masked_train_loss.unwrap(), r.flipped_train_loss.unwrap(), r.full_train_loss, r.test_loss] {
            assert!((v - ln2).abs() < 0.1, "{v}");
        }
    }

    #[test]
    fn single_instance_training_lowers_masked_loss_more_than_flipped() {
        let cfg = ModelConfig::mlp(vec![2, 16, 16, 2]);
        let plan = cfg.mask_plan(11, MaskScheme::Direct);
        let (mut wins, mut lowered) = (0, 0);
        for trial in 0..100u64 {
            let z = Instance {
                id: trial,
                features: uniform_block(RngKey::new(trial, 5), 0, 2).iter().map(|u| 4.0 * u - 2.0).collect(),
                label: (trial % 2) as usize,
            };
            let mut tc = config(50, Some(plan.clone()));
            tc.batch_size = 1;
            tc.init_seed = trial;
            tc.learning_rate = 0.05;
            tc.momentum = 0.0;
            let p0 = init_params(&cfg, trial).unwrap();
            let out = train(std::slice::from_ref(&z), &tc, &cfg, None, None).unwrap();
            let m = generate_mask(&plan, z.id);
            let f = flip_mask(&m, &plan).unwrap();
            let before = loss_on(&p0, &cfg, &z, Some(&m)).unwrap();
            let masked = loss_on(&out.params, &cfg, &z, Some(&m)).unwrap();
            let flipped = loss_on(&out.params, &cfg, &z, Some(&f)).unwrap();
            // a sub-network whose ReLUs are all off for z cannot move
            assert!(masked <= before, "trial {trial}: {before} -> {masked}");
            if masked < before {
                lowered += 1;
            }
            if flipped > masked {
                wins += 1;
            }
        }
        assert!(lowered >= 95, "{lowered}");
        assert!(wins >= 95, "{wins}");
    }

    #[test]
    fn turnover_plan_must_match_model() {
        let cfg = ModelConfig::mlp(vec![2, 8, 2]);
        let bad = MaskPlan::direct(1, 0.5, vec![9]);
        assert!(matches!(
            train(&separable(10), &config(1, Some(bad)), &cfg, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_csv_has_header_and_one_row_per_epoch() {
        let spec = SyntheticSpec::blobs(vec![vec![-2.0, -2.0], vec![2.0, 2.0]], 1.0, 80, 1).with_splits(0, 20);
        let ds = generate_synthetic(&spec).unwrap();
        let cfg = ModelConfig::mlp(vec![2, 8, 2]);
        let test = ds.split(Split::Test);
        let out = train(
            &ds.split(Split::Train),
            &config(4, Some(cfg.mask_plan(1, MaskScheme::Direct))),
            &cfg,
            None,
            Some(Monitor { test_set: &test }),
        )
        .unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("epoch,masked_train_loss,flipped_train_loss,full_train_loss,test_loss,test_accuracy\n"));
    }
}
