//! Datasets, CSV ingestion and seeded synthetic generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{KeyedRng, RngKey, Vector};

const TAG_DATA: u64 = 0x6461_7461;
const TAG_NOISE: u64 = 0x6e6f_6973;

/// One labeled example. `id` is the dense dataset index assigned at
/// ingestion and keys the instance's dropout mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub features: Vector,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub n_classes: usize,
    /// Split tag per instance, parallel to `instances`.
    pub splits: Vec<Split>,
    /// Ids whose labels were flipped by the noise injector.
    pub flipped_ids: Vec<u64>,
}

impl Dataset {
    /// Checks dense ids, one feature width and labels below `n_classes`.
    pub fn new(instances: Vec<Instance>, n_classes: usize) -> Result<Self> {
        let n = instances.len();
        let ds = Self {
            instances,
            n_classes,
            splits: vec![Split::Train; n],
            flipped_ids: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.input_dim();
        for (i, z) in self.instances.iter().enumerate() {
            if z.id != i as u64 {
                return Err(Error::Config(format!("instance at position {i} has id {}", z.id)));
            }
            if z.features.len() != dim {
                return Err(Error::Dimension {
                    what: format!("features of instance {i}"),
                    expected: dim,
                    got: z.features.len(),
                });
            }
            if z.label >= self.n_classes {
                return Err(Error::LabelOutOfRange {
                    label: z.label,
                    n_classes: self.n_classes,
                });
            }
        }
        if self.splits.len() != self.instances.len() {
            return Err(Error::Config("split tags do not cover every instance".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.instances.first().map_or(0, |z| z.features.len())
    }

    pub fn split(&self, tag: Split) -> Vec<Instance> {
        self.instances
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == tag)
            .map(|(z, _)| z.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub has_header: bool,
}

/// Reads numeric feature columns followed by an integer label column. Row
/// order defines instance ids. Every instance is tagged `Train`.
pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut instances = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(parse_err(line, format!("expected features and a label, found {} field(s)", record.len())));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("row has {} fields, expected {w}", record.len())));
            }
            _ => {}
        }
        let n = record.len();
        let mut features = Vec::with_capacity(n - 1);
        for (col, cell) in record.iter().take(n - 1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column {col}: {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {col}: non-finite value")));
            }
            features.push(v);
        }
        let cell = &record[n - 1];
        let label: usize = cell
            .parse()
            .map_err(|_| parse_err(line, format!("label {cell:?} is not a non-negative integer")))?;
        instances.push(Instance {
            id: instances.len() as u64,
            features,
            label,
        });
    }
    if instances.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    let n_classes = instances.iter().map(|z| z.label).max().unwrap() + 1;
    Dataset::new(instances, n_classes.max(2))
}

/// Writes `x0..x{d-1},label` with a header row.
pub fn write_csv(instances: &[Instance], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = instances.first().map_or(0, |z| z.features.len());
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for z in instances {
        let mut row: Vec<String> = z.features.iter().map(f64::to_string).collect();
        row.push(z.label.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Isotropic Gaussian blobs, one per class, equal class sizes.
    GaussianBlobs { means: Vec<Vec<f64>>, std: f64 },
    /// Two interleaved half circles with Gaussian jitter.
    TwoArcs { noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    pub rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    /// Total instances across all splits.
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub n_val: usize,
    #[serde(default)]
    pub n_test: usize,
    /// Flips labels of `floor(rate * n_train)` training instances.
    #[serde(default)]
    pub label_noise: Option<LabelNoise>,
    /// Added to the features of validation and test instances.
    #[serde(default)]
    pub covariate_shift: Option<Vec<f64>>,
}

impl SyntheticSpec {
    pub fn blobs(means: Vec<Vec<f64>>, std: f64, n: usize, seed: u64) -> Self {
        Self {
            generator: Generator::GaussianBlobs { means, std },
            n,
            seed,
            n_val: 0,
            n_test: 0,
            label_noise: None,
            covariate_shift: None,
        }
    }

    pub fn two_arcs(noise: f64, n: usize, seed: u64) -> Self {
        Self {
            generator: Generator::TwoArcs { noise },
            n,
            seed,
            n_val: 0,
            n_test: 0,
            label_noise: None,
            covariate_shift: None,
        }
    }

    pub fn with_splits(mut self, n_val: usize, n_test: usize) -> Self {
        self.n_val = n_val;
        self.n_test = n_test;
        self
    }

    pub fn with_label_noise(mut self, rate: f64, seed: u64) -> Self {
        self.label_noise = Some(LabelNoise { rate, seed });
        self
    }

    pub fn with_covariate_shift(mut self, delta: Vec<f64>) -> Self {
        self.covariate_shift = Some(delta);
        self
    }

    fn n_classes(&self) -> usize {
        match &self.generator {
            Generator::GaussianBlobs { means, .. } => means.len(),
            Generator::TwoArcs { .. } => 2,
        }
    }

    fn dim(&self) -> usize {
        match &self.generator {
            Generator::GaussianBlobs { means, .. } => means[0].len(),
            Generator::TwoArcs { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.generator {
            Generator::GaussianBlobs { means, std } => {
                if means.len() < 2 {
                    return bad("blobs need at least two class means".into());
                }
                let d = means[0].len();
                if d == 0 || means.iter().any(|m| m.len() != d) {
                    return bad("class means must share a positive dimension".into());
                }
                if !(*std > 0.0 && std.is_finite()) {
                    return bad(format!("blob std must be positive, got {std}"));
                }
            }
            Generator::TwoArcs { noise } => {
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return bad(format!("arc noise must be non-negative, got {noise}"));
                }
            }
        }
        if self.n_val + self.n_test >= self.n {
            return bad(format!("n={} leaves no training data after {} val and {} test", self.n, self.n_val, self.n_test));
        }
        if let Some(noise) = &self.label_noise {
            if !(0.0..1.0).contains(&noise.rate) {
                return bad(format!("label noise rate must lie in [0, 1), got {}", noise.rate));
            }
        }
        if let Some(delta) = &self.covariate_shift {
            if delta.len() != self.dim() {
                return bad(format!("shift has {} components, data has {}", delta.len(), self.dim()));
            }
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset. Instances are laid out train, then val,
/// then test; flipped-label ids are recorded as ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.n_classes();
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % c).collect();
    let mut rng = KeyedRng::new(RngKey::tagged(spec.seed, TAG_DATA, 0, 0), 0);
    labels.shuffle(&mut rng);

    let mut instances = Vec::with_capacity(spec.n);
    for (i, &label) in labels.iter().enumerate() {
        let features = match &spec.generator {
            Generator::GaussianBlobs { means, std } => means[label]
                .iter()
                .map(|m| m + std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect(),
            Generator::TwoArcs { noise } => {
                let t = std::f64::consts::PI * rng.next_unit();
                let (x, y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                vec![x + noise * nx, y + noise * ny]
            }
        };
        instances.push(Instance {
            id: i as u64,
            features,
            label,
        });
    }

    let n_train = spec.n - spec.n_val - spec.n_test;
    let splits: Vec<Split> = (0..spec.n)
        .map(|i| match i {
            i if i < n_train => Split::Train,
            i if i < n_train + spec.n_val => Split::Val,
            _ => Split::Test,
        })
        .collect();

    if let Some(delta) = &spec.covariate_shift {
        for z in &mut instances[n_train..] {
            z.features.iter_mut().zip(delta).for_each(|(x, d)| *x += d);
        }
    }

    let mut flipped_ids = Vec::new();
    if let Some(noise) = &spec.label_noise {
        let count = (noise.rate * n_train as f64).floor() as usize;
        let mut rng = KeyedRng::new(RngKey::tagged(noise.seed, TAG_NOISE, spec.seed, 0), 0);
        let mut order: Vec<usize> = (0..n_train).collect();
        let (chosen, _) = order.partial_shuffle(&mut rng, count);
        flipped_ids = chosen.iter().map(|&i| i as u64).collect();
        flipped_ids.sort_unstable();
        for &id in &flipped_ids {
            let z = &mut instances[id as usize];
            let shift = 1 + (rand::RngCore::next_u64(&mut rng) % (c as u64 - 1)) as usize;
            z.label = (z.label + shift) % c;
        }
    }

    let mut ds = Dataset::new(instances, c)?;
    ds.splits = splits;
    ds.flipped_ids = flipped_ids;
    Ok(ds)
}
