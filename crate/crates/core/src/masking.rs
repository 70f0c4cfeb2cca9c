//! Instance-specific dropout masks.
//!
//! A mask is never stored: it is regenerated from `(global_seed, instance id,
//! layer)` whenever it is needed. Two generation schemes exist. `Direct` draws
//! every entry from the counter-based generator. `HashComposed` keeps a small
//! codebook of `K` binary primitives per layer and builds each instance's
//! mask as the AND of `k` primitives picked by a hash of the instance id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mix64, uniform_block, RngKey};

const TAG_DIRECT: u64 = 0x6d61_736b;
const TAG_CODEBOOK: u64 = 0x636f_6465;
const TAG_HASH: u64 = 0x6861_7368;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskScheme {
    Direct,
    HashComposed { codebook_size: usize, arity: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub global_seed: u64,
    #[serde(default = "default_keep_prob")]
    pub keep_prob: f64,
    /// Width of each masked layer, in network order.
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_scheme")]
    pub scheme: MaskScheme,
}

fn default_keep_prob() -> f64 {
    0.5
}

fn default_scheme() -> MaskScheme {
    MaskScheme::Direct
}

impl MaskPlan {
    pub fn direct(global_seed: u64, keep_prob: f64, layer_widths: Vec<usize>) -> Self {
        Self {
            global_seed,
            keep_prob,
            layer_widths,
            scheme: MaskScheme::Direct,
        }
    }

    pub fn hash_composed(
        global_seed: u64,
        keep_prob: f64,
        layer_widths: Vec<usize>,
        codebook_size: usize,
        arity: usize,
    ) -> Self {
        Self {
            global_seed,
            keep_prob,
            layer_widths,
            scheme: MaskScheme::HashComposed {
                codebook_size,
                arity,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob < 1.0) {
            return Err(Error::Config(format!(
                "keep probability must lie in (0, 1), got {}",
                self.keep_prob
            )));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::Config("mask plan has no masked layers".into()));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("masked layer {i} has width 0")));
        }
        if let MaskScheme::HashComposed {
            codebook_size,
            arity,
        } = self.scheme
        {
            if codebook_size < 2 {
                return Err(Error::Config(format!("codebook size must be >= 2, got {codebook_size}")));
            }
            if arity < 1 {
                return Err(Error::Config("composition arity must be >= 1".into()));
            }
            if arity > codebook_size {
                return Err(Error::Config(format!(
                    "arity {arity} exceeds codebook size {codebook_size}; codes must be distinct"
                )));
            }
        }
        Ok(())
    }

    /// The scaled value of a kept unit, `1/p`.
    pub fn scale(&self) -> f64 {
        1.0 / self.keep_prob
    }

    /// Warning text when the hash space `K^k` is smaller than the dataset.
    pub fn capacity_warning(&self, n_instances: usize) -> Option<String> {
        match self.scheme {
            MaskScheme::Direct => None,
            MaskScheme::HashComposed {
                codebook_size,
                arity,
            } => {
                let capacity = (codebook_size as f64).powi(arity as i32);
                (capacity < n_instances as f64).then(|| {
                    format!(
                        "hash space {codebook_size}^{arity} is smaller than {n_instances} instances; masks will repeat"
                    )
                })
            }
        }
    }
}

/// Per-layer mask vectors with entries in `{0, 1/p}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub per_layer: Vec<Vec<f64>>,
}

impl Mask {
    pub fn layer(&self, i: usize) -> &[f64] {
        &self.per_layer[i]
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn kept(&self, layer: usize) -> Vec<bool> {
        self.per_layer[layer].iter().map(|&v| v != 0.0).collect()
    }

    pub fn check_conforms(&self, plan: &MaskPlan) -> Result<()> {
        if self.per_layer.len() != plan.layer_widths.len() {
            return Err(Error::MaskMismatch(format!(
                "{} layers, plan has {}",
                self.per_layer.len(),
                plan.layer_widths.len()
            )));
        }
        let scale = plan.scale();
        for (i, (layer, &w)) in self.per_layer.iter().zip(&plan.layer_widths).enumerate() {
            if layer.len() != w {
                return Err(Error::MaskMismatch(format!("layer {i} has width {}, plan says {w}", layer.len())));
            }
            if let Some(v) = layer.iter().find(|&&v| v != 0.0 && v != scale) {
                return Err(Error::MaskMismatch(format!("layer {i} holds {v}, expected 0 or {scale}")));
            }
        }
        Ok(())
    }
}

/// The instance's mask `m(z)`; identical inputs give identical masks.
pub fn generate_mask(plan: &MaskPlan, instance_id: u64) -> Mask {
    match plan.scheme {
        MaskScheme::Direct => direct_mask(plan, instance_id),
        MaskScheme::HashComposed { arity, .. } => {
            let p_prim = primitive_keep_prob(plan.keep_prob, arity);
            let scale = plan.scale();
            let per_layer = plan
                .layer_widths
                .iter()
                .enumerate()
                .map(|(layer, &width)| {
                    let mut acc = vec![u64::MAX; words_for(width)];
                    for code in layer_codes(plan, instance_id, layer) {
                        let row = primitive_row(plan.global_seed, layer, code, width, p_prim);
                        acc.iter_mut().zip(&row).for_each(|(a, r)| *a &= r);
                    }
                    expand_bits(&acc, width, scale)
                })
                .collect();
            Mask { per_layer }
        }
    }
}

fn direct_mask(plan: &MaskPlan, instance_id: u64) -> Mask {
    let p = plan.keep_prob;
    let scale = plan.scale();
    let per_layer = plan
        .layer_widths
        .iter()
        .enumerate()
        .map(|(layer, &width)| {
            let key = RngKey::tagged(plan.global_seed, TAG_DIRECT, instance_id, layer as u64);
            uniform_block(key, 0, width)
                .into_iter()
                .map(|u| if u < p { scale } else { 0.0 })
                .collect()
        })
        .collect();
    Mask { per_layer }
}

/// The flipped mask `1/p - m`, selecting exactly the units `m` drops.
pub fn flip_mask(m: &Mask, plan: &MaskPlan) -> Result<Mask> {
    m.check_conforms(plan)?;
    let scale = plan.scale();
    Ok(Mask {
        per_layer: m
            .per_layer
            .iter()
            .map(|layer| layer.iter().map(|&v| scale - v).collect())
            .collect(),
    })
}

/// Keep probability of each codebook primitive. The AND of `arity`
/// independent primitives then keeps a unit with probability `p`.
pub fn primitive_keep_prob(p: f64, arity: usize) -> f64 {
    p.powf(1.0 / arity as f64)
}

fn words_for(width: usize) -> usize {
    width.div_ceil(64)
}

fn primitive_row(seed: u64, layer: usize, row: usize, width: usize, p_prim: f64) -> Vec<u64> {
    let key = RngKey::tagged(seed, TAG_CODEBOOK, layer as u64, row as u64);
    let mut bits = vec![0u64; words_for(width)];
    for (j, u) in uniform_block(key, 0, width).into_iter().enumerate() {
        if u < p_prim {
            bits[j / 64] |= 1 << (j % 64);
        }
    }
    bits
}

fn expand_bits(bits: &[u64], width: usize, scale: f64) -> Vec<f64> {
    (0..width)
        .map(|j| if bits[j / 64] >> (j % 64) & 1 == 1 { scale } else { 0.0 })
        .collect()
}

/// `K` bit-packed binary primitives per masked layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub primitive_keep_prob: f64,
    widths: Vec<usize>,
    /// `rows[layer][code]` is a bitset of `widths[layer]` bits.
    rows: Vec<Vec<Vec<u64>>>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn primitive(&self, layer: usize, code: usize) -> Vec<bool> {
        let w = self.widths[layer];
        let row = &self.rows[layer][code];
        (0..w).map(|j| row[j / 64] >> (j % 64) & 1 == 1).collect()
    }

    /// Bytes held by the primitive bitsets.
    pub fn storage_bytes(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|layer| layer.iter())
            .map(|r| r.len() * std::mem::size_of::<u64>())
            .sum()
    }

    #[cfg(test)]
    pub(crate) fn from_primitives(primitive_keep_prob: f64, layers: Vec<Vec<Vec<bool>>>) -> Self {
        let widths = layers.iter().map(|l| l[0].len()).collect();
        let rows = layers
            .iter()
            .map(|l| {
                l.iter()
                    .map(|bits| {
                        let mut w = vec![0u64; words_for(bits.len())];
                        for (j, &b) in bits.iter().enumerate() {
                            if b {
                                w[j / 64] |= 1 << (j % 64);
                            }
                        }
                        w
                    })
                    .collect()
            })
            .collect();
        Self {
            primitive_keep_prob,
            widths,
            rows,
        }
    }
}

pub fn build_codebook(plan: &MaskPlan) -> Result<Codebook> {
    let MaskScheme::HashComposed {
        codebook_size,
        arity,
    } = plan.scheme
    else {
        return Err(Error::SchemeMismatch);
    };
    plan.validate()?;
    let p_prim = primitive_keep_prob(plan.keep_prob, arity);
    let rows = plan
        .layer_widths
        .iter()
        .enumerate()
        .map(|(layer, &width)| {
            (0..codebook_size)
                .map(|code| primitive_row(plan.global_seed, layer, code, width, p_prim))
                .collect()
        })
        .collect();
    Ok(Codebook {
        primitive_keep_prob: p_prim,
        widths: plan.layer_widths.clone(),
        rows,
    })
}

fn layer_codes(plan: &MaskPlan, instance_id: u64, layer: usize) -> Vec<usize> {
    let MaskScheme::HashComposed {
        codebook_size,
        arity,
    } = plan.scheme
    else {
        return Vec::new();
    };
    let key = RngKey::tagged(plan.global_seed, TAG_HASH, instance_id, layer as u64);
    // distinct codes: a repeated primitive would raise the keep rate
    let mut codes = Vec::with_capacity(arity);
    let mut j = 0;
    while codes.len() < arity {
        let code = ((key.word(0, j) as u128 * codebook_size as u128) >> 64) as usize;
        if !codes.contains(&code) {
            codes.push(code);
        }
        j += 1;
    }
    codes
}

/// The `k` codebook indices the hash assigns to `instance_id` at `layer`.
/// Each layer hashes independently, so layers pick different primitives.
pub fn hash_codes(plan: &MaskPlan, instance_id: u64, layer: usize) -> Result<Vec<usize>> {
    if !matches!(plan.scheme, MaskScheme::HashComposed { .. }) {
        return Err(Error::SchemeMismatch);
    }
    if layer >= plan.layer_widths.len() {
        return Err(Error::Dimension {
            what: "masked layer index".into(),
            expected: plan.layer_widths.len(),
            got: layer,
        });
    }
    Ok(layer_codes(plan, instance_id, layer))
}

/// Scaled AND of the selected primitives; `codes[layer]` holds that
/// layer's `k` indices.
pub fn compose_hash_mask(cb: &Codebook, codes: &[Vec<usize>], plan: &MaskPlan) -> Result<Mask> {
    if codes.len() != cb.rows.len() {
        return Err(Error::Dimension {
            what: "code tuples per layer".into(),
            expected: cb.rows.len(),
            got: codes.len(),
        });
    }
    let scale = plan.scale();
    let mut per_layer = Vec::with_capacity(codes.len());
    for (layer, layer_codes) in codes.iter().enumerate() {
        let width = cb.widths[layer];
        let mut acc = vec![u64::MAX; words_for(width)];
        for &code in layer_codes {
            let row = cb.rows[layer].get(code).ok_or(Error::CodeOutOfRange {
                code,
                size: cb.rows[layer].len(),
            })?;
            acc.iter_mut().zip(row).for_each(|(a, r)| *a &= r);
        }
        per_layer.push(expand_bits(&acc, width, scale));
    }
    Ok(Mask { per_layer })
}

/// Mask source that keeps the codebook resident (hash-composed plans) and
/// regenerates everything else on demand.
#[derive(Clone, Debug)]
pub struct MaskGenerator {
    plan: MaskPlan,
    codebook: Option<Codebook>,
}

impl MaskGenerator {
    pub fn new(plan: MaskPlan) -> Result<Self> {
        plan.validate()?;
        let codebook = match plan.scheme {
            MaskScheme::Direct => None,
            MaskScheme::HashComposed { .. } => Some(build_codebook(&plan)?),
        };
        Ok(Self { plan, codebook })
    }

    pub fn plan(&self) -> &MaskPlan {
        &self.plan
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn mask(&self, instance_id: u64) -> Mask {
        match &self.codebook {
            None => direct_mask(&self.plan, instance_id),
            Some(cb) => {
                let codes: Vec<Vec<usize>> = (0..self.plan.layer_widths.len())
                    .map(|l| layer_codes(&self.plan, instance_id, l))
                    .collect();
                compose_hash_mask(cb, &codes, &self.plan).expect("hash codes are always in range")
            }
        }
    }

    pub fn mask_pair(&self, instance_id: u64) -> (Mask, Mask) {
        let m = self.mask(instance_id);
        let scale = self.plan.scale();
        let flipped = Mask {
            per_layer: m
                .per_layer
                .iter()
                .map(|l| l.iter().map(|&v| scale - v).collect())
                .collect(),
        };
        (m, flipped)
    }

    /// Bytes the generator keeps alive between calls.
    pub fn resident_bytes(&self) -> usize {
        self.codebook.as_ref().map_or(0, Codebook::storage_bytes)
    }
}

/// Groups of instance ids whose hash codes coincide on every layer (and
/// therefore share one mask). Empty for direct plans.
pub fn hash_collisions(plan: &MaskPlan, ids: impl IntoIterator<Item = u64>) -> Vec<Vec<u64>> {
    if !matches!(plan.scheme, MaskScheme::HashComposed { .. }) {
        return Vec::new();
    }
    let mut groups: HashMap<u64, Vec<u64>> = HashMap::new();
    let mut keys: Vec<u64> = Vec::new();
    for id in ids {
        let mut sorted: Vec<Vec<usize>> = (0..plan.layer_widths.len())
            .map(|l| layer_codes(plan, id, l))
            .collect();
        sorted.iter_mut().for_each(|c| c.sort_unstable());
        let fp = sorted
            .iter()
            .flatten()
            .fold(0x243F_6A88_85A3_08D3u64, |h, &c| mix64(h ^ c as u64));
        let entry = groups.entry(fp).or_default();
        if entry.is_empty() {
            keys.push(fp);
        }
        entry.push(id);
    }
    keys.into_iter()
        .filter_map(|k| groups.remove(&k).filter(|g| g.len() > 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keep_count(m: &Mask, layer: usize) -> usize {
        m.kept(layer).iter().filter(|&&k| k).count()
    }

    #[test]
    fn generation_is_deterministic() {
        let plan = MaskPlan::direct(17, 0.5, vec![32, 16]);
        assert_eq!(generate_mask(&plan, 5), generate_mask(&plan, 5));
        let plan = MaskPlan::hash_composed(17, 0.5, vec![32, 16], 64, 2);
        assert_eq!(generate_mask(&plan, 5), generate_mask(&plan, 5));
    }

    #[test]
    fn direct_keep_count_within_binomial_bound() {
        let plan = MaskPlan::direct(3, 0.5, vec![10_000]);
        let c = keep_count(&generate_mask(&plan, 0), 0);
        assert!((4800..=5200).contains(&c), "{c}");
    }

    #[test]
    fn different_instances_get_different_masks() {
        let plan = MaskPlan::direct(3, 0.5, vec![1000]);
        let a = generate_mask(&plan, 0).kept(0);
        let b = generate_mask(&plan, 1).kept(0);
        let d = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert!((400..=600).contains(&d), "{d}");
    }

    #[test]
    fn flip_example() {
        let plan = MaskPlan::direct(0, 0.5, vec![4]);
        let m = Mask {
            per_layer: vec![vec![0.0, 2.0, 2.0, 0.0]],
        };
        assert_eq!(flip_mask(&m, &plan).unwrap().per_layer, vec![vec![2.0, 0.0, 0.0, 2.0]]);
    }

    #[test]
    fn flip_rejects_foreign_values() {
        let plan = MaskPlan::direct(0, 0.5, vec![2]);
        let m = Mask {
            per_layer: vec![vec![0.0, 1.0]],
        };
        assert!(matches!(flip_mask(&m, &plan), Err(Error::MaskMismatch(_))));
    }

    #[test]
    fn plan_validation() {
        assert!(MaskPlan::direct(0, 1.0, vec![2]).validate().is_err());
        assert!(MaskPlan::direct(0, 0.0, vec![2]).validate().is_err());
        assert!(MaskPlan::direct(0, 0.5, vec![2, 0]).validate().is_err());
        assert!(MaskPlan::hash_composed(0, 0.5, vec![2], 1, 2).validate().is_err());
        assert!(MaskPlan::hash_composed(0, 0.5, vec![2], 4, 0).validate().is_err());
        assert!(MaskPlan::hash_composed(0, 0.5, vec![2], 4, 2).validate().is_ok());
    }

    #[test]
    fn capacity_warning_when_hash_space_small() {
        let plan = MaskPlan::hash_composed(0, 0.5, vec![2], 8, 2);
        assert!(plan.capacity_warning(65).is_some());
        assert!(plan.capacity_warning(64).is_none());
        assert!(MaskPlan::direct(0, 0.5, vec![2]).capacity_warning(1 << 40).is_none());
    }

    #[test]
    fn primitive_keep_probability() {
        assert!((primitive_keep_prob(0.5, 2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(primitive_keep_prob(0.5, 1), 0.5);
    }

    #[test]
    fn codebook_primitive_keep_counts() {
        let plan = MaskPlan::hash_composed(21, 0.5, vec![1000], 64, 2);
        let cb = build_codebook(&plan).unwrap();
        assert_eq!(cb.size(), 64);
        for code in 0..64 {
            let c = cb.primitive(0, code).iter().filter(|&&b| b).count();
            assert!((660..=760).contains(&c), "primitive {code}: {c}");
        }
    }

    #[test]
    fn codebook_requires_hash_scheme() {
        let plan = MaskPlan::direct(0, 0.5, vec![4]);
        assert!(matches!(build_codebook(&plan), Err(Error::SchemeMismatch)));
        assert!(matches!(hash_codes(&plan, 0, 0), Err(Error::SchemeMismatch)));
    }

    #[test]
    fn codebook_is_regenerable() {
        let plan = MaskPlan::hash_composed(8, 0.5, vec![70, 30], 16, 3);
        assert_eq!(build_codebook(&plan).unwrap(), build_codebook(&plan).unwrap());
    }

    #[test]
    fn hash_codes_arity_and_determinism() {
        let plan = MaskPlan::hash_composed(8, 0.5, vec![10, 10], 256, 3);
        let a = hash_codes(&plan, 77, 0).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, hash_codes(&plan, 77, 0).unwrap());
        assert!(a.iter().all(|&c| c < 256));
        // layers hash independently
        let differing = (0..100)
            .filter(|&id| hash_codes(&plan, id, 0).unwrap() != hash_codes(&plan, id, 1).unwrap())
            .count();
        assert!(differing > 95);
    }

    #[test]
    fn hash_codes_within_a_tuple_are_distinct() {
        let plan = MaskPlan::hash_composed(8, 0.5, vec![10], 4, 4);
        for id in 0..200 {
            let mut c = hash_codes(&plan, id, 0).unwrap();
            c.sort_unstable();
            assert_eq!(c, vec![0, 1, 2, 3]);
        }
        assert!(MaskPlan::hash_composed(8, 0.5, vec![10], 3, 4).validate().is_err());
    }

    #[test]
    fn hash_codes_are_uniform() {
        let plan = MaskPlan::hash_composed(8, 0.5, vec![10], 256, 2);
        let mut counts = vec![0usize; 256];
        for id in 0..10_000 {
            for c in hash_codes(&plan, id, 0).unwrap() {
                counts[c] += 1;
            }
        }
        let e = 20_000.0 / 256.0;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 255 dof, 0.999 quantile ~ 330.5 (Wilson-Hilferty)
        assert!(chi < 330.5, "chi2 {chi}");
    }

    #[test]
    fn compose_example() {
        let cb = Codebook::from_primitives(
            0.5f64.sqrt(),
            vec![vec![vec![true, true, false, true], vec![true, false, false, true]]],
        );
        let plan = MaskPlan::hash_composed(0, 0.5, vec![4], 2, 2);
        let m = compose_hash_mask(&cb, &[vec![0, 1]], &plan).unwrap();
        assert_eq!(m.per_layer, vec![vec![2.0, 0.0, 0.0, 2.0]]);
        let same = compose_hash_mask(&cb, &[vec![1, 1]], &plan).unwrap();
        assert_eq!(same.kept(0), cb.primitive(0, 1));
        assert!(matches!(
            compose_hash_mask(&cb, &[vec![0, 2]], &plan),
            Err(Error::CodeOutOfRange { code: 2, size: 2 })
        ));
    }

    #[test]
    fn composed_keep_rate() {
        let plan = MaskPlan::hash_composed(4, 0.5, vec![100_000], 32, 2);
        let m = generate_mask(&plan, 12);
        let rate = keep_count(&m, 0) as f64 / 1e5;
        assert!((0.49..=0.51).contains(&rate), "{rate}");
    }

    #[test]
    fn volatile_and_cached_generation_agree() {
        let plan = MaskPlan::hash_composed(4, 0.5, vec![100, 37], 32, 3);
        let gen = MaskGenerator::new(plan.clone()).unwrap();
        for id in 0..50 {
            assert_eq!(gen.mask(id), generate_mask(&plan, id));
        }
        let direct = MaskPlan::direct(4, 0.5, vec![100, 37]);
        let gen = MaskGenerator::new(direct.clone()).unwrap();
        assert_eq!(gen.resident_bytes(), 0);
        assert_eq!(gen.mask(3), generate_mask(&direct, 3));
    }

    #[test]
    fn collisions_found_in_tiny_hash_space() {
        let plan = MaskPlan::hash_composed(4, 0.5, vec![8], 2, 1);
        let groups = hash_collisions(&plan, 0..10);
        assert!(!groups.is_empty());
        for g in &groups {
            let m0 = generate_mask(&plan, g[0]);
            assert!(g.iter().all(|&id| generate_mask(&plan, id) == m0));
        }
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 10);
    }

    proptest! {
        #[test]
        fn flip_is_complementary_and_involutive(
            seed in any::<u64>(),
            id in any::<u64>(),
            p in 0.05f64..0.95,
            widths in prop::collection::vec(1usize..40, 1..4),
            hashed in any::<bool>(),
        ) {
            let plan = if hashed {
                MaskPlan::hash_composed(seed, p, widths, 16, 2)
            } else {
                MaskPlan::direct(seed, p, widths)
            };
            let m = generate_mask(&plan, id);
            m.check_conforms(&plan).unwrap();
            let f = flip_mask(&m, &plan).unwrap();
            let scale = plan.scale();
            for (a, b) in m.per_layer.iter().flatten().zip(f.per_layer.iter().flatten()) {
                prop_assert_eq!(a + b, scale);
                prop_assert_eq!(a * b, 0.0);
            }
            prop_assert_eq!(flip_mask(&f, &plan).unwrap(), m);
        }
    }
}
