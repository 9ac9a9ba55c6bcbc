//! Synthetic multi-dataset suite: several source datasets whose scoring
//! rules are related to a target rule by a controlled cosine, plus a target
//! dataset with "translated" copies under orthogonal language shifts.
//!
//! Instances are generated on demand from `(suite seed, dataset, index)`,
//! so a dataset of nominal size `n` is the fixed index range `0..n` and an
//! instance's identity is its index.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultiChoiceInstance;
use crate::numeric::Tensor2;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

const STREAM_TARGET: u64 = 0;
const STREAM_DIRECTIONS: u64 = 0xD1;
const STREAM_LANGUAGE: u64 = 0x1A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDatasetSpec {
    pub index: usize,
    /// Unit-norm scoring direction.
    pub direction: Vec<f64>,
    pub relatedness: f64,
    pub noise: f64,
    pub size: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub direction: Vec<f64>,
    pub noise: f64,
    pub candidates: usize,
}

/// Orthogonal transform plus bias applied to every feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShift {
    pub id: usize,
    pub name: String,
    pub magnitude: f64,
    pub rotation: Tensor2,
    pub bias: Vec<f64>,
}

impl LanguageShift {
    pub fn identity(id: usize, name: impl Into<String>, feature_dim: usize) -> Self {
        LanguageShift {
            id,
            name: name.into(),
            magnitude: 0.0,
            rotation: Tensor2::identity(feature_dim),
            bias: vec![0.0; feature_dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.magnitude == 0.0
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.rotation.matvec(v).expect("feature dim matches shift");
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }

    /// Inverse map back to pre-shift coordinates.
    pub fn invert_vec(&self, v: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = v.iter().zip(&self.bias).map(|(a, b)| a - b).collect();
        self.rotation
            .transpose()
            .matvec(&centered)
            .expect("feature dim matches shift")
    }

    /// Shifts context and candidates; the label is unchanged.
    pub fn apply(&self, inst: &MultiChoiceInstance) -> MultiChoiceInstance {
        if self.is_identity() {
            return inst.clone();
        }
        MultiChoiceInstance {
            context: self.apply_vec(&inst.context),
            candidates: inst.candidates.iter().map(|c| self.apply_vec(c)).collect(),
            label: inst.label,
        }
    }

    pub fn invert(&self, inst: &MultiChoiceInstance) -> MultiChoiceInstance {
        MultiChoiceInstance {
            context: self.invert_vec(&inst.context),
            candidates: inst.candidates.iter().map(|c| self.invert_vec(c)).collect(),
            label: inst.label,
        }
    }

    /// Largest deviation of `Q^T Q` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let q = &self.rotation;
        let n = q.rows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..n {
                    s += q.get(r, i) * q.get(r, j);
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }
}

/// Builds a language shift: `Q = exp(m A)` for a random skew-symmetric
/// generator `A` (so `m = 0` is the identity and `Q` moves along a geodesic
/// toward a random rotation as `m` grows), and `c = m * bias_scale * z`.
pub fn make_language(
    id: usize,
    name: impl Into<String>,
    magnitude: f64,
    feature_dim: usize,
    bias_scale: f64,
    seed: u64,
) -> Result<LanguageShift> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "language shift magnitude must be >= 0, got {magnitude}"
        )));
    }
    let name = name.into();
    if magnitude == 0.0 {
        return Ok(LanguageShift::identity(id, name, feature_dim));
    }
    let f = feature_dim;
    let mut rng = stream_rng(&[seed, STREAM_LANGUAGE, id as u64]);
    let g: Vec<f64> = (0..f * f).map(|_| rng.sample(StandardNormal)).collect();
    let scale = std::f64::consts::PI / (2.0 * (f as f64).sqrt()) / std::f64::consts::SQRT_2;
    let a = DMatrix::from_fn(f, f, |r, c| scale * magnitude * (g[r * f + c] - g[c * f + r]));
    let q = a.exp();
    let mut rotation = Tensor2::zeros(f, f);
    for r in 0..f {
        for c in 0..f {
            rotation.set(r, c, q[(r, c)]);
        }
    }
    let bias = (0..f)
        .map(|_| magnitude * bias_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(LanguageShift {
        id,
        name,
        magnitude,
        rotation,
        bias,
    })
}

fn random_unit(rng: &mut impl Rng, f: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn random_orthogonal(rng: &mut impl Rng, f: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, f);
        // two Gram-Schmidt passes for numerical orthogonality
        for _ in 0..2 {
            for b in basis {
                let p = dotp(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Source directions with `cos(u_j, target) = relatedness[j]`. The
/// orthogonal residuals are mutually orthogonal while `k < F`.
pub fn generate_directions(
    relatedness: &[f64],
    target: &[f64],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if relatedness.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 source datasets, got {}",
            relatedness.len()
        )));
    }
    let tn = norm(target);
    if (tn - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("target direction must be unit norm".into()));
    }
    for &r in relatedness {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!(
                "relatedness {r} outside [0, 1]"
            )));
        }
    }
    let f = target.len();
    let mut rng = stream_rng(&[seed, STREAM_DIRECTIONS]);
    let mut basis = vec![target.to_vec()];
    let mut out = Vec::with_capacity(relatedness.len());
    for &r in relatedness {
        let v = random_orthogonal(&mut rng, f, if basis.len() < f { &basis } else { &basis[..1] });
        let s = (1.0 - r * r).max(0.0).sqrt();
        let u: Vec<f64> = target.iter().zip(&v).map(|(t, o)| r * t + s * o).collect();
        let n = norm(&u);
        out.push(u.into_iter().map(|x| x / n).collect());
        basis.push(v);
    }
    Ok(out)
}

/// Scoring features of a (context, candidate) pair: `a + kappa * (x ⊙ a)`.
pub fn pair_score_features(context: &[f64], candidate: &[f64], interaction: f64) -> Vec<f64> {
    candidate
        .iter()
        .zip(context)
        .map(|(a, x)| a + interaction * x * a)
        .collect()
}

/// Bayes-rule label (noise-free) for an instance in pre-shift coordinates.
pub fn oracle_label(direction: &[f64], interaction: f64, inst: &MultiChoiceInstance) -> usize {
    let scores: Vec<f64> = inst
        .candidates
        .iter()
        .map(|a| dotp(direction, &pair_score_features(&inst.context, a, interaction)))
        .collect();
    crate::numeric::argmax(&scores)
}

/// One instance: Gaussian context and candidates, label = argmax of the
/// noisy linear score.
pub fn generate_instance(
    direction: &[f64],
    noise: f64,
    candidates: usize,
    interaction: f64,
    rng: &mut impl Rng,
) -> MultiChoiceInstance {
    let f = direction.len();
    let context: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
    let cands: Vec<Vec<f64>> = (0..candidates)
        .map(|_| (0..f).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let scores: Vec<f64> = cands
        .iter()
        .map(|a| {
            let s = dotp(direction, &pair_score_features(&context, a, interaction));
            let eps: f64 = StandardNormal.sample(rng);
            s + noise * eps
        })
        .collect();
    MultiChoiceInstance {
        context,
        label: crate::numeric::argmax(&scores),
        candidates: cands,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub feature_dim: usize,
    pub relatedness: Vec<f64>,
    pub noise: Vec<f64>,
    pub candidates: Vec<usize>,
    pub sizes: Vec<usize>,
    pub target_noise: f64,
    pub target_candidates: usize,
    /// Magnitudes of the target languages; the source language (identity) is added in front.
    pub language_magnitudes: Vec<f64>,
    pub language_bias_scale: f64,
    pub dev_size: usize,
    pub test_size: usize,
    pub probe_size: usize,
    pub interaction: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            feature_dim: 16,
            relatedness: vec![0.9, 0.7, 0.5, 0.3, 0.1, 0.0],
            noise: vec![0.1],
            candidates: vec![4, 2, 4, 5, 4, 4],
            sizes: vec![38000, 20000, 35000, 12247, 113000, 70000],
            target_noise: 0.0,
            target_candidates: 2,
            language_magnitudes: (1..=9).map(|i| 0.8 * i as f64 / 9.0).collect(),
            language_bias_scale: 0.5,
            dev_size: 400,
            test_size: 500,
            probe_size: 400,
            interaction: 0.0,
        }
    }
}

impl SuiteConfig {
    pub fn k(&self) -> usize {
        self.relatedness.len()
    }

    /// Per-dataset value of a list that is either length 1 (broadcast) or length k.
    fn per_dataset<T: Copy>(&self, list: &[T], name: &str) -> Result<Vec<T>> {
        let k = self.k();
        match list.len() {
            1 => Ok(vec![list[0]; k]),
            n if n == k => Ok(list.to_vec()),
            n => Err(Error::InvalidArgument(format!(
                "suite.{name} has {n} entries, expected 1 or {k}"
            ))),
        }
    }
}

/// Which target pool an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Dev,
    Test,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub seed: u64,
    pub feature_dim: usize,
    pub interaction: f64,
    pub sources: Vec<SourceDatasetSpec>,
    pub target: TargetSpec,
    /// Index 0 is the source language (identity shift).
    pub languages: Vec<LanguageShift>,
    /// Target pools in the source language; other languages are shifted copies.
    pub dev: Vec<MultiChoiceInstance>,
    pub test: Vec<MultiChoiceInstance>,
    pub probe: Vec<MultiChoiceInstance>,
}

pub const SOURCE_LANGUAGE: usize = 0;

/// Builds the whole suite deterministically from `(config, seed)`.
pub fn generate_suite(config: &SuiteConfig, seed: u64) -> Result<Suite> {
    let f = config.feature_dim;
    if f < 2 {
        return Err(Error::InvalidArgument("feature_dim must be >= 2".into()));
    }
    let noise = config.per_dataset(&config.noise, "noise")?;
    let cands = config.per_dataset(&config.candidates, "candidates")?;
    let sizes = config.per_dataset(&config.sizes, "sizes")?;
    if noise.iter().any(|&s| !(s >= 0.0)) || config.target_noise < 0.0 {
        return Err(Error::InvalidArgument("noise levels must be >= 0".into()));
    }
    if cands.iter().any(|&n| n < 2) || config.target_candidates < 2 {
        return Err(Error::InvalidArgument("candidate counts must be >= 2".into()));
    }
    let mut rng = stream_rng(&[seed, STREAM_TARGET]);
    let target_dir = random_unit(&mut rng, f);
    let dirs = generate_directions(&config.relatedness, &target_dir, seed)?;
    let sources = dirs
        .into_iter()
        .enumerate()
        .map(|(j, direction)| SourceDatasetSpec {
            index: j,
            direction,
            relatedness: config.relatedness[j],
            noise: noise[j],
            size: sizes[j],
            candidates: cands[j],
        })
        .collect();
    let target = TargetSpec {
        direction: target_dir,
        noise: config.target_noise,
        candidates: config.target_candidates,
    };
    let mut languages = vec![LanguageShift::identity(SOURCE_LANGUAGE, "src", f)];
    for (i, &m) in config.language_magnitudes.iter().enumerate() {
        languages.push(make_language(
            i + 1,
            format!("l{}", i + 1),
            m,
            f,
            config.language_bias_scale,
            seed,
        )?);
    }
    let gen_pool = |offset: usize, n: usize| -> Vec<MultiChoiceInstance> {
        (offset..offset + n)
            .map(|i| target_instance(seed, &target, config.interaction, i))
            .collect()
    };
    let dev = gen_pool(0, config.dev_size);
    let test = gen_pool(config.dev_size, config.test_size);
    let probe = gen_pool(config.dev_size + config.test_size, config.probe_size);
    Ok(Suite {
        seed,
        feature_dim: f,
        interaction: config.interaction,
        sources,
        target,
        languages,
        dev,
        test,
        probe,
    })
}

fn target_instance(
    seed: u64,
    target: &TargetSpec,
    interaction: f64,
    index: usize,
) -> MultiChoiceInstance {
    let mut rng = stream_rng(&[seed, STREAM_TARGET, 1, index as u64]);
    generate_instance(
        &target.direction,
        target.noise,
        target.candidates,
        interaction,
        &mut rng,
    )
}

/// Support and query draws from one dataset in one language.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub dataset: usize,
    pub language: usize,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub support: Vec<MultiChoiceInstance>,
    pub query: Vec<MultiChoiceInstance>,
}

impl Suite {
    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn language(&self, id: usize) -> Result<&LanguageShift> {
        self.languages
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no language {id}")))
    }

    /// Instance `index` of source dataset `dataset`, in the source language.
    pub fn source_instance(&self, dataset: usize, index: usize) -> MultiChoiceInstance {
        let spec = &self.sources[dataset];
        let mut rng = stream_rng(&[self.seed, 1 + dataset as u64, index as u64]);
        generate_instance(
            &spec.direction,
            spec.noise,
            spec.candidates,
            self.interaction,
            &mut rng,
        )
    }

    pub fn pool(&self, kind: PoolKind) -> &[MultiChoiceInstance] {
        match kind {
            PoolKind::Dev => &self.dev,
            PoolKind::Test => &self.test,
            PoolKind::Probe => &self.probe,
        }
    }

    /// A target pool in language `language`.
    pub fn language_pool(&self, kind: PoolKind, language: usize) -> Result<Vec<MultiChoiceInstance>> {
        let shift = self.language(language)?;
        Ok(self.pool(kind).iter().map(|i| shift.apply(i)).collect())
    }

    pub fn pool_instances(
        &self,
        kind: PoolKind,
        language: usize,
        ids: &[usize],
    ) -> Result<Vec<MultiChoiceInstance>> {
        let shift = self.language(language)?;
        let pool = self.pool(kind);
        ids.iter()
            .map(|&i| {
                pool.get(i)
                    .map(|inst| shift.apply(inst))
                    .ok_or_else(|| Error::InvalidArgument(format!("pool index {i} out of range")))
            })
            .collect()
    }

    /// Draws disjoint support and query batches from source dataset
    /// `dataset`, shifted into `language`.
    pub fn sample_episode(
        &self,
        dataset: usize,
        language: usize,
        n_support: usize,
        n_query: usize,
        rng: &mut impl Rng,
    ) -> Result<Episode> {
        if n_support == 0 || n_query == 0 {
            return Err(Error::InvalidArgument("episode batch sizes must be >= 1".into()));
        }
        let spec = self
            .sources
            .get(dataset)
            .ok_or_else(|| Error::InvalidArgument(format!("no source dataset {dataset}")))?;
        if n_support + n_query > spec.size {
            return Err(Error::InvalidArgument(format!(
                "dataset {dataset} has {} instances, episode needs {}",
                spec.size,
                n_support + n_query
            )));
        }
        let shift = self.language(language)?;
        let ids = index::sample(rng, spec.size, n_support + n_query).into_vec();
        let (support_ids, query_ids) = ids.split_at(n_support);
        let make = |ids: &[usize]| -> Vec<MultiChoiceInstance> {
            ids.iter()
                .map(|&i| shift.apply(&self.source_instance(dataset, i)))
                .collect()
        };
        Ok(Episode {
            dataset,
            language,
            support: make(support_ids),
            query: make(query_ids),
            support_ids: support_ids.to_vec(),
            query_ids: query_ids.to_vec(),
        })
    }

    /// `n` distinct instances from source dataset `dataset`, shifted into `language`.
    pub fn sample_batch(
        &self,
        dataset: usize,
        language: usize,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<MultiChoiceInstance>> {
        let spec = self
            .sources
            .get(dataset)
            .ok_or_else(|| Error::InvalidArgument(format!("no source dataset {dataset}")))?;
        if n == 0 || n > spec.size {
            return Err(Error::InvalidArgument(format!(
                "batch of {n} from dataset {dataset} with {} instances",
                spec.size
            )));
        }
        let shift = self.language(language)?;
        Ok(index::sample(rng, spec.size, n)
            .into_iter()
            .map(|i| shift.apply(&self.source_instance(dataset, i)))
            .collect())
    }

    /// Restriction of the suite to a subset of its source datasets
    /// (re-indexed in the given order).
    pub fn with_sources(&self, subset: &[usize]) -> Result<Suite> {
        let mut s = self.clone();
        s.sources = subset
            .iter()
            .map(|&j| {
                self.sources
                    .get(j)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no source dataset {j}")))
            })
            .collect::<Result<_>>()?;
        if s.sources.is_empty() {
            return Err(Error::Empty("source subset"));
        }
        Ok(s)
    }
}
