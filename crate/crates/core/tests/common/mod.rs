#![allow(dead_code)]

use metatransfer::model::{ModelConfig, ModelParams, MultiChoiceInstance};
use metatransfer::numeric::{ParamSet, Tensor2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Random instance with `n` candidates and a random label.
pub fn random_instance(rng: &mut impl Rng, feature_dim: usize, n: usize) -> MultiChoiceInstance {
    MultiChoiceInstance {
        context: gaussian_vec(rng, feature_dim, 1.0),
        candidates: (0..n).map(|_| gaussian_vec(rng, feature_dim, 1.0)).collect(),
        label: rng.random_range(0..n),
    }
}

pub fn random_batch(rng: &mut impl Rng, feature_dim: usize, size: usize, n: usize) -> Vec<MultiChoiceInstance> {
    (0..size).map(|_| random_instance(rng, feature_dim, n)).collect()
}

/// Overwrites every group with Gaussian values so no gradient path is
/// trivially zero.
pub fn randomize(set: &mut ParamSet, rng: &mut impl Rng, std: f64) {
    let ids: Vec<_> = set.ids().collect();
    for g in ids {
        let (r, c) = set.get(g).shape();
        let t = Tensor2::from_vec(r, c, gaussian_vec(rng, r * c, std)).unwrap();
        set.replace(g, t).unwrap();
    }
}

pub fn random_model(config: ModelConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = ModelParams::init(config, &mut r).unwrap();
    randomize(&mut p.set, &mut r, 0.5);
    p
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        hidden: 4,
        bottleneck: 2,
        layers: 2,
        ..ModelConfig::default()
    }
}

// Independent scalar re-implementation of the scoring model.

fn affine(w: &Tensor2, b: Option<&Tensor2>, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| {
            let dot: f64 = (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum();
            dot + b.map_or(0.0, |b| b.get(0, r))
        })
        .collect()
}

pub fn oracle_logits(p: &ModelParams, inst: &MultiChoiceInstance) -> Vec<f64> {
    let s = &p.set;
    let lay = &p.layout;
    inst.candidates
        .iter()
        .map(|cand| {
            let mut x = inst.context.clone();
            x.extend_from_slice(cand);
            let mut h = affine(s.get(lay.input_w), Some(s.get(lay.input_b)), &x);
            for l in &lay.layers {
                h = affine(s.get(l.w), Some(s.get(l.b)), &h).iter().map(|v| v.tanh()).collect();
                let a: Vec<f64> = affine(s.get(l.down_w), Some(s.get(l.down_b)), &h)
                    .iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let up = affine(s.get(l.up_w), Some(s.get(l.up_b)), &a);
                h = up.iter().zip(&h).map(|(u, v)| u + v).collect();
            }
            let z: Vec<f64> = affine(s.get(lay.head_w1), Some(s.get(lay.head_b1)), &h)
                .iter()
                .map(|v| v.tanh())
                .collect();
            affine(s.get(lay.head_w2), None, &z)[0]
        })
        .collect()
}

pub fn oracle_loss(p: &ModelParams, batch: &[MultiChoiceInstance]) -> f64 {
    batch
        .iter()
        .map(|inst| {
            let z = oracle_logits(p, inst);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[inst.label]
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Central-difference gradient of `oracle_loss` over the trainable groups;
/// frozen groups get zeros. Returned as one flat vector per group.
pub fn oracle_grad(p: &ModelParams, batch: &[MultiChoiceInstance]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut probe = p.clone();
    p.set
        .ids()
        .map(|g| {
            let n = p.set.get(g).len();
            if !p.set.is_trainable(g) {
                return vec![0.0; n];
            }
            (0..n)
                .map(|i| {
                    let orig = p.set.get(g).as_slice()[i];
                    probe.set.get_mut(g).as_mut_slice()[i] = orig + h;
                    let plus = oracle_loss(&probe, batch);
                    probe.set.get_mut(g).as_mut_slice()[i] = orig - h;
                    let minus = oracle_loss(&probe, batch);
                    probe.set.get_mut(g).as_mut_slice()[i] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `params + scale * grad` on the trainable groups.
pub fn oracle_apply(p: &ModelParams, grad: &[Vec<f64>], scale: f64) -> ModelParams {
    let mut out = p.clone();
    let ids: Vec<_> = p.set.ids().collect();
    for g in ids {
        if !p.set.is_trainable(g) {
            continue;
        }
        for (v, d) in out.set.get_mut(g).as_mut_slice().iter_mut().zip(&grad[g.0]) {
            *v += scale * d;
        }
    }
    out
}

pub fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.ids()
        .flat_map(|g| {
            a.get(g)
                .as_slice()
                .iter()
                .zip(b.get(g).as_slice())
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
