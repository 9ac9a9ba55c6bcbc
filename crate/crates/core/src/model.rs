//! Multi-choice scoring model: input projection, a stack of tanh encoder
//! layers each followed by a bottleneck adapter, and a tanh-MLP scoring
//! head whose per-candidate scores go through a softmax.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    affine, relu, softmax, tanh, FreezeMask, GradRecord, GroupId, ParamSet, Segment, Tape,
    Tensor1, Tensor2, Var,
};

/// One question: a context, `N >= 2` candidate answers and the gold index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiChoiceInstance {
    pub context: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub label: usize,
}

impl MultiChoiceInstance {
    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "instance needs at least 2 candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.label >= self.candidates.len() {
            return Err(Error::LabelOutOfRange {
                label: self.label,
                candidates: self.candidates.len(),
            });
        }
        if self.context.len() != feature_dim {
            return Err(Error::shape("context features", feature_dim, self.context.len()));
        }
        for c in &self.candidates {
            if c.len() != feature_dim {
                return Err(Error::shape("candidate features", feature_dim, c.len()));
            }
        }
        let finite = self.context.iter().chain(self.candidates.iter().flatten());
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(())
    }

    /// `concat(context, candidate_i)`.
    pub fn pair_features(&self, i: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.context.len() * 2);
        v.extend_from_slice(&self.context);
        v.extend_from_slice(&self.candidates[i]);
        v
    }
}

/// Placement of the residual connection in the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterVariant {
    /// `up(relu(down(h))) + h`
    Residual,
    /// `up(relu(down(h)) + h)`, only well-formed when the bottleneck equals the hidden width.
    Literal,
}

impl std::str::FromStr for AdapterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(AdapterVariant::Residual),
            "literal" => Ok(AdapterVariant::Literal),
            other => Err(Error::Unknown {
                kind: "adapter variant",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub layers: usize,
    pub adapter_variant: AdapterVariant,
    /// Init scale of the frozen encoder weights, relative to `1/sqrt(fan_in)`.
    pub backbone_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            hidden: 32,
            bottleneck: 8,
            layers: 2,
            adapter_variant: AdapterVariant::Residual,
            backbone_gain: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.bottleneck == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        match self.adapter_variant {
            AdapterVariant::Residual if self.bottleneck >= self.hidden => {
                Err(Error::InvalidArgument(format!(
                    "adapter bottleneck {} must be smaller than hidden width {}",
                    self.bottleneck, self.hidden
                )))
            }
            AdapterVariant::Literal if self.bottleneck != self.hidden => {
                Err(Error::InvalidArgument(
                    "literal adapter variant requires bottleneck == hidden".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Parameter group ids of one encoder layer and its adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerIds {
    pub w: GroupId,
    pub b: GroupId,
    pub down_w: GroupId,
    pub down_b: GroupId,
    pub up_w: GroupId,
    pub up_b: GroupId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub input_w: GroupId,
    pub input_b: GroupId,
    pub layers: Vec<LayerIds>,
    pub head_w1: GroupId,
    pub head_b1: GroupId,
    pub head_w2: GroupId,
}

/// Coarse parameter partitions used to build freeze masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// Input projection and every encoder layer.
    Backbone,
    /// Only the last encoder layer (the input projection when there are no layers).
    BackboneLast,
    Adapters,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub set: ParamSet,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor2 {
    if std == 0.0 {
        return Tensor2::zeros(rows, cols);
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("consistent shape")
}

impl ModelParams {
    /// Random init: encoder weights `N(0, gain^2/fan_in)`, adapter
    /// down-projections `N(0, 1/H)`, up-projections zero (adapters start as
    /// the identity), head weights `N(0, 1/H)`, biases zero.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (f2, h, d) = (2 * config.feature_dim, config.hidden, config.bottleneck);
        let gain = config.backbone_gain;
        let mut set = ParamSet::new();
        let input_w = set.push(
            "backbone.input.w",
            normal_matrix(rng, h, f2, gain / (f2 as f64).sqrt()),
        );
        let input_b = set.push("backbone.input.b", Tensor2::zeros(1, h));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let w = set.push(
                format!("backbone.layer{l}.w"),
                normal_matrix(rng, h, h, gain / (h as f64).sqrt()),
            );
            let b = set.push(format!("backbone.layer{l}.b"), Tensor2::zeros(1, h));
            let down_w = set.push(
                format!("adapter{l}.down.w"),
                normal_matrix(rng, d, h, 1.0 / (h as f64).sqrt()),
            );
            let down_b = set.push(format!("adapter{l}.down.b"), Tensor2::zeros(1, d));
            let up_w = set.push(format!("adapter{l}.up.w"), Tensor2::zeros(h, d));
            let up_b = set.push(format!("adapter{l}.up.b"), Tensor2::zeros(1, h));
            layers.push(LayerIds {
                w,
                b,
                down_w,
                down_b,
                up_w,
                up_b,
            });
        }
        let head_w1 = set.push("head.w1", normal_matrix(rng, h, h, 1.0 / (h as f64).sqrt()));
        let head_b1 = set.push("head.b1", Tensor2::zeros(1, h));
        let head_w2 = set.push("head.w2", normal_matrix(rng, 1, h, 1.0 / (h as f64).sqrt()));
        Ok(ModelParams {
            config,
            layout: Layout {
                input_w,
                input_b,
                layers,
                head_w1,
                head_b1,
                head_w2,
            },
            set,
        })
    }

    pub fn groups_of(&self, part: Part) -> Vec<GroupId> {
        let lay = &self.layout;
        match part {
            Part::Backbone => {
                let mut g = vec![lay.input_w, lay.input_b];
                for l in &lay.layers {
                    g.extend([l.w, l.b]);
                }
                g
            }
            Part::BackboneLast => match lay.layers.last() {
                Some(l) => vec![l.w, l.b],
                None => vec![lay.input_w, lay.input_b],
            },
            Part::Adapters => lay
                .layers
                .iter()
                .flat_map(|l| [l.down_w, l.down_b, l.up_w, l.up_b])
                .collect(),
            Part::Head => vec![lay.head_w1, lay.head_b1, lay.head_w2],
        }
    }

    pub fn mask_for(&self, parts: &[Part]) -> FreezeMask {
        let groups: Vec<GroupId> = parts.iter().flat_map(|&p| self.groups_of(p)).collect();
        FreezeMask::from_trainable(self.set.len(), &groups)
    }

    /// Copy with only the groups in `parts` trainable.
    pub fn with_trainable(&self, parts: &[Part]) -> ModelParams {
        let mut m = self.clone();
        m.set
            .set_mask(self.mask_for(parts))
            .expect("mask built for this set");
        m
    }

    pub fn with_mask(&self, mask: FreezeMask) -> Result<ModelParams> {
        let mut m = self.clone();
        m.set.set_mask(mask)?;
        Ok(m)
    }

    /// Groups that are frozen under the current mask.
    pub fn frozen_groups(&self) -> Vec<GroupId> {
        self.set
            .ids()
            .filter(|&g| !self.set.is_trainable(g))
            .collect()
    }

    fn t1(&self, g: GroupId) -> Tensor1 {
        Tensor1::new(self.set.get(g).as_slice().to_vec())
    }

    /// Adapter of encoder layer `layer` applied to a single hidden vector.
    pub fn adapter_forward(&self, h: &Tensor1, layer: usize) -> Result<Tensor1> {
        let ids = self.layout.layers.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("no encoder layer {layer}"))
        })?;
        adapter_forward(
            h,
            self.set.get(ids.down_w),
            &self.t1(ids.down_b),
            self.set.get(ids.up_w),
            &self.t1(ids.up_b),
            self.config.adapter_variant,
        )
    }

    /// Aggregate representation of `(context, candidate i)`.
    pub fn encode(&self, instance: &MultiChoiceInstance, i: usize) -> Result<Tensor1> {
        if i >= instance.num_candidates() {
            return Err(Error::InvalidArgument(format!(
                "candidate index {i} out of range for {} candidates",
                instance.num_candidates()
            )));
        }
        let x = Tensor1::new(instance.pair_features(i));
        let mut h = affine(
            &x,
            self.set.get(self.layout.input_w),
            &self.t1(self.layout.input_b),
        )?;
        for (l, ids) in self.layout.layers.iter().enumerate() {
            h = tanh(&affine(&h, self.set.get(ids.w), &self.t1(ids.b))?);
            h = self.adapter_forward(&h, l)?;
        }
        Ok(h)
    }

    /// `W2 tanh(W1 h + b1)` for one aggregate vector.
    pub fn head_score(&self, h: &Tensor1) -> Result<f64> {
        let lay = &self.layout;
        let z = tanh(&affine(h, self.set.get(lay.head_w1), &self.t1(lay.head_b1))?);
        let w2 = Tensor1::new(self.set.get(lay.head_w2).as_slice().to_vec());
        if w2.len() != z.len() {
            return Err(Error::shape("head", z.len(), w2.len()));
        }
        Ok(w2.dot(&z))
    }

    pub fn candidate_logits(&self, instance: &MultiChoiceInstance) -> Result<Tensor1> {
        let scores = (0..instance.num_candidates())
            .map(|i| self.encode(instance, i).and_then(|h| self.head_score(&h)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor1::new(scores))
    }

    /// Softmax over candidate scores.
    pub fn score_candidates(&self, instance: &MultiChoiceInstance) -> Result<Tensor1> {
        let logits = self.candidate_logits(instance)?;
        Ok(Tensor1::new(softmax(logits.as_slice())))
    }

    /// Records the batched forward pass; returns the stacked logit column and
    /// the per-instance segments.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<'_>,
        batch: &[MultiChoiceInstance],
    ) -> Result<(Var, Vec<Segment>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let f2 = 2 * self.config.feature_dim;
        let rows: usize = batch.iter().map(|b| b.num_candidates()).sum();
        let mut data = Vec::with_capacity(rows * f2);
        let mut segments = Vec::with_capacity(batch.len());
        for inst in batch {
            if inst.label >= inst.num_candidates() {
                return Err(Error::LabelOutOfRange {
                    label: inst.label,
                    candidates: inst.num_candidates(),
                });
            }
            segments.push(Segment {
                start: data.len() / f2,
                len: inst.num_candidates(),
                label: inst.label,
            });
            for i in 0..inst.num_candidates() {
                let feats = inst.pair_features(i);
                if feats.len() != f2 {
                    return Err(Error::shape("instance features", f2, feats.len()));
                }
                data.extend(feats);
            }
        }
        let x = tape.input(Tensor2::from_vec(rows, f2, data)?);
        let lay = &self.layout;
        let mut h = tape.linear(x, lay.input_w, Some(lay.input_b))?;
        for ids in &lay.layers {
            let pre = tape.linear(h, ids.w, Some(ids.b))?;
            h = tape.tanh(pre);
            let down = tape.linear(h, ids.down_w, Some(ids.down_b))?;
            let act = tape.relu(down);
            h = match self.config.adapter_variant {
                AdapterVariant::Residual => {
                    let up = tape.linear(act, ids.up_w, Some(ids.up_b))?;
                    tape.add(up, h)?
                }
                AdapterVariant::Literal => {
                    let inner = tape.add(act, h)?;
                    tape.linear(inner, ids.up_w, Some(ids.up_b))?
                }
            };
        }
        let z = tape.linear(h, lay.head_w1, Some(lay.head_b1))?;
        let z = tape.tanh(z);
        let logits = tape.linear(z, lay.head_w2, None)?;
        Ok((logits, segments))
    }

    /// Mean cross-entropy over the batch and its gradient; frozen groups get
    /// zero gradient.
    pub fn batch_loss(&self, batch: &[MultiChoiceInstance]) -> Result<(f64, GradRecord)> {
        let mut tape = Tape::new(&self.set);
        let (logits, segments) = self.forward_tape(&mut tape, batch)?;
        let loss = tape.segment_xent(logits, &segments)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).get(0, 0), grads))
    }

    /// Mean cross-entropy without the backward pass.
    pub fn batch_loss_value(&self, batch: &[MultiChoiceInstance]) -> Result<f64> {
        let frozen = self.with_mask(FreezeMask::all_frozen(self.set.len()))?;
        let mut tape = Tape::new(&frozen.set);
        let (logits, segments) = frozen.forward_tape(&mut tape, batch)?;
        let loss = tape.segment_xent(logits, &segments)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Predicted candidate index per instance (lowest index wins ties).
    pub fn predict(&self, batch: &[MultiChoiceInstance]) -> Result<Vec<usize>> {
        let mut tape = Tape::new(&self.set);
        let (logits, segments) = self.forward_tape(&mut tape, batch)?;
        let col = tape.value(logits).as_slice();
        Ok(segments
            .iter()
            .map(|s| crate::numeric::argmax(&col[s.start..s.start + s.len]))
            .collect())
    }
}

/// Bottleneck adapter on one hidden vector.
pub fn adapter_forward(
    h: &Tensor1,
    down_w: &Tensor2,
    down_b: &Tensor1,
    up_w: &Tensor2,
    up_b: &Tensor1,
    variant: AdapterVariant,
) -> Result<Tensor1> {
    let act = relu(&affine(h, down_w, down_b)?);
    match variant {
        AdapterVariant::Residual => affine(&act, up_w, up_b)?.add(h),
        AdapterVariant::Literal => affine(&act.add(h)?, up_w, up_b),
    }
}
