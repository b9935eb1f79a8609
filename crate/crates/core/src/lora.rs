//! Low-rank adapters on the crucial layers of a frozen generator.
//!
//! A conv layer with listed shape `[h, w, kh, kw]` (in, out, kernel) gets factors
//! `A: [h, r, kh, kw]` and `B: [r, w, 1, 1]`; the delta path is a `kh x kw` conv to `r`
//! channels followed by a `1 x 1` conv to `w` channels. A linear layer `[out, in]` gets
//! `A: [r, in]` and `B: [out, r]`. The delta is added with unit scale.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{param_name, Generator, LayerDescriptor, LayerGroup, LayerKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LORA_A_STD: f64 = 0.02;

/// Rank thresholds by sampling depth (outermost first); mirrored on the upsampling stack.
pub const SAMPLING_THRESHOLDS: [usize; 4] = [1, 4, 16, 32];
pub const TB_THRESHOLD: usize = 1;
/// Ranks selected by the search on the reference setup, by sampling depth.
pub const SEARCHED_SAMPLING_RANKS: [usize; 4] = [1, 4, 8, 8];
pub const SEARCHED_TB_RANK: usize = 1;

pub fn lora_a_name(layer_id: &str) -> String {
    format!("lora.{layer_id}.a")
}

pub fn lora_b_name(layer_id: &str) -> String {
    format!("lora.{layer_id}.b")
}

/// Per-layer LoRA ranks together with their upper thresholds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSpec {
    pub ranks: BTreeMap<String, usize>,
    pub thresholds: BTreeMap<String, usize>,
}

impl RankSpec {
    pub fn new(ranks: BTreeMap<String, usize>, thresholds: BTreeMap<String, usize>) -> Result<Self> {
        let spec = Self { ranks, thresholds };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let rk: BTreeSet<_> = self.ranks.keys().collect();
        let tk: BTreeSet<_> = self.thresholds.keys().collect();
        if rk != tk {
            let only_r: Vec<_> = rk.difference(&tk).collect();
            let only_t: Vec<_> = tk.difference(&rk).collect();
            return Err(Error::RankKeys(format!("ranks only: {only_r:?}; thresholds only: {only_t:?}")));
        }
        for (id, &r) in &self.ranks {
            let tau = self.thresholds[id];
            if tau == 0 || r == 0 || r > tau {
                return Err(Error::Config(format!("layer {id}: rank {r} must satisfy 1 <= rank <= threshold {tau}")));
            }
        }
        Ok(())
    }

    /// Assigns ranks by sampling depth (mirrored across stacks) and one rank to every
    /// transformer-block layer, with the default thresholds.
    pub fn by_depth(layers: &[LayerDescriptor], sampling: [usize; 4], tb: usize) -> Result<Self> {
        let thresholds = default_thresholds(layers);
        let ranks = thresholds
            .keys()
            .map(|id| {
                let r = match sampling_depth(id) {
                    Some(d) => sampling[d],
                    None => tb,
                };
                (id.clone(), r)
            })
            .collect();
        Self::new(ranks, thresholds)
    }

    /// The searched reference assignment: sampling ranks 1, 4, 8, 8 and TB rank 1.
    pub fn searched(layers: &[LayerDescriptor]) -> Result<Self> {
        Self::by_depth(layers, SEARCHED_SAMPLING_RANKS, SEARCHED_TB_RANK)
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// Depth (0 = outermost) of a sampling layer id such as `down.2` or `up.1`.
pub fn sampling_depth(layer_id: &str) -> Option<usize> {
    let (stack, idx) = layer_id.split_once('.')?;
    let idx: usize = idx.parse().ok()?;
    match stack {
        "down" => Some(idx),
        "up" => Some(crate::model::DOWNSAMPLING_STEPS - idx),
        _ => None,
    }
}

/// Ids of the layers that carry adapters: sampling convs and transformer projections,
/// in layout order.
pub fn crucial_layers_of(layers: &[LayerDescriptor]) -> Vec<String> {
    layers
        .iter()
        .filter(|d| matches!(d.group, LayerGroup::SL | LayerGroup::TB) && d.is_factorizable())
        .map(|d| d.layer_id.clone())
        .collect()
}

pub fn crucial_layers<T: Scalar>(gen: &Generator<T>) -> Vec<String> {
    crucial_layers_of(gen.describe_layers())
}

/// Default rank thresholds for every crucial layer.
pub fn default_thresholds(layers: &[LayerDescriptor]) -> BTreeMap<String, usize> {
    depth_thresholds(layers, SAMPLING_THRESHOLDS, TB_THRESHOLD)
}

/// Per-layer values for every crucial layer: `sampling[depth]` for sampling layers and
/// `tb` for transformer-block layers.
pub fn depth_thresholds(layers: &[LayerDescriptor], sampling: [usize; 4], tb: usize) -> BTreeMap<String, usize> {
    crucial_layers_of(layers)
        .into_iter()
        .map(|id| {
            let v = match sampling_depth(&id) {
                Some(d) => sampling[d.min(3)],
                None => tb,
            };
            (id, v)
        })
        .collect()
}

/// Which layers an adapter set must cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LoraTargets {
    #[default]
    Crucial,
    /// Crucial layers plus ResNet-block convs (ablation only).
    CrucialAndRb,
}

fn target_ids(layers: &[LayerDescriptor], targets: LoraTargets) -> Vec<String> {
    layers
        .iter()
        .filter(|d| {
            d.is_factorizable()
                && match targets {
                    LoraTargets::Crucial => matches!(d.group, LayerGroup::SL | LayerGroup::TB),
                    LoraTargets::CrucialAndRb => matches!(d.group, LayerGroup::SL | LayerGroup::TB | LayerGroup::RB),
                }
        })
        .map(|d| d.layer_id.clone())
        .collect()
}

/// Factor shapes `(A, B)` for a layer at rank `r`.
pub fn factor_shapes(d: &LayerDescriptor, r: usize) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (d.in_channels, d.out_channels);
    match (d.kind, d.kernel) {
        (LayerKind::Conv | LayerKind::TransposeConv, Some((kh, kw))) => (vec![h, r, kh, kw], vec![r, w, 1, 1]),
        _ => (vec![r, h], vec![w, r]),
    }
}

/// Adapter parameters for one layer at rank `r`.
pub fn factor_param_count(d: &LayerDescriptor, r: usize) -> usize {
    let (a, b) = factor_shapes(d, r);
    a.iter().product::<usize>() + b.iter().product::<usize>()
}

/// Number of adapter parameters implied by `spec` over `layers`. Only layers named in
/// `spec` are counted; every spec entry must exist in `layers`.
pub fn lora_param_count(spec: &RankSpec, layers: &[LayerDescriptor]) -> Result<usize> {
    let by_id: BTreeMap<_, _> = layers.iter().map(|d| (d.layer_id.as_str(), d)).collect();
    spec.ranks
        .iter()
        .map(|(id, &r)| {
            by_id
                .get(id.as_str())
                .map(|d| factor_param_count(d, r))
                .ok_or_else(|| Error::Injection { missing: vec![], extra: vec![id.clone()] })
        })
        .sum()
}

/// A frozen base generator with trainable low-rank factors.
#[derive(Clone, Debug)]
pub struct AdaptedGenerator<T: Scalar = f32> {
    base: Generator<T>,
    factors: ParamStore<T>,
    spec: RankSpec,
}

pub fn inject_lora<T: Scalar>(gen: Generator<T>, spec: &RankSpec, seed: u64) -> Result<AdaptedGenerator<T>> {
    inject_lora_with(gen, spec, seed, LoraTargets::Crucial)
}

pub fn inject_lora_with<T: Scalar>(
    gen: Generator<T>,
    spec: &RankSpec,
    seed: u64,
    targets: LoraTargets,
) -> Result<AdaptedGenerator<T>> {
    spec.validate()?;
    let wanted = target_ids(gen.describe_layers(), targets);
    let wanted_set: BTreeSet<_> = wanted.iter().cloned().collect();
    let have: BTreeSet<_> = spec.ranks.keys().cloned().collect();
    if wanted_set != have {
        return Err(Error::Injection {
            missing: wanted_set.difference(&have).cloned().collect(),
            extra: have.difference(&wanted_set).cloned().collect(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = ParamStore::new();
    for id in &wanted {
        let d = gen.layer(id).expect("target id from layout");
        let (sa, sb) = factor_shapes(d, spec.ranks[id]);
        factors.insert(lora_a_name(id), Tensor::randn(&sa, LORA_A_STD, &mut rng));
        factors.insert(lora_b_name(id), Tensor::zeros(&sb));
    }
    Ok(AdaptedGenerator { base: gen, factors, spec: spec.clone() })
}

impl<T: Scalar> AdaptedGenerator<T> {
    /// Reassembles an adapted generator from stored factors (e.g. a concept delta).
    pub fn from_parts(base: Generator<T>, spec: RankSpec, factors: ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        for (id, &r) in &spec.ranks {
            let d = base
                .layer(id)
                .ok_or_else(|| Error::Compatibility(format!("adapter layer {id} not in base model")))?;
            let (sa, sb) = factor_shapes(d, r);
            for (name, shape) in [(lora_a_name(id), sa), (lora_b_name(id), sb)] {
                let t = factors.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Compatibility(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )));
                }
            }
        }
        if factors.len() != 2 * spec.len() {
            return Err(Error::Compatibility(format!(
                "expected {} adapter tensors, found {}",
                2 * spec.len(),
                factors.len()
            )));
        }
        Ok(Self { base, factors, spec })
    }

    pub fn base(&self) -> &Generator<T> {
        &self.base
    }

    pub fn factors(&self) -> &ParamStore<T> {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.factors
    }

    pub fn spec(&self) -> &RankSpec {
        &self.spec
    }

    pub fn into_parts(self) -> (Generator<T>, ParamStore<T>, RankSpec) {
        (self.base, self.factors, self.spec)
    }

    /// Names of the trainable tensors: the adapter factors only.
    pub fn trainable_names(&self) -> Vec<String> {
        self.factors.names().cloned().collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.factors.num_elements()
    }

    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, z: Var, c: Var) -> Result<Var> {
        self.base.forward_graph(g, Some(&self.factors), x, z, c)
    }

    pub fn forward(&self, x: &Tensor<T>, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        self.base.forward_with(Some(&self.factors), x, z, c)
    }

    /// Raises ranks to `new_ranks`, keeping existing factor slices. New `A` slices are
    /// drawn fresh and new `B` slices are zero, so the composed delta is unchanged.
    pub fn grow_ranks<R: Rng + ?Sized>(&mut self, new_ranks: &BTreeMap<String, usize>, rng: &mut R) -> Result<()> {
        let mut next = self.spec.clone();
        for (id, &r) in new_ranks {
            let old = *self
                .spec
                .ranks
                .get(id)
                .ok_or_else(|| Error::RankKeys(format!("unknown layer {id}")))?;
            if r < old {
                return Err(Error::Config(format!("layer {id}: ranks cannot shrink ({old} -> {r})")));
            }
            next.ranks.insert(id.clone(), r);
        }
        next.validate()?;
        for (id, &r) in &next.ranks {
            let old = self.spec.ranks[id];
            if r == old {
                continue;
            }
            let d = self.base.layer(id).expect("adapter layer exists").clone();
            let (sa, sb) = factor_shapes(&d, r);
            let a_old = self.factors.get(&lora_a_name(id))?.clone();
            let b_old = self.factors.get(&lora_b_name(id))?.clone();
            let fresh: Tensor<T> = Tensor::randn(&sa, LORA_A_STD, rng);
            let mut a_new = fresh.clone();
            let mut b_new = Tensor::zeros(&sb);
            let conv = d.kernel.is_some() && d.kind != LayerKind::Linear && d.kind != LayerKind::AttentionProj;
            if conv {
                // A: [h, r, kh, kw]; B: [r, w, 1, 1]
                let (h, kk) = (sa[0], sa[2] * sa[3]);
                for a in 0..h {
                    let src = &a_old.data()[a * old * kk..(a * old + old) * kk];
                    a_new.data_mut()[a * r * kk..(a * r + old) * kk].copy_from_slice(src);
                }
                let w = sb[1];
                b_new.data_mut()[..old * w].copy_from_slice(b_old.data());
            } else {
                // A: [r, in]; B: [out, r]
                let inf = sa[1];
                a_new.data_mut()[..old * inf].copy_from_slice(a_old.data());
                let out = sb[0];
                for o in 0..out {
                    b_new.data_mut()[o * r..o * r + old].copy_from_slice(&b_old.data()[o * old..(o + 1) * old]);
                }
            }
            self.factors.insert(lora_a_name(id), a_new);
            self.factors.insert(lora_b_name(id), b_new);
        }
        self.spec = next;
        Ok(())
    }

    /// Dense weight delta for one adapted layer, in the base layer's storage layout.
    pub fn weight_delta(&self, layer_id: &str) -> Result<Tensor<T>> {
        let d = self
            .base
            .layer(layer_id)
            .ok_or_else(|| Error::Compatibility(format!("unknown layer {layer_id}")))?;
        let r = self.spec.ranks[layer_id];
        let a = self.factors.get(&lora_a_name(layer_id))?;
        let b = self.factors.get(&lora_b_name(layer_id))?;
        let (h, w) = (d.in_channels, d.out_channels);
        match (d.kind, d.kernel) {
            (LayerKind::Conv | LayerKind::TransposeConv, Some((kh, kw))) => {
                let kk = kh * kw;
                let transpose = d.kind == LayerKind::TransposeConv;
                let shape = if transpose { vec![h, w, kh, kw] } else { vec![w, h, kh, kw] };
                let mut out = Tensor::zeros(&shape);
                // delta[a, b, u, v] = sum_j B[j, b] * A[a, j, u, v]
                for ai in 0..h {
                    for bi in 0..w {
                        let dst = if transpose { (ai * w + bi) * kk } else { (bi * h + ai) * kk };
                        for j in 0..r {
                            let coef = b.data()[j * w + bi];
                            let src = (ai * r + j) * kk;
                            for p in 0..kk {
                                let cur = out.data()[dst + p];
                                out.data_mut()[dst + p] = cur + coef * a.data()[src + p];
                            }
                        }
                    }
                }
                Ok(out)
            }
            _ => {
                // [out, in] = B[out, r] * A[r, in]
                let mut out = vec![T::zero(); w * h];
                crate::tensor::mm::ab(w, r, h, b.data(), a.data(), &mut out, false);
                Tensor::new(&[w, h], out)
            }
        }
    }

    /// Folds the adapters into dense weights.
    pub fn merge(&self) -> Result<Generator<T>> {
        let mut merged = self.base.clone();
        for id in self.spec.ranks.keys() {
            let delta = self.weight_delta(id)?;
            merged.params_mut().get_mut(&param_name(id, "weight"))?.add_assign(&delta);
        }
        Ok(merged)
    }
}

pub fn merge_lora<T: Scalar>(adapted: &AdaptedGenerator<T>) -> Result<Generator<T>> {
    adapted.merge()
}
