use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::losses::{self, LossWeights, MergeSetting};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{GraphForward, TapSet, VitConfig};

use super::config::DistillConfig;
use super::kd::{kd_loss, resolve_lambda};
use super::layers::LayerPairing;

/// Teacher outputs for one batch: logits and tapped features.
#[derive(Clone, Debug)]
pub struct TeacherTargets<T> {
    pub logits: Tensor<T>,
    pub taps: BTreeMap<usize, Tensor<T>>,
}

/// Hyperparameters of the composite loss, resolved against concrete models.
#[derive(Clone, Debug)]
pub struct Objective {
    pub lambda: f64,
    pub tau: f64,
    pub weights: LossWeights,
    pub k: usize,
    pub pairing: LayerPairing,
    /// Merge setting per pair, in pairing order.
    pub merges: Vec<Option<MergeSetting>>,
    pub share_indices: bool,
    pub teacher_grid: (usize, usize),
    pub student_grid: (usize, usize),
}

impl Objective {
    pub fn new(cfg: &DistillConfig, teacher: &VitConfig, student: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        let pairing = cfg.layers.resolve(teacher.num_layers, student.num_layers)?;
        let merges: Vec<Option<MergeSetting>> =
            pairing.pairs.iter().map(|&(_, s)| cfg.merge_for(s)).collect();
        for m in merges.iter().flatten() {
            m.validate(teacher.grid())?;
            m.validate(student.grid())?;
        }
        let lambda = resolve_lambda(teacher.num_params() as f64, student.num_params() as f64, cfg.lambda);
        Ok(Self {
            lambda,
            tau: cfg.tau,
            weights: cfg.weights(),
            k: cfg.k,
            pairing,
            merges,
            share_indices: cfg.share_indices,
            teacher_grid: teacher.grid(),
            student_grid: student.grid(),
        })
    }

    /// Whether any manifold term contributes.
    pub fn uses_manifold(&self) -> bool {
        !self.weights.is_zero() && !self.pairing.is_empty()
    }

    pub fn teacher_taps(&self, depth: usize) -> Result<TapSet> {
        if self.uses_manifold() {
            TapSet::new(self.pairing.teacher_layers(), depth)
        } else {
            Ok(TapSet::empty())
        }
    }

    pub fn student_taps(&self, depth: usize) -> Result<TapSet> {
        if self.uses_manifold() {
            TapSet::new(self.pairing.student_layers(), depth)
        } else {
            Ok(TapSet::empty())
        }
    }
}

/// Graph handles of the manifold terms for one layer pair.
#[derive(Clone, Copy, Debug)]
pub struct LayerTermVars {
    pub teacher_layer: usize,
    pub student_layer: usize,
    pub intra: Var,
    pub inter: Var,
    pub random: Var,
    pub weighted: Var,
    /// `α·intra`, `β·inter`, `γ·random` as they enter the total.
    pub weighted_terms: [Var; 3],
}

/// Graph handles of the whole objective.
#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub kd: Var,
    pub ce: Var,
    pub kl: Var,
    pub layers: Vec<LayerTermVars>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBreakdown {
    pub teacher_layer: usize,
    pub student_layer: usize,
    pub intra: f64,
    pub inter: f64,
    pub random: f64,
    pub weighted: f64,
}

/// Evaluated loss terms of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kd: f64,
    pub ce: f64,
    pub kl: f64,
    /// Unweighted sums over layers.
    pub intra: f64,
    pub inter: f64,
    pub random: f64,
    /// `Σ_l (α·intra + β·inter + γ·random)`.
    pub manifold: f64,
    pub layers: Vec<LayerBreakdown>,
}

impl LossBreakdown {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "total={} kd={} ce={} kl={} intra={} inter={} random={}",
            self.total, self.kd, self.ce, self.kl, self.intra, self.inter, self.random
        );
        for l in &self.layers {
            s.push_str(&format!(
                "; pair({},{}) intra={} inter={} random={}",
                l.teacher_layer, l.student_layer, l.intra, l.inter, l.random
            ));
        }
        s
    }
}

impl ObjectiveVars {
    /// Each term as it enters the total, named for error messages.
    pub fn named_terms(&self) -> Vec<(String, Var)> {
        let mut out = vec![("ce".to_string(), self.ce), ("kl".to_string(), self.kl), ("kd".to_string(), self.kd)];
        for l in &self.layers {
            let tag = format!("(teacher layer {}, student layer {})", l.teacher_layer, l.student_layer);
            for (name, raw, weighted) in [
                ("intra", l.intra, l.weighted_terms[0]),
                ("inter", l.inter, l.weighted_terms[1]),
                ("random", l.random, l.weighted_terms[2]),
            ] {
                out.push((format!("{name} {tag}"), raw));
                out.push((format!("weighted {name} {tag}"), weighted));
            }
        }
        out
    }

    /// Name of the first term whose value is non-finite.
    pub fn first_non_finite<T: Scalar>(&self, g: &Graph<T>) -> Option<String> {
        self.named_terms()
            .into_iter()
            .find(|(_, v)| !g.value(*v).all_finite())
            .map(|(n, _)| n)
            .or_else(|| (!g.value(self.total).all_finite()).then(|| "total".to_string()))
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        let layers: Vec<LayerBreakdown> = self
            .layers
            .iter()
            .map(|l| LayerBreakdown {
                teacher_layer: l.teacher_layer,
                student_layer: l.student_layer,
                intra: v(l.intra),
                inter: v(l.inter),
                random: v(l.random),
                weighted: v(l.weighted),
            })
            .collect();
        LossBreakdown {
            total: v(self.total),
            kd: v(self.kd),
            ce: v(self.ce),
            kl: v(self.kl),
            intra: layers.iter().map(|l| l.intra).fold(0.0, |a, v| a + v),
            inter: layers.iter().map(|l| l.inter).fold(0.0, |a, v| a + v),
            random: layers.iter().map(|l| l.random).fold(0.0, |a, v| a + v),
            manifold: layers.iter().map(|l| l.weighted).fold(0.0, |a, v| a + v),
            layers,
        }
    }
}

/// Deterministic per-step, per-pair seed for the random-loss index draw.
pub fn index_seed(base: u64, step: usize, pair: usize) -> u64 {
    let mut z = base
        ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (pair as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `L_kd + Σ_pairs (α·L_intra + β·L_inter + γ·L_random)` on a recorded student pass.
///
/// Teacher quantities enter as constants. `base_seed` and `step` fix the
/// random-loss index draws.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    objective: &Objective,
    student: &GraphForward,
    teacher: &TeacherTargets<T>,
    labels: &[usize],
    base_seed: u64,
    step: usize,
) -> Result<ObjectiveVars> {
    let kd = kd_loss(g, student.logits, &teacher.logits, labels, objective.lambda, objective.tau)?;
    let mut layers = Vec::new();
    let mut total = kd.total;
    if objective.uses_manifold() {
        for (pi, (&(tl, sl), merge)) in objective.pairing.pairs.iter().zip(&objective.merges).enumerate() {
            let fs = *student
                .taps
                .get(&sl)
                .ok_or_else(|| Error::Contract(format!("student layer {sl} was not tapped")))?;
            let ft_tensor = teacher
                .taps
                .get(&tl)
                .ok_or_else(|| Error::Contract(format!("teacher layer {tl} was not tapped")))?;
            let mut ft = g.constant(ft_tensor.clone());
            let mut fs = fs;
            if let Some(m) = merge {
                fs = g.merge_patches(fs, objective.student_grid, (m.height, m.width))?;
                ft = g.merge_patches(ft, objective.teacher_grid, (m.height, m.width))?;
            }
            let (ss, ts) = (g.shape(fs), g.shape(ft));
            if ss[..2] != ts[..2] {
                return Err(shape_err!(
                    "pair (teacher {tl}, student {sl}): student features {ss:?} vs teacher features {ts:?} after merging"
                ));
            }
            let (b, n) = (ss[0], ss[1]);
            let pair_key = if objective.share_indices { 0 } else { pi };
            let idx = losses::sample_indices(b, n, objective.k, index_seed(base_seed, step, pair_key))?;
            let terms = losses::decoupled_loss(g, fs, ft, &objective.weights, &idx)?;
            total = g.add(total, terms.total)?;
            layers.push(LayerTermVars {
                teacher_layer: tl,
                student_layer: sl,
                intra: terms.intra,
                inter: terms.inter,
                random: terms.random,
                weighted: terms.total,
                weighted_terms: terms.weighted,
            });
        }
    }
    Ok(ObjectiveVars { total, kd: kd.total, ce: kd.ce, kl: kd.kl, layers })
}
