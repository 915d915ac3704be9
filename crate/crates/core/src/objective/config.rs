use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, MergeSetting};

use super::layers::{select_layers, LayerPairing, LayerScheme};

/// How teacher and student layers are paired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSelection {
    Scheme { scheme: LayerScheme, count: usize },
    Explicit { pairs: Vec<(usize, usize)> },
}

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection::Scheme { scheme: LayerScheme::ShallowDeep, count: 8 }
    }
}

impl LayerSelection {
    pub fn resolve(&self, teacher_depth: usize, student_depth: usize) -> Result<LayerPairing> {
        match self {
            LayerSelection::Scheme { scheme, count } => {
                select_layers(*scheme, teacher_depth, student_depth, *count)
            }
            LayerSelection::Explicit { pairs } => {
                LayerPairing::new(pairs.clone(), teacher_depth, student_depth)
            }
        }
    }
}

/// Patch merging applied to one student layer and its paired teacher layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMerge {
    pub student_layer: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerMerge {
    pub fn setting(&self) -> MergeSetting {
        MergeSetting::new(self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Training schedule shared by teacher training and distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Record a metrics line every this many steps (and at the last step).
    pub log_interval: usize,
    /// Evaluate on the held-out split every this many steps (and at the last step).
    pub eval_interval: usize,
    /// Seed of the data order.
    pub data_seed: u64,
    pub optim: OptimConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            log_interval: 10,
            eval_interval: 100,
            data_seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_interval == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch size and intervals must be positive".into()));
        }
        self.optim.validate()
    }
}

/// Every hyperparameter of a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Soft/hard label balance; `None` picks it from relative model size.
    pub lambda: Option<f64>,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Rows sampled for the random relation map.
    pub k: usize,
    pub layers: LayerSelection,
    pub merge: Vec<LayerMerge>,
    /// Reuse one index draw for every paired layer of a step.
    pub share_indices: bool,
    /// Seed of the per-step index draws.
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda: None,
            tau: 1.0,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            k: 192,
            layers: LayerSelection::default(),
            merge: Vec::new(),
            share_indices: false,
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda must lie in [0, 1], got {l}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.weights().validate()?;
        self.schedule.validate()
    }

    pub fn merge_for(&self, student_layer: usize) -> Option<MergeSetting> {
        self.merge.iter().find(|m| m.student_layer == student_layer).map(LayerMerge::setting)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let c = DistillConfig::default();
        assert_eq!((c.alpha, c.beta, c.gamma, c.k, c.tau), (4.0, 0.1, 0.2, 192, 1.0));
        c.validate().unwrap();
        let p = c.layers.resolve(12, 12).unwrap();
        assert_eq!(p.student_layers(), vec![1, 2, 3, 4, 9, 10, 11, 12]);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(DistillConfig { lambda: Some(1.2), ..Default::default() }.validate().is_err());
        assert!(DistillConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { gamma: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<DistillConfig>("alpah = 4.0").unwrap_err();
        assert!(err.to_string().contains("alpah"));
        let ok: DistillConfig = toml::from_str(
            "alpha = 2.0\n[layers]\nkind = \"explicit\"\npairs = [[1, 1], [6, 3]]\n",
        )
        .unwrap();
        assert_eq!(ok.alpha, 2.0);
        assert_eq!(ok.layers, LayerSelection::Explicit { pairs: vec![(1, 1), (6, 3)] });
    }
}
