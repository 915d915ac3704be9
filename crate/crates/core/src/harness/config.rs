use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{DistillConfig, LayerScheme, LayerSelection, OptimConfig, ScheduleConfig};
use crate::vit::VitConfig;

use super::dataset::DatasetSpec;

/// Everything a run needs, loaded from TOML. Unknown keys are rejected at
/// every level so a misspelt hyperparameter fails loudly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Parent directory; the run writes to `output_dir/run_id`.
    pub output_dir: PathBuf,
    /// Student-side seed: student init, data order and index draws derive from it.
    pub seed: u64,
    /// Load the teacher from this checkpoint instead of training it.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Students learn from the first this-many training images (the transfer
    /// set); 0 means the whole split. The teacher always uses the whole split.
    pub transfer_samples: usize,
    pub dataset: DatasetSpec,
    pub teacher: VitConfig,
    pub teacher_schedule: ScheduleConfig,
    pub student: VitConfig,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let teacher = VitConfig {
            image_size: (8, 8),
            channels: 3,
            patch_size: 2,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 6,
            num_classes: 8,
            use_class_token: true,
            seed: 1,
        };
        let student = VitConfig { embed_dim: 32, num_heads: 2, num_layers: 3, seed: 0, ..teacher.clone() };
        let teacher_schedule = ScheduleConfig {
            steps: 600,
            batch_size: 32,
            log_interval: 10,
            eval_interval: 100,
            data_seed: 1,
            optim: OptimConfig::default(),
        };
        // K matches the 16-patch grid; students get a longer, warmed-up schedule
        // on a 128-image transfer set.
        let distill = DistillConfig {
            k: 16,
            layers: LayerSelection::Scheme { scheme: LayerScheme::ShallowDeep, count: 2 },
            schedule: ScheduleConfig {
                steps: 800,
                optim: OptimConfig { lr: 2e-3, warmup_steps: 40, ..OptimConfig::default() },
                ..teacher_schedule.clone()
            },
            ..DistillConfig::default()
        };
        Self {
            run_id: "default".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            teacher_checkpoint: None,
            transfer_samples: 128,
            dataset: DatasetSpec::default(),
            teacher,
            teacher_schedule,
            student,
            distill,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses TOML layered over [`Default`]: any key the text omits keeps its
    /// default, at every nesting level. A `layers` table with a `kind` key
    /// replaces the default pairing wholesale.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == ".." {
            return Err(Error::Config(format!("run_id {:?} is not a plain directory name", self.run_id)));
        }
        self.dataset.validate()?;
        if self.transfer_samples > self.dataset.train_samples {
            return Err(Error::Config(format!(
                "transfer_samples {} exceeds the {} training images",
                self.transfer_samples, self.dataset.train_samples
            )));
        }
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher_schedule.validate()?;
        self.distill.validate()?;
        for (who, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            let ds = &self.dataset;
            if m.image_size != ds.image_size || m.channels != ds.channels || m.num_classes != ds.classes {
                return Err(Error::Config(format!(
                    "{who} input {:?}x{} with {} classes does not match the dataset {:?}x{} with {} classes",
                    m.image_size, m.channels, m.num_classes, ds.image_size, ds.channels, ds.classes
                )));
            }
        }
        self.distill.layers.resolve(self.teacher.num_layers, self.student.num_layers)?;
        Ok(())
    }

    /// Applies a student-side seed override.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// The student config with its init seed derived from the run seed.
    pub fn seeded_student(&self) -> VitConfig {
        VitConfig { seed: self.student.seed.wrapping_add(self.seed), ..self.student.clone() }
    }

    /// Distillation settings with data order and index draws derived from the run seed.
    pub fn seeded_distill(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        d.seed = d.seed.wrapping_add(self.seed);
        d.schedule.data_seed = d.schedule.data_seed.wrapping_add(self.seed);
        d
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
