//! Teacher → students orchestration and sweeps.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/<run_id>/
//!   config.toml                 echoed config (with the effective seed)
//!   teacher/checkpoint.json     when the teacher was trained here
//!   teacher/metrics.jsonl
//!   students/<variant>/checkpoint.json
//!   students/<variant>/metrics.jsonl
//!   summary.json
//! ```
//!
//! Every `*.jsonl` has a `timings.jsonl` sibling holding wall-clock.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{
    distill, evaluate, resolve_lambda, train_supervised, DistillConfig, LayerScheme, LayerSelection,
    MetricsRecord, MetricsSink, NullSink, TrainOutcome,
};
use crate::vit::{load_checkpoint, save_checkpoint, VitModel};

use super::config::ExperimentConfig;
use super::dataset::{generate_dataset, Splits};
use super::metrics::JsonlSink;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const EVAL_CHUNK: usize = 256;

/// Tags an error with the stage that produced it.
pub fn in_stage<R>(stage: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| Error::Stage { stage: stage.to_string(), source: Box::new(e) })
}

/// Creates the run directory (which must not already hold a run) and echoes the config.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    if dir.exists() && std::fs::read_dir(&dir)?.next().is_some() {
        return Err(Error::Config(format!(
            "run directory {} already exists; choose another run_id",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub kd: f64,
    pub intra: f64,
    pub inter: f64,
    pub random: f64,
    pub eval_acc: Option<f64>,
}

impl From<&MetricsRecord> for CurvePoint {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            step: r.step,
            total: r.total,
            kd: r.kd,
            intra: r.intra,
            inter: r.inter,
            random: r.random,
            eval_acc: r.eval_acc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSummary {
    pub name: String,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub layers: Vec<(usize, usize)>,
    pub final_eval_acc: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub source: String,
    pub checksum: String,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub teacher: TeacherSummary,
    pub students: Vec<StudentSummary>,
}

impl RunSummary {
    pub fn student(&self, name: &str) -> Option<&StudentSummary> {
        self.students.iter().find(|s| s.name == name)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    Ok(serde_json::from_str(&std::fs::read_to_string(run_dir.join(SUMMARY_FILE))?)?)
}

fn sink_for(dir: &Path, steps: usize) -> Result<Box<dyn MetricsSink>> {
    Ok(if steps == 0 { Box::new(NullSink) } else { Box::new(JsonlSink::create(dir)?) })
}

fn load_data(cfg: &ExperimentConfig) -> Result<Splits<f64>> {
    in_stage("dataset", generate_dataset(&cfg.dataset))
}

/// Loads the configured teacher checkpoint or trains one under `dir/teacher`.
fn obtain_teacher(cfg: &ExperimentConfig, data: &Splits<f64>, dir: &Path) -> Result<(VitModel<f64>, TeacherSummary)> {
    let (model, source) = if let Some(path) = &cfg.teacher_checkpoint {
        (load_checkpoint::<f64>(path, Some(&cfg.teacher))?, path.display().to_string())
    } else {
        let tdir = dir.join("teacher");
        let steps = cfg.teacher_schedule.steps;
        let mut sink = sink_for(&tdir, steps)?;
        let init = VitModel::init(&cfg.teacher)?;
        let out = train_supervised(init, &data.train, &data.eval, &cfg.teacher_schedule, sink.as_mut())?;
        let source = if steps > 0 {
            let ckpt = tdir.join(CHECKPOINT_FILE);
            save_checkpoint(&out.model, &ckpt)?;
            ckpt.display().to_string()
        } else {
            "untrained".to_string()
        };
        (out.model, source)
    };
    let summary = TeacherSummary {
        source,
        checksum: model.checksum(),
        train_acc: evaluate(&model, &data.train, EVAL_CHUNK)?,
        eval_acc: evaluate(&model, &data.eval, EVAL_CHUNK)?,
    };
    Ok((model, summary))
}

/// Trains only the teacher into its own run directory.
pub fn train_teacher(cfg: &ExperimentConfig) -> Result<TeacherSummary> {
    cfg.validate()?;
    if cfg.teacher_checkpoint.is_some() {
        return Err(Error::Config("train-teacher needs teacher_checkpoint unset".into()));
    }
    let dir = prepare_run_dir(cfg)?;
    let data = load_data(cfg)?;
    let (_, summary) = in_stage("teacher", obtain_teacher(cfg, &data, &dir))?;
    write_json(&dir.join("teacher").join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_student(
    name: &str,
    dcfg: &DistillConfig,
    cfg: &ExperimentConfig,
    teacher: &VitModel<f64>,
    data: &Splits<f64>,
    dir: &Path,
) -> Result<(TrainOutcome<f64>, StudentSummary)> {
    let sdir = dir.join("students").join(name);
    let mut sink = sink_for(&sdir, dcfg.schedule.steps)?;
    let student = VitModel::init(&cfg.seeded_student())?;
    let transfer = match cfg.transfer_samples {
        0 => data.train.clone(),
        n => data.train.head(n),
    };
    let out = distill(teacher, student, &transfer, &data.eval, dcfg, sink.as_mut())?;
    if dcfg.schedule.steps > 0 {
        save_checkpoint(&out.model, &sdir.join(CHECKPOINT_FILE))?;
    }
    let pairing = dcfg.layers.resolve(cfg.teacher.num_layers, cfg.student.num_layers)?;
    let summary = StudentSummary {
        name: name.to_string(),
        lambda: dcfg.lambda.unwrap_or(f64::NAN),
        alpha: dcfg.alpha,
        beta: dcfg.beta,
        gamma: dcfg.gamma,
        layers: pairing.pairs,
        final_eval_acc: out.final_eval_acc,
        curve: out.history.iter().map(CurvePoint::from).collect(),
    };
    Ok((out, summary))
}

fn without_manifold(d: &DistillConfig, lambda: f64) -> DistillConfig {
    DistillConfig { lambda: Some(lambda), alpha: 0.0, beta: 0.0, gamma: 0.0, ..d.clone() }
}

/// Teacher, then three students sharing init and data order: hard labels only
/// (`none`), logit distillation (`kd`), and logit + manifold distillation (`manifold`).
///
/// With `lambda` unset, the soft/hard balance is chosen by comparing the
/// teacher's eval accuracy with the `none` student's.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    in_stage("config", cfg.validate())?;
    let dir = in_stage("setup", prepare_run_dir(cfg))?;
    let data = load_data(cfg)?;
    let (teacher, tsum) = in_stage("teacher", obtain_teacher(cfg, &data, &dir))?;

    let base = cfg.seeded_distill();
    let (none, none_sum) =
        in_stage("student:none", run_student("none", &without_manifold(&base, 0.0), cfg, &teacher, &data, &dir))?;
    let lambda = resolve_lambda(tsum.eval_acc, none.final_eval_acc, base.lambda);
    let (_, kd_sum) =
        in_stage("student:kd", run_student("kd", &without_manifold(&base, lambda), cfg, &teacher, &data, &dir))?;
    let mcfg = DistillConfig { lambda: Some(lambda), ..base };
    let (_, mf_sum) = in_stage("student:manifold", run_student("manifold", &mcfg, cfg, &teacher, &data, &dir))?;

    let summary = RunSummary {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        teacher: tsum,
        students: vec![none_sum, kd_sum, mf_sum],
    };
    in_stage("summary", write_json(&dir.join(SUMMARY_FILE), &summary))?;
    Ok(summary)
}

/// Accuracy of a checkpoint on the config's eval split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<f64> {
    let data = load_data(cfg)?;
    let ckpt_cfg = load_checkpoint::<f64>(path, None)?;
    evaluate(&ckpt_cfg, &data.eval, EVAL_CHUNK)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Every on/off combination of the intra, inter and random terms.
    Ablation,
    /// Every layer-selection scheme at the configured pair count.
    Layers,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "layers" => Ok(Self::Layers),
            other => Err(Error::Config(format!("unknown sweep kind {other:?} (ablation | layers)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub rank: usize,
    pub final_eval_acc: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub layers: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: SweepKind,
    pub run_id: String,
    pub teacher: TeacherSummary,
    /// Sorted best first; ties keep grid order.
    pub ranked: Vec<SweepEntry>,
}

/// The sub-run grid of a sweep, in a fixed order.
pub fn sweep_grid(kind: SweepKind, base: &DistillConfig) -> Vec<(String, DistillConfig)> {
    match kind {
        SweepKind::Ablation => (0..8u8)
            .map(|mask| {
                let on = |bit: u8| mask & (1 << bit) != 0;
                let names: Vec<&str> = [(0, "intra"), (1, "inter"), (2, "random")]
                    .iter()
                    .filter(|(b, _)| on(*b))
                    .map(|(_, n)| *n)
                    .collect();
                let name = if names.is_empty() { "none".to_string() } else { names.join("+") };
                let cfg = DistillConfig {
                    alpha: if on(0) { base.alpha } else { 0.0 },
                    beta: if on(1) { base.beta } else { 0.0 },
                    gamma: if on(2) { base.gamma } else { 0.0 },
                    ..base.clone()
                };
                (name, cfg)
            })
            .collect(),
        SweepKind::Layers => {
            let count = match &base.layers {
                LayerSelection::Scheme { count, .. } => *count,
                LayerSelection::Explicit { pairs } => pairs.len(),
            };
            LayerScheme::ALL
                .iter()
                .map(|&scheme| {
                    let cfg = DistillConfig { layers: LayerSelection::Scheme { scheme, count }, ..base.clone() };
                    (scheme.name().to_string(), cfg)
                })
                .collect()
        }
    }
}

/// Runs every grid point against one shared teacher and ranks them.
pub fn sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<SweepSummary> {
    in_stage("config", cfg.validate())?;
    let dir = in_stage("setup", prepare_run_dir(cfg))?;
    let data = load_data(cfg)?;
    let (teacher, tsum) = in_stage("teacher", obtain_teacher(cfg, &data, &dir))?;
    let base = cfg.seeded_distill();
    let lambda = base.lambda.unwrap_or(1.0);
    let mut entries = Vec::new();
    for (name, mut dcfg) in sweep_grid(kind, &base) {
        dcfg.lambda = Some(lambda);
        let stage = format!("sweep:{name}");
        let (_, s) = in_stage(&stage, run_student(&name, &dcfg, cfg, &teacher, &data, &dir))?;
        entries.push(SweepEntry {
            name,
            rank: 0,
            final_eval_acc: s.final_eval_acc,
            alpha: s.alpha,
            beta: s.beta,
            gamma: s.gamma,
            layers: s.layers,
        });
    }
    entries.sort_by(|a, b| b.final_eval_acc.total_cmp(&a.final_eval_acc));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    let summary = SweepSummary { kind, run_id: cfg.run_id.clone(), teacher: tsum, ranked: entries };
    in_stage("summary", write_json(&dir.join(SUMMARY_FILE), &summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_step_config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.output_dir = dir.to_path_buf();
        c.teacher_schedule.steps = 0;
        c.distill.schedule.steps = 0;
        c.dataset.train_samples = 16;
        c.dataset.eval_samples = 16;
        c.transfer_samples = 0;
        c
    }

    #[test]
    fn zero_steps_echo_config_without_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = zero_step_config(tmp.path());
        let summary = run_experiment(&cfg).unwrap();
        let dir = cfg.run_dir();
        let echoed: ExperimentConfig = toml::from_str(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
        assert_eq!(echoed, cfg);
        assert_eq!(summary.students.len(), 3);
        assert!(!dir.join("teacher").exists());
        assert!(!dir.join("students").exists());
        assert_eq!(read_summary(&dir).unwrap(), summary);
        // run ids may not be reused
        assert!(matches!(run_experiment(&cfg), Err(Error::Stage { .. })));
    }

    #[test]
    fn grids_have_the_expected_shape() {
        let base = DistillConfig::default();
        let ab = sweep_grid(SweepKind::Ablation, &base);
        assert_eq!(ab.len(), 8);
        assert_eq!(ab[0].0, "none");
        assert_eq!(ab[7].0, "intra+inter+random");
        assert_eq!((ab[2].1.alpha, ab[2].1.beta, ab[2].1.gamma), (0.0, 0.1, 0.0));
        let layers = sweep_grid(SweepKind::Layers, &base);
        assert_eq!(layers.len(), 5);
    }

    #[test]
    fn failures_name_their_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = zero_step_config(tmp.path());
        cfg.teacher_checkpoint = Some(tmp.path().join("missing.json"));
        match run_experiment(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "teacher"),
            other => panic!("{other:?}"),
        }
        assert!(cfg.run_dir().join("config.toml").exists(), "partial outputs are kept");
    }
}
