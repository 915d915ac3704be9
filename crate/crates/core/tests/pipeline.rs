//! End-to-end runs on a deliberately tiny configuration.

use manifold_kd::harness::{self, read_metrics, ExperimentConfig, SweepKind, METRICS_FILE};
use manifold_kd::Error;

fn tiny(dir: &std::path::Path, run_id: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = dir.to_path_buf();
    c.run_id = run_id.into();
    c.dataset.train_samples = 64;
    c.dataset.eval_samples = 32;
    c.transfer_samples = 48;
    c.teacher.embed_dim = 16;
    c.teacher.num_heads = 2;
    c.teacher.num_layers = 2;
    c.student.embed_dim = 8;
    c.student.num_heads = 1;
    c.student.num_layers = 2;
    c.teacher_schedule.steps = 6;
    c.teacher_schedule.batch_size = 16;
    c.teacher_schedule.log_interval = 2;
    c.teacher_schedule.eval_interval = 3;
    c.distill.k = 24;
    c.distill.schedule = c.teacher_schedule.clone();
    c
}

#[test]
fn experiment_writes_a_self_describing_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "a");
    let summary = harness::run_experiment(&cfg).unwrap();
    let dir = cfg.run_dir();
    for rel in [
        "config.toml",
        "summary.json",
        "teacher/checkpoint.json",
        "teacher/metrics.jsonl",
        "students/none/checkpoint.json",
        "students/kd/metrics.jsonl",
        "students/manifold/timings.jsonl",
    ] {
        assert!(dir.join(rel).exists(), "missing {rel}");
    }
    let mf = read_metrics(&dir.join("students/manifold").join(METRICS_FILE)).unwrap();
    assert_eq!(mf.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 3, 4, 6]);
    assert!(mf.iter().all(|r| r.intra > 0.0 && r.inter > 0.0 && r.random > 0.0));
    let none = read_metrics(&dir.join("students/none").join(METRICS_FILE)).unwrap();
    assert!(none.iter().all(|r| r.manifold == 0.0 && r.kl >= 0.0));
    assert_eq!(summary.student("manifold").unwrap().curve.len(), mf.len());

    // Re-running the stored config elsewhere reproduces every metrics file.
    let stored = ExperimentConfig::load(&dir.join("config.toml")).unwrap();
    let again = ExperimentConfig { run_id: "b".into(), ..stored };
    harness::run_experiment(&again).unwrap();
    for sub in ["teacher", "students/none", "students/kd", "students/manifold"] {
        let x = std::fs::read(dir.join(sub).join(METRICS_FILE)).unwrap();
        let y = std::fs::read(again.run_dir().join(sub).join(METRICS_FILE)).unwrap();
        assert_eq!(x, y, "{sub}");
    }

    // A stored teacher is reused as-is.
    let reuse = ExperimentConfig {
        run_id: "c".into(),
        teacher_checkpoint: Some(dir.join("teacher/checkpoint.json")),
        ..cfg.clone()
    };
    let s = harness::run_experiment(&reuse).unwrap();
    assert_eq!(s.teacher.checksum, summary.teacher.checksum);
    assert!(!reuse.run_dir().join("teacher").exists());
    let acc = harness::evaluate_checkpoint(&cfg, &dir.join("students/kd/checkpoint.json")).unwrap();
    assert_eq!(acc, summary.student("kd").unwrap().final_eval_acc);
}

#[test]
fn sweeps_rank_every_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "ablation");
    cfg.distill.schedule.steps = 2;
    let s = harness::sweep(&cfg, SweepKind::Ablation).unwrap();
    assert_eq!(s.ranked.len(), 8);
    assert_eq!(s.ranked.iter().map(|e| e.rank).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    assert!(s.ranked.windows(2).all(|w| w[0].final_eval_acc >= w[1].final_eval_acc));

    let mut cfg = tiny(tmp.path(), "layers");
    cfg.distill.schedule.steps = 2;
    let s = harness::sweep(&cfg, SweepKind::Layers).unwrap();
    let mut names: Vec<&str> = s.ranked.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    assert_eq!(names, ["deep", "shallow", "shallow_deep", "shallow_medium_deep", "uniform"]);
}

#[test]
fn overflowing_inter_weight_aborts_with_the_term_named() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "nan");
    cfg.distill.alpha = 0.0;
    cfg.distill.gamma = 0.0;
    cfg.distill.beta = 1e308;
    cfg.distill.schedule.optim.lr = 1.0;
    let err = harness::run_experiment(&cfg).unwrap_err();
    let Error::Stage { stage, source } = &err else { panic!("{err:?}") };
    assert_eq!(stage, "student:manifold");
    assert!(matches!(**source, Error::Numeric(_)));
    assert!(err.to_string().contains("weighted inter"), "{err}");
    let path = cfg.run_dir().join("students/manifold").join(METRICS_FILE);
    assert!(read_metrics(&path).unwrap().is_empty(), "nothing past the failure is recorded");
}
