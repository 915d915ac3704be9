//! Property suites run by `verify`. Each property reports the measured error
//! next to its tolerance.
//!
//! The loss implementations under test are injectable ([`LossImpls`]) so the
//! suites themselves can be mutation-tested.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audit::{decoupled_cost, decoupled_is_cheaper, full_map_cost};
use crate::autodiff::{grad_check, Graph};
use crate::error::{Error, Result};
use crate::losses::{self, SampleIndices};
use crate::objective::{kd_loss, kd_loss_value, total_loss, DistillConfig, LayerSelection, Objective, TeacherTargets};
use crate::tensor::Tensor;
use crate::vit::{TapSet, VitConfig, VitModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Oracle,
    Gradients,
    Invariants,
    Costs,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Oracle, Suite::Gradients, Suite::Invariants, Suite::Costs];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Gradients => "gradients",
            Suite::Invariants => "invariants",
            Suite::Costs => "costs",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?} (oracle | gradients | invariants | costs)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub suite: Suite,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<10} {:<40} measured {:>12.3e}  tol {:>9.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    fn check(&mut self, suite: Suite, name: &str, measured: f64, tolerance: f64) {
        // NaN measurements fail
        let passed = measured <= tolerance;
        self.results.push(PropertyResult { suite, name: name.into(), measured, tolerance, passed });
    }
}

pub type PairLoss = fn(&Tensor<f64>, &Tensor<f64>) -> Result<f64>;
pub type SampledLoss = fn(&Tensor<f64>, &Tensor<f64>, &SampleIndices) -> Result<f64>;

/// The loss implementations exercised by the suites.
#[derive(Clone, Copy)]
pub struct LossImpls {
    pub full: PairLoss,
    pub intra: PairLoss,
    pub inter: PairLoss,
    pub random: SampledLoss,
}

impl Default for LossImpls {
    fn default() -> Self {
        Self {
            full: losses::full_manifold_loss_value,
            intra: losses::intra_loss_value,
            inter: losses::inter_loss_value,
            random: losses::random_loss_value,
        }
    }
}

pub const ORACLE_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;
pub const ORACLE_CASES: usize = 100;

pub fn verify(suites: &[Suite], seed: u64) -> Result<VerifyReport> {
    verify_with(suites, seed, &LossImpls::default())
}

pub fn verify_with(suites: &[Suite], seed: u64, impls: &LossImpls) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for &s in suites {
        match s {
            Suite::Oracle => oracle_suite(&mut report, seed, impls)?,
            Suite::Gradients => gradient_suite(&mut report, seed)?,
            Suite::Invariants => invariant_suite(&mut report, seed, impls)?,
            Suite::Costs => cost_suite(&mut report)?,
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Cosine-similarity matrix of the rows of `x: (R, D)`, written out directly.
fn cosine_matrix(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::tensor::NORM_EPS);
    rows.iter()
        .map(|a| {
            rows.iter()
                .map(|b| a.iter().zip(*b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b)))
                .collect()
        })
        .collect()
}

fn rows_of(f: &Tensor<f64>) -> Vec<&[f64]> {
    f.data().chunks(f.last_dim()).collect()
}

fn frob_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sub_matrix(m: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| idx.iter().map(|&j| m[i][j]).collect()).collect()
}

fn oracle_suite(report: &mut VerifyReport, seed: u64, impls: &LossImpls) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut full_map, mut intra_map, mut inter_map) = (0.0f64, 0.0f64, 0.0f64);
    let (mut full_loss, mut intra_loss, mut inter_loss, mut random_loss) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..ORACLE_CASES {
        let b = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=16);
        let fs = randn(&[b, n, d], &mut rng);
        let ft = randn(&[b, n, d], &mut rng);
        let ms = cosine_matrix(&rows_of(&fs));
        let mt = cosine_matrix(&rows_of(&ft));

        let lib = losses::full_map(&fs)?;
        for i in 0..b * n {
            for j in 0..b * n {
                full_map = full_map.max((lib.at(i, j) - ms[i][j]).abs());
            }
        }
        let intra = losses::intra_maps(&fs)?;
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let got = intra.data()[(bi * n + i) * n + j];
                    intra_map = intra_map.max((got - ms[bi * n + i][bi * n + j]).abs());
                }
            }
        }
        let inter = losses::inter_maps(&fs)?;
        for p in 0..n {
            for i in 0..b {
                for j in 0..b {
                    let got = inter.data()[(p * b + i) * b + j];
                    inter_map = inter_map.max((got - ms[i * n + p][j * n + p]).abs());
                }
            }
        }

        let want_full = frob_gap(&ms, &mt);
        let block = |idx: Vec<usize>| frob_gap(&sub_matrix(&ms, &idx), &sub_matrix(&mt, &idx));
        let want_intra = (0..b).map(|bi| block((0..n).map(|i| bi * n + i).collect())).sum::<f64>() / b as f64;
        let want_inter = (0..n).map(|p| block((0..b).map(|i| i * n + p).collect())).sum::<f64>() / n as f64;
        full_loss = full_loss.max(((impls.full)(&fs, &ft)? - want_full).abs());
        intra_loss = intra_loss.max(((impls.intra)(&fs, &ft)? - want_intra).abs());
        inter_loss = inter_loss.max(((impls.inter)(&fs, &ft)? - want_inter).abs());
        let all = SampleIndices::exhaustive(b * n);
        random_loss = random_loss.max(((impls.random)(&fs, &ft, &all)? - want_full).abs());
    }
    let s = Suite::Oracle;
    report.check(s, "full-map-equals-cosine-similarity", full_map, ORACLE_TOL);
    report.check(s, "intra-maps-are-diagonal-blocks", intra_map, ORACLE_TOL);
    report.check(s, "inter-maps-are-stride-n-minors", inter_map, ORACLE_TOL);
    report.check(s, "full-loss-matches-oracle", full_loss, ORACLE_TOL);
    report.check(s, "intra-loss-block-equivalence", intra_loss, ORACLE_TOL);
    report.check(s, "inter-loss-block-equivalence", inter_loss, ORACLE_TOL);
    report.check(s, "random-exhaustive-equals-full", random_loss, ORACLE_TOL);
    Ok(())
}

fn tiny_vit(layers: usize, d: usize, seed: u64) -> VitConfig {
    VitConfig {
        image_size: (4, 4),
        channels: 1,
        patch_size: 2,
        embed_dim: d,
        num_heads: 2,
        num_layers: layers,
        num_classes: 3,
        use_class_token: true,
        seed,
    }
}

fn gradient_suite(report: &mut VerifyReport, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67);
    let s = Suite::Gradients;
    let (b, n, d) = (3, 4, 5);
    let fs = randn(&[b, n, d], &mut rng);
    let ft = randn(&[b, n, 7], &mut rng);
    let idx = losses::sample_indices(b, n, 6, seed)?;
    let h = GRAD_STEP;

    let r = grad_check(|g, x| { let t = g.constant(ft.clone()); losses::intra_loss(g, x, t) }, &fs, h)?;
    report.check(s, "intra-loss-gradient", r.max_rel_error, GRAD_TOL);
    let r = grad_check(|g, x| { let t = g.constant(ft.clone()); losses::inter_loss(g, x, t) }, &fs, h)?;
    report.check(s, "inter-loss-gradient", r.max_rel_error, GRAD_TOL);
    let r = grad_check(|g, x| { let t = g.constant(ft.clone()); losses::random_loss(g, x, t, &idx) }, &fs, h)?;
    report.check(s, "random-loss-gradient", r.max_rel_error, GRAD_TOL);

    let zs = randn(&[4, 5], &mut rng);
    let zt = randn(&[4, 5], &mut rng);
    let labels = [0, 3, 1, 4];
    let r = grad_check(|g, x| kd_loss(g, x, &zt, &labels, 0.7, 2.0).map(|k| k.total), &zs, h)?;
    report.check(s, "kd-loss-gradient", r.max_rel_error, GRAD_TOL);

    // Composite objective through a tiny student, with respect to its input
    // and to one weight matrix.
    let tcfg = tiny_vit(2, 8, seed);
    let scfg = tiny_vit(2, 4, seed + 1);
    let teacher = VitModel::<f64>::init(&tcfg)?;
    let student = VitModel::<f64>::init(&scfg)?;
    let dcfg = DistillConfig {
        lambda: Some(0.5),
        tau: 2.0,
        k: 5,
        layers: LayerSelection::Explicit { pairs: vec![(1, 1), (2, 2)] },
        ..DistillConfig::default()
    };
    let obj = Objective::new(&dcfg, &tcfg, &scfg)?;
    let images = randn(&[2, 4, 4, 1], &mut rng);
    let labels = [2, 0];
    let tout = teacher.forward_with_taps(&images, &obj.teacher_taps(2)?)?;
    let targets = TeacherTargets { logits: tout.logits, taps: tout.taps };
    let staps: TapSet = obj.student_taps(2)?;
    let objective = |g: &mut Graph<f64>, vars: &[crate::autodiff::Var], x| {
        let fwd = student.forward_graph(g, vars, x, &staps)?;
        Ok(total_loss(g, &obj, &fwd, &targets, &labels, seed, 1)?.total)
    };
    let r = grad_check(
        |g, x| {
            let vars = student.bind(g, false);
            objective(g, &vars, x)
        },
        &images,
        h,
    )?;
    report.check(s, "total-loss-gradient-input", r.max_rel_error, GRAD_TOL);
    let wi = student.names().iter().position(|n| n == "blocks.0.mlp.fc1.weight").expect("layout");
    let r = grad_check(
        |g, w| {
            let mut vars = student.bind(g, false);
            vars[wi] = w;
            let x = g.constant(images.clone());
            objective(g, &vars, x)
        },
        &student.params()[wi],
        h,
    )?;
    report.check(s, "total-loss-gradient-weight", r.max_rel_error, GRAD_TOL);
    Ok(())
}

/// Orthogonal `d × d` matrix from Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_fn([d, d], |k| cols[k % d][k / d])
}

/// `F · Q` for `F: (B, N, D)`, `Q: (D, D)`.
pub fn right_multiply(f: &Tensor<f64>, q: &Tensor<f64>) -> Tensor<f64> {
    let d = f.last_dim();
    let mut out = vec![0.0; f.numel()];
    for (row, o) in f.data().chunks(d).zip(out.chunks_mut(d)) {
        for (k, &r) in row.iter().enumerate() {
            for (j, ov) in o.iter_mut().enumerate() {
                *ov += r * q.data()[k * d + j];
            }
        }
    }
    Tensor::new(f.shape().to_vec(), out).expect("same shape")
}

fn invariant_suite(report: &mut VerifyReport, seed: u64, impls: &LossImpls) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1f);
    let s = Suite::Invariants;
    let (mut asym, mut diag, mut neg, mut self_gap, mut orth) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let (b, n, d) = (rng.gen_range(1..=5), rng.gen_range(1..=6), rng.gen_range(1..=8));
        let fs = randn(&[b, n, d], &mut rng);
        let ft = randn(&[b, n, d + 2], &mut rng);
        let m = losses::full_map(&fs)?;
        for i in 0..m.size() {
            diag = diag.max((m.at(i, i) - 1.0).abs());
            for j in 0..m.size() {
                asym = asym.max((m.at(i, j) - m.at(j, i)).abs());
            }
        }
        let idx = losses::sample_indices(b, n, (b * n).min(7), 3)?;
        let vals = [
            (impls.full)(&fs, &ft)?,
            (impls.intra)(&fs, &ft)?,
            (impls.inter)(&fs, &ft)?,
            (impls.random)(&fs, &ft, &idx)?,
        ];
        neg = neg.max(vals.iter().fold(0.0f64, |a, &v| a.max(-v)));
        let same = [
            (impls.full)(&fs, &fs)?,
            (impls.intra)(&fs, &fs)?,
            (impls.inter)(&fs, &fs)?,
            (impls.random)(&fs, &fs, &idx)?,
        ];
        self_gap = self_gap.max(same.iter().fold(0.0f64, |a, &v| a.max(v.abs())));
        let qs = random_orthogonal(d, &mut rng);
        let qt = random_orthogonal(d + 2, &mut rng);
        let (rs, rt) = (right_multiply(&fs, &qs), right_multiply(&ft, &qt));
        let rotated = [
            (impls.full)(&rs, &rt)?,
            (impls.intra)(&rs, &rt)?,
            (impls.inter)(&rs, &rt)?,
            (impls.random)(&rs, &rt, &idx)?,
        ];
        for (a, r) in vals.iter().zip(rotated) {
            orth = orth.max((a - r).abs());
        }
    }
    report.check(s, "relation-map-symmetric", asym, 0.0);
    report.check(s, "relation-map-unit-diagonal", diag, 1e-12);
    report.check(s, "losses-non-negative", neg, 0.0);
    report.check(s, "losses-zero-at-equal-features", self_gap, 1e-12);
    report.check(s, "right-orthogonal-invariance", orth, ORACLE_TOL);

    let (mut shift, mut label) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (b, c) = (rng.gen_range(1..=6), rng.gen_range(2..=7));
        let zs = randn(&[b, c], &mut rng);
        let zt = randn(&[b, c], &mut rng);
        let la: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let lb: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let lambda = rng.gen_range(0.0..=1.0);
        let tau = rng.gen_range(0.5..4.0);
        let offset = |z: &Tensor<f64>, rng: &mut ChaCha8Rng| {
            let shifts: Vec<f64> = (0..b).map(|_| rng.gen_range(-20.0..20.0)).collect();
            Tensor::from_fn([b, c], |k| z.data()[k] + shifts[k / c])
        };
        let base = kd_loss_value(&zs, &zt, &la, lambda, tau)?;
        let moved = kd_loss_value(&offset(&zs, &mut rng), &offset(&zt, &mut rng), &la, lambda, tau)?;
        shift = shift.max((base - moved).abs());
        let a = kd_loss_value(&zs, &zt, &la, 1.0, tau)?;
        let bb = kd_loss_value(&zs, &zt, &lb, 1.0, tau)?;
        label = label.max((a - bb).abs());
    }
    report.check(s, "kd-softmax-shift-invariance", shift, ORACLE_TOL);
    report.check(s, "kd-lambda-one-label-independence", label, 0.0);
    Ok(())
}

fn cost_suite(report: &mut VerifyReport) -> Result<()> {
    let s = Suite::Costs;
    let full = full_map_cost(128, 196, 192, 4)?;
    let dec = decoupled_cost(128, 196, 192, 192, 4)?;
    let exact = |got: u128, want: u128| (got as f64 - want as f64).abs();
    report.check(s, "full-flops-exact", exact(full.flops, 241_692_573_696), 0.0);
    report.check(s, "full-memory-exact", exact(full.peak_map_memory_bytes, 2_517_630_976), 0.0);
    report.check(s, "decoupled-flops-exact", exact(dec.flops, 3_135_504_384), 0.0);
    report.check(s, "decoupled-memory-exact", exact(dec.peak_map_memory_bytes, 32_661_504), 0.0);
    // Rounded headline figures: ">240 GFLOPs", "2.5 GB", "3 GFLOPs", "32 MB".
    report.check(s, "full-above-240-gflops", (240.0 - full.gflops()).max(0.0), 0.0);
    report.check(s, "full-memory-rounds-to-2.5-gb", (full.gigabytes() - 2.5).abs(), 0.05);
    report.check(s, "decoupled-rounds-to-3-gflops", (dec.gflops() - 3.0).abs(), 0.5);
    report.check(s, "decoupled-memory-near-32-mb", (dec.megabytes() - 32.0).abs(), 1.0);
    let ratio = full.flops as f64 / dec.flops as f64;
    report.check(s, "flop-ratio-about-two-orders", (ratio.log10() - 2.0).abs(), 0.5);

    let mut violations = 0.0;
    for b in [2u64, 3, 4, 8, 16, 32, 128] {
        for n in [2u64, 3, 5, 16, 49, 196] {
            for d in [1u64, 8, 192] {
                for k in [0u64, 1, 4, 16, 64, 192] {
                    if k > b * n {
                        continue;
                    }
                    let cheaper = decoupled_cost(b, n, d, k, 4)?.flops < full_map_cost(b, n, d, 4)?.flops;
                    if cheaper != decoupled_is_cheaper(b, n, k) {
                        violations += 1.0;
                    }
                }
            }
        }
    }
    report.check(s, "decoupled-cheaper-condition", violations, 0.0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suites_pass() {
        let r = verify(&[Suite::Oracle, Suite::Invariants, Suite::Costs], 0).unwrap();
        for p in &r.results {
            assert!(p.passed, "{p}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let r = verify(&[Suite::Gradients], 0).unwrap();
        assert_eq!(r.results.len(), 6);
        for p in &r.results {
            assert!(p.passed, "{p}");
        }
    }

    fn flipped_inter(fs: &Tensor<f64>, ft: &Tensor<f64>) -> Result<f64> {
        losses::inter_loss_value(fs, ft).map(|v| -v)
    }

    #[test]
    fn sign_flip_in_inter_loss_is_caught() {
        let impls = LossImpls { inter: flipped_inter, ..LossImpls::default() };
        let r = verify_with(&[Suite::Oracle], 0, &impls).unwrap();
        let failed: Vec<&str> = r.failures().map(|p| p.name.as_str()).collect();
        assert_eq!(failed, vec!["inter-loss-block-equivalence"]);
    }

    #[test]
    fn orthogonal_helper_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthogonal(5, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..5).map(|k| q.data()[k * 5 + i] * q.data()[k * 5 + j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
