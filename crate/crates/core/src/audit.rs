//! Analytical FLOP / memory accounting for relation-map losses, plus
//! wall-clock micro-benchmarks of the implemented losses.
//!
//! A multiply-add counts as two FLOPs. Memory covers relation-map storage
//! only, not features or gradient buffers.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{self, DEFAULT_ORACLE_CAP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Problem sizes a cost is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub batch: u64,
    pub patches: u64,
    pub dim: u64,
    /// Sampled rows of the random term; absent for the full map.
    pub k: Option<u64>,
    pub bytes_per_elem: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u128,
    pub peak_map_memory_bytes: u128,
    pub params: CostParams,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// Decimal megabytes.
    pub fn megabytes(&self) -> f64 {
        self.peak_map_memory_bytes as f64 / 1e6
    }

    pub fn gigabytes(&self) -> f64 {
        self.peak_map_memory_bytes as f64 / 1e9
    }
}

struct Checked(u128);

impl Checked {
    fn mul(self, x: u64) -> Result<Self> {
        self.0
            .checked_mul(x as u128)
            .map(Checked)
            .ok_or_else(|| Error::Range("cost exceeds the 128-bit count range".into()))
    }

    fn add(self, other: Checked) -> Result<Self> {
        self.0
            .checked_add(other.0)
            .map(Checked)
            .ok_or_else(|| Error::Range("cost exceeds the 128-bit count range".into()))
    }
}

fn product(factors: &[u64]) -> Result<Checked> {
    factors.iter().try_fold(Checked(1), |acc, &f| acc.mul(f))
}

fn positive(name: &str, v: u64) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

/// Cost of the single `(B·N × B·N)` relation map: `2·B²N²D` FLOPs, `B²N²` elements.
pub fn full_map_cost(b: u64, n: u64, d: u64, bytes: u64) -> Result<CostReport> {
    for (name, v) in [("B", b), ("N", n), ("D", d), ("bytes", bytes)] {
        positive(name, v)?;
    }
    let flops = product(&[2, b, b, n, n, d])?.0;
    let mem = product(&[b, b, n, n, bytes])?.0;
    Ok(CostReport {
        flops,
        peak_map_memory_bytes: mem,
        params: CostParams { batch: b, patches: n, dim: d, k: None, bytes_per_elem: bytes },
    })
}

/// Cost of the intra + inter + random maps:
/// `2·(BN²D + B²ND + K²D)` FLOPs, `BN² + NB² + K²` elements. `K = 0` drops the random term.
pub fn decoupled_cost(b: u64, n: u64, d: u64, k: u64, bytes: u64) -> Result<CostReport> {
    for (name, v) in [("B", b), ("N", n), ("D", d), ("bytes", bytes)] {
        positive(name, v)?;
    }
    let macs = product(&[b, n, n, d])?
        .add(product(&[b, b, n, d])?)?
        .add(product(&[k, k, d])?)?;
    let elems = product(&[b, n, n])?.add(product(&[n, b, b])?)?.add(product(&[k, k])?)?;
    Ok(CostReport {
        flops: macs.mul(2)?.0,
        peak_map_memory_bytes: elems.mul(bytes)?.0,
        params: CostParams { batch: b, patches: n, dim: d, k: Some(k), bytes_per_elem: bytes },
    })
}

/// Whether the closed-form condition for the decoupled maps being cheaper holds:
/// `B·N > B + N + K²/(B·N)`.
pub fn decoupled_is_cheaper(b: u64, n: u64, k: u64) -> bool {
    let bn = (b * n) as f64;
    bn > b as f64 + n as f64 + (k * k) as f64 / bn
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub loss: String,
    pub median_seconds: f64,
    pub flops: u128,
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub patches: usize,
    pub dim: usize,
    pub k: usize,
    pub scalar: String,
    pub rows: Vec<BenchRow>,
    /// Set when the full-map column was dropped.
    pub notice: Option<String>,
}

impl BenchReport {
    pub fn row(&self, loss: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.loss == loss)
    }
}

fn median(mut xs: Vec<Duration>) -> f64 {
    xs.sort();
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m].as_secs_f64()
    } else {
        (xs[m - 1].as_secs_f64() + xs[m].as_secs_f64()) / 2.0
    }
}

fn time_loss<T: Scalar>(
    fs: &Tensor<T>,
    ft: &Tensor<T>,
    reps: usize,
    f: impl Fn(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let mut g = Graph::new();
        let s = g.leaf(fs.clone());
        let t = g.constant(ft.clone());
        let loss = f(&mut g, s, t)?;
        g.backward(loss)?;
        times.push(start.elapsed());
    }
    Ok(median(times))
}

/// Median forward+backward wall-clock of each loss on random features.
///
/// The full-map column is dropped, with a notice, when `B·N` exceeds the
/// oracle cap. For `B·N ≥ 1024` the decoupled loss must beat the full one.
pub fn bench_losses<T: Scalar>(
    b: usize,
    n: usize,
    d: usize,
    k: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if b == 0 || n == 0 || d == 0 || k == 0 || reps == 0 {
        return Err(Error::Config("bench sizes and repetitions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feat = || {
        Tensor::from_fn([b, n, d], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z)
        })
    };
    let (fs, ft) = (feat(), feat());
    let indices = losses::sample_indices(b, n, k, seed)?;
    let (bu, nu, du, ku) = (b as u64, n as u64, d as u64, k as u64);
    let elem = std::mem::size_of::<T>() as u64;

    let mut rows = Vec::new();
    let mut notice = None;
    let full_secs = if b * n <= DEFAULT_ORACLE_CAP {
        let secs = time_loss(&fs, &ft, reps, losses::full_manifold_loss)?;
        rows.push(BenchRow {
            loss: "full".into(),
            median_seconds: secs,
            flops: full_map_cost(bu, nu, du, elem)?.flops,
            repetitions: reps,
        });
        Some(secs)
    } else {
        notice = Some(format!(
            "full map over {} rows exceeds the oracle cap of {DEFAULT_ORACLE_CAP}; column dropped",
            b * n
        ));
        None
    };

    let one = |k: u64| -> Result<u128> { decoupled_cost(bu, nu, du, k, elem).map(|c| c.flops) };
    let intra_flops = 2 * (bu * nu * nu * du) as u128;
    let inter_flops = 2 * (bu * bu * nu * du) as u128;
    let random_flops = 2 * (ku * ku * du) as u128;
    let mut push = |name: &str, secs: f64, flops: u128| {
        rows.push(BenchRow { loss: name.into(), median_seconds: secs, flops, repetitions: reps });
    };
    push("intra", time_loss(&fs, &ft, reps, losses::intra_loss)?, intra_flops);
    push("inter", time_loss(&fs, &ft, reps, losses::inter_loss)?, inter_flops);
    push(
        "random",
        time_loss(&fs, &ft, reps, |g, s, t| losses::random_loss(g, s, t, &indices))?,
        random_flops,
    );
    let weights = losses::LossWeights::default();
    let dec_secs = time_loss(&fs, &ft, reps, |g, s, t| {
        losses::decoupled_loss(g, s, t, &weights, &indices).map(|t| t.total)
    })?;
    push("decoupled", dec_secs, one(ku)?);

    if let Some(full) = full_secs {
        if b * n >= 1024 && dec_secs >= full {
            return Err(Error::Contract(format!(
                "decoupled loss ({dec_secs:.6}s) not faster than full ({full:.6}s) at B·N = {}",
                b * n
            )));
        }
    }
    Ok(BenchReport { batch: b, patches: n, dim: d, k, scalar: T::NAME.into(), rows, notice })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_setting() {
        let full = full_map_cost(128, 196, 192, 4).unwrap();
        assert_eq!(full.flops, 241_692_573_696);
        assert_eq!(full.peak_map_memory_bytes, 2_517_630_976);
        let dec = decoupled_cost(128, 196, 192, 192, 4).unwrap();
        assert_eq!(dec.flops, 3_135_504_384);
        assert_eq!(dec.peak_map_memory_bytes, 32_661_504);
        let ratio = full.flops as f64 / dec.flops as f64;
        assert!((ratio - 77.08).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn unit_and_scaling() {
        let r = full_map_cost(1, 1, 1, 4).unwrap();
        assert_eq!((r.flops, r.peak_map_memory_bytes), (2, 4));
        let a = full_map_cost(3, 5, 7, 4).unwrap();
        let b = full_map_cost(6, 5, 7, 4).unwrap();
        assert_eq!(b.flops, 4 * a.flops);
        assert_eq!(b.peak_map_memory_bytes, 4 * a.peak_map_memory_bytes);
        let k0 = decoupled_cost(3, 5, 7, 0, 4).unwrap();
        assert_eq!(k0.flops, 2 * (3 * 25 * 7 + 9 * 5 * 7));
    }

    #[test]
    fn overflow_is_a_range_error() {
        let big = u64::MAX / 2;
        assert!(matches!(full_map_cost(big, big, big, 4), Err(Error::Range(_))));
        assert!(matches!(decoupled_cost(big, big, 1, 1, 4), Err(Error::Range(_))));
        assert!(matches!(full_map_cost(0, 1, 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn bench_drops_full_column_past_the_cap() {
        let r = bench_losses::<f32>(65, 64, 2, 4, 1, 0).unwrap();
        assert!(r.notice.is_some());
        assert!(r.row("full").is_none());
        assert!(r.row("decoupled").is_some());
        assert_eq!(r.scalar, "f32");
    }

    #[test]
    fn bench_reports_analytic_flops() {
        let r = bench_losses::<f64>(2, 4, 3, 4, 3, 0).unwrap();
        assert_eq!(r.row("full").unwrap().flops, full_map_cost(2, 4, 3, 8).unwrap().flops);
        assert_eq!(r.rows.len(), 5);
    }
}
