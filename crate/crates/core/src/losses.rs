//! Patch-level manifold relation maps and the losses built on them.
//!
//! Every loss takes raw tap features `(B, N, D)` and normalizes rows along
//! the feature axis itself, so teacher and student may have different `D`.
//! Relation maps are Gram matrices of those unit rows (cosine similarities).
//!
//! * full: one `(B·N × B·N)` map over all patches of the batch (oracle only)
//! * intra: `B` maps of size `N × N`, one per image, averaged over images
//! * inter: `N` maps of size `B × B`, one per patch position, averaged over positions
//! * random: one `K × K` map over `K` sampled patch rows, no averaging

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, NORM_EPS};

/// Largest `B·N` the full-map oracle accepts by default.
pub const DEFAULT_ORACLE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Teacher,
    Student,
}

/// Tap features of one model at one layer.
#[derive(Clone, Debug)]
pub struct FeatureBatch<T> {
    pub features: Tensor<T>,
    pub provenance: Provenance,
    pub layer: usize,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(features: Tensor<T>, provenance: Provenance, layer: usize) -> Result<Self> {
        if features.rank() != 3 {
            return Err(shape_err!("feature batch must be (B, N, D), got {:?}", features.shape()));
        }
        if !features.all_finite() {
            return Err(Error::Numeric(format!("non-finite {provenance:?} features at layer {layer}")));
        }
        Ok(Self { features, provenance, layer })
    }

    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Square matrix of pairwise cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMap<T>(Tensor<T>);

impl<T: Scalar> RelationMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.0.data()[i * self.size() + j]
    }

    pub fn is_symmetric(&self) -> bool {
        let r = self.size();
        (0..r).all(|i| (i..r).all(|j| self.at(i, j) == self.at(j, i)))
    }
}

/// Relation map of already normalized rows `(R, D)`.
pub fn relation_map<T: Scalar>(normalized: &Tensor<T>) -> Result<RelationMap<T>> {
    Ok(RelationMap(tensor::gram(normalized)?))
}

/// `K` patch-row indices into `ψ(F)`, shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndices {
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl SampleIndices {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every row in order; turns the random loss into the full loss.
    pub fn exhaustive(rows: usize) -> Self {
        Self { indices: (0..rows).collect(), seed: 0 }
    }
}

/// Draws `K` rows out of `B·N`: without replacement when possible, otherwise
/// with replacement (logged).
pub fn sample_indices(batch: usize, patches: usize, k: usize, seed: u64) -> Result<SampleIndices> {
    if k == 0 {
        return Err(Error::Config("sample count K must be at least 1".into()));
    }
    let rows = batch * patches;
    if rows == 0 {
        return Err(shape_err!("cannot sample from an empty feature batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = if k <= rows {
        index::sample(&mut rng, rows, k).into_vec()
    } else {
        warn!("K = {k} exceeds B·N = {rows}; sampling with replacement");
        (0..k).map(|_| rng.gen_range(0..rows)).collect()
    };
    Ok(SampleIndices { indices, seed })
}

/// Target grid `(H′, W′)` for patch merging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSetting {
    pub height: usize,
    pub width: usize,
}

impl MergeSetting {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height > grid.0 || self.width > grid.1 {
            return Err(Error::Config(format!(
                "merge setting {}x{} invalid for {}x{} grid",
                self.height, self.width, grid.0, grid.1
            )));
        }
        Ok(())
    }

    /// Feature width multiplier `⌈H/H′⌉·⌈W/W′⌉`.
    pub fn block_area(&self, grid: (usize, usize)) -> usize {
        grid.0.div_ceil(self.height) * grid.1.div_ceil(self.width)
    }
}

/// Value-level patch merging; see [`Graph::merge_patches`].
pub fn merge_patches<T: Scalar>(
    features: &Tensor<T>,
    grid: (usize, usize),
    setting: MergeSetting,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let m = g.merge_patches(x, grid, (setting.height, setting.width))?;
    Ok(g.value(m).clone())
}

/// Non-negative weights of the three decoupled terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 4.0, beta: 0.1, gamma: 0.2 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, fs: Var, ft: Var) -> Result<(usize, usize)> {
    let (s, t) = (g.shape(fs), g.shape(ft));
    match (s, t) {
        ([bs, ns, _], [bt, nt, _]) if bs == bt && ns == nt => Ok((*bs, *ns)),
        _ => Err(shape_err!("student features {s:?} and teacher features {t:?} must share B and N")),
    }
}

fn normalized_pair<T: Scalar>(g: &mut Graph<T>, fs: Var, ft: Var) -> (Var, Var) {
    let eps = T::of(NORM_EPS);
    (g.normalize_last_dim(fs, eps), g.normalize_last_dim(ft, eps))
}

/// `‖M(ψ(F_S)) − M(ψ(F_T))‖²_F` over all `B·N` rows at once.
pub fn full_manifold_loss<T: Scalar>(g: &mut Graph<T>, fs: Var, ft: Var) -> Result<Var> {
    full_manifold_loss_capped(g, fs, ft, DEFAULT_ORACLE_CAP)
}

pub fn full_manifold_loss_capped<T: Scalar>(
    g: &mut Graph<T>,
    fs: Var,
    ft: Var,
    cap: usize,
) -> Result<Var> {
    let (b, n) = check_pair(g, fs, ft)?;
    if b * n > cap {
        return Err(Error::Contract(format!(
            "full relation map over {} rows exceeds the oracle cap of {cap}",
            b * n
        )));
    }
    let (ns, nt) = normalized_pair(g, fs, ft);
    let ms = full_map_var(g, ns)?;
    let mt = full_map_var(g, nt)?;
    g.frob_sq_diff(ms, mt)
}

fn full_map_var<T: Scalar>(g: &mut Graph<T>, normalized: Var) -> Result<Var> {
    let [b, n, d] = *g.shape(normalized) else { unreachable!() };
    let flat = g.reshape(normalized, [b * n, d])?;
    g.gram(flat)
}

/// Mean over images of the per-image `N × N` relation-map gaps.
pub fn intra_loss<T: Scalar>(g: &mut Graph<T>, fs: Var, ft: Var) -> Result<Var> {
    let (b, _) = check_pair(g, fs, ft)?;
    let (ns, nt) = normalized_pair(g, fs, ft);
    let ms = g.gram(ns)?;
    let mt = g.gram(nt)?;
    let gap = g.frob_sq_diff(ms, mt)?;
    Ok(g.scale(gap, T::one() / T::of_usize(b)))
}

/// Mean over patch positions of the per-position `B × B` relation-map gaps.
pub fn inter_loss<T: Scalar>(g: &mut Graph<T>, fs: Var, ft: Var) -> Result<Var> {
    let (_, n) = check_pair(g, fs, ft)?;
    let (ns, nt) = normalized_pair(g, fs, ft);
    let ts = g.transpose01(ns)?;
    let tt = g.transpose01(nt)?;
    let ms = g.gram(ts)?;
    let mt = g.gram(tt)?;
    let gap = g.frob_sq_diff(ms, mt)?;
    Ok(g.scale(gap, T::one() / T::of_usize(n)))
}

/// Relation-map gap over the sampled rows of `ψ(F_S)` and `ψ(F_T)`.
pub fn random_loss<T: Scalar>(
    g: &mut Graph<T>,
    fs: Var,
    ft: Var,
    indices: &SampleIndices,
) -> Result<Var> {
    let (b, n) = check_pair(g, fs, ft)?;
    let (ns, nt) = normalized_pair(g, fs, ft);
    let ds = g.shape(ns)[2];
    let dt = g.shape(nt)[2];
    let ps = g.reshape(ns, [b * n, ds])?;
    let pt = g.reshape(nt, [b * n, dt])?;
    let rs = g.gather_rows(ps, &indices.indices)?;
    let rt = g.gather_rows(pt, &indices.indices)?;
    let ms = g.gram(rs)?;
    let mt = g.gram(rt)?;
    g.frob_sq_diff(ms, mt)
}

/// Graph nodes of one decoupled evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledTerms {
    pub total: Var,
    pub intra: Var,
    pub inter: Var,
    pub random: Var,
    /// `α·intra`, `β·inter`, `γ·random`.
    pub weighted: [Var; 3],
}

/// `α·L_intra + β·L_inter + γ·L_random`. All three terms are always
/// evaluated so they can be logged even when their weight is zero.
pub fn decoupled_loss<T: Scalar>(
    g: &mut Graph<T>,
    fs: Var,
    ft: Var,
    weights: &LossWeights,
    indices: &SampleIndices,
) -> Result<DecoupledTerms> {
    weights.validate()?;
    let intra = intra_loss(g, fs, ft)?;
    let inter = inter_loss(g, fs, ft)?;
    let random = random_loss(g, fs, ft, indices)?;
    let wi = g.scale(intra, T::of(weights.alpha));
    let we = g.scale(inter, T::of(weights.beta));
    let wr = g.scale(random, T::of(weights.gamma));
    let total = g.add_all(&[wi, we, wr])?;
    Ok(DecoupledTerms { total, intra, inter, random, weighted: [wi, we, wr] })
}

// ---- value-level helpers --------------------------------------------------

fn eval_pair<T: Scalar>(
    fs: &Tensor<T>,
    ft: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant(fs.clone());
    let t = g.constant(ft.clone());
    let out = f(&mut g, s, t)?;
    g.value(out).item()
}

pub fn full_manifold_loss_value<T: Scalar>(fs: &Tensor<T>, ft: &Tensor<T>) -> Result<T> {
    eval_pair(fs, ft, full_manifold_loss)
}

pub fn intra_loss_value<T: Scalar>(fs: &Tensor<T>, ft: &Tensor<T>) -> Result<T> {
    eval_pair(fs, ft, intra_loss)
}

pub fn inter_loss_value<T: Scalar>(fs: &Tensor<T>, ft: &Tensor<T>) -> Result<T> {
    eval_pair(fs, ft, inter_loss)
}

pub fn random_loss_value<T: Scalar>(
    fs: &Tensor<T>,
    ft: &Tensor<T>,
    indices: &SampleIndices,
) -> Result<T> {
    eval_pair(fs, ft, |g, s, t| random_loss(g, s, t, indices))
}

/// Evaluated decoupled loss with its components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoupledValue<T> {
    pub total: T,
    pub intra: T,
    pub inter: T,
    pub random: T,
}

pub fn decoupled_loss_value<T: Scalar>(
    fs: &Tensor<T>,
    ft: &Tensor<T>,
    weights: &LossWeights,
    indices: &SampleIndices,
) -> Result<DecoupledValue<T>> {
    let mut g = Graph::new();
    let s = g.constant(fs.clone());
    let t = g.constant(ft.clone());
    let terms = decoupled_loss(&mut g, s, t, weights, indices)?;
    Ok(DecoupledValue {
        total: g.value(terms.total).item()?,
        intra: g.value(terms.intra).item()?,
        inter: g.value(terms.inter).item()?,
        random: g.value(terms.random).item()?,
    })
}

fn rank3<T: Scalar>(f: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [b, n, d] => Ok((b, n, d)),
        _ => Err(shape_err!("expected (B, N, D), got {:?}", f.shape())),
    }
}

/// The full `(B·N × B·N)` relation map of raw features.
pub fn full_map<T: Scalar>(f: &Tensor<T>) -> Result<RelationMap<T>> {
    rank3(f)?;
    relation_map(&tensor::reshape_psi(&tensor::normalize_last_dim(f, T::of(NORM_EPS)))?)
}

/// Per-image relation maps `(B, N, N)` used by the intra loss.
pub fn intra_maps<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    rank3(f)?;
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let n = g.normalize_last_dim(x, T::of(NORM_EPS));
    let m = g.gram(n)?;
    Ok(g.value(m).clone())
}

/// Per-position relation maps `(N, B, B)` used by the inter loss.
pub fn inter_maps<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    rank3(f)?;
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let n = g.normalize_last_dim(x, T::of(NORM_EPS));
    let t = g.transpose01(n)?;
    let m = g.gram(t)?;
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
    }

    /// Naive per-image loop, independent of the batched graph path.
    fn naive_intra(fs: &Tensor<f64>, ft: &Tensor<f64>) -> f64 {
        let (b, n, _) = rank3(fs).unwrap();
        let mut total = 0.0;
        for i in 0..b {
            let map = |f: &Tensor<f64>| {
                let d = f.shape()[2];
                let rows: Vec<f64> = f.data()[i * n * d..(i + 1) * n * d].to_vec();
                let t = Tensor::new([n, d], rows).unwrap();
                tensor::gram(&tensor::normalize_last_dim(&t, 1e-12)).unwrap()
            };
            total += tensor::frob_sq_diff(&map(fs), &map(ft)).unwrap();
        }
        total / b as f64
    }

    fn naive_inter(fs: &Tensor<f64>, ft: &Tensor<f64>) -> f64 {
        let (b, n, _) = rank3(fs).unwrap();
        let mut total = 0.0;
        for j in 0..n {
            let map = |f: &Tensor<f64>| {
                let d = f.shape()[2];
                let mut rows = Vec::new();
                for i in 0..b {
                    rows.extend_from_slice(&f.data()[(i * n + j) * d..(i * n + j + 1) * d]);
                }
                let t = Tensor::new([b, d], rows).unwrap();
                tensor::gram(&tensor::normalize_last_dim(&t, 1e-12)).unwrap()
            };
            total += tensor::frob_sq_diff(&map(fs), &map(ft)).unwrap();
        }
        total / n as f64
    }

    #[test]
    fn relation_map_examples() {
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(relation_map(&eye).unwrap().tensor(), &eye);
        let same = Tensor::<f64>::new([2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let m = relation_map(&same).unwrap();
        for v in m.tensor().data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let raw = randn(&[5, 3], 3);
        let m = relation_map(&tensor::normalize_last_dim(&raw, 1e-12)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a = &raw.data()[i * 3..i * 3 + 3];
                let b = &raw.data()[j * 3..j * 3 + 3];
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                assert!((m.at(i, j) - cos).abs() < 1e-12);
            }
        }
        assert!(m.is_symmetric());
    }

    #[test]
    fn full_loss_hand_case() {
        // student rows orthonormal -> identity map; teacher rows identical -> all ones.
        let fs = Tensor::<f64>::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ft = Tensor::new([1, 2, 3], vec![1.0, 2.0, 2.0, 1.0, 2.0, 2.0]).unwrap();
        let l = full_manifold_loss_value(&fs, &ft).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn full_loss_refuses_above_cap() {
        let f = Tensor::<f64>::zeros([2, 3, 2]);
        let mut g = Graph::new();
        let s = g.constant(f.clone());
        let t = g.constant(f);
        assert!(matches!(full_manifold_loss_capped(&mut g, s, t, 5), Err(Error::Contract(_))));
        assert!(full_manifold_loss_capped(&mut g, s, t, 6).is_ok());
    }

    #[test]
    fn intra_and_inter_match_naive_loops() {
        let fs = randn(&[3, 4, 5], 10);
        let ft = randn(&[3, 4, 7], 11);
        let a = intra_loss_value(&fs, &ft).unwrap();
        assert!((a - naive_intra(&fs, &ft)).abs() < 1e-12);

        let fs = randn(&[4, 3, 5], 12);
        let ft = randn(&[4, 3, 2], 13);
        let e = inter_loss_value(&fs, &ft).unwrap();
        assert!((e - naive_inter(&fs, &ft)).abs() < 1e-12);
    }

    #[test]
    fn single_image_and_single_position_reductions() {
        let fs = randn(&[1, 5, 3], 20);
        let ft = randn(&[1, 5, 4], 21);
        let intra = intra_loss_value(&fs, &ft).unwrap();
        let full = full_manifold_loss_value(&fs, &ft).unwrap();
        assert!((intra - full).abs() < 1e-12);

        let fs = randn(&[5, 1, 3], 22);
        let ft = randn(&[5, 1, 4], 23);
        let inter = inter_loss_value(&fs, &ft).unwrap();
        let full = full_manifold_loss_value(&fs, &ft).unwrap();
        assert!((inter - full).abs() < 1e-12);
    }

    #[test]
    fn identical_features_give_zero() {
        let f = randn(&[2, 3, 4], 30);
        let idx = sample_indices(2, 3, 4, 1).unwrap();
        let w = LossWeights::default();
        let v = decoupled_loss_value(&f, &f, &w, &idx).unwrap();
        assert_eq!((v.total, v.intra, v.inter, v.random), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(full_manifold_loss_value(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn random_loss_matches_gather_then_map() {
        let fs = randn(&[2, 3, 4], 40);
        let ft = randn(&[2, 3, 6], 41);
        let idx = SampleIndices { indices: vec![5, 0, 3, 2], seed: 0 };
        let got = random_loss_value(&fs, &ft, &idx).unwrap();
        let map = |f: &Tensor<f64>| {
            let p = tensor::reshape_psi(&tensor::normalize_last_dim(f, 1e-12)).unwrap();
            let d = p.shape()[1];
            let rows: Vec<f64> =
                idx.indices.iter().flat_map(|&i| p.data()[i * d..(i + 1) * d].to_vec()).collect();
            tensor::gram(&Tensor::new([idx.len(), d], rows).unwrap()).unwrap()
        };
        let want = tensor::frob_sq_diff(&map(&fs), &map(&ft)).unwrap();
        assert!((got - want).abs() < 1e-12);

        let bad = SampleIndices { indices: vec![6], seed: 0 };
        assert!(matches!(random_loss_value(&fs, &ft, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_contracts() {
        let all = sample_indices(2, 3, 6, 9).unwrap();
        let mut sorted = all.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());

        assert_eq!(sample_indices(4, 4, 5, 77).unwrap(), sample_indices(4, 4, 5, 77).unwrap());

        let big = sample_indices(128, 196, 192, 5).unwrap();
        assert_eq!(big.len(), 192);
        let mut uniq = big.indices.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 192);
        assert!(big.indices.iter().all(|&i| i < 25088));

        let over = sample_indices(1, 2, 5, 0).unwrap();
        assert_eq!(over.len(), 5);
        assert!(over.indices.iter().all(|&i| i < 2));
        assert!(sample_indices(1, 2, 0, 0).is_err());
    }

    #[test]
    fn merge_examples() {
        let f = randn(&[2, 6, 3], 50);
        let same = merge_patches(&f, (2, 3), MergeSetting::new(2, 3)).unwrap();
        assert_eq!(same, f);

        let f = Tensor::<f64>::zeros([1, 3136, 4]);
        let m = merge_patches(&f, (56, 56), MergeSetting::new(14, 14)).unwrap();
        assert_eq!(m.shape(), &[1, 196, 64]);

        assert!(merge_patches(&f, (50, 50), MergeSetting::new(14, 14)).is_err());
        assert!(MergeSetting::new(0, 1).validate((3, 3)).is_err());
        assert_eq!(MergeSetting::new(2, 2).block_area((3, 3)), 4);
    }

    #[test]
    fn decoupled_weighting() {
        let fs = randn(&[3, 4, 5], 60);
        let ft = randn(&[3, 4, 6], 61);
        let idx = sample_indices(3, 4, 5, 2).unwrap();
        let w = LossWeights::default();
        let v = decoupled_loss_value(&fs, &ft, &w, &idx).unwrap();
        let intra = intra_loss_value(&fs, &ft).unwrap();
        let inter = inter_loss_value(&fs, &ft).unwrap();
        let random = random_loss_value(&fs, &ft, &idx).unwrap();
        let want = 4.0 * intra + 0.1 * inter + 0.2 * random;
        assert!((v.total - want).abs() < 1e-12);
        assert_eq!(decoupled_loss_value(&fs, &ft, &LossWeights::zero(), &idx).unwrap().total, 0.0);
        let neg = LossWeights { alpha: -1.0, ..w };
        assert!(matches!(decoupled_loss_value(&fs, &ft, &neg, &idx), Err(Error::Config(_))));
    }
}
