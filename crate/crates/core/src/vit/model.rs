use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{TapSet, VitConfig};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Parameters of one pre-norm encoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub qkv: (Var, Var),
    pub proj: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl BlockVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            norm1: (v[0], v[1]),
            qkv: (v[2], v[3]),
            proj: (v[4], v[5]),
            norm2: (v[6], v[7]),
            fc1: (v[8], v[9]),
            fc2: (v[10], v[11]),
        }
    }
}

const BLOCK_PARAMS: usize = 12;

/// `x + MSA(LN(x))` followed by `x + MLP(LN(x))`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    block: &BlockVars,
    x: Var,
    heads: usize,
    layer: usize,
) -> Result<Var> {
    let eps = T::of(LN_EPS);
    let h = g.layer_norm(x, block.norm1.0, block.norm1.1, eps)?;
    let qkv = g.linear(h, block.qkv.0, Some(block.qkv.1))?;
    let a = g.attention(qkv, heads)?;
    let a = g.linear(a, block.proj.0, Some(block.proj.1))?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, block.norm2.0, block.norm2.1, eps)?;
    let h = g.linear(h, block.fc1.0, Some(block.fc1.1))?;
    let h = g.gelu(h);
    let h = g.linear(h, block.fc2.0, Some(block.fc2.1))?;
    let out = g.add(x, h)?;
    if !g.value(out).all_finite() {
        return Err(Error::Numeric(format!("non-finite activations after encoder layer {layer}")));
    }
    Ok(out)
}

/// `concat(cls?, patches·W + b) + pos`.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    patches: Var,
    projection: (Var, Var),
    class_token: Option<Var>,
    positional: Var,
) -> Result<Var> {
    let x = g.linear(patches, projection.0, Some(projection.1))?;
    let x = match class_token {
        Some(t) => g.prepend_token(x, t)?,
        None => x,
    };
    let [_, n, d] = *g.shape(x) else { unreachable!() };
    if g.shape(positional) != [n, d] {
        return Err(shape_err!("positional embedding {:?} for {n} tokens of width {d}", g.shape(positional)));
    }
    g.add_trailing(x, positional)
}

/// Graph handles produced by [`VitModel::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub logits: Var,
    /// Layer index → `(B, N, D)` post-layer features without the class token.
    pub taps: BTreeMap<usize, Var>,
}

/// Evaluated forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    pub logits: Tensor<T>,
    pub taps: BTreeMap<usize, Tensor<T>>,
}

/// A small pre-norm vision transformer with named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VitModel<T> {
    config: VitConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> VitModel<T> {
    /// Fresh model: truncated normal (std 0.02, cut at 2σ) for projections and
    /// embeddings, zero biases, unit LayerNorm scale.
    pub fn init(config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_layout() {
            let t = if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else if name.contains("norm") {
                Tensor::full(shape, T::one())
            } else {
                Tensor::from_fn(shape, |_| T::of(trunc_normal(&mut rng, &normal)))
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self { config: config.clone(), names, params })
    }

    /// Assembles a model from named tensors, checking them against the config layout.
    pub fn from_params(config: &VitConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { config: config.clone(), names, params })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over parameter names and values, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Registers parameters on `g`; tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    pub fn block_vars(&self, vars: &[Var], layer: usize) -> BlockVars {
        let start = self.block_offset() + (layer - 1) * BLOCK_PARAMS;
        BlockVars::from_slice(&vars[start..start + BLOCK_PARAMS])
    }

    fn block_offset(&self) -> usize {
        3 + usize::from(self.config.use_class_token)
    }

    /// Records the forward pass on `g` using parameter handles from [`bind`](Self::bind).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        taps: &TapSet,
    ) -> Result<GraphForward> {
        let c = &self.config;
        if taps.max_layer() > c.num_layers {
            return Err(Error::Config(format!(
                "tap layer {} exceeds model depth {}",
                taps.max_layer(),
                c.num_layers
            )));
        }
        let [_, h, w, ch] = *g.shape(images) else {
            return Err(shape_err!("images must be (B, H, W, C), got {:?}", g.shape(images)));
        };
        if (h, w) != c.image_size || ch != c.channels {
            return Err(shape_err!(
                "images {h}x{w}x{ch} do not match model input {:?}x{}",
                c.image_size,
                c.channels
            ));
        }
        let patches = g.patchify(images, c.patch_size)?;
        let cls = c.use_class_token.then(|| vars[3]);
        let mut x = embed(g, patches, (vars[0], vars[1]), cls, vars[2])?;
        let n = c.num_patches();
        let skip = usize::from(c.use_class_token);
        let mut tapped = BTreeMap::new();
        for layer in 1..=c.num_layers {
            let block = self.block_vars(vars, layer);
            x = encoder_layer(g, &block, x, c.num_heads, layer)?;
            if taps.contains(layer) {
                let f = if skip == 0 { x } else { g.slice_tokens(x, skip, n)? };
                tapped.insert(layer, f);
            }
        }
        let tail = self.block_offset() + c.num_layers * BLOCK_PARAMS;
        let x = g.layer_norm(x, vars[tail], vars[tail + 1], T::of(LN_EPS))?;
        let pooled = if c.use_class_token {
            let t = g.slice_tokens(x, 0, 1)?;
            let b = g.shape(t)[0];
            g.reshape(t, [b, c.embed_dim])?
        } else {
            g.mean_tokens(x)?
        };
        let logits = g.linear(pooled, vars[tail + 2], Some(vars[tail + 3]))?;
        Ok(GraphForward { logits, taps: tapped })
    }

    /// Untracked forward returning logits and the requested tap features.
    pub fn forward_with_taps(&self, images: &Tensor<T>, taps: &TapSet) -> Result<ForwardResult<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward_graph(&mut g, &vars, x, taps)?;
        Ok(ForwardResult {
            logits: g.value(out.logits).clone(),
            taps: out.taps.iter().map(|(&l, &v)| (l, g.value(v).clone())).collect(),
        })
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_taps(images, &TapSet::empty())?.logits)
    }
}

fn trunc_normal(rng: &mut impl Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

/// Row-wise argmax of `(B, C)` logits.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
