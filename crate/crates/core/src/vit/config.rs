use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a toy vision transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub use_class_token: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// Hidden width of the MLP relative to the embedding width.
pub const MLP_RATIO: usize = 4;

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let p = self.patch_size;
        let bad = |msg: String| Err(Error::Config(msg));
        if h == 0 || w == 0 || self.channels == 0 {
            return bad(format!("image {h}x{w}x{} has an empty axis", self.channels));
        }
        if p == 0 || h % p != 0 || w % p != 0 {
            return bad(format!("image {h}x{w} is not divisible by patch size {p}"));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Patch grid `(H/P, W/P)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    /// Number of patches `N = H·W/P²`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Ordered `(name, shape)` list of every parameter.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let hidden = d * MLP_RATIO;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_tokens(), d]),
        ];
        if self.use_class_token {
            out.push(("cls_token".to_string(), vec![d]));
        }
        for i in 0..self.num_layers {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.weight"), vec![d]),
                (p("norm1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("norm2.weight"), vec![d]),
                (p("norm2.bias"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, hidden]),
                (p("mlp.fc1.bias"), vec![hidden]),
                (p("mlp.fc2.weight"), vec![hidden, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Ordered, 1-based layer indices whose outputs are captured.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TapSet(Vec<usize>);

impl TapSet {
    pub fn new(layers: impl IntoIterator<Item = usize>, num_layers: usize) -> Result<Self> {
        let mut v: Vec<usize> = layers.into_iter().collect();
        if let Some(&bad) = v.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(Error::Config(format!("tap layer {bad} outside 1..={num_layers}")));
        }
        v.sort_unstable();
        let before = v.len();
        v.dedup();
        if v.len() != before {
            return Err(Error::Config("tap layers must be unique".into()));
        }
        Ok(Self(v))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn max_layer(&self) -> usize {
        self.0.last().copied().unwrap_or(0)
    }
}
