//! Procedural image-classification task whose label lives in patch structure.
//!
//! Each class is a (texture, side) pair: a textured object patch sits at a
//! random patch-grid cell in the left or right half of the image, on a noisy
//! background, optionally with distractor patches drawn from textures that
//! belong to no class. Recovering the label needs both the texture of one
//! patch and its position.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LabeledImages;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub image_size: (usize, usize),
    pub channels: usize,
    /// Cell size of the object grid; matches the model patch size.
    pub patch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Std of the background noise.
    pub background_noise: f64,
    /// Std of the noise added to object textures.
    pub texture_noise: f64,
    /// Patches carrying a texture unrelated to the label.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            image_size: (8, 8),
            channels: 3,
            patch_size: 2,
            train_samples: 512,
            eval_samples: 512,
            background_noise: 0.3,
            texture_noise: 0.3,
            distractors: 2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let p = self.patch_size;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if p == 0 || h % p != 0 || w % p != 0 || w / p < 2 {
            return Err(Error::Config(format!(
                "image {h}x{w} must split into at least two columns of {p}x{p} cells"
            )));
        }
        if self.distractors + 1 > (h / p) * (w / p) {
            return Err(Error::Config("too many distractors for the grid".into()));
        }
        if self.train_samples == 0 || self.eval_samples == 0 || self.channels == 0 {
            return Err(Error::Config("splits and channels must be non-empty".into()));
        }
        Ok(())
    }

    fn textures(&self) -> usize {
        self.classes.div_ceil(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: LabeledImages<T>,
    pub eval: LabeledImages<T>,
}

/// Generates the class-balanced train and eval splits.
pub fn generate_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Splits<T>> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cell = spec.patch_size * spec.patch_size * spec.channels;
    // class textures followed by distractor textures
    let prototypes: Vec<Vec<f64>> = (0..spec.textures() + spec.distractors.max(1))
        .map(|_| (0..cell).map(|_| if proto_rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect();
    let train = split(spec, &prototypes, spec.train_samples, spec.seed.wrapping_add(1))?;
    let eval = split(spec, &prototypes, spec.eval_samples, spec.seed.wrapping_add(2))?;
    Ok(Splits { train, eval })
}

fn split<T: Scalar>(spec: &DatasetSpec, protos: &[Vec<f64>], n: usize, seed: u64) -> Result<LabeledImages<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D));
    let (h, w) = spec.image_size;
    let (p, c) = (spec.patch_size, spec.channels);
    let (gh, gw) = (h / p, w / p);
    let half = gw / 2;
    let textures = spec.textures();

    // Balanced label multiset, shuffled.
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * h * w * c);
    for &label in &labels {
        let texture = label / 2;
        let right = label % 2 == 1;
        let mut img: Vec<f64> = (0..h * w * c)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); spec.background_noise * z })
            .collect();
        let gx = if right { rng.gen_range(gw - half..gw) } else { rng.gen_range(0..half) };
        let gy = rng.gen_range(0..gh);
        let mut used = vec![(gy, gx)];
        paint(&mut img, spec, &protos[texture], (gy, gx), &mut rng);
        for _ in 0..spec.distractors {
            let cell = loop {
                let cand = (rng.gen_range(0..gh), rng.gen_range(0..gw));
                if !used.contains(&cand) {
                    break cand;
                }
            };
            used.push(cell);
            let which = textures + rng.gen_range(0..spec.distractors.max(1));
            paint(&mut img, spec, &protos[which], cell, &mut rng);
        }
        data.extend(img.into_iter().map(T::of));
    }
    LabeledImages::new(Tensor::new([n, h, w, c], data)?, labels)
}

fn paint(img: &mut [f64], spec: &DatasetSpec, proto: &[f64], (gy, gx): (usize, usize), rng: &mut ChaCha8Rng) {
    let (_, w) = spec.image_size;
    let (p, c) = (spec.patch_size, spec.channels);
    let mut k = 0;
    for dy in 0..p {
        for dx in 0..p {
            let (y, x) = (gy * p + dy, gx * p + dx);
            for ch in 0..c {
                let noise: f64 = StandardNormal.sample(rng);
                img[(y * w + x) * c + ch] = proto[k] + spec.texture_noise * noise;
                k += 1;
            }
        }
    }
}
