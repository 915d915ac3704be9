use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named layer-selection patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScheme {
    Shallow,
    Deep,
    ShallowDeep,
    ShallowMediumDeep,
    Uniform,
}

impl LayerScheme {
    pub const ALL: [LayerScheme; 5] = [
        LayerScheme::Shallow,
        LayerScheme::Deep,
        LayerScheme::ShallowDeep,
        LayerScheme::ShallowMediumDeep,
        LayerScheme::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerScheme::Shallow => "shallow",
            LayerScheme::Deep => "deep",
            LayerScheme::ShallowDeep => "shallow_deep",
            LayerScheme::ShallowMediumDeep => "shallow_medium_deep",
            LayerScheme::Uniform => "uniform",
        }
    }

    /// `count` 1-based layer indices out of `depth` for this scheme.
    pub fn layers(self, depth: usize, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > depth {
            return Err(Error::Config(format!(
                "cannot select {count} layers from a depth-{depth} model"
            )));
        }
        let head = |k: usize| (1..=k).collect::<Vec<_>>();
        let tail = |k: usize| (depth - k + 1..=depth).collect::<Vec<_>>();
        let picked = match self {
            LayerScheme::Shallow => head(count),
            LayerScheme::Deep => tail(count),
            LayerScheme::ShallowDeep => {
                let h = count.div_ceil(2);
                let mut v = head(h);
                v.extend(tail(count - h));
                v
            }
            LayerScheme::ShallowMediumDeep => {
                // Thirds; any remainder goes to the shallow part, then the deep part.
                let base = count / 3;
                let rem = count % 3;
                let s = base + usize::from(rem >= 1);
                let d = base + usize::from(rem >= 2);
                let m = base;
                let mut v = head(s);
                let start = (depth - m) / 2 + 1;
                v.extend(start..start + m);
                v.extend(tail(d));
                v
            }
            LayerScheme::Uniform => (1..=count)
                .map(|k| ((k * depth) as f64 / count as f64).round() as usize)
                .collect(),
        };
        if picked.windows(2).any(|w| w[0] >= w[1]) || picked.iter().any(|&l| l == 0 || l > depth) {
            return Err(Error::Config(format!(
                "scheme {} selects overlapping layers {picked:?} for depth {depth}",
                self.name()
            )));
        }
        Ok(picked)
    }
}

impl fmt::Display for LayerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerScheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer scheme {s:?}")))
    }
}

/// Ordered `(teacher_layer, student_layer)` pairs, 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPairing {
    pub pairs: Vec<(usize, usize)>,
}

impl LayerPairing {
    pub fn new(pairs: Vec<(usize, usize)>, teacher_depth: usize, student_depth: usize) -> Result<Self> {
        for &(t, s) in &pairs {
            if t == 0 || t > teacher_depth || s == 0 || s > student_depth {
                return Err(Error::Config(format!(
                    "pair ({t}, {s}) invalid for teacher depth {teacher_depth}, student depth {student_depth}"
                )));
            }
        }
        if pairs.windows(2).any(|w| w[0].1 >= w[1].1) {
            return Err(Error::Config("student layers must be strictly increasing".into()));
        }
        Ok(Self { pairs })
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn student_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn select_layers(
    scheme: LayerScheme,
    teacher_depth: usize,
    student_depth: usize,
    count: usize,
) -> Result<LayerPairing> {
    let t = scheme.layers(teacher_depth, count)?;
    let s = scheme.layers(student_depth, count)?;
    LayerPairing::new(t.into_iter().zip(s).collect(), teacher_depth, student_depth)
}

/// Same as [`select_layers`] but takes the scheme by name.
pub fn select_layers_named(
    scheme: &str,
    teacher_depth: usize,
    student_depth: usize,
    count: usize,
) -> Result<LayerPairing> {
    select_layers(scheme.parse()?, teacher_depth, student_depth, count)
}
