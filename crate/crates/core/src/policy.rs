//! Two-branch planning network.
//!
//! A fixed depth filter scores each primitive by the mean depth in the
//! sensor sector that points at the primitive's endpoint; a small dense
//! network adds a learned residual in `(-1, 1)`. The planner executes the
//! primitive with the highest total score. Depths are normalized to `[0, 1]`
//! so both branches live on the same scale.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::sim::{DepthObservation, Planner, PrimitiveLibrary, SensorParams};

/// Codec/layout version stored next to every serialized weight vector.
pub const ARCH_VERSION: u32 = 1;

/// Largest residual magnitude; `tanh` saturates to exactly 1.0 in double
/// precision, so outputs are pulled just inside the open interval.
const RESIDUAL_CAP: f64 = 1.0 - f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArchitecture {
    pub version: u32,
    pub n_ray: usize,
    pub n_primitives: usize,
    pub hidden: Vec<usize>,
    /// One entry per layer (hidden layers, then the output layer). The output
    /// activation must be `tanh`.
    pub activations: Vec<Activation>,
}

impl Default for PolicyArchitecture {
    fn default() -> Self {
        Self::new(32, 15, vec![24], Activation::Elu).expect("default architecture is valid")
    }
}

impl PolicyArchitecture {
    /// Dense network `n_ray -> hidden.. -> n_primitives` with one hidden
    /// activation and a tanh output.
    pub fn new(n_ray: usize, n_primitives: usize, hidden: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        let mut activations = vec![hidden_activation; hidden.len()];
        activations.push(Activation::Tanh);
        let arch = Self { version: ARCH_VERSION, n_ray, n_primitives, hidden, activations };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ARCH_VERSION {
            return Err(Error::Config(format!(
                "policy architecture version {} is not supported (expected {ARCH_VERSION})",
                self.version
            )));
        }
        if self.n_ray == 0 || self.n_primitives == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("policy layers must all have positive width".into()));
        }
        if self.activations.len() != self.hidden.len() + 1 {
            return Err(Error::Config("policy needs exactly one activation per layer".into()));
        }
        if self.activations.last() != Some(&Activation::Tanh) {
            return Err(Error::Config("policy output activation must be tanh".into()));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of each layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.n_ray);
        widths.extend(&self.hidden);
        widths.push(self.n_primitives);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Total parameter count `d`.
    pub fn d(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One dense layer; `weights` is row-major with one row per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Splits a flat vector into layers: layer by layer, each layer's weight
/// matrix row-major followed by its bias.
pub fn decode(arch: &PolicyArchitecture, w: &[f64]) -> Result<Vec<Layer>> {
    check_len(arch.d(), w.len())?;
    let mut rest = w;
    Ok(arch
        .layer_shapes()
        .into_iter()
        .map(|(inputs, outputs)| {
            let (weights, tail) = rest.split_at(inputs * outputs);
            let (bias, tail) = tail.split_at(outputs);
            rest = tail;
            Layer { inputs, outputs, weights: weights.to_vec(), bias: bias.to_vec() }
        })
        .collect())
}

pub fn encode(layers: &[Layer]) -> Vec<f64> {
    layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).copied().collect()
}

/// Per-primitive scores; the selected primitive is the first maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &s) in self.0.iter().enumerate().skip(1) {
            if s > self.0[best] {
                best = j;
            }
        }
        best
    }

    pub fn add(&self, other: &ScoreVector) -> Result<ScoreVector> {
        check_len(self.0.len(), other.0.len())?;
        Ok(ScoreVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }
}

/// Ray indices averaged for each primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFilter {
    n_ray: usize,
    sectors: Vec<Vec<usize>>,
}

impl DepthFilter {
    /// Sector of width `fov / L` centered on the bearing of each primitive's
    /// endpoint. Sectors narrower than the ray spacing fall back to the ray
    /// nearest the bearing.
    pub fn new(sensor: &SensorParams, library: &PrimitiveLibrary) -> Self {
        let angles = sensor.ray_angles();
        let half = sensor.fov() / (2.0 * library.len() as f64);
        let sectors = library
            .primitives
            .iter()
            .map(|p| {
                let (dx, dy) = p.endpoint();
                // Bearing relative to the heading, counter-clockwise positive.
                let bearing = (-dx).atan2(dy);
                let sector: Vec<usize> = (0..angles.len()).filter(|&i| (angles[i] - bearing).abs() <= half + 1e-12).collect();
                if sector.is_empty() {
                    let nearest = (0..angles.len())
                        .min_by(|&a, &b| (angles[a] - bearing).abs().total_cmp(&(angles[b] - bearing).abs()))
                        .unwrap_or(0);
                    vec![nearest]
                } else {
                    sector
                }
            })
            .collect();
        Self { n_ray: sensor.n_ray, sectors }
    }

    pub fn sectors(&self) -> &[Vec<usize>] {
        &self.sectors
    }

    pub fn score(&self, obs: &DepthObservation) -> Result<ScoreVector> {
        check_len(self.n_ray, obs.depths.len())?;
        Ok(ScoreVector(
            self.sectors
                .iter()
                .map(|s| s.iter().map(|&i| obs.depths[i]).sum::<f64>() / s.len() as f64)
                .collect(),
        ))
    }
}

pub fn depth_filter_score(obs: &DepthObservation, filter: &DepthFilter) -> Result<ScoreVector> {
    filter.score(obs)
}

/// Forward pass of the residual branch straight off the flat weight vector.
pub fn residual_score(arch: &PolicyArchitecture, obs: &DepthObservation, w: &[f64]) -> Result<ScoreVector> {
    check_len(arch.n_ray, obs.depths.len())?;
    check_len(arch.d(), w.len())?;
    let mut x = obs.depths.clone();
    let mut offset = 0;
    for ((inputs, outputs), act) in arch.layer_shapes().into_iter().zip(&arch.activations) {
        let weights = &w[offset..offset + inputs * outputs];
        let bias = &w[offset + inputs * outputs..offset + inputs * outputs + outputs];
        offset += inputs * outputs + outputs;
        x = weights
            .chunks_exact(inputs)
            .zip(bias)
            .map(|(row, b)| act.apply(row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b))
            .collect();
    }
    Ok(ScoreVector(x.into_iter().map(|s| s.clamp(-RESIDUAL_CAP, RESIDUAL_CAP)).collect()))
}

pub fn select_primitive(
    arch: &PolicyArchitecture,
    filter: &DepthFilter,
    obs: &DepthObservation,
    w: &[f64],
) -> Result<usize> {
    let total = filter.score(obs)?.add(&residual_score(arch, obs, w)?)?;
    if total.0.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("policy scores"));
    }
    Ok(total.argmax())
}

/// A weight vector bound to its architecture and filter.
#[derive(Debug, Clone, Copy)]
pub struct NetPlanner<'a> {
    pub arch: &'a PolicyArchitecture,
    pub filter: &'a DepthFilter,
    pub weights: &'a [f64],
}

impl Planner for NetPlanner<'_> {
    fn plan(&self, obs: &DepthObservation) -> Result<usize> {
        select_primitive(self.arch, self.filter, obs, self.weights)
    }
}

/// The pure depth-filter policy.
impl Planner for DepthFilter {
    fn plan(&self, obs: &DepthObservation) -> Result<usize> {
        Ok(self.score(obs)?.argmax())
    }
}

/// Serialized weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    pub arch: PolicyArchitecture,
    pub weights: Vec<f64>,
}

impl PolicyWeights {
    pub fn new(arch: PolicyArchitecture, weights: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len(arch.d(), weights.len())?;
        Ok(Self { arch, weights })
    }
}
