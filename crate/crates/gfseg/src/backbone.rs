//! Feature extractor: a tiny trainable conv net plus an adapter trait for
//! plugging in any external image → feature-map function.
//!
//! The toy network is a stack of conv→layer-norm→ReLU blocks (3×3 kernels)
//! followed by a 1×1 projection to the feature dim. Two stride-2 blocks give
//! a total stride of 4 by default, which keeps 64×64 desk-scale inputs at a
//! 16×16 feature grid. It has no batch statistics or dropout, so forward
//! passes are deterministic in any mode.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Data, Tape, Var};

/// Dense per-pixel features for one image.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// (d, h, w), finite values.
    pub values: Array3<f64>,
    /// Input-to-feature downscale factor (H / h).
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>, stride: usize) -> Result<Self> {
        if values.shape()[0] < 2 {
            return Err(Error::Invariant("feature dim must be at least 2".into()));
        }
        if values.shape()[1] == 0 || values.shape()[2] == 0 {
            return Err(Error::Invariant("feature grid must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { values, stride })
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Anything that turns a normalized image into a dense feature map. The toy
/// backbone implements this; external extractors (a pretrained network, a
/// cached-features loader) can be swapped in anywhere the fine-tuning and
/// evaluation paths take `&dyn FeatureExtractor`, since those phases never
/// backpropagate into the extractor.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn stride(&self) -> usize;
    /// Extract features for a batch of images (B, 3, H, W) → (B, d, h, w).
    fn extract_batch(&self, images: &Array4<f64>) -> Result<Array4<f64>>;

    fn extract(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let mut batch = Array4::<f64>::zeros((1, c, h, w));
        batch.index_axis_mut(ndarray::Axis(0), 0).assign(image);
        let out = self.extract_batch(&batch)?;
        let single = out.index_axis(ndarray::Axis(0), 0).to_owned();
        FeatureMap::new(single, self.stride())
    }
}

/// Architecture of the toy backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each 3×3 block.
    pub channels: Vec<usize>,
    /// Stride of each block (same length as `channels`).
    pub strides: Vec<usize>,
    /// Output feature dimension d (1×1 projection).
    pub feat_dim: usize,
    pub trainable: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 32, 32],
            strides: vec![2, 2, 1, 1],
            feat_dim: 32,
            trainable: true,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "backbone channels/strides must be non-empty and equal length".into(),
            ));
        }
        if self.feat_dim < 2 {
            return Err(Error::Config("feature dim must be at least 2".into()));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("block stride cannot be zero".into()));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

/// The toy convolutional feature extractor. Parameters live in a flat
/// name → tensor map so checkpoints, the optimizer and the tape all share
/// one representation.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    pub params: BTreeMap<String, Data>,
}

impl ToyBackbone {
    /// He-normal conv weights, zero biases, unit norm gains, seeded.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x8422_6d7c);
        let mut params = BTreeMap::new();
        let mut in_ch = 3usize;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let mut w = Array4::<f64>::zeros((out_ch, in_ch, 3, 3));
            for v in w.iter_mut() {
                *v = std * normal(&mut rng);
            }
            params.insert(format!("backbone.block{i}.conv.weight"), w.into_dyn());
            params.insert(
                format!("backbone.block{i}.conv.bias"),
                Array1::<f64>::zeros(out_ch).into_dyn(),
            );
            params.insert(
                format!("backbone.block{i}.norm.gamma"),
                Array1::<f64>::ones(out_ch).into_dyn(),
            );
            params.insert(
                format!("backbone.block{i}.norm.beta"),
                Array1::<f64>::zeros(out_ch).into_dyn(),
            );
            in_ch = out_ch;
        }
        let fan_in = in_ch as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut w = Array4::<f64>::zeros((config.feat_dim, in_ch, 1, 1));
        for v in w.iter_mut() {
            *v = std * normal(&mut rng);
        }
        params.insert("backbone.proj.weight".into(), w.into_dyn());
        params.insert(
            "backbone.proj.bias".into(),
            Array1::<f64>::zeros(config.feat_dim).into_dyn(),
        );
        Ok(ToyBackbone { config, params })
    }

    /// Rebuild from checkpoint tensors, validating shapes against the config.
    pub fn from_params(config: BackboneConfig, params: BTreeMap<String, Data>) -> Result<Self> {
        config.validate()?;
        let reference = ToyBackbone::init(config.clone(), 0)?;
        for (name, tensor) in &reference.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if got.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    got.shape(),
                    tensor.shape()
                )));
            }
        }
        Ok(ToyBackbone { config, params })
    }

    /// Run the network on a tape. `trainable` decides whether parameters
    /// enter as leaves (gradients accumulated) or constants (frozen).
    pub fn forward(&self, tape: &Tape, images: Var, trainable: bool) -> Result<Var> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects (B,3,H,W) images, got {shape:?}"
            )));
        }
        let stride = self.config.total_stride();
        let (h, w) = (shape[2], shape[3]);
        if h < stride || w < stride {
            return Err(Error::Shape(format!(
                "image {h}x{w} is smaller than the total stride {stride}"
            )));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by the backbone stride {stride}"
            )));
        }
        let get = |name: &str| -> Var {
            let data = self.params[name].clone();
            if trainable {
                tape.leaf(data)
            } else {
                tape.constant(data)
            }
        };
        let mut x = images;
        for (i, &s) in self.config.strides.iter().enumerate() {
            let w = get(&format!("backbone.block{i}.conv.weight"));
            let b = get(&format!("backbone.block{i}.conv.bias"));
            let gamma = get(&format!("backbone.block{i}.norm.gamma"));
            let beta = get(&format!("backbone.block{i}.norm.beta"));
            x = tape.conv2d(x, w, b, s, 1);
            x = tape.layer_norm(x, gamma, beta, LN_EPS);
            x = tape.relu(x);
        }
        let w = get("backbone.proj.weight");
        let b = get("backbone.proj.bias");
        Ok(tape.conv2d(x, w, b, 1, 0))
    }

    /// Forward pass plus the tape leaves for every parameter, for training.
    pub fn forward_trainable(
        &self,
        tape: &Tape,
        images: Var,
    ) -> Result<(Var, BTreeMap<String, Var>)> {
        // mirror forward() but remember the leaf Vars by name
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects (B,3,H,W) images, got {shape:?}"
            )));
        }
        let stride = self.config.total_stride();
        if shape[2] % stride != 0 || shape[3] % stride != 0 || shape[2] < stride {
            return Err(Error::Shape(format!(
                "image {}x{} incompatible with stride {stride}",
                shape[2], shape[3]
            )));
        }
        let mut vars = BTreeMap::new();
        let mut get = |name: String| -> Var {
            let v = tape.leaf(self.params[&name].clone());
            vars.insert(name, v);
            v
        };
        let mut x = images;
        for (i, &s) in self.config.strides.iter().enumerate() {
            let w = get(format!("backbone.block{i}.conv.weight"));
            let b = get(format!("backbone.block{i}.conv.bias"));
            let gamma = get(format!("backbone.block{i}.norm.gamma"));
            let beta = get(format!("backbone.block{i}.norm.beta"));
            x = tape.conv2d(x, w, b, s, 1);
            x = tape.layer_norm(x, gamma, beta, LN_EPS);
            x = tape.relu(x);
        }
        let w = get("backbone.proj.weight".into());
        let b = get("backbone.proj.bias".into());
        let out = tape.conv2d(x, w, b, 1, 0);
        Ok((out, vars))
    }
}

impl FeatureExtractor for ToyBackbone {
    fn feature_dim(&self) -> usize {
        self.config.feat_dim
    }

    fn stride(&self) -> usize {
        self.config.total_stride()
    }

    fn extract_batch(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        let tape = Tape::new();
        let x = tape.constant(images.clone().into_dyn());
        let out = self.forward(&tape, x, false)?;
        Ok(tape
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
