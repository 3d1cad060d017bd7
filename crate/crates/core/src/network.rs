//! Network composition, the two architecture presets and head surgery.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{self, Layer, LayerCache, LayerKind, ParamGrads};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learning-rate multiplier given to a freshly attached classification head.
pub const DEFAULT_HEAD_LR_FACTOR: f64 = 20.0;

/// Channel count of the first preset stage.
pub const DEFAULT_BASE_WIDTH: usize = 8;

/// Default train-time patch side length.
pub const DEFAULT_PATCH_SIZE: usize = 64;

/// Channels and train-time spatial size the network was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MiniVgg,
    MiniResNet,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minivgg" => Ok(Preset::MiniVgg),
            "miniresnet" => Ok(Preset::MiniResNet),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::MiniVgg => "minivgg",
            Preset::MiniResNet => "miniresnet",
        }
    }
}

/// One labeled image, optionally with a ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub mask: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>) -> Self {
        Dataset {
            class_names,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, image: Tensor, label: usize) {
        self.samples.push(Sample {
            image,
            label,
            mask: None,
        });
    }

    /// Dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            if let Some(c) = counts.get_mut(s.label) {
                *c += 1;
            }
        }
        counts
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// One cache per top-level layer.
    pub caches: Vec<LayerCache>,
    /// Input of the global-average-pooling layer: the maps CAM weights.
    pub features: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_spec: InputSpec,
    pub class_names: Vec<String>,
}

impl Network {
    /// Assembles and validates a network.
    pub fn new(layers: Vec<Layer>, input_spec: InputSpec, class_names: Vec<String>) -> Result<Self> {
        let net = Network {
            layers,
            input_spec,
            class_names,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Index of the GAP layer in a CAM-ready network.
    pub fn gap_index(&self) -> usize {
        self.layers.len() - 3
    }

    /// Checks the GAP -> Dense -> Softmax tail and that no other GAP, Dense
    /// or Softmax appears anywhere.
    pub fn check_cam_ready(&self) -> Result<()> {
        let n = self.layers.len();
        if n < 3 {
            return Err(Error::NotCamReady(format!("only {n} layers")));
        }
        let tail_ok = matches!(self.layers[n - 3].kind, LayerKind::GlobalAvgPool)
            && matches!(self.layers[n - 2].kind, LayerKind::Dense { .. })
            && matches!(self.layers[n - 1].kind, LayerKind::SoftmaxOutput);
        if !tail_ok {
            return Err(Error::NotCamReady(
                "last three layers must be GlobalAvgPool, Dense, SoftmaxOutput".into(),
            ));
        }
        fn head_like(layer: &Layer) -> bool {
            match &layer.kind {
                LayerKind::GlobalAvgPool | LayerKind::Dense { .. } | LayerKind::SoftmaxOutput => true,
                LayerKind::Residual(nested) => nested.iter().any(head_like),
                _ => false,
            }
        }
        if self.layers[..n - 3].iter().any(head_like) {
            return Err(Error::NotCamReady(
                "GlobalAvgPool, Dense and SoftmaxOutput may only appear once, at the end".into(),
            ));
        }
        Ok(())
    }

    /// Full structural validation at the train-time input size.
    pub fn validate(&self) -> Result<()> {
        self.check_cam_ready()?;
        let spec = self.input_spec;
        let shape = self.output_shape(&[spec.channels, spec.height, spec.width])?;
        if shape != [self.class_names.len()] {
            return Err(Error::ShapeMismatch {
                context: "class names vs Dense outputs",
                expected: vec![self.class_names.len()],
                found: shape,
            });
        }
        Ok(())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Shape of the pre-GAP feature maps for an input of `height x width`.
    pub fn feature_shape(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        self.check_cam_ready()?;
        let mut shape = vec![self.input_spec.channels, height, width];
        for layer in &self.layers[..self.gap_index()] {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Output (classification head) weight and bias.
    pub fn head(&self) -> Result<(&Tensor, &Tensor)> {
        self.check_cam_ready()?;
        match &self.layers[self.layers.len() - 2].kind {
            LayerKind::Dense { weight, bias } => Ok((weight, bias)),
            _ => unreachable!("checked by check_cam_ready"),
        }
    }

    /// One forward pass over an image of any spatial size the trunk accepts.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.check_cam_ready()?;
        let (c, _, _) = image.dims3()?;
        if c != self.input_spec.channels {
            return Err(Error::ShapeMismatch {
                context: "input channels",
                expected: vec![self.input_spec.channels],
                found: vec![c],
            });
        }
        let gap = self.gap_index();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = image.clone();
        let mut features = None;
        let mut logits = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == gap {
                features = Some(x.clone());
            }
            let (y, cache) = layer.forward(&x)?;
            y.check_finite(layer.name())?;
            caches.push(cache);
            if i == gap + 1 {
                logits = Some(y.clone());
            }
            x = y;
        }
        let probabilities = x;
        let logits = logits.expect("CAM-ready network has a Dense layer");
        Ok(ForwardTrace {
            caches,
            features: features.expect("CAM-ready network has a GAP layer"),
            predicted: argmax(logits.data()),
            logits,
            probabilities,
        })
    }

    /// Backpropagates a gradient on the logits (Dense output) through every
    /// layer below the softmax. Returns one [`ParamGrads`] per layer.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<Vec<ParamGrads>> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "trace has {} layers, network has {}",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        let n = self.layers.len();
        let mut grads = vec![ParamGrads::None; n];
        let mut g = grad_logits.clone();
        for i in (0..n - 1).rev() {
            let (gi, pg) = self.layers[i].backward(&trace.caches[i], &g)?;
            grads[i] = pg;
            g = gi;
        }
        Ok(grads)
    }

    /// Cross-entropy loss and parameter gradients for one labeled image.
    pub fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<(f64, ForwardTrace, Vec<ParamGrads>)> {
        let trace = self.forward(image)?;
        let (p, loss) = layers::softmax_xent(&trace.logits, label)?;
        let g = layers::softmax_xent_grad(&p, label);
        let grads = self.backward(&trace, &g)?;
        Ok((loss, trace, grads))
    }

    /// Freezes every layer before the GAP layer, recursively.
    pub fn freeze_trunk(&mut self) {
        let gap = self.gap_index();
        for layer in &mut self.layers[..gap] {
            layer.set_frozen(true);
        }
    }

    /// Head surgery: drops Dense + Softmax, keeps the GAP-terminated trunk,
    /// and appends a freshly initialized Dense for `class_names` with
    /// `head_lr_factor`, followed by a new Softmax. Trunk layers, including
    /// their lr factors and frozen flags, are carried over untouched.
    pub fn replace_head(&self, class_names: Vec<String>, head_lr_factor: f64, rng: &mut Rng) -> Result<Network> {
        self.check_cam_ready()?;
        if class_names.len() < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if !(head_lr_factor >= 0.0 && head_lr_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "head lr factor must be non-negative, got {head_lr_factor}"
            )));
        }
        let features = self.head()?.0.shape()[1];
        let mut layers: Vec<Layer> = self.layers[..self.layers.len() - 2].to_vec();
        let mut dense = Layer::dense(class_names.len(), features, rng);
        dense.lr_factor = head_lr_factor;
        layers.push(dense);
        layers.push(Layer::softmax());
        Network::new(layers, self.input_spec, class_names)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Builds a He-initialized preset for `channels x 64 x 64` inputs.
///
/// * `minivgg`: three `Conv3x3 -> ReLU -> MaxPool` stages with 8, 16 and 32
///   channels.
/// * `miniresnet`: an 8-channel stage, an identity residual block, a
///   16-channel stage with a second residual block; 16 feature channels.
///
/// Both end with GAP -> Dense -> Softmax and have total stride 8.
pub fn build_preset(preset: Preset, in_channels: usize, class_names: Vec<String>, rng: &mut Rng) -> Result<Network> {
    build_preset_with_width(preset, in_channels, DEFAULT_BASE_WIDTH, class_names, rng)
}

/// [`build_preset`] with every channel count scaled from `base_width`
/// (8 in the standard presets). Small widths give toy networks with the
/// same topology.
pub fn build_preset_with_width(
    preset: Preset,
    in_channels: usize,
    base_width: usize,
    class_names: Vec<String>,
    rng: &mut Rng,
) -> Result<Network> {
    if base_width == 0 {
        return Err(Error::InvalidArgument("base width must be positive".into()));
    }
    if class_names.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "presets need at least two classes, got {}",
            class_names.len()
        )));
    }
    if in_channels == 0 {
        return Err(Error::InvalidArgument("in_channels must be positive".into()));
    }
    let k = class_names.len();
    let w = base_width;
    let mut layers = Vec::new();
    let features = match preset {
        Preset::MiniVgg => {
            let mut c = in_channels;
            for out in [w, 2 * w, 4 * w] {
                layers.push(Layer::conv3x3(out, c, rng));
                layers.push(Layer::relu());
                layers.push(Layer::max_pool());
                c = out;
            }
            c
        }
        Preset::MiniResNet => {
            layers.push(Layer::conv3x3(w, in_channels, rng));
            layers.push(Layer::relu());
            layers.push(Layer::max_pool());
            let a = Layer::conv3x3(w, w, rng);
            let b = Layer::conv3x3(w, w, rng);
            layers.push(Layer::residual(vec![a, Layer::relu(), b]));
            layers.push(Layer::relu());
            layers.push(Layer::max_pool());
            layers.push(Layer::conv3x3(2 * w, w, rng));
            layers.push(Layer::relu());
            let a = Layer::conv3x3(2 * w, 2 * w, rng);
            let b = Layer::conv3x3(2 * w, 2 * w, rng);
            layers.push(Layer::residual(vec![a, Layer::relu(), b]));
            layers.push(Layer::relu());
            layers.push(Layer::max_pool());
            2 * w
        }
    };
    layers.push(Layer::global_avg_pool());
    layers.push(Layer::dense(k, features, rng));
    layers.push(Layer::softmax());
    Network::new(
        layers,
        InputSpec {
            channels: in_channels,
            height: DEFAULT_PATCH_SIZE,
            width: DEFAULT_PATCH_SIZE,
        },
        class_names,
    )
}

/// `["class0", "class1", ...]`.
pub fn numbered_classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}
