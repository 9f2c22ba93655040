//! Stacked temporal layers with a per-frame multi-label classifier.

use ndarray::{s, Array2, Array3, ArrayD, ArrayView3, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSequence, FrameLabels, Sample};
use crate::layers::{Layer, LayerConfig, LayerForward};
use crate::{ParamTensor, Parameterized, Result, Scalar, TgmError};

/// How the final `C × D × T` representation becomes per-class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ClassifierKind {
    /// Class `i` applies its own `D → 1` affine map to channel `i` at every
    /// frame. When the representation has a single channel every class
    /// reads that channel.
    #[default]
    PerClassLinear,
    /// One `C·D → num_classes` affine map on the flattened frame.
    SharedLinear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature dimensionality.
    pub d: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub classifier: ClassifierKind,
}

impl ModelConfig {
    /// Channel and feature dims of the representation the classifier sees.
    pub fn final_dims(&self) -> (usize, usize) {
        self.layers
            .last()
            .map(|l| l.output_dims())
            .unwrap_or((1, self.d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_classes == 0 {
            return Err(TgmError::config("d and num_classes must be positive"));
        }
        let (mut c, mut d) = (1, self.d);
        for (i, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| TgmError::config(format!("layer {i}: {e}")))?;
            if layer.c_in != c || layer.d != d {
                return Err(TgmError::config(format!(
                    "layer {i} expects {}×{}×T input but the previous stage produces {c}×{d}×T",
                    layer.c_in, layer.d
                )));
            }
            (c, d) = layer.output_dims();
        }
        if self.classifier == ClassifierKind::PerClassLinear && c != self.num_classes && c != 1 {
            return Err(TgmError::config(format!(
                "PerClassLinear needs the last layer to emit num_classes = {} channels (or 1), got {c}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Shape of the classifier weight matrix.
    pub fn classifier_shape(&self) -> (usize, usize) {
        let (c, d) = self.final_dims();
        match self.classifier {
            ClassifierKind::PerClassLinear => (self.num_classes, d),
            ClassifierKind::SharedLinear => (self.num_classes, c * d),
        }
    }

    /// Classifier weights plus one bias per class.
    pub fn classifier_param_count(&self) -> usize {
        let (r, c) = self.classifier_shape();
        r * c + self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerConfig::param_count).sum::<usize>() + self.classifier_param_count()
    }

    /// The largest number of frames on either side that can influence one
    /// output frame.
    pub fn receptive_radius(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_len / 2).sum()
    }
}

/// Per-frame logits and probabilities, `num_classes × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence<S> {
    pub logits: Array2<S>,
    pub probs: Array2<S>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

impl<S: Scalar> PredictionSequence<S> {
    pub fn from_logits(logits: Array2<S>) -> Self {
        let probs = logits.mapv(sigmoid);
        Self { logits, probs }
    }

    pub fn t(&self) -> usize {
        self.logits.ncols()
    }
}

/// Binary cross-entropy, summed over frames and classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceLoss<S> {
    pub sum: S,
    /// `sum / T`.
    pub per_frame_mean: S,
}

/// Multi-label BCE computed from logits in log-sigmoid form.
pub fn bce_loss<S: Scalar>(pred: &PredictionSequence<S>, labels: &FrameLabels) -> Result<BceLoss<S>> {
    let (n, t) = pred.logits.dim();
    if labels.z.dim() != (t, n) {
        return Err(TgmError::usage(format!(
            "predictions are {n} classes × {t} frames, labels are {:?} (frames × classes)",
            labels.z.dim()
        )));
    }
    let mut sum = S::zero();
    for ((c, tt), &x) in pred.logits.indexed_iter() {
        let z = S::lit(labels.z[[tt, c]] as f64);
        sum += softplus(x) - z * x;
    }
    Ok(BceLoss {
        sum,
        per_frame_mean: sum / S::lit(t as f64),
    })
}

/// Scaling applied to the loss before differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossReduction {
    Sum,
    /// Divide by the number of frames of the video.
    #[default]
    PerFrameMean,
}

#[derive(Debug, Clone)]
struct Trace<S> {
    layers: Vec<LayerForward<S>>,
    representation: Array3<S>,
}

/// Result of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ModelForward<S> {
    pub predictions: PredictionSequence<S>,
    trace: Option<Trace<S>>,
}

impl<S: Scalar> ModelForward<S> {
    /// Smallest distance of any ReLU pre-activation from the kink, over all
    /// layers of a cached pass.
    pub fn relu_margin(&self) -> Option<S> {
        self.trace
            .as_ref()?
            .layers
            .iter()
            .filter_map(|l| l.relu_margin())
            .reduce(|a, b| a.min(b))
    }
}

/// Gradients for every tensor of [`Model::tensors`], in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<S> {
    pub tensors: Vec<ArrayD<S>>,
}

impl<S: Scalar> ModelGrads<S> {
    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    layers: Vec<Layer<S>>,
    weight: ParamTensor<S>,
    bias: ParamTensor<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, cfg)| Layer::new(*cfg, &format!("layer{i}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = config.classifier_shape();
        let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
        let weight = Array2::from_shape_simple_fn((rows, cols), || S::lit(normal.sample(&mut rng)));
        Ok(Self {
            layers,
            weight: ParamTensor::new("classifier.weight", weight.into_dyn(), true),
            bias: ParamTensor::new("classifier.bias", ArrayD::zeros(vec![config.num_classes]), true),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, S> {
        self.weight.values.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    fn classify(&self, rep: ArrayView3<S>) -> Array2<S> {
        let (c, d, t) = rep.dim();
        let w = self.weight2();
        let n = self.config.num_classes;
        let mut logits = Array2::zeros((n, t));
        for i in 0..n {
            let mut row = logits.row_mut(i);
            row.fill(self.bias.values[i]);
            match self.config.classifier {
                ClassifierKind::PerClassLinear => {
                    let ch = if c == 1 { 0 } else { i };
                    for di in 0..d {
                        row.scaled_add(w[[i, di]], &rep.slice(s![ch, di, ..]));
                    }
                }
                ClassifierKind::SharedLinear => {
                    for ci in 0..c {
                        for di in 0..d {
                            row.scaled_add(w[[i, ci * d + di]], &rep.slice(s![ci, di, ..]));
                        }
                    }
                }
            }
        }
        logits
    }

    pub fn forward(&self, features: &FeatureSequence<S>, keep_cache: bool) -> Result<ModelForward<S>> {
        if features.c() != 1 || features.d() != self.config.d {
            return Err(TgmError::config(format!(
                "model expects 1×{}×T features, got {}×{}×{}",
                self.config.d,
                features.c(),
                features.d(),
                features.t()
            )));
        }
        let mut forwards = Vec::new();
        let mut current: Option<Array3<S>> = None;
        for layer in &self.layers {
            let input = current.as_ref().map_or(features.values.view(), |a| a.view());
            let fwd = layer.forward(input, keep_cache)?;
            let out = fwd.output.clone();
            if keep_cache {
                forwards.push(fwd);
            }
            current = Some(out);
        }
        let representation = current.unwrap_or_else(|| features.values.clone());
        let logits = self.classify(representation.view());
        let trace = keep_cache.then(|| Trace {
            layers: forwards,
            representation,
        });
        Ok(ModelForward {
            predictions: PredictionSequence::from_logits(logits),
            trace,
        })
    }

    pub fn predict(&self, features: &FeatureSequence<S>) -> Result<PredictionSequence<S>> {
        Ok(self.forward(features, false)?.predictions)
    }

    /// Exact gradients of the BCE loss (scaled by `reduction`) for every
    /// tensor. Frozen tensors get zeros.
    pub fn backward(&self, forward: &ModelForward<S>, labels: &FrameLabels, reduction: LossReduction) -> Result<ModelGrads<S>> {
        let trace = forward
            .trace
            .as_ref()
            .ok_or_else(|| TgmError::usage("model backward needs a forward pass run with keep_cache"))?;
        let pred = &forward.predictions;
        let (n, t) = pred.logits.dim();
        if labels.z.dim() != (t, n) {
            return Err(TgmError::usage("labels do not match the forward pass"));
        }
        let scale = match reduction {
            LossReduction::Sum => S::one(),
            LossReduction::PerFrameMean => S::one() / S::lit(t as f64),
        };
        let d_logits = Array2::from_shape_fn((n, t), |(i, tt)| {
            (pred.probs[[i, tt]] - S::lit(labels.z[[tt, i]] as f64)) * scale
        });

        let rep = trace.representation.view();
        let (c, d, _) = rep.dim();
        let w = self.weight2();
        let mut d_w = Array2::<S>::zeros(w.raw_dim());
        let mut d_b = ArrayD::<S>::zeros(vec![n]);
        let mut d_rep = Array3::<S>::zeros(rep.raw_dim());
        for i in 0..n {
            let g = d_logits.row(i);
            d_b[i] = g.sum();
            let channels: Vec<(usize, usize)> = match self.config.classifier {
                ClassifierKind::PerClassLinear => vec![(if c == 1 { 0 } else { i }, 0)],
                ClassifierKind::SharedLinear => (0..c).map(|ci| (ci, ci * d)).collect(),
            };
            for (ch, col0) in channels {
                for di in 0..d {
                    d_w[[i, col0 + di]] = g.dot(&rep.slice(s![ch, di, ..]));
                    d_rep.slice_mut(s![ch, di, ..]).scaled_add(w[[i, col0 + di]], &g);
                }
            }
        }

        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut upstream = d_rep;
        for (layer, fwd) in self.layers.iter().zip(&trace.layers).rev() {
            let grads = layer.backward(fwd, upstream.view())?;
            upstream = grads.d_input;
            per_layer.push(grads.d_params);
        }
        let mut tensors: Vec<ArrayD<S>> = per_layer.into_iter().rev().flatten().collect();
        tensors.push(d_w.into_dyn());
        tensors.push(d_b);
        Ok(ModelGrads { tensors })
    }

    /// Forward, loss and gradients for one video.
    pub fn loss_and_grads(&self, sample: &Sample<S>, reduction: LossReduction) -> Result<(BceLoss<S>, ModelGrads<S>)> {
        let fwd = self.forward(&sample.features, true)?;
        let loss = bce_loss(&fwd.predictions, &sample.labels)?;
        let grads = self.backward(&fwd, &sample.labels, reduction)?;
        Ok((loss, grads))
    }

    /// Materialized kernels of every layer, in layer order.
    pub fn kernels(&self) -> Result<Vec<Array3<S>>> {
        self.layers
            .iter()
            .map(|l| Ok(l.kernel_bank(false)?.k))
            .collect()
    }
}

impl<S: Scalar> Parameterized<S> for Model<S> {
    fn tensors(&self) -> Vec<&ParamTensor<S>> {
        let mut out: Vec<&ParamTensor<S>> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.push(&self.weight);
        out.push(&self.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out: Vec<&mut ParamTensor<S>> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.push(&mut self.weight);
        out.push(&mut self.bias);
        out
    }
}
