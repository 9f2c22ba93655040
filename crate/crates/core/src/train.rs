//! Adam, the step-decay schedule, the per-video training loop and the
//! finite-difference gradient checker.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, TrainingState};
use crate::data::{split_train_val, FeatureSequence, FrameLabels, Sample};
use crate::layers::{KernelSource, LayerConfig, LayerForm};
use crate::eval::{per_frame_map, EvalReport};
use crate::model::{bce_loss, ClassifierKind, LossReduction, Model, ModelConfig, PredictionSequence};
use crate::{Parameterized, Result, Scalar, TgmError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<ArrayD<S>>,
    pub v: Vec<ArrayD<S>>,
    /// Number of updates applied so far.
    pub step: u64,
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn for_params<P: Parameterized<S> + ?Sized>(params: &P, lr: S) -> Self {
        let zeros: Vec<ArrayD<S>> = params.tensors().iter().map(|t| t.zeros_like()).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            step: 0,
            lr,
            beta1: S::lit(ADAM_BETA1),
            beta2: S::lit(ADAM_BETA2),
            eps: S::lit(ADAM_EPS),
        }
    }
}

/// One Adam update of every trainable tensor. Frozen tensors and their
/// moments are left untouched. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<S: Scalar, P: Parameterized<S> + ?Sized>(
    state: &mut AdamState<S>,
    params: &mut P,
    grads: &[ArrayD<S>],
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(TgmError::usage(format!(
            "{} tensors, {} gradients, {} moment slots",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (t, g) in tensors.iter().zip(grads) {
        if t.shape() != g.shape() {
            return Err(TgmError::usage(format!(
                "gradient for {} has shape {:?}, tensor has {:?}",
                t.name,
                g.shape(),
                t.shape()
            )));
        }
        if t.trainable && g.iter().any(|v| !v.is_finite()) {
            return Err(TgmError::Numerical(format!("non-finite gradient in {}", t.name)));
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let bc1 = S::one() - state.beta1.powi(step);
    let bc2 = S::one() - state.beta2.powi(step);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((t, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if !t.trainable {
            continue;
        }
        ndarray::Zip::from(&mut t.values)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|theta, &g, m, v| {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

fn default_epochs() -> usize {
    50
}

/// Training recipe: Adam at `base_lr`, multiplied by `decay_factor` every
/// `decay_every` epochs; one video per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Visit training videos in a fresh seeded order every epoch.
    pub shuffle: bool,
    pub reduction: LossReduction,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 50,
            base_lr: 0.01,
            decay_factor: 0.1,
            decay_every: 10,
            seed: 0,
            shuffle: true,
            reduction: LossReduction::PerFrameMean,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.decay_every == 0 {
            return Err(TgmError::config("epochs and decay_every must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return Err(TgmError::config("base_lr must be finite and nonnegative, decay_factor positive"));
        }
        Ok(())
    }
}

/// `base_lr · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_for_epoch(plan: &TrainPlan, epoch: usize) -> f64 {
    plan.base_lr * plan.decay_factor.powi((epoch / plan.decay_every) as i32)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over training videos of the per-frame mean BCE.
    pub mean_loss: f64,
    pub val_map: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// The record without its wall-clock field, for reproducibility checks.
    pub fn deterministic_part(&self) -> (usize, u64, u64, Option<u64>) {
        (
            self.epoch,
            self.lr.to_bits(),
            self.mean_loss.to_bits(),
            self.val_map.map(f64::to_bits),
        )
    }
}

pub struct FitOptions<'a, S> {
    /// Writes `epoch_NNN.tgmm` and `last.tgmm` after every epoch.
    pub checkpoint_dir: Option<&'a Path>,
    /// Continue from a saved optimizer state.
    pub resume: Option<TrainingState<S>>,
    /// Worker threads for validation inference; 1 keeps everything on the
    /// calling thread.
    pub threads: usize,
    /// NDJSON sink for [`EpochRecord`]s.
    pub log: Option<&'a mut dyn Write>,
}

impl<S> Default for FitOptions<'_, S> {
    fn default() -> Self {
        Self {
            checkpoint_dir: None,
            resume: None,
            threads: 1,
            log: None,
        }
    }
}

/// Runs inference over many sequences; results keep the input order.
pub fn predict_all<S: Scalar>(
    model: &Model<S>,
    features: &[&FeatureSequence<S>],
    threads: usize,
) -> Result<Vec<PredictionSequence<S>>> {
    if threads <= 1 {
        return features.iter().map(|f| model.predict(f)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TgmError::usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| features.par_iter().map(|f| model.predict(f)).collect())
}

/// Per-frame mAP of `model` on `samples`.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[&Sample<S>], threads: usize) -> Result<EvalReport> {
    let feats: Vec<_> = samples.iter().map(|s| &s.features).collect();
    let preds = predict_all(model, &feats, threads)?;
    let views: Vec<_> = preds.iter().map(|p| p.probs.view()).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.labels.clone()).collect();
    per_frame_map(&views, &labels)
}

/// Trains `model` in place on an 80/20 split of `dataset` fixed by
/// `plan.seed` and returns one record per epoch run.
///
/// On a non-finite loss or gradient the model is restored to its state at
/// the start of the failing epoch, earlier checkpoints are left in place,
/// and a [`TgmError::Numerical`] is returned.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    dataset: &[Sample<S>],
    plan: &TrainPlan,
    mut options: FitOptions<'_, S>,
) -> Result<Vec<EpochRecord>> {
    plan.validate()?;
    if dataset.is_empty() {
        return Err(TgmError::usage("cannot train on an empty dataset"));
    }
    let (train_idx, val_idx) = split_train_val(dataset.len(), plan.seed);
    let val: Vec<&Sample<S>> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let (start_epoch, mut adam) = match options.resume.take() {
        Some(state) => (state.epochs_completed, state.adam),
        None => (0, AdamState::for_params(model, S::zero())),
    };
    if let Some(dir) = options.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut records = Vec::new();
    for epoch in start_epoch..plan.epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(plan, epoch);
        adam.lr = S::lit(lr);
        let mut order = train_idx.clone();
        if plan.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(epoch as u64 + 1);
            order.shuffle(&mut rng);
        }
        let last_good = model.clone();
        let mut loss_total = 0.0;
        for &i in &order {
            let sample = &dataset[i];
            let outcome = model.loss_and_grads(sample, plan.reduction).and_then(|(loss, grads)| {
                let per_frame = loss.per_frame_mean.to_f64_lossy();
                if !per_frame.is_finite() {
                    return Err(TgmError::Numerical(format!("non-finite loss on video {i} in epoch {epoch}")));
                }
                adam_step(&mut adam, model, &grads.tensors)?;
                Ok(per_frame)
            });
            match outcome {
                Ok(l) => loss_total += l,
                Err(e) => {
                    *model = last_good;
                    return Err(e);
                }
            }
        }
        let val_map = if val.is_empty() {
            None
        } else {
            evaluate(model, &val, options.threads)?.map
        };
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_total / order.len().max(1) as f64,
            val_map,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(log) = options.log.as_mut() {
            serde_json::to_writer(&mut **log, &record)?;
            writeln!(log)?;
        }
        if let Some(dir) = options.checkpoint_dir {
            let state = TrainingState {
                epochs_completed: epoch + 1,
                adam: adam.clone(),
            };
            save_checkpoint(dir.join(format!("epoch_{:03}.tgmm", epoch + 1)), model, Some(&state))?;
            save_checkpoint(dir.join("last.tgmm"), model, Some(&state))?;
        }
        records.push(record);
    }
    Ok(records)
}

// --- gradient checking -------------------------------------------------------

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;
/// Analytic values below this magnitude may pass on absolute error instead.
pub const SMALL_GRADIENT: f64 = 1e-6;
/// Absolute error accepted for small analytic values.
pub const SMALL_GRADIENT_ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Largest relative error among coordinates not excused by the
    /// small-gradient absolute rule.
    pub max_rel_err: f64,
    pub worst_parameter: Option<String>,
    pub pass: bool,
    /// Frozen tensors, not checked.
    pub skipped: Vec<String>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn coordinate_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < SMALL_GRADIENT && (analytic - numeric).abs() < SMALL_GRADIENT_ABS_TOL {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

/// Compares `analytic` (one array per tensor of `subject`) against central
/// differences of `loss` with step `h`.
pub fn compare_with_finite_differences<S, P, F>(
    subject: &P,
    analytic: &[ArrayD<S>],
    h: f64,
    tolerance: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    P: Parameterized<S> + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let names: Vec<(String, bool, usize)> = subject
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.trainable, t.len()))
        .collect();
    if names.len() != analytic.len() {
        return Err(TgmError::usage("one analytic gradient per tensor is required"));
    }
    let mut probe = subject.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_parameter: None,
        pass: true,
        skipped: Vec::new(),
        checked: 0,
    };
    for (ti, (name, trainable, len)) in names.iter().enumerate() {
        if !trainable {
            report.skipped.push(name.clone());
            continue;
        }
        for k in 0..*len {
            let original = probe.tensors()[ti].values.as_slice().expect("standard layout")[k];
            let mut eval_at = |value: S, probe: &mut P| -> Result<f64> {
                probe.tensors_mut()[ti].values.as_slice_mut().expect("standard layout")[k] = value;
                loss(probe)
            };
            let plus = eval_at(original + S::lit(h), &mut probe)?;
            let minus = eval_at(original - S::lit(h), &mut probe)?;
            probe.tensors_mut()[ti].values.as_slice_mut().expect("standard layout")[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].as_slice().expect("standard layout")[k].to_f64_lossy();
            let err = coordinate_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst_parameter = Some(name.clone());
            }
        }
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}

/// `loss(logits) - loss(base)` for the summed BCE, accumulated per term so
/// the result is not quantized at the scale of the total loss.
fn bce_sum_change<S: Scalar>(logits: &Array2<S>, base: &Array2<S>, labels: &FrameLabels) -> f64 {
    let mut total = 0.0;
    for ((c, t), &x) in logits.indexed_iter() {
        let x = x.to_f64_lossy();
        let x0 = base[[c, t]].to_f64_lossy();
        let delta = x - x0;
        let p0 = 1.0 / (1.0 + (-x0).exp());
        // softplus(x) - softplus(x0) = log1p(sigmoid(x0) * expm1(x - x0))
        let d_softplus = (p0 * delta.exp_m1()).ln_1p();
        total += d_softplus - f64::from(labels.z[[t, c]]) * delta;
    }
    total
}

/// Checks the model's BCE gradients (sum reduction) on one video.
pub fn grad_check<S: Scalar>(model: &Model<S>, sample: &Sample<S>, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(sample, LossReduction::Sum)?;
    grad_check_against(model, sample, &grads.tensors, h, tolerance)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<S: Scalar>(
    model: &Model<S>,
    sample: &Sample<S>,
    analytic: &[ArrayD<S>],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let base = model.predict(&sample.features)?;
    bce_loss(&base, &sample.labels)?;
    compare_with_finite_differences(model, analytic, h, tolerance, |m| {
        let pred = m.predict(&sample.features)?;
        Ok(bce_sum_change(&pred.logits, &base.logits, &sample.labels))
    })
}

/// Small-shape gradient check over a grid of layer forms and kernel sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSpec {
    pub forms: Vec<LayerForm>,
    pub sources: Vec<KernelSource>,
    pub channels: usize,
    pub d: usize,
    pub t: usize,
    #[serde(rename = "L")]
    pub kernel_len: usize,
    #[serde(rename = "M")]
    pub num_gaussians: usize,
    pub num_classes: usize,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Also check a two-layer model with the default classifier.
    pub full_model: bool,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            forms: LayerForm::ALL.to_vec(),
            sources: KernelSource::ALL.to_vec(),
            channels: 3,
            d: 4,
            t: 12,
            kernel_len: 5,
            num_gaussians: 3,
            num_classes: 3,
            h: 1e-5,
            tolerance: 1e-5,
            seed: 0,
            full_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckSpec {
    /// Model configurations checked, by name. Invalid form/source pairs are
    /// left out. Forms that need several input channels get a
    /// `TgmSingle` with free taps in front of them.
    pub fn cases(&self) -> Vec<(String, ModelConfig)> {
        let mut out = Vec::new();
        let (c, d, l, m) = (self.channels, self.d, self.kernel_len, self.num_gaussians);
        for &form in &self.forms {
            for &source in &self.sources {
                let layers = if form.is_conv1d() || form == LayerForm::TgmSingle {
                    vec![LayerConfig::new(form, source, 1, c, l, m, d)]
                } else {
                    vec![
                        LayerConfig::new(LayerForm::TgmSingle, KernelSource::UnconstrainedFree, 1, c, l, m, d),
                        LayerConfig::new(form, source, c, c, l, m, d),
                    ]
                };
                if layers.iter().any(|cfg| cfg.validate().is_err()) {
                    continue;
                }
                let config = ModelConfig {
                    d,
                    num_classes: self.num_classes,
                    layers,
                    classifier: ClassifierKind::SharedLinear,
                };
                out.push((format!("{form:?}/{source:?}"), config));
            }
        }
        if self.full_model {
            let config = ModelConfig {
                d,
                num_classes: self.num_classes,
                layers: vec![
                    LayerConfig::new(LayerForm::TgmSingle, KernelSource::LearnedGaussianMixture, 1, c, l, m, d),
                    LayerConfig::new(
                        LayerForm::TgmChannelCombine1x1,
                        KernelSource::LearnedGaussianMixture,
                        c,
                        self.num_classes,
                        l,
                        m,
                        d,
                    ),
                ],
                classifier: ClassifierKind::PerClassLinear,
            };
            out.push(("full-model".to_string(), config));
        }
        out
    }
}

/// Random N(0, 1) features with Bernoulli(0.3) labels.
pub fn random_sample<S: Scalar, R: rand::Rng + ?Sized>(d: usize, t: usize, num_classes: usize, rng: &mut R) -> Result<Sample<S>> {
    let values = Array3::from_shape_simple_fn((1, d, t), || S::lit(rng.sample::<f64, _>(StandardNormal)));
    let z = Array2::from_shape_simple_fn((t, num_classes), || u8::from(rng.random_bool(0.3)));
    Sample::new(FeatureSequence::new(values)?, FrameLabels::new(z)?)
}

/// Central differences are meaningless across a ReLU kink, so samples
/// putting any pre-activation within this distance of zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

fn kink_free_sample<R: rand::Rng + ?Sized>(model: &Model<f64>, spec: &GradCheckSpec, rng: &mut R) -> Result<Option<Sample<f64>>> {
    for _ in 0..20 {
        let sample = random_sample(spec.d, spec.t, spec.num_classes, rng)?;
        let margin = model.forward(&sample.features, true)?.relu_margin();
        if margin.is_none_or(|m| m >= KINK_MARGIN) {
            return Ok(Some(sample));
        }
    }
    Ok(None)
}

/// A model of `config` and a sample that stays clear of ReLU kinks. Some
/// initializations put a pre-activation near zero for every input (a tiny
/// combine weight, say), so the weights are redrawn too.
fn kink_free_case<R: rand::Rng + ?Sized>(
    config: &ModelConfig,
    seed: u64,
    spec: &GradCheckSpec,
    rng: &mut R,
) -> Result<(Model<f64>, Sample<f64>)> {
    for attempt in 0..20u64 {
        let model = Model::<f64>::new(config.clone(), seed.wrapping_add(attempt << 32))?;
        if let Some(sample) = kink_free_sample(&model, spec, rng)? {
            return Ok((model, sample));
        }
    }
    Err(TgmError::Numerical("no draw keeps ReLU inputs away from zero".into()))
}

/// Runs every case of `spec`. With `corrupt_gradients` the analytic
/// gradient of the first trainable tensor of each case's last layer is
/// perturbed, which every case must then report.
pub fn run_gradcheck(spec: &GradCheckSpec, corrupt_gradients: bool) -> Result<Vec<GradCheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for (i, (name, config)) in spec.cases().into_iter().enumerate() {
        let (model, sample) = kink_free_case(&config, spec.seed.wrapping_add(i as u64), spec, &mut rng)?;
        let (_, grads) = model.loss_and_grads(&sample, LossReduction::Sum)?;
        let mut analytic = grads.tensors;
        if corrupt_gradients {
            let last = format!("layer{}.", model.layers().len() - 1);
            let target = model
                .tensors()
                .iter()
                .position(|t| t.trainable && t.name.starts_with(&last))
                .unwrap_or(0);
            analytic[target].mapv_inplace(|g| g * 1.5 + 1e-3);
        }
        let report = grad_check_against(&model, &sample, &analytic, spec.h, spec.tolerance)?;
        out.push(GradCheckCase { name, report });
    }
    Ok(out)
}
