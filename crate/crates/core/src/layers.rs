//! Temporal layer forms over `C × D × T` feature tensors.
//!
//! All forms use cross-correlation with "same" zero padding: tap `l` of an
//! `L`-tap kernel reads frame `t + l - L/2` (integer division), so the
//! output always has the input's length `T`.
//!
//! | form                       | input        | output          | kernels          |
//! |----------------------------|--------------|-----------------|------------------|
//! | `Conv1dStandard`           | `1 × D × T`  | `1 × C_out × T` | `C_out × D × L`  |
//! | `Conv1dSharedGaussian`     | `1 × D × T`  | `1 × C_out × T` | `C_out × 1 × L`  |
//! | `Conv1dPerChannelGaussian` | `1 × D × T`  | `1 × C_out × T` | `C_out × D × L`  |
//! | `TgmSingle`                | `1 × D × T`  | `C_out × D × T` | `C_out × 1 × L`  |
//! | `TgmGrouped`               | `C × D × T`  | `C × D × T`     | `C × 1 × L`      |
//! | `TgmChannelCombine1x1`     | `C_in×D×T`   | `C_out × D × T` | `C_out × C_in × L` + 1×1, ReLU |
//! | `TgmChannelCombineSoft`    | `C_in×D×T`   | `C_out × D × T` | `C_out × C_in × L` + softmax weights |
//! | `TcUnconstrained`          | `C_in×D×T`   | `C_out × D × T` | free `C_out × C_in × L` + 1×1, ReLU |

use ndarray::{s, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, Ix2, Ix3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernel::{
    attention_weights, kernel_backward, random_filters, softmax_backward, GaussianParams, GaussianSharing,
    KernelBank, KernelBasis, KernelGrads, MixtureWeights, OMEGA_INIT_STD,
};
use crate::{ParamTensor, Parameterized, Result, Scalar, TgmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerForm {
    Conv1dStandard,
    Conv1dSharedGaussian,
    Conv1dPerChannelGaussian,
    TgmSingle,
    TgmGrouped,
    TgmChannelCombine1x1,
    TgmChannelCombineSoft,
    TcUnconstrained,
}

impl LayerForm {
    pub const ALL: [LayerForm; 8] = [
        LayerForm::Conv1dStandard,
        LayerForm::Conv1dSharedGaussian,
        LayerForm::Conv1dPerChannelGaussian,
        LayerForm::TgmSingle,
        LayerForm::TgmGrouped,
        LayerForm::TgmChannelCombine1x1,
        LayerForm::TgmChannelCombineSoft,
        LayerForm::TcUnconstrained,
    ];

    /// Forms that collapse the feature axis into output channels.
    pub fn is_conv1d(self) -> bool {
        matches!(
            self,
            LayerForm::Conv1dStandard | LayerForm::Conv1dSharedGaussian | LayerForm::Conv1dPerChannelGaussian
        )
    }

    pub fn combine(self) -> Option<Combine> {
        match self {
            LayerForm::TgmChannelCombine1x1 | LayerForm::TcUnconstrained => Some(Combine::OneByOneRelu),
            LayerForm::TgmChannelCombineSoft => Some(Combine::SoftAttention),
            _ => None,
        }
    }

    /// Forms whose kernels are raw taps by definition.
    pub fn requires_free_taps(self) -> bool {
        matches!(self, LayerForm::Conv1dStandard | LayerForm::TcUnconstrained)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelSource {
    /// Centers, variances and mixture logits are all learned.
    LearnedGaussianMixture,
    /// Gaussians frozen at initialization; only mixture logits learn.
    FixedGaussianMixture,
    /// Random unit-sum filters frozen at initialization; mixture logits learn.
    FixedRandomFilters,
    /// Raw `L`-tap kernels, no mixture structure.
    UnconstrainedFree,
}

impl KernelSource {
    pub const ALL: [KernelSource; 4] = [
        KernelSource::LearnedGaussianMixture,
        KernelSource::FixedGaussianMixture,
        KernelSource::FixedRandomFilters,
        KernelSource::UnconstrainedFree,
    ];

    pub fn is_gaussian(self) -> bool {
        matches!(
            self,
            KernelSource::LearnedGaussianMixture | KernelSource::FixedGaussianMixture
        )
    }
}

/// How per-(output, input) responses are fused into one output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// `max(0, sum_j w[i, j] * G[i, j])`, no bias.
    OneByOneRelu,
    /// `sum_j softmax_j(w[i, ·]) * G[i, j]`, no nonlinearity.
    SoftAttention,
}

fn default_num_gaussians() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub form: LayerForm,
    pub source: KernelSource,
    pub c_in: usize,
    pub c_out: usize,
    /// Temporal kernel length.
    #[serde(rename = "L")]
    pub kernel_len: usize,
    /// Gaussians (or random filters) per mixture.
    #[serde(rename = "M", default = "default_num_gaussians")]
    pub num_gaussians: usize,
    /// Feature dimensionality of the layer input.
    pub d: usize,
    #[serde(default)]
    pub sharing: GaussianSharing,
}

impl LayerConfig {
    pub fn new(form: LayerForm, source: KernelSource, c_in: usize, c_out: usize, kernel_len: usize, num_gaussians: usize, d: usize) -> Self {
        Self {
            form,
            source,
            c_in,
            c_out,
            kernel_len,
            num_gaussians,
            d,
            sharing: GaussianSharing::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("L", self.kernel_len),
            ("M", self.num_gaussians),
            ("d", self.d),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(TgmError::config(format!("{:?}: {name} must be positive", self.form)));
        }
        let form = self.form;
        if form.requires_free_taps() && self.source != KernelSource::UnconstrainedFree {
            return Err(TgmError::config(format!(
                "{form:?} learns raw taps; source must be UnconstrainedFree, got {:?}",
                self.source
            )));
        }
        if (form.is_conv1d() || form == LayerForm::TgmSingle) && self.c_in != 1 {
            return Err(TgmError::config(format!("{form:?} requires c_in = 1, got {}", self.c_in)));
        }
        if form == LayerForm::TgmGrouped && self.c_in != self.c_out {
            return Err(TgmError::config(format!(
                "TgmGrouped requires c_in = c_out, got {} and {}",
                self.c_in, self.c_out
            )));
        }
        if self.sharing == GaussianSharing::PerMixture && !self.source.is_gaussian() {
            return Err(TgmError::config("PerMixture sharing needs a Gaussian kernel source"));
        }
        Ok(())
    }

    /// Kernel grid `(rows, cols)`; one mixed kernel per cell.
    pub fn grid(&self) -> (usize, usize) {
        match self.form {
            LayerForm::Conv1dStandard | LayerForm::Conv1dPerChannelGaussian => (self.c_out, self.d),
            LayerForm::Conv1dSharedGaussian | LayerForm::TgmSingle | LayerForm::TgmGrouped => (self.c_out, 1),
            LayerForm::TgmChannelCombine1x1 | LayerForm::TgmChannelCombineSoft | LayerForm::TcUnconstrained => {
                (self.c_out, self.c_in)
            }
        }
    }

    pub fn num_mixtures(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    fn gaussian_banks(&self) -> usize {
        match self.sharing {
            GaussianSharing::Shared => 1,
            GaussianSharing::PerMixture => self.num_mixtures(),
        }
    }

    /// Output `(channels, feature dim)`.
    pub fn output_dims(&self) -> (usize, usize) {
        if self.form.is_conv1d() {
            (1, self.c_out)
        } else {
            (self.c_out, self.d)
        }
    }

    /// Learnable parameters of this layer; frozen tensors are not counted.
    pub fn param_count(&self) -> usize {
        let mixtures = self.num_mixtures();
        let m = self.num_gaussians;
        let kernel = match self.source {
            KernelSource::LearnedGaussianMixture => 2 * m * self.gaussian_banks() + mixtures * m,
            KernelSource::FixedGaussianMixture | KernelSource::FixedRandomFilters => mixtures * m,
            KernelSource::UnconstrainedFree => mixtures * self.kernel_len,
        };
        let combine = if self.form.combine().is_some() {
            self.c_in * self.c_out
        } else {
            0
        };
        kernel + combine
    }
}

// --- temporal correlation primitives -------------------------------------

fn tap_range(t_len: usize, offset: isize) -> Option<(usize, usize)> {
    let t = t_len as isize;
    let lo = (-offset).max(0);
    let hi = t.min(t - offset);
    (lo < hi).then_some((lo as usize, hi as usize))
}

/// `y[t] += sum_l x[t + l - L/2] * k[l]`, zero outside `[0, T)`.
fn correlate_into<S: Scalar>(x: &[S], k: &[S], y: &mut [S]) {
    let half = (k.len() / 2) as isize;
    for (l, &w) in k.iter().enumerate() {
        let offset = l as isize - half;
        if let Some((lo, hi)) = tap_range(x.len(), offset) {
            let src = &x[(lo as isize + offset) as usize..(hi as isize + offset) as usize];
            for (yv, &xv) in y[lo..hi].iter_mut().zip(src) {
                *yv += w * xv;
            }
        }
    }
}

/// Adjoint of [`correlate_into`]: accumulates into `dx` and `dk`.
fn correlate_adjoint<S: Scalar>(x: &[S], k: &[S], dy: &[S], dx: &mut [S], dk: &mut [S]) {
    let half = (k.len() / 2) as isize;
    for (l, &w) in k.iter().enumerate() {
        let offset = l as isize - half;
        if let Some((lo, hi)) = tap_range(x.len(), offset) {
            let src = (lo as isize + offset) as usize..(hi as isize + offset) as usize;
            let dy_part = &dy[lo..hi];
            let mut acc = S::zero();
            for (&xv, &g) in x[src.clone()].iter().zip(dy_part) {
                acc += xv * g;
            }
            dk[l] += acc;
            for (dxv, &g) in dx[src].iter_mut().zip(dy_part) {
                *dxv += w * g;
            }
        }
    }
}

fn correlate_add<S: Scalar>(x: ArrayView1<S>, k: ArrayView1<S>, mut y: ArrayViewMut1<S>) {
    let (x, k) = (x.as_standard_layout(), k.as_standard_layout());
    let (x, k) = (x.as_slice().expect("contiguous"), k.as_slice().expect("contiguous"));
    match y.as_slice_mut() {
        Some(ys) => correlate_into(x, k, ys),
        None => {
            let mut buf = y.to_vec();
            correlate_into(x, k, &mut buf);
            y.assign(&ndarray::ArrayView1::from(&buf[..]));
        }
    }
}

fn correlate_backward<S: Scalar>(
    x: ArrayView1<S>,
    k: ArrayView1<S>,
    dy: ArrayView1<S>,
    mut dx: ArrayViewMut1<S>,
    mut dk: ArrayViewMut1<S>,
) {
    let (x, k, dy) = (x.as_standard_layout(), k.as_standard_layout(), dy.as_standard_layout());
    let (x, k, dy) = (
        x.as_slice().expect("contiguous"),
        k.as_slice().expect("contiguous"),
        dy.as_slice().expect("contiguous"),
    );
    match (dx.as_slice_mut(), dk.as_slice_mut()) {
        (Some(dxs), Some(dks)) => correlate_adjoint(x, k, dy, dxs, dks),
        _ => {
            let mut dx_buf = dx.to_vec();
            let mut dk_buf = dk.to_vec();
            correlate_adjoint(x, k, dy, &mut dx_buf, &mut dk_buf);
            dx.assign(&ndarray::ArrayView1::from(&dx_buf[..]));
            dk.assign(&ndarray::ArrayView1::from(&dk_buf[..]));
        }
    }
}

fn check_time(t: usize) -> Result<()> {
    if t == 0 {
        return Err(TgmError::config("input must have at least one frame"));
    }
    Ok(())
}

/// Standard 1-D convolution: `out[c, t] = sum_d sum_l x[d, t + l - L/2] * k[c, d, l]`.
///
/// A kernel grid with a single column is shared across every feature row.
pub fn conv1d_forward<S: Scalar>(input: ArrayView2<S>, kernels: ArrayView3<S>) -> Result<Array2<S>> {
    let (d, t) = input.dim();
    let (c, kd, _) = kernels.dim();
    check_time(t)?;
    if kd != d && kd != 1 {
        return Err(TgmError::config(format!("kernels span {kd} features, input has {d}")));
    }
    let mut out = Array2::zeros((c, t));
    for ci in 0..c {
        for di in 0..d {
            let k = kernels.slice(s![ci, if kd == 1 { 0 } else { di }, ..]);
            correlate_add(input.row(di), k, out.row_mut(ci));
        }
    }
    Ok(out)
}

/// Applies each `1 × L` kernel along time for every feature row of `v`.
pub fn tgm_single_forward<S: Scalar>(v: ArrayView2<S>, kernels: ArrayView2<S>) -> Array3<S> {
    let (d, t) = v.dim();
    let c = kernels.nrows();
    let mut out = Array3::zeros((c, d, t));
    for ci in 0..c {
        for di in 0..d {
            correlate_add(v.row(di), kernels.row(ci), out.slice_mut(s![ci, di, ..]));
        }
    }
    out
}

/// Grouped convolution with one group per channel: `s_i = f_i * k_i`.
pub fn tgm_grouped_forward<S: Scalar>(f: ArrayView3<S>, kernels: ArrayView2<S>) -> Result<Array3<S>> {
    let (c, d, t) = f.dim();
    check_time(t)?;
    if kernels.nrows() != c {
        return Err(TgmError::config(format!(
            "grouped layer needs c_in = c_out, got {c} inputs and {} kernels",
            kernels.nrows()
        )));
    }
    let mut out = Array3::zeros((c, d, t));
    for ci in 0..c {
        for di in 0..d {
            correlate_add(f.slice(s![ci, di, ..]), kernels.row(ci), out.slice_mut(s![ci, di, ..]));
        }
    }
    Ok(out)
}

fn combine_weights<S: Scalar>(w: ArrayView2<S>, combine: Combine) -> Array2<S> {
    match combine {
        Combine::OneByOneRelu => w.to_owned(),
        Combine::SoftAttention => attention_weights(w),
    }
}

/// Pre-activation `sum_j mix[i, j] * (f_j * k[i, j])`.
fn combine_pre<S: Scalar>(f: ArrayView3<S>, kernels: ArrayView3<S>, mix: ArrayView2<S>) -> Array3<S> {
    let (c_in, d, t) = f.dim();
    let c_out = kernels.dim().0;
    let f = f.as_standard_layout();
    let fs = f.as_slice().expect("standard layout");
    let mut pre = Array3::zeros((c_out, d, t));
    let ps = pre.as_slice_mut().expect("fresh array");
    for i in 0..c_out {
        for j in 0..c_in {
            let k_eff = kernels.slice(s![i, j, ..]).mapv(|v| v * mix[[i, j]]);
            let k_eff = k_eff.as_slice().expect("fresh array");
            for di in 0..d {
                let row = (j * d + di) * t;
                let out = (i * d + di) * t;
                correlate_into(&fs[row..row + t], k_eff, &mut ps[out..out + t]);
            }
        }
    }
    pre
}

fn relu<S: Scalar>(x: &Array3<S>) -> Array3<S> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

/// Channel-combination layer: per-pair kernel responses fused by `w`.
pub fn tgm_channel_combine_forward<S: Scalar>(
    f: ArrayView3<S>,
    kernels: ArrayView3<S>,
    w: ArrayView2<S>,
    combine: Combine,
) -> Result<Array3<S>> {
    let (c_in, _, t) = f.dim();
    check_time(t)?;
    let (c_out, kc, _) = kernels.dim();
    if kc != c_in || w.dim() != (c_out, c_in) {
        return Err(TgmError::config(format!(
            "channel combine: input has {c_in} channels, kernels {:?}, weights {:?}",
            kernels.dim(),
            w.dim()
        )));
    }
    let mix = combine_weights(w, combine);
    let pre = combine_pre(f, kernels, mix.view());
    Ok(match combine {
        Combine::OneByOneRelu => relu(&pre),
        Combine::SoftAttention => pre,
    })
}

// --- layer ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum KernelTensors<S> {
    Gaussian {
        mu_hat: ParamTensor<S>,
        sigma_hat: ParamTensor<S>,
        omega: ParamTensor<S>,
    },
    Filters {
        filters: ParamTensor<S>,
        omega: ParamTensor<S>,
    },
    Free {
        taps: ParamTensor<S>,
    },
}

/// One temporal layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    config: LayerConfig,
    kernel: KernelTensors<S>,
    combine: Option<ParamTensor<S>>,
}

#[derive(Debug, Clone)]
struct LayerCache<S> {
    input: Array3<S>,
    bank: KernelBank<S>,
    mix: Option<Array2<S>>,
    pre: Option<Array3<S>>,
    relu: bool,
}

/// Output of [`Layer::forward`], with the state needed for the backward pass
/// when caching was requested.
#[derive(Debug, Clone)]
pub struct LayerForward<S> {
    pub output: Array3<S>,
    cache: Option<LayerCache<S>>,
}

impl<S: Scalar> LayerForward<S> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Smallest `|pre-activation|` of a ReLU layer, from the cache. `None`
    /// for layers without a ReLU or without a cache.
    pub fn relu_margin(&self) -> Option<S> {
        let cache = self.cache.as_ref().filter(|c| c.relu)?;
        let pre = cache.pre.as_ref()?;
        pre.iter().map(|v| v.abs()).reduce(|a, b| a.min(b))
    }
}

/// Gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<S> {
    pub d_input: Array3<S>,
    /// One entry per tensor of [`Layer::tensors`], same shapes; frozen
    /// tensors get zeros.
    pub d_params: Vec<ArrayD<S>>,
}

fn normal_array<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<S> {
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(shape, || S::lit(normal.sample(rng)))
}

fn view2<S>(t: &ParamTensor<S>) -> ArrayView2<'_, S> {
    t.values.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

fn view3<S>(t: &ParamTensor<S>) -> ArrayView3<'_, S> {
    t.values.view().into_dimensionality::<Ix3>().expect("3-D tensor")
}

impl<S: Scalar> Layer<S> {
    /// Draws fresh parameters. Tensor names are `{prefix}.{tensor}`.
    pub fn new<R: Rng + ?Sized>(config: LayerConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (rows, cols) = config.grid();
        let mixtures = rows * cols;
        let (m, len) = (config.num_gaussians, config.kernel_len);
        let name = |t: &str| format!("{prefix}.{t}");
        let kernel = match config.source {
            KernelSource::LearnedGaussianMixture | KernelSource::FixedGaussianMixture => {
                let learn = config.source == KernelSource::LearnedGaussianMixture;
                let g = GaussianParams::<S>::init(config.gaussian_banks(), m, len, rng);
                let w = MixtureWeights::<S>::init(mixtures, m, rng);
                KernelTensors::Gaussian {
                    mu_hat: ParamTensor::new(name("mu_hat"), g.mu_hat.into_dyn(), learn),
                    sigma_hat: ParamTensor::new(name("sigma_hat"), g.sigma_hat.into_dyn(), learn),
                    omega: ParamTensor::new(name("omega"), w.omega.into_dyn(), true),
                }
            }
            KernelSource::FixedRandomFilters => {
                let filters = random_filters::<S, R>(m, len, rng);
                let w = MixtureWeights::<S>::init(mixtures, m, rng);
                KernelTensors::Filters {
                    filters: ParamTensor::new(name("filters"), filters.into_dyn(), false),
                    omega: ParamTensor::new(name("omega"), w.omega.into_dyn(), true),
                }
            }
            KernelSource::UnconstrainedFree => {
                let fan_in = if config.form.is_conv1d() { cols * len } else { len };
                let std = 1.0 / (fan_in as f64).sqrt();
                KernelTensors::Free {
                    taps: ParamTensor::new(name("taps"), normal_array(&[rows, cols, len], std, rng), true),
                }
            }
        };
        let combine = config.form.combine().map(|c| {
            let std = match c {
                Combine::OneByOneRelu => (2.0 / config.c_in as f64).sqrt(),
                Combine::SoftAttention => OMEGA_INIT_STD,
            };
            ParamTensor::new(name("combine"), normal_array(&[config.c_out, config.c_in], std, rng), true)
        });
        Ok(Self {
            config,
            kernel,
            combine,
        })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.config
    }

    /// Materializes the kernels from the current parameters.
    pub fn kernel_bank(&self, keep_cache: bool) -> Result<KernelBank<S>> {
        let (rows, cols) = self.config.grid();
        match &self.kernel {
            KernelTensors::Gaussian {
                mu_hat,
                sigma_hat,
                omega,
            } => {
                let params = GaussianParams::new(
                    view2(mu_hat).to_owned(),
                    view2(sigma_hat).to_owned(),
                    self.config.kernel_len,
                )?;
                let weights = MixtureWeights::new(view2(omega).to_owned())?;
                KernelBank::mixture(KernelBasis::Gaussian(params), &weights, rows, cols, keep_cache)
            }
            KernelTensors::Filters { filters, omega } => {
                let weights = MixtureWeights::new(view2(omega).to_owned())?;
                KernelBank::mixture(KernelBasis::Filters(view2(filters).to_owned()), &weights, rows, cols, keep_cache)
            }
            KernelTensors::Free { taps } => Ok(KernelBank::free(view3(taps).to_owned(), keep_cache)),
        }
    }

    fn check_input(&self, input: &ArrayView3<S>) -> Result<()> {
        let (c, d, t) = input.dim();
        if c != self.config.c_in || d != self.config.d {
            return Err(TgmError::config(format!(
                "{:?} expects {}×{}×T input, got {c}×{d}×{t}",
                self.config.form, self.config.c_in, self.config.d
            )));
        }
        check_time(t)
    }

    pub fn forward(&self, input: ArrayView3<S>, keep_cache: bool) -> Result<LayerForward<S>> {
        self.check_input(&input)?;
        let bank = self.kernel_bank(keep_cache)?;
        let k = bank.kernels().view();
        let form = self.config.form;
        let (mut mix, mut pre) = (None, None);
        let output = if form.is_conv1d() {
            let out = conv1d_forward(input.slice(s![0, .., ..]), k)?;
            out.insert_axis(ndarray::Axis(0))
        } else if let Some(combine) = form.combine() {
            let w = view2(self.combine.as_ref().expect("combine forms own weights"));
            let m = combine_weights(w, combine);
            let p = combine_pre(input, k, m.view());
            let out = match combine {
                Combine::OneByOneRelu => relu(&p),
                Combine::SoftAttention => p.clone(),
            };
            mix = Some(m);
            pre = Some(p);
            out
        } else if form == LayerForm::TgmSingle {
            tgm_single_forward(input.slice(s![0, .., ..]), k.slice(s![.., 0, ..]))
        } else {
            tgm_grouped_forward(input, k.slice(s![.., 0, ..]))?
        };
        let cache = keep_cache.then(|| LayerCache {
            input: input.as_standard_layout().into_owned(),
            bank,
            mix,
            pre,
            relu: form.combine() == Some(Combine::OneByOneRelu),
        });
        Ok(LayerForward { output, cache })
    }

    /// Exact gradients given `d_output`, the gradient of a scalar loss with
    /// respect to this layer's output.
    pub fn backward(&self, forward: &LayerForward<S>, d_output: ArrayView3<S>) -> Result<LayerGrads<S>> {
        let cache = forward
            .cache
            .as_ref()
            .ok_or_else(|| TgmError::usage("layer backward needs a forward pass run with keep_cache"))?;
        if d_output.dim() != forward.output.dim() {
            return Err(TgmError::usage(format!(
                "d_output {:?} does not match layer output {:?}",
                d_output.dim(),
                forward.output.dim()
            )));
        }
        let x = cache.input.view();
        let k = cache.bank.kernels();
        let (c_in, d, t) = x.dim();
        let mut d_input = Array3::zeros((c_in, d, t));
        let mut d_k = Array3::zeros(k.raw_dim());
        let form = self.config.form;
        let mut d_combine = None;

        if form.is_conv1d() {
            let kd = k.dim().1;
            for ci in 0..self.config.c_out {
                let dy = d_output.slice(s![0, ci, ..]);
                for di in 0..d {
                    let col = if kd == 1 { 0 } else { di };
                    correlate_backward(
                        x.slice(s![0, di, ..]),
                        k.slice(s![ci, col, ..]),
                        dy,
                        d_input.slice_mut(s![0, di, ..]),
                        d_k.slice_mut(s![ci, col, ..]),
                    );
                }
            }
        } else if let Some(combine) = form.combine() {
            let mix = cache.mix.as_ref().expect("cached mix");
            let pre = cache.pre.as_ref().expect("cached pre-activation");
            let d_pre = match combine {
                // subgradient 0 at the kink
                Combine::OneByOneRelu => {
                    let mut g = d_output.to_owned();
                    g.zip_mut_with(pre, |g, &p| {
                        if p <= S::zero() {
                            *g = S::zero();
                        }
                    });
                    g
                }
                Combine::SoftAttention => d_output.to_owned(),
            };
            let c_out = self.config.c_out;
            let mut d_mix = Array2::zeros((c_out, c_in));
            let xs = x.as_slice().expect("cached input is standard layout");
            let gs = d_pre.as_slice().expect("fresh array");
            let dxs = d_input.as_slice_mut().expect("fresh array");
            for i in 0..c_out {
                for j in 0..c_in {
                    let k_ij = k.slice(s![i, j, ..]);
                    let k_eff = k_ij.mapv(|v| v * mix[[i, j]]);
                    let k_eff = k_eff.as_slice().expect("fresh array");
                    let mut d_eff = ndarray::Array1::zeros(k_eff.len());
                    let de = d_eff.as_slice_mut().expect("fresh array");
                    for di in 0..d {
                        let row = (j * d + di) * t;
                        let out = (i * d + di) * t;
                        correlate_adjoint(&xs[row..row + t], k_eff, &gs[out..out + t], &mut dxs[row..row + t], de);
                    }
                    d_mix[[i, j]] = d_eff.dot(&k_ij);
                    d_k.slice_mut(s![i, j, ..]).scaled_add(mix[[i, j]], &d_eff);
                }
            }
            d_combine = Some(match combine {
                Combine::OneByOneRelu => d_mix,
                Combine::SoftAttention => softmax_backward(mix.view(), d_mix.view()),
            });
        } else {
            let single = form == LayerForm::TgmSingle;
            for ci in 0..self.config.c_out {
                let src = if single { 0 } else { ci };
                for di in 0..d {
                    correlate_backward(
                        x.slice(s![src, di, ..]),
                        k.slice(s![ci, 0, ..]),
                        d_output.slice(s![ci, di, ..]),
                        d_input.slice_mut(s![src, di, ..]),
                        d_k.slice_mut(s![ci, 0, ..]),
                    );
                }
            }
        }

        let mut d_params: Vec<ArrayD<S>> = match kernel_backward(d_k.view(), &cache.bank)? {
            KernelGrads::Gaussian {
                d_mu_hat,
                d_sigma_hat,
                d_omega,
            } => vec![d_mu_hat.into_dyn(), d_sigma_hat.into_dyn(), d_omega.into_dyn()],
            KernelGrads::Filters { d_omega } => {
                let KernelTensors::Filters { filters, .. } = &self.kernel else {
                    unreachable!("filter grads come from filter banks")
                };
                vec![filters.zeros_like(), d_omega.into_dyn()]
            }
            KernelGrads::Free { d_taps } => vec![d_taps.into_dyn()],
        };
        if let Some(g) = d_combine {
            d_params.push(g.into_dyn());
        }
        for (grad, tensor) in d_params.iter_mut().zip(self.tensors()) {
            if !tensor.trainable {
                grad.fill(S::zero());
            }
        }
        Ok(LayerGrads { d_input, d_params })
    }
}

impl<S: Scalar> Parameterized<S> for Layer<S> {
    fn tensors(&self) -> Vec<&ParamTensor<S>> {
        let mut out: Vec<&ParamTensor<S>> = match &self.kernel {
            KernelTensors::Gaussian {
                mu_hat,
                sigma_hat,
                omega,
            } => vec![mu_hat, sigma_hat, omega],
            KernelTensors::Filters { filters, omega } => vec![filters, omega],
            KernelTensors::Free { taps } => vec![taps],
        };
        out.extend(self.combine.as_ref());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out: Vec<&mut ParamTensor<S>> = match &mut self.kernel {
            KernelTensors::Gaussian {
                mu_hat,
                sigma_hat,
                omega,
            } => vec![mu_hat, sigma_hat, omega],
            KernelTensors::Filters { filters, omega } => vec![filters, omega],
            KernelTensors::Free { taps } => vec![taps],
        };
        out.extend(self.combine.as_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv1d_examples() {
        let x = array![[1.0_f64, 2.0, 3.0]];
        let k = Array3::from_elem((1, 1, 3), 1.0 / 3.0);
        let out = conv1d_forward(x.view(), k.view()).unwrap();
        // brute force: [(0+1+2)/3, (1+2+3)/3, (2+3+0)/3]
        let expect = [1.0, 2.0, 5.0 / 3.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let x = array![[1.0, -2.0, 4.0], [7.0, 8.0, 9.0]];
        let mut delta = Array3::zeros((2, 2, 1));
        delta[[0, 0, 0]] = 1.0;
        delta[[1, 0, 0]] = 1.0;
        let out = conv1d_forward(x.view(), delta.view()).unwrap();
        assert_eq!(out.row(0), x.row(0));
        assert_eq!(out.row(1), x.row(0));

        let zero = conv1d_forward(Array2::<f64>::zeros((2, 5)).view(), Array3::ones((3, 2, 3)).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(conv1d_forward(x.view(), Array3::ones((1, 3, 3)).view()).is_err());
    }

    #[test]
    fn single_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = normal_array::<f64, _>(&[3, 9], 1.0, &mut rng).into_dimensionality::<Ix2>().unwrap();
        let delta = array![[0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0]];
        let s = tgm_single_forward(v.view(), delta.view());
        assert_eq!(s.slice(s![0, .., ..]), v);
        assert_eq!(s.slice(s![0, .., ..]), s.slice(s![1, .., ..]));

        let constant = Array2::from_elem((2, 10), 3.5_f64);
        let k = array![[0.1, 0.2, 0.4, 0.2, 0.1]];
        let s = tgm_single_forward(constant.view(), k.view());
        for t in 2..8 {
            assert!((s[[0, 1, t]] - 3.5).abs() < 1e-14);
        }
    }

    #[test]
    fn even_length_kernel_centers_at_half() {
        // L = 2, centre tap 1 reads frame t, tap 0 reads t - 1.
        let x = array![[1.0, 10.0, 100.0]];
        let out = tgm_single_forward(x.view(), array![[1.0, 0.0]].view());
        assert_eq!(out.slice(s![0, 0, ..]), array![0.0, 1.0, 10.0]);
    }

    #[test]
    fn grouped_rejects_mismatch() {
        let f = Array3::<f64>::zeros((2, 3, 4));
        assert!(tgm_grouped_forward(f.view(), Array2::ones((3, 3)).view()).is_err());
        let cfg = LayerConfig::new(LayerForm::TgmGrouped, KernelSource::LearnedGaussianMixture, 2, 3, 3, 2, 4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn channel_combine_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = normal_array::<f64, _>(&[1, 3, 6], 1.0, &mut rng)
            .mapv(f64::abs)
            .into_dimensionality::<Ix3>()
            .unwrap();
        let delta = array![[[0.0, 1.0, 0.0]]];
        let out = tgm_channel_combine_forward(f.view(), delta.view(), array![[1.0]].view(), Combine::OneByOneRelu).unwrap();
        assert_eq!(out, f);

        let f2 = f.broadcast((2, 3, 6)).unwrap().to_owned();
        let k = Array3::from_elem((2, 2, 3), 1.0 / 3.0);
        let out = tgm_channel_combine_forward(f2.view(), k.view(), Array2::from_elem((2, 2), -1.0).view(), Combine::OneByOneRelu)
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        // soft attention with equal logits averages the inputs and keeps sign
        let neg = f2.mapv(|v| -v);
        let out = tgm_channel_combine_forward(neg.view(), k.view(), Array2::zeros((2, 2)).view(), Combine::SoftAttention).unwrap();
        assert!(out.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let cfg = LayerConfig::new(LayerForm::TgmChannelCombine1x1, KernelSource::UnconstrainedFree, 1, 1, 1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = Layer::<f64>::new(cfg, "l", &mut rng).unwrap();
        for t in layer.tensors_mut() {
            t.values.fill(1.0);
        }
        let x = Array3::zeros((1, 1, 3));
        let fwd = layer.forward(x.view(), true).unwrap();
        let grads = layer.backward(&fwd, Array3::ones((1, 1, 3)).view()).unwrap();
        assert!(grads.d_input.iter().all(|&v| v == 0.0));
        assert!(grads.d_params.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_requires_cache() {
        let cfg = LayerConfig::new(LayerForm::TgmSingle, KernelSource::LearnedGaussianMixture, 1, 2, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Layer::<f64>::new(cfg, "l", &mut rng).unwrap();
        let x = Array3::zeros((1, 2, 5));
        let fwd = layer.forward(x.view(), false).unwrap();
        assert!(matches!(layer.backward(&fwd, fwd.output.view()), Err(TgmError::Usage(_))));
    }

    #[test]
    fn zero_upstream_zero_grads_all_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for form in LayerForm::ALL {
            for source in KernelSource::ALL {
                let (c_in, c_out) = match form {
                    f if f.is_conv1d() || f == LayerForm::TgmSingle => (1, 3),
                    LayerForm::TgmGrouped => (3, 3),
                    _ => (2, 3),
                };
                let cfg = LayerConfig::new(form, source, c_in, c_out, 3, 2, 4);
                let Ok(layer) = Layer::<f64>::new(cfg, "l", &mut rng) else {
                    assert!(form.requires_free_taps() && source != KernelSource::UnconstrainedFree);
                    continue;
                };
                let x = normal_array::<f64, _>(&[c_in, 4, 7], 1.0, &mut rng).into_dimensionality::<Ix3>().unwrap();
                let fwd = layer.forward(x.view(), true).unwrap();
                let (oc, od) = cfg.output_dims();
                assert_eq!(fwd.output.dim(), (oc, od, 7), "{form:?}");
                let grads = layer.backward(&fwd, Array3::zeros(fwd.output.raw_dim()).view()).unwrap();
                assert!(grads.d_input.iter().all(|&v| v == 0.0));
                for (g, t) in grads.d_params.iter().zip(layer.tensors()) {
                    assert_eq!(g.shape(), t.shape());
                    assert!(g.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn param_count_examples() {
        let single = LayerConfig::new(LayerForm::TgmSingle, KernelSource::LearnedGaussianMixture, 1, 65, 15, 16, 1024);
        assert_eq!(single.param_count(), 1_072);
        let conv = LayerConfig::new(LayerForm::Conv1dStandard, KernelSource::UnconstrainedFree, 1, 65, 15, 16, 1024);
        assert_eq!(conv.param_count(), 998_400);
        let cc = LayerConfig::new(LayerForm::TgmChannelCombine1x1, KernelSource::LearnedGaussianMixture, 8, 5, 5, 4, 16);
        assert_eq!(cc.param_count(), 2 * 4 + 8 * 5 * 4 + 8 * 5);
        let tc = LayerConfig::new(LayerForm::TcUnconstrained, KernelSource::UnconstrainedFree, 8, 5, 5, 4, 16);
        assert_eq!(tc.param_count(), 5 * 8 * 5 + 8 * 5);
        let frozen = LayerConfig::new(LayerForm::TgmGrouped, KernelSource::FixedGaussianMixture, 6, 6, 5, 4, 16);
        assert_eq!(frozen.param_count(), 6 * 4);
        let mut per_mixture = LayerConfig::new(LayerForm::TgmGrouped, KernelSource::LearnedGaussianMixture, 6, 6, 5, 4, 16);
        per_mixture.sharing = GaussianSharing::PerMixture;
        assert_eq!(per_mixture.param_count(), 2 * 4 * 6 + 6 * 4);
    }

    #[test]
    fn param_count_matches_trainable_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for form in LayerForm::ALL {
            for source in KernelSource::ALL {
                let c_in = if form.is_conv1d() || form == LayerForm::TgmSingle { 1 } else { 3 };
                let cfg = LayerConfig::new(form, source, c_in, 3, 4, 2, 5);
                if let Ok(layer) = Layer::<f64>::new(cfg, "l", &mut rng) {
                    assert_eq!(layer.num_trainable(), cfg.param_count(), "{form:?} {source:?}");
                }
            }
        }
    }
}
