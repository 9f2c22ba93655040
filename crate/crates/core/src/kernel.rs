//! Gaussian-mixture temporal kernels.
//!
//! A bank of `M` temporal Gaussians is turned into normalized `1×L` rows,
//! and each output kernel is a softmax-weighted convex combination of those
//! rows. Every mixed kernel is therefore positive and sums to one.
//!
//! Banks come in two sharing layouts: one set of `M` Gaussians shared by
//! every mixture, or a private set of `M` Gaussians per mixture.

use std::fmt;
use std::io::{self, Write};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Result, Scalar, TgmError};

/// Lower clamp applied to the raw log-variance before exponentiation.
pub const SIGMA_HAT_MIN: f64 = -8.0;
/// Upper clamp applied to the raw log-variance before exponentiation.
pub const SIGMA_HAT_MAX: f64 = 8.0;

/// Standard deviation of the zero-mean normal used to draw mixture logits.
pub const OMEGA_INIT_STD: f64 = 0.01;

/// Maps an unconstrained center onto `[0, len - 1]`.
pub fn reparam_center<S: Scalar>(mu_hat: S, len: usize) -> S {
    let span = S::lit(len.saturating_sub(1) as f64);
    span * (mu_hat.tanh() + S::one()) / S::lit(2.0)
}

/// `d center / d mu_hat`.
fn center_derivative<S: Scalar>(mu_hat: S, len: usize) -> S {
    let span = S::lit(len.saturating_sub(1) as f64);
    let th = mu_hat.tanh();
    span * (S::one() - th * th) / S::lit(2.0)
}

/// Maps an unconstrained log-variance onto a strictly positive variance.
pub fn reparam_variance<S: Scalar>(sigma_hat: S) -> S {
    let clamped = sigma_hat
        .max(S::lit(SIGMA_HAT_MIN))
        .min(S::lit(SIGMA_HAT_MAX));
    clamped.exp()
}

/// `d variance / d sigma_hat`; zero outside the clamp interval.
fn variance_derivative<S: Scalar>(sigma_hat: S) -> S {
    if sigma_hat < S::lit(SIGMA_HAT_MIN) || sigma_hat > S::lit(SIGMA_HAT_MAX) {
        S::zero()
    } else {
        sigma_hat.exp()
    }
}

/// How Gaussians are shared among the mixtures of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GaussianSharing {
    /// One bank of `M` Gaussians feeds every mixture.
    #[default]
    Shared,
    /// Every mixture owns a private bank of `M` Gaussians.
    PerMixture,
}

/// Raw centers and log-variances, one row of `M` Gaussians per bank.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<S> {
    pub mu_hat: Array2<S>,
    pub sigma_hat: Array2<S>,
    /// Temporal kernel length `L`.
    pub len: usize,
}

impl<S: Scalar> GaussianParams<S> {
    pub fn new(mu_hat: Array2<S>, sigma_hat: Array2<S>, len: usize) -> Result<Self> {
        if mu_hat.dim() != sigma_hat.dim() {
            return Err(TgmError::config(format!(
                "mu_hat {:?} and sigma_hat {:?} differ in shape",
                mu_hat.dim(),
                sigma_hat.dim()
            )));
        }
        if len == 0 || mu_hat.ncols() == 0 || mu_hat.nrows() == 0 {
            return Err(TgmError::config("L, M and the bank count must be positive"));
        }
        Ok(Self {
            mu_hat,
            sigma_hat,
            len,
        })
    }

    /// Centers spread over the interior of the kernel (`u ~ U[0.05, 0.95]`,
    /// `mu_hat = atanh(2u - 1)`), unit variance.
    pub fn init<R: Rng + ?Sized>(banks: usize, num_gaussians: usize, len: usize, rng: &mut R) -> Self {
        let mu_hat = Array2::from_shape_simple_fn((banks, num_gaussians), || {
            let u: f64 = rng.random_range(0.05..0.95);
            S::lit((2.0 * u - 1.0).atanh())
        });
        Self {
            mu_hat,
            sigma_hat: Array2::zeros((banks, num_gaussians)),
            len,
        }
    }

    pub fn num_gaussians(&self) -> usize {
        self.mu_hat.ncols()
    }

    pub fn banks(&self) -> usize {
        self.mu_hat.nrows()
    }

    pub fn centers(&self) -> Array2<S> {
        self.mu_hat.mapv(|m| reparam_center(m, self.len))
    }

    pub fn variances(&self) -> Array2<S> {
        self.sigma_hat.mapv(reparam_variance)
    }
}

/// Raw attention logits `omega`, one row per mixture, `M` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights<S> {
    pub omega: Array2<S>,
}

impl<S: Scalar> MixtureWeights<S> {
    pub fn new(omega: Array2<S>) -> Result<Self> {
        if omega.ncols() == 0 || omega.nrows() == 0 {
            return Err(TgmError::config("mixture weights need at least one row and one column"));
        }
        Ok(Self { omega })
    }

    pub fn init<R: Rng + ?Sized>(mixtures: usize, num_gaussians: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, OMEGA_INIT_STD).expect("valid std");
        Self {
            omega: Array2::from_shape_simple_fn((mixtures, num_gaussians), || S::lit(normal.sample(rng))),
        }
    }
}

/// Random positive unit-sum filters, one per row.
pub fn random_filters<S: Scalar, R: Rng + ?Sized>(count: usize, len: usize, rng: &mut R) -> Array2<S> {
    let mut rows = Array2::from_shape_simple_fn((count, len), || {
        // (0, 1): resample the exact zero so every tap stays positive.
        let mut u: f64 = rng.random();
        while u == 0.0 {
            u = rng.random();
        }
        S::lit(u)
    });
    for mut row in rows.rows_mut() {
        let total: S = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    rows
}

fn gaussian_row<S: Scalar>(center: S, variance: S, out: &mut [S]) {
    let two_var = S::lit(2.0) * variance;
    let mut peak = S::neg_infinity();
    for (l, slot) in out.iter_mut().enumerate() {
        let diff = S::lit(l as f64) - center;
        *slot = -(diff * diff) / two_var;
        peak = peak.max(*slot);
    }
    // Shifting by the peak leaves the normalized row unchanged and keeps
    // the largest term at exactly 1, so the normalizer is at least 1.
    let mut z = S::zero();
    for slot in out.iter_mut() {
        *slot = (*slot - peak).exp();
        z += *slot;
    }
    assert!(z >= S::one(), "Gaussian normalizer below one: {z}");
    for slot in out.iter_mut() {
        *slot /= z;
    }
}

/// Normalized Gaussian rows: row `b * M + m` is Gaussian `m` of bank `b`.
pub fn gaussian_kernel_rows<S: Scalar>(params: &GaussianParams<S>) -> Array2<S> {
    let centers = params.centers();
    let variances = params.variances();
    let (banks, m) = centers.dim();
    let mut rows = Array2::zeros((banks * m, params.len));
    for b in 0..banks {
        for g in 0..m {
            let mut row = rows.row_mut(b * m + g);
            gaussian_row(
                centers[[b, g]],
                variances[[b, g]],
                row.as_slice_mut().expect("standard layout"),
            );
        }
    }
    rows
}

/// Row-wise softmax with max subtraction.
pub fn attention_weights<S: Scalar>(omega: ArrayView2<S>) -> Array2<S> {
    let mut a = omega.to_owned();
    for mut row in a.rows_mut() {
        let peak = row.fold(S::neg_infinity(), |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - peak).exp());
        let total: S = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    a
}

/// Backward of a row-wise softmax: `d_logit = a * (d_a - <a, d_a>)`.
pub(crate) fn softmax_backward<S: Scalar>(a: ArrayView2<S>, d_a: ArrayView2<S>) -> Array2<S> {
    let mut out = Array2::zeros(a.raw_dim());
    for ((a_row, g_row), mut o_row) in a.rows().into_iter().zip(d_a.rows()).zip(out.rows_mut()) {
        let dot: S = a_row.iter().zip(g_row.iter()).map(|(&x, &g)| x * g).sum();
        for ((o, &x), &g) in o_row.iter_mut().zip(a_row.iter()).zip(g_row.iter()) {
            *o = x * (g - dot);
        }
    }
    out
}

fn bank_count(mixtures: usize, m: usize, basis_rows: usize) -> Result<usize> {
    if m == 0 || !basis_rows.is_multiple_of(m) {
        return Err(TgmError::config(format!(
            "{basis_rows} basis rows cannot be grouped by M = {m}"
        )));
    }
    let banks = basis_rows / m;
    if banks != 1 && banks != mixtures {
        return Err(TgmError::config(format!(
            "{banks} Gaussian banks cannot feed {mixtures} mixtures"
        )));
    }
    Ok(banks)
}

/// Mixed kernels `k[i] = sum_m a[i, m] * basis[bank(i) * M + m]`.
pub fn mix_kernels<S: Scalar>(a: ArrayView2<S>, basis: ArrayView2<S>) -> Result<Array2<S>> {
    let (mixtures, m) = a.dim();
    let banks = bank_count(mixtures, m, basis.nrows())?;
    let len = basis.ncols();
    let mut k = Array2::zeros((mixtures, len));
    for i in 0..mixtures {
        let offset = if banks == 1 { 0 } else { i * m };
        let mut out = k.row_mut(i);
        for g in 0..m {
            out.scaled_add(a[[i, g]], &basis.row(offset + g));
        }
    }
    Ok(k)
}

/// What the mixtures of a bank are built from.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelBasis<S> {
    Gaussian(GaussianParams<S>),
    /// Fixed `M × L` rows (for instance [`random_filters`]).
    Filters(Array2<S>),
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum BankCache<S> {
    Mixture {
        gaussians: Option<GaussianParams<S>>,
        centers: Option<Array2<S>>,
        variances: Option<Array2<S>>,
        attention: Array2<S>,
    },
    Free,
}

/// Materialized kernels for one layer, indexed `(row, col, tap)`.
#[derive(Debug, Clone)]
pub struct KernelBank<S> {
    /// Per-Gaussian (or per-filter) normalized rows; `None` for free taps.
    pub k_hat: Option<Array2<S>>,
    pub k: Array3<S>,
    cache: Option<BankCache<S>>,
}

/// Gradients of a loss through kernel construction.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelGrads<S> {
    Gaussian {
        d_mu_hat: Array2<S>,
        d_sigma_hat: Array2<S>,
        d_omega: Array2<S>,
    },
    Filters {
        d_omega: Array2<S>,
    },
    Free {
        d_taps: Array3<S>,
    },
}

impl<S: Scalar> KernelBank<S> {
    /// Builds `rows × cols` mixed kernels from a basis and mixture weights
    /// with one weight row per kernel (row-major over `(row, col)`).
    pub fn mixture(
        basis: KernelBasis<S>,
        weights: &MixtureWeights<S>,
        rows: usize,
        cols: usize,
        keep_cache: bool,
    ) -> Result<Self> {
        let mixtures = rows * cols;
        if weights.omega.nrows() != mixtures {
            return Err(TgmError::config(format!(
                "{} weight rows for {rows}×{cols} kernels",
                weights.omega.nrows()
            )));
        }
        let (k_hat, gaussians, centers, variances) = match basis {
            KernelBasis::Gaussian(params) => {
                if params.num_gaussians() != weights.omega.ncols() {
                    return Err(TgmError::config("omega columns must equal M"));
                }
                let rows_hat = gaussian_kernel_rows(&params);
                let (c, v) = if keep_cache {
                    (Some(params.centers()), Some(params.variances()))
                } else {
                    (None, None)
                };
                (rows_hat, Some(params), c, v)
            }
            KernelBasis::Filters(filters) => {
                if filters.nrows() != weights.omega.ncols() {
                    return Err(TgmError::config("omega columns must equal the filter count"));
                }
                (filters, None, None, None)
            }
        };
        let attention = attention_weights(weights.omega.view());
        let mixed = mix_kernels(attention.view(), k_hat.view())?;
        let len = mixed.ncols();
        let k = mixed
            .into_shape_with_order((rows, cols, len))
            .expect("mixture count matches grid");
        let cache = keep_cache.then(|| BankCache::Mixture {
            gaussians,
            centers,
            variances,
            attention,
        });
        Ok(Self {
            k_hat: Some(k_hat),
            k,
            cache,
        })
    }

    /// Wraps unconstrained taps; the kernels are the taps themselves.
    pub fn free(taps: Array3<S>, keep_cache: bool) -> Self {
        Self {
            k_hat: None,
            k: taps,
            cache: keep_cache.then_some(BankCache::Free),
        }
    }

    pub fn kernels(&self) -> &Array3<S> {
        &self.k
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Attention weights cached by the forward pass, if any.
    pub fn attention(&self) -> Option<&Array2<S>> {
        match &self.cache {
            Some(BankCache::Mixture { attention, .. }) => Some(attention),
            _ => None,
        }
    }
}

/// Backpropagates `d_k` (same shape as `bank.k`) through the kernel
/// construction, including the normalizer of every Gaussian row, the
/// reparameterizations and the softmax.
pub fn kernel_backward<S: Scalar>(d_k: ArrayView3<S>, bank: &KernelBank<S>) -> Result<KernelGrads<S>> {
    let cache = bank
        .cache
        .as_ref()
        .ok_or_else(|| TgmError::usage("kernel_backward needs a bank built with keep_cache"))?;
    if d_k.dim() != bank.k.dim() {
        return Err(TgmError::usage(format!(
            "d_k shape {:?} differs from kernel shape {:?}",
            d_k.dim(),
            bank.k.dim()
        )));
    }
    let (gaussians, centers, variances, attention) = match cache {
        BankCache::Free => {
            return Ok(KernelGrads::Free {
                d_taps: d_k.to_owned(),
            })
        }
        BankCache::Mixture {
            gaussians,
            centers,
            variances,
            attention,
        } => (gaussians, centers, variances, attention),
    };
    let k_hat = bank.k_hat.as_ref().expect("mixture banks keep their basis");
    let (rows, cols, len) = bank.k.dim();
    let mixtures = rows * cols;
    let d_k = d_k
        .to_shape((mixtures, len))
        .expect("contiguous gradient reshape");
    let m = attention.ncols();
    let banks = bank_count(mixtures, m, k_hat.nrows())?;

    let mut d_a = Array2::zeros((mixtures, m));
    let mut d_basis = Array2::zeros(k_hat.raw_dim());
    for i in 0..mixtures {
        let offset = if banks == 1 { 0 } else { i * m };
        let g_row = d_k.row(i);
        for g in 0..m {
            let basis_row = k_hat.row(offset + g);
            d_a[[i, g]] = basis_row.dot(&g_row);
            d_basis.row_mut(offset + g).scaled_add(attention[[i, g]], &g_row);
        }
    }
    let d_omega = softmax_backward(attention.view(), d_a.view());

    let Some(params) = gaussians else {
        return Ok(KernelGrads::Filters { d_omega });
    };
    let centers = centers.as_ref().expect("cached with gaussians");
    let variances = variances.as_ref().expect("cached with gaussians");
    let mut d_mu_hat = Array2::zeros(params.mu_hat.raw_dim());
    let mut d_sigma_hat = Array2::zeros(params.sigma_hat.raw_dim());
    for b in 0..params.banks() {
        for g in 0..m {
            let row = b * m + g;
            let k_row = k_hat.row(row);
            let g_row = d_basis.row(row);
            // The row is a softmax over taps of e_l = -(l - mu)^2 / (2 var).
            let dot: S = k_row.dot(&g_row);
            let (mu, var) = (centers[[b, g]], variances[[b, g]]);
            let mut d_mu = S::zero();
            let mut d_var = S::zero();
            for l in 0..len {
                let d_e = k_row[l] * (g_row[l] - dot);
                let diff = S::lit(l as f64) - mu;
                d_mu += d_e * diff / var;
                d_var += d_e * diff * diff / (S::lit(2.0) * var * var);
            }
            d_mu_hat[[b, g]] = d_mu * center_derivative(params.mu_hat[[b, g]], params.len);
            d_sigma_hat[[b, g]] = d_var * variance_derivative(params.sigma_hat[[b, g]]);
        }
    }
    Ok(KernelGrads::Gaussian {
        d_mu_hat,
        d_sigma_hat,
        d_omega,
    })
}

/// A value at nine significant digits: `mantissa · 10^(exp - 8)`, with
/// `10^8 <= |mantissa| < 10^9` unless it is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Digits9 {
    mantissa: i64,
    exp: i32,
}

impl Digits9 {
    fn round(v: f64) -> Option<Self> {
        let text = format!("{v:.8e}");
        let (m, e) = text.split_once('e')?;
        Some(Self {
            mantissa: m.replace('.', "").parse().ok()?,
            exp: e.parse().ok()?,
        })
    }

    fn unit(self) -> f64 {
        10f64.powi(self.exp - 8)
    }

    fn value(self) -> f64 {
        self.to_string().parse().expect("formatted float parses")
    }

    fn step(self, up: bool) -> Self {
        let (mut m, mut exp) = (self.mantissa + if up { 1 } else { -1 }, self.exp);
        if m.abs() >= 1_000_000_000 {
            m /= 10;
            exp += 1;
        } else if m != 0 && m.abs() < 100_000_000 {
            m = m.signum() * 999_999_999;
            exp -= 1;
        }
        Self { mantissa: m, exp }
    }
}

impl fmt::Display for Digits9 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.mantissa < 0 { "-" } else { "" };
        let a = self.mantissa.unsigned_abs();
        write!(f, "{sign}{}.{:08}e{}", a / 100_000_000, a % 100_000_000, self.exp)
    }
}

/// Rounds a kernel to nine significant digits per tap, moving individual
/// taps by one unit in the last digit (largest remainders first) until the
/// printed taps sum to the true sum within half a unit of the largest tap.
fn round_kernel(values: &[f64]) -> Option<Vec<Digits9>> {
    let mut out = values.iter().map(|&v| Digits9::round(v)).collect::<Option<Vec<_>>>()?;
    let mut err: Vec<f64> = out.iter().zip(values).map(|(d, &v)| d.value() - v).collect();
    let mut excess: f64 = err.iter().sum();
    for _ in 0..4 * values.len() {
        let pick = (0..out.len())
            .filter(|&i| {
                let u = out[i].unit();
                out[i].mantissa != 0 && u > 0.0 && err[i] * excess > 0.0 && u < 2.0 * excess.abs()
            })
            .max_by(|&a, &b| (err[a].abs() / out[a].unit()).total_cmp(&(err[b].abs() / out[b].unit())));
        let Some(i) = pick else { break };
        out[i] = out[i].step(excess < 0.0);
        let e = out[i].value() - values[i];
        excess += e - err[i];
        err[i] = e;
    }
    Some(out)
}

/// Writes kernels as CSV (`out_channel,in_channel,tap,value`), one line per
/// tap, nine significant digits. Banks are written one after another.
///
/// Each kernel is rounded as a whole, so a unit-sum kernel read back from the
/// file still sums to 1 within about 5e-10.
pub fn write_kernel_csv<S: Scalar, W: Write>(mut out: W, banks: &[ArrayView3<S>]) -> io::Result<()> {
    writeln!(out, "out_channel,in_channel,tap,value")?;
    for bank in banks {
        let (rows, cols, _) = bank.dim();
        for i in 0..rows {
            for j in 0..cols {
                let values: Vec<f64> = bank.slice(s![i, j, ..]).iter().map(|v| v.to_f64_lossy()).collect();
                match round_kernel(&values) {
                    Some(digits) => {
                        for (l, d) in digits.iter().enumerate() {
                            writeln!(out, "{i},{j},{l},{d}")?;
                        }
                    }
                    None => {
                        for (l, v) in values.iter().enumerate() {
                            writeln!(out, "{i},{j},{l},{v:.8e}")?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Sum of taps of every kernel, shape `(rows, cols)`.
pub fn kernel_sums<S: Scalar>(k: ArrayView3<S>) -> Array2<S> {
    k.sum_axis(Axis(2))
}
