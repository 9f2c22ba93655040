//! Naive reference implementations used as oracles by the integration tests.
//! Everything here is written straight from the definitions with plain
//! loops and no shared code with the library.

#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayD, ArrayView3};
use rand::Rng;
use rand_distr::StandardNormal;
use tgm_core::layers::{KernelSource, Layer, LayerConfig, LayerForm};
use tgm_core::kernel::GaussianSharing;
use tgm_core::Parameterized;

fn tensor<'a>(layer: &'a Layer<f64>, suffix: &str) -> Option<&'a ArrayD<f64>> {
    layer
        .tensors()
        .into_iter()
        .find(|t| t.name.ends_with(suffix))
        .map(|t| &t.values)
}

pub fn naive_softmax_rows(w: &Array2<f64>) -> Array2<f64> {
    let mut out = w.clone();
    for mut row in out.rows_mut() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        row.mapv_inplace(|v| v.exp() / z);
    }
    out
}

/// `banks·M × L` normalized Gaussian rows.
pub fn naive_gaussians(mu_hat: &Array2<f64>, sigma_hat: &Array2<f64>, len: usize) -> Array2<f64> {
    let (banks, m) = mu_hat.dim();
    let mut out = Array2::zeros((banks * m, len));
    for b in 0..banks {
        for g in 0..m {
            let mu = (len as f64 - 1.0) * (mu_hat[[b, g]].tanh() + 1.0) / 2.0;
            let var = sigma_hat[[b, g]].clamp(-8.0, 8.0).exp();
            let mut z = 0.0;
            for l in 0..len {
                let v = (-(l as f64 - mu).powi(2) / (2.0 * var)).exp();
                out[[b * m + g, l]] = v;
                z += v;
            }
            for l in 0..len {
                out[[b * m + g, l]] /= z;
            }
        }
    }
    out
}

/// Kernels `(rows, cols, L)` of a layer, rebuilt from its raw tensors.
pub fn naive_kernels(layer: &Layer<f64>) -> Array3<f64> {
    let cfg = layer.config();
    let (rows, cols) = cfg.grid();
    let len = cfg.kernel_len;
    if let Some(taps) = tensor(layer, ".taps") {
        return taps.clone().into_dimensionality().unwrap();
    }
    let omega: Array2<f64> = tensor(layer, ".omega").unwrap().clone().into_dimensionality().unwrap();
    let m = omega.ncols();
    let basis: Array2<f64> = match tensor(layer, ".filters") {
        Some(f) => f.clone().into_dimensionality().unwrap(),
        None => naive_gaussians(
            &tensor(layer, ".mu_hat").unwrap().clone().into_dimensionality().unwrap(),
            &tensor(layer, ".sigma_hat").unwrap().clone().into_dimensionality().unwrap(),
            len,
        ),
    };
    let per_mixture = basis.nrows() > m;
    let a = naive_softmax_rows(&omega);
    let mut k = Array3::zeros((rows, cols, len));
    for i in 0..rows {
        for j in 0..cols {
            let r = i * cols + j;
            let base = if per_mixture { r * m } else { 0 };
            for l in 0..len {
                let mut acc = 0.0;
                for g in 0..m {
                    acc += a[[r, g]] * basis[[base + g, l]];
                }
                k[[i, j, l]] = acc;
            }
        }
    }
    k
}

/// `sum_l x[t + l - L/2] k[l]` with zeros outside the sequence.
fn tap(x: &[f64], k: &[f64], t: usize) -> f64 {
    let half = (k.len() / 2) as isize;
    let mut acc = 0.0;
    for (l, w) in k.iter().enumerate() {
        let src = t as isize + l as isize - half;
        if src >= 0 && (src as usize) < x.len() {
            acc += w * x[src as usize];
        }
    }
    acc
}

pub fn naive_forward(layer: &Layer<f64>, x: ArrayView3<f64>) -> Array3<f64> {
    let cfg = layer.config();
    let k = naive_kernels(layer);
    let (c_in, d, t) = x.dim();
    let row = |c: usize, di: usize| x.slice(ndarray::s![c, di, ..]).to_vec();
    let kern = |i: usize, j: usize| k.slice(ndarray::s![i, j, ..]).to_vec();
    match cfg.form {
        LayerForm::Conv1dStandard | LayerForm::Conv1dSharedGaussian | LayerForm::Conv1dPerChannelGaussian => {
            let shared = k.dim().1 == 1;
            let mut out = Array3::zeros((1, cfg.c_out, t));
            for c in 0..cfg.c_out {
                for di in 0..d {
                    let kk = kern(c, if shared { 0 } else { di });
                    let xr = row(0, di);
                    for tt in 0..t {
                        out[[0, c, tt]] += tap(&xr, &kk, tt);
                    }
                }
            }
            out
        }
        LayerForm::TgmSingle | LayerForm::TgmGrouped => {
            let mut out = Array3::zeros((cfg.c_out, d, t));
            for c in 0..cfg.c_out {
                let src = if cfg.form == LayerForm::TgmSingle { 0 } else { c };
                for di in 0..d {
                    let xr = row(src, di);
                    let kk = kern(c, 0);
                    for tt in 0..t {
                        out[[c, di, tt]] = tap(&xr, &kk, tt);
                    }
                }
            }
            out
        }
        LayerForm::TgmChannelCombine1x1 | LayerForm::TgmChannelCombineSoft | LayerForm::TcUnconstrained => {
            let w: Array2<f64> = tensor(layer, ".combine").unwrap().clone().into_dimensionality().unwrap();
            let soft = cfg.form == LayerForm::TgmChannelCombineSoft;
            let mix = if soft { naive_softmax_rows(&w) } else { w };
            let mut out = Array3::zeros((cfg.c_out, d, t));
            for i in 0..cfg.c_out {
                for di in 0..d {
                    for tt in 0..t {
                        let mut acc = 0.0;
                        for j in 0..c_in {
                            acc += mix[[i, j]] * tap(&row(j, di), &kern(i, j), tt);
                        }
                        out[[i, di, tt]] = if soft { acc } else { acc.max(0.0) };
                    }
                }
            }
            out
        }
    }
}

/// All valid form/source pairs.
pub fn combinations() -> Vec<(LayerForm, KernelSource)> {
    let mut out = Vec::new();
    for form in LayerForm::ALL {
        for source in KernelSource::ALL {
            if !form.requires_free_taps() || source == KernelSource::UnconstrainedFree {
                out.push((form, source));
            }
        }
    }
    out
}

/// A random valid configuration with C ≤ 4, D ≤ 8, L ≤ 5, M ≤ 4.
pub fn random_config<R: Rng>(form: LayerForm, source: KernelSource, rng: &mut R) -> LayerConfig {
    let c_in = if form.is_conv1d() || form == LayerForm::TgmSingle {
        1
    } else {
        rng.random_range(1..=4)
    };
    let c_out = if form == LayerForm::TgmGrouped { c_in } else { rng.random_range(1..=4) };
    let mut cfg = LayerConfig::new(
        form,
        source,
        c_in,
        c_out,
        rng.random_range(1..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=8),
    );
    if source.is_gaussian() && rng.random_bool(0.5) {
        cfg.sharing = GaussianSharing::PerMixture;
    }
    cfg
}

pub fn normal3<R: Rng>(shape: (usize, usize, usize), rng: &mut R) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// AP from the definition: rank every frame against every other.
pub fn brute_force_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut positives: Vec<(usize, usize)> = (0..n).filter(|&i| labels[i] == 1).map(|i| (rank(i), i)).collect();
    if positives.is_empty() {
        return None;
    }
    positives.sort();
    let mut total = 0.0;
    for (r, _) in &positives {
        let hits = positives.iter().filter(|(q, _)| q <= r).count();
        total += hits as f64 / *r as f64;
    }
    Some(total / positives.len() as f64)
}
