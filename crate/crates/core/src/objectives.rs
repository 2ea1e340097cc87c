//! Training losses and evaluation metrics: NMSE, windowed SSIM, the combined
//! NMSE + SSIM loss (with analytic gradients) and PSNR.

use ndarray::{Array2, Array3, ArrayBase, ArrayView2, ArrayView3, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};

fn check_same_shape(a: &[usize], b: &[usize], context: &'static str) -> Result<()> {
    if a != b {
        return Err(ReconError::shape(context, b, a));
    }
    Ok(())
}

/// `||x_hat - x||^2 / ||v||^2` where `v` is the volume `x` belongs to.
pub fn nmse<S, T, D>(x_hat: &ArrayBase<S, D>, x: &ArrayBase<T, D>, volume_norm_sq: f64) -> Result<f64>
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
    D: Dimension,
{
    check_same_shape(x_hat.shape(), x.shape(), "nmse")?;
    if !(volume_norm_sq > 0.0) {
        return Err(ReconError::ZeroNorm);
    }
    Ok(squared_error(x_hat, x) / volume_norm_sq)
}

pub(crate) fn squared_error<S, T, D>(a: &ArrayBase<S, D>, b: &ArrayBase<T, D>) -> f64
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
    D: Dimension,
{
    Zip::from(a).and(b).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q))
}

/// Peak signal-to-noise ratio in dB with `peak = max |x|`. Identical images
/// yield `f64::INFINITY`.
pub fn psnr<S, T, D>(x_hat: &ArrayBase<S, D>, x: &ArrayBase<T, D>) -> Result<f64>
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
    D: Dimension,
{
    check_same_shape(x_hat.shape(), x.shape(), "psnr")?;
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(ReconError::ZeroNorm);
    }
    let err = squared_error(x_hat, x);
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak * x.len() as f64 / err).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// Box filter with unbiased (`N / (N - 1)`) covariance normalization.
    Uniform,
    /// Gaussian weights with `sigma = 1.5` and plain weighted covariance.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRange {
    /// `L = max |x|` of the target image.
    MaxOfTarget,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window: SsimWindow,
    pub k1: f64,
    pub k2: f64,
    pub data_range: DataRange,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 7,
            window: SsimWindow::Uniform,
            k1: 0.01,
            k2: 0.03,
            data_range: DataRange::MaxOfTarget,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(ReconError::InvalidConfig("SSIM window must be odd-sized".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(ReconError::InvalidConfig("SSIM k1 and k2 must be positive".into()));
        }
        if let DataRange::Fixed(l) = self.data_range {
            if !(l > 0.0) {
                return Err(ReconError::InvalidConfig("SSIM data range must be positive".into()));
            }
        }
        Ok(())
    }

    fn weights(&self) -> (Array2<f64>, f64) {
        let n = self.window_size;
        match self.window {
            SsimWindow::Uniform => {
                let np = (n * n) as f64;
                (Array2::from_elem((n, n), 1.0 / np), np / (np - 1.0))
            }
            SsimWindow::Gaussian => {
                let c = (n / 2) as f64;
                let mut w = Array2::from_shape_fn((n, n), |(i, j)| {
                    let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                    (-d2 / (2.0 * 1.5 * 1.5)).exp()
                });
                let total = w.sum();
                w /= total;
                (w, 1.0)
            }
        }
    }
}

/// Weighted valid-window correlation: `out[i, j] = sum_{a,b} w[a, b] x[i + a, j + b]`.
fn window_filter(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (h, wd) = x.dim();
    let n = w.nrows();
    let (oh, ow) = (h + 1 - n, wd + 1 - n);
    let mut out = Array2::zeros((oh, ow));
    for a in 0..n {
        for b in 0..n {
            let wt = w[[a, b]];
            let shifted = x.slice(ndarray::s![a..a + oh, b..b + ow]);
            out.scaled_add(wt, &shifted);
        }
    }
    out
}

/// Adjoint of [`window_filter`]: scatters window maps back onto the image grid.
fn window_filter_adjoint(g: &Array2<f64>, w: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let n = w.nrows();
    let (oh, ow) = g.dim();
    let mut out = Array2::zeros(shape);
    for a in 0..n {
        for b in 0..n {
            let wt = w[[a, b]];
            let mut target = out.slice_mut(ndarray::s![a..a + oh, b..b + ow]);
            target.scaled_add(wt, g);
        }
    }
    out
}

struct SsimParts {
    value: f64,
    grad: Option<Array2<f64>>,
}

fn ssim_impl(x_hat: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, cfg: &SsimConfig, want_grad: bool) -> Result<SsimParts> {
    cfg.validate()?;
    check_same_shape(x_hat.shape(), x.shape(), "ssim")?;
    let (h, w) = x.dim();
    if h < cfg.window_size || w < cfg.window_size {
        return Err(ReconError::ImageTooSmall {
            height: h,
            width: w,
            window: cfg.window_size,
        });
    }
    let l = match cfg.data_range {
        DataRange::MaxOfTarget => x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        DataRange::Fixed(l) => l,
    };
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let (weights, cov_norm) = cfg.weights();

    let a = x_hat.to_owned();
    let b = x.to_owned();
    let mu_a = window_filter(&a, &weights);
    let mu_b = window_filter(&b, &weights);
    let q_a = window_filter(&(&a * &a), &weights);
    let q_b = window_filter(&(&b * &b), &weights);
    let r_ab = window_filter(&(&a * &b), &weights);

    let n_windows = mu_a.len() as f64;
    let mut total = 0.0;
    let (oh, ow) = mu_a.dim();
    let mut d_mu = Array2::zeros((oh, ow));
    let mut d_q = Array2::zeros((oh, ow));
    let mut d_r = Array2::zeros((oh, ow));

    for i in 0..oh {
        for j in 0..ow {
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let var_a = cov_norm * (q_a[[i, j]] - ma * ma);
            let var_b = cov_norm * (q_b[[i, j]] - mb * mb);
            let cov = cov_norm * (r_ab[[i, j]] - ma * mb);
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = var_a + var_b + c2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            total += s;
            if want_grad {
                // S = A1 A2 / (B1 B2) as a function of (mu_a, E[a^2], E[ab]).
                let dn_dmu = 2.0 * mb * a2 - 2.0 * cov_norm * mb * a1;
                let dd_dmu = 2.0 * ma * b2 - 2.0 * cov_norm * ma * b1;
                d_mu[[i, j]] = (dn_dmu - s * dd_dmu) / den;
                d_q[[i, j]] = -s * cov_norm * b1 / den;
                d_r[[i, j]] = 2.0 * cov_norm * a1 / den;
            }
        }
    }
    let value = total / n_windows;
    let grad = if want_grad {
        let g_mu = window_filter_adjoint(&d_mu, &weights, (h, w));
        let g_q = window_filter_adjoint(&d_q, &weights, (h, w));
        let g_r = window_filter_adjoint(&d_r, &weights, (h, w));
        let mut g = g_mu + &(&g_q * &a * 2.0) + &(&g_r * &b);
        g /= n_windows;
        Some(g)
    } else {
        None
    };
    Ok(SsimParts { value, grad })
}

/// Mean local SSIM over all valid windows of real (magnitude) images.
pub fn ssim(x_hat: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(x_hat, x, cfg, false)?.value)
}

/// SSIM and its gradient with respect to `x_hat`.
pub fn ssim_with_grad(x_hat: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, cfg: &SsimConfig) -> Result<(f64, Array2<f64>)> {
    let parts = ssim_impl(x_hat, x, cfg, true)?;
    Ok((parts.value, parts.grad.expect("gradient requested")))
}

/// Evaluation metrics of one real reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

pub fn metrics(x_hat: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, volume_norm_sq: f64, cfg: &SsimConfig) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(&x_hat, &x)?,
        ssim: ssim(x_hat, x, cfg)?,
        nmse: nmse(&x_hat, &x, volume_norm_sq)?,
    })
}

/// Arithmetic mean of each metric.
pub fn mean_metrics(rows: &[Metrics]) -> Option<Metrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(Metrics {
        psnr: rows.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|m| m.ssim).sum::<f64>() / n,
        nmse: rows.iter().map(|m| m.nmse).sum::<f64>() / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmseDomain {
    /// Differences of the two-channel (real, imaginary) values.
    Complex,
    /// Differences of magnitudes.
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub nmse_domain: NmseDomain,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            nmse_domain: NmseDomain::Complex,
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(ReconError::InvalidConfig("loss beta must be non-negative".into()));
        }
        self.ssim.validate()
    }
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: f64,
    pub nmse: f64,
    pub ssim: f64,
}

fn magnitude_of_channels(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (_, h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| x[[0, i, j]].hypot(x[[1, i, j]]))
}

/// `NMSE + beta * (1 - SSIM)` on real images, with gradient wrt `x_hat`.
pub fn combined_loss_real(
    x_hat: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    volume_norm_sq: f64,
    cfg: &LossConfig,
) -> Result<(LossValue, Array2<f64>)> {
    cfg.validate()?;
    let nmse_value = nmse(&x_hat, &x, volume_norm_sq)?;
    let mut grad = (&x_hat - &x) * (2.0 / volume_norm_sq);
    let ssim_value = if cfg.beta > 0.0 {
        let (s, g) = ssim_with_grad(x_hat, x, &cfg.ssim)?;
        grad.scaled_add(-cfg.beta, &g);
        s
    } else {
        ssim(x_hat, x, &cfg.ssim)?
    };
    Ok((
        LossValue {
            total: nmse_value + cfg.beta * (1.0 - ssim_value),
            nmse: nmse_value,
            ssim: ssim_value,
        },
        grad,
    ))
}

/// Combined loss on two-channel complex images. SSIM is taken on magnitudes;
/// NMSE on the domain chosen in `cfg`. Returns the gradient wrt `x_hat`
/// (zero-magnitude pixels receive a zero subgradient through the magnitude).
pub fn combined_loss_with_grad(
    x_hat: ArrayView3<'_, f64>,
    x: ArrayView3<'_, f64>,
    volume_norm_sq: f64,
    cfg: &LossConfig,
) -> Result<(LossValue, Array3<f64>)> {
    cfg.validate()?;
    check_same_shape(x_hat.shape(), x.shape(), "combined_loss")?;
    if x.dim().0 != 2 {
        return Err(ReconError::shape("combined_loss channels", &[2], &[x.dim().0]));
    }
    let mag_hat = magnitude_of_channels(x_hat);
    let mag = magnitude_of_channels(x);

    let mut grad_mag = Array2::<f64>::zeros(mag.dim());
    let mut grad = Array3::<f64>::zeros(x.dim());
    let nmse_value = match cfg.nmse_domain {
        NmseDomain::Complex => {
            let v = nmse(&x_hat, &x, volume_norm_sq)?;
            grad = (&x_hat - &x) * (2.0 / volume_norm_sq);
            v
        }
        NmseDomain::Magnitude => {
            let v = nmse(&mag_hat, &mag, volume_norm_sq)?;
            grad_mag = (&mag_hat - &mag) * (2.0 / volume_norm_sq);
            v
        }
    };
    let ssim_value = if cfg.beta > 0.0 {
        let (s, g) = ssim_with_grad(mag_hat.view(), mag.view(), &cfg.ssim)?;
        grad_mag.scaled_add(-cfg.beta, &g);
        s
    } else {
        ssim(mag_hat.view(), mag.view(), &cfg.ssim)?
    };
    let (_, h, w) = x.dim();
    for i in 0..h {
        for j in 0..w {
            let m = mag_hat[[i, j]];
            if m > 0.0 {
                let g = grad_mag[[i, j]] / m;
                grad[[0, i, j]] += g * x_hat[[0, i, j]];
                grad[[1, i, j]] += g * x_hat[[1, i, j]];
            }
        }
    }
    Ok((
        LossValue {
            total: nmse_value + cfg.beta * (1.0 - ssim_value),
            nmse: nmse_value,
            ssim: ssim_value,
        },
        grad,
    ))
}

pub fn combined_loss(x_hat: ArrayView3<'_, f64>, x: ArrayView3<'_, f64>, volume_norm_sq: f64, cfg: &LossConfig) -> Result<f64> {
    Ok(combined_loss_with_grad(x_hat, x, volume_norm_sq, cfg)?.0.total)
}
