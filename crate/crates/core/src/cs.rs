//! Total-variation compressed sensing by proximal gradient descent:
//! `argmin_x 1/2 ||y - A x||^2 + lambda * TV(x)` with `A = D F`.
//!
//! TV is anisotropic and applied to the real and imaginary parts separately.
//! Its proximal operator is approximated by a projected-gradient loop on the
//! dual (Chambolle), [`DEFAULT_PROX_ITERS`] iterations per outer step.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::fourier::{fft2c_array, ifft2c_array, mask_columns_inplace, zero_filled, ComplexImage, KSpace};
use crate::model::Acquisition;
use crate::sampling::SamplingMask;

pub const DEFAULT_PROX_ITERS: usize = 10;
const DUAL_STEP: f64 = 0.125;
const RETRIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsConfig {
    pub lambda: f64,
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub prox_iters: usize,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            step: 1.0,
            max_iters: 200,
            tol: 1e-6,
            prox_iters: DEFAULT_PROX_ITERS,
        }
    }
}

impl CsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ReconError::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(ReconError::InvalidConfig(format!("step must lie in (0, 1], got {}", self.step)));
        }
        if self.max_iters == 0 || self.prox_iters == 0 {
            return Err(ReconError::InvalidConfig("iteration counts must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(ReconError::InvalidConfig("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CsSolution {
    pub image: ComplexImage,
    /// Objective at the starting point followed by every accepted iterate.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Anisotropic TV of a real image with forward differences.
pub fn tv_real(u: &Array2<f64>) -> f64 {
    let (h, w) = u.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                total += (u[[i, j + 1]] - u[[i, j]]).abs();
            }
            if i + 1 < h {
                total += (u[[i + 1, j]] - u[[i, j]]).abs();
            }
        }
    }
    total
}

pub fn tv(x: &Array2<Complex64>) -> f64 {
    tv_real(&x.mapv(|z| z.re)) + tv_real(&x.mapv(|z| z.im))
}

/// `1/2 ||y - D F x||^2 + lambda * TV(x)`.
pub fn objective(x: &ComplexImage, y: &KSpace, mask: &SamplingMask, lambda: f64) -> Result<f64> {
    if x.shape() != y.shape() || mask.width() != y.width() {
        return Err(ReconError::shape(
            "cs objective",
            &[y.height(), y.width()],
            &[x.height(), x.width()],
        ));
    }
    Ok(objective_array(x.data(), y.data(), mask, lambda))
}

fn objective_array(x: &Array2<Complex64>, y: &Array2<Complex64>, mask: &SamplingMask, lambda: f64) -> f64 {
    let mut k = fft2c_array(x);
    mask_columns_inplace(&mut k, mask);
    let fidelity: f64 = Zip::from(&k).and(y).fold(0.0, |acc, a, b| acc + (a - b).norm_sqr());
    0.5 * fidelity + if lambda > 0.0 { lambda * tv(x) } else { 0.0 }
}

/// Dual variables of the TV prox for one real channel.
#[derive(Clone, Debug)]
struct Dual {
    px: Array2<f64>,
    py: Array2<f64>,
}

impl Dual {
    fn zeros(h: usize, w: usize) -> Self {
        Self {
            px: Array2::zeros((h, w)),
            py: Array2::zeros((h, w)),
        }
    }

    /// `v - weight * grad^T p`.
    fn primal(&self, v: &Array2<f64>, weight: f64) -> Array2<f64> {
        let (h, w) = v.dim();
        let mut u = v.clone();
        for i in 0..h {
            for j in 0..w {
                let mut div = 0.0;
                if j + 1 < w {
                    div -= self.px[[i, j]];
                }
                if j > 0 {
                    div += self.px[[i, j - 1]];
                }
                if i + 1 < h {
                    div -= self.py[[i, j]];
                }
                if i > 0 {
                    div += self.py[[i - 1, j]];
                }
                u[[i, j]] -= weight * div;
            }
        }
        u
    }

    fn run(&mut self, v: &Array2<f64>, weight: f64, iters: usize) -> Array2<f64> {
        let (h, w) = v.dim();
        let scale = DUAL_STEP / weight;
        for _ in 0..iters {
            let u = self.primal(v, weight);
            for i in 0..h {
                for j in 0..w {
                    if j + 1 < w {
                        let p = self.px[[i, j]] + scale * (u[[i, j + 1]] - u[[i, j]]);
                        self.px[[i, j]] = p.clamp(-1.0, 1.0);
                    }
                    if i + 1 < h {
                        let p = self.py[[i, j]] + scale * (u[[i + 1, j]] - u[[i, j]]);
                        self.py[[i, j]] = p.clamp(-1.0, 1.0);
                    }
                }
            }
        }
        self.primal(v, weight)
    }
}

/// Approximate `argmin_u 1/2 ||u - x||^2 + weight * TV(u)` with a fixed number
/// of dual iterations.
pub fn tv_prox(x: &ComplexImage, weight: f64) -> Result<ComplexImage> {
    tv_prox_with_iters(x, weight, DEFAULT_PROX_ITERS)
}

pub fn tv_prox_with_iters(x: &ComplexImage, weight: f64, iters: usize) -> Result<ComplexImage> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(ReconError::InvalidConfig(format!("prox weight must be finite and >= 0, got {weight}")));
    }
    if weight == 0.0 {
        return Ok(x.clone());
    }
    let (h, w) = x.shape();
    let mut duals = [Dual::zeros(h, w), Dual::zeros(h, w)];
    Ok(ComplexImage::from_raw(prox_complex(x.data(), weight, iters, &mut duals)))
}

fn prox_complex(v: &Array2<Complex64>, weight: f64, iters: usize, duals: &mut [Dual; 2]) -> Array2<Complex64> {
    let re = duals[0].run(&v.mapv(|z| z.re), weight, iters);
    let im = duals[1].run(&v.mapv(|z| z.im), weight, iters);
    Zip::from(&re).and(&im).map_collect(|&a, &b| Complex64::new(a, b))
}

/// Reconstructs a single coil; returns only the image.
pub fn tv_reconstruct(y: &KSpace, mask: &SamplingMask, cfg: &CsConfig) -> Result<ComplexImage> {
    Ok(tv_solve(y, mask, cfg)?.image)
}

/// Proximal gradient from the zero-filled image. A step whose objective
/// exceeds the current one is retried with a longer prox loop; if that still
/// fails the solver stops (tiny excess) or reports divergence.
pub fn tv_solve(y: &KSpace, mask: &SamplingMask, cfg: &CsConfig) -> Result<CsSolution> {
    cfg.validate()?;
    let mut x = zero_filled(y, mask)?.into_inner();
    let y = y.data();
    let (h, w) = x.dim();
    let weight = cfg.step * cfg.lambda;
    let mut duals = [Dual::zeros(h, w), Dual::zeros(h, w)];
    let mut f = objective_array(&x, y, mask, cfg.lambda);
    let energy = 0.5 * y.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let mut history = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut residual = fft2c_array(&x);
        mask_columns_inplace(&mut residual, mask);
        Zip::from(&mut residual).and(y).for_each(|r, &yv| *r = yv - *r);
        let grad_step = ifft2c_array(&residual);
        let v = Zip::from(&x).and(&grad_step).map_collect(|&a, &g| a + cfg.step * g);

        let mut iters = cfg.prox_iters;
        let mut accepted = None;
        let mut last = f64::NAN;
        for _ in 0..=RETRIES {
            let candidate = if weight > 0.0 {
                prox_complex(&v, weight, iters, &mut duals)
            } else {
                v.clone()
            };
            let f_new = objective_array(&candidate, y, mask, cfg.lambda);
            if !f_new.is_finite() {
                return Err(ReconError::Diverged {
                    iteration: iterations,
                    objective: f_new,
                });
            }
            last = f_new;
            if f_new <= f {
                accepted = Some((candidate, f_new));
                break;
            }
            iters *= 4;
        }
        let Some((x_new, f_new)) = accepted else {
            if last - f <= 1e-9 * f.max(energy).max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
            return Err(ReconError::Diverged {
                iteration: iterations,
                objective: last,
            });
        };

        let change: f64 = Zip::from(&x_new).and(&x).fold(0.0, |acc, a, b| acc + (a - b).norm_sqr());
        let size: f64 = x.iter().map(|z| z.norm_sqr()).sum();
        x = x_new;
        f = f_new;
        history.push(f);
        if change.sqrt() <= cfg.tol * size.sqrt().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    Ok(CsSolution {
        image: ComplexImage::from_raw(x),
        objective: history,
        iterations,
        converged,
    })
}

/// Reconstructs every coil of an acquisition independently.
pub fn tv_reconstruct_acquisition(acq: &Acquisition, cfg: &CsConfig) -> Result<Vec<ComplexImage>> {
    acq.kspace.iter().map(|k| tv_reconstruct(k, &acq.mask, cfg)).collect()
}
