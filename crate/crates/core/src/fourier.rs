//! Centered orthonormal 2D Fourier transforms and the acquisition operators
//! built on them.
//!
//! Conventions: images are `H x W` complex grids, the zero frequency sits at
//! `(H/2, W/2)` and both directions are scaled by `1/sqrt(H*W)`, so the
//! transform is unitary. Undersampling acts on columns (the phase-encode
//! axis is the last one).

use std::cell::RefCell;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ReconError, Result};
use crate::sampling::SamplingMask;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_finite(data: &Array2<Complex64>, what: &'static str) -> Result<()> {
    if data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(ReconError::NonFinite(what))
    }
}

/// Image-domain complex data. The two-channel `(real, imag)` view used by the
/// network is available through [`ComplexImage::to_channels`] and
/// [`ComplexImage::from_channels`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage(Array2<Complex64>);

/// Frequency-domain measurements on the same grid as the image they measure.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace(Array2<Complex64>);

macro_rules! grid_newtype {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn new(data: Array2<Complex64>) -> Result<Self> {
                if data.is_empty() {
                    return Err(ReconError::InvalidConfig(concat!($what, " must be non-empty").into()));
                }
                check_finite(&data, $what)?;
                Ok(Self(data))
            }

            pub fn zeros(height: usize, width: usize) -> Self {
                Self(Array2::zeros((height, width)))
            }

            /// Wraps data that is already known to be finite.
            pub(crate) fn from_raw(data: Array2<Complex64>) -> Self {
                Self(data)
            }

            pub fn data(&self) -> &Array2<Complex64> {
                &self.0
            }

            pub fn view(&self) -> ArrayView2<'_, Complex64> {
                self.0.view()
            }

            pub fn into_inner(self) -> Array2<Complex64> {
                self.0
            }

            pub fn height(&self) -> usize {
                self.0.nrows()
            }

            pub fn width(&self) -> usize {
                self.0.ncols()
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.dim()
            }

            pub fn norm(&self) -> f64 {
                self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
            }

            pub fn magnitude(&self) -> Array2<f64> {
                self.0.mapv(|z| z.norm())
            }

            pub fn scaled(&self, factor: f64) -> Self {
                Self(self.0.mapv(|z| z * factor))
            }

            /// `2 x H x W` real view: channel 0 is the real part, channel 1 the imaginary part.
            pub fn to_channels(&self) -> Array3<f64> {
                to_channels(self.0.view())
            }

            pub fn from_channels(channels: ArrayView3<'_, f64>) -> Result<Self> {
                let (c, _, _) = channels.dim();
                if c != 2 {
                    return Err(ReconError::shape("two-channel complex view", &[2], &[c]));
                }
                Self::new(from_channels(channels))
            }
        }
    };
}

grid_newtype!(ComplexImage, "image");
grid_newtype!(KSpace, "k-space");

pub(crate) fn to_channels(data: ArrayView2<'_, Complex64>) -> Array3<f64> {
    let (h, w) = data.dim();
    let mut out = Array3::zeros((2, h, w));
    for ((i, j), z) in data.indexed_iter() {
        out[[0, i, j]] = z.re;
        out[[1, i, j]] = z.im;
    }
    out
}

pub(crate) fn from_channels(channels: ArrayView3<'_, f64>) -> Array2<Complex64> {
    let re = channels.index_axis(Axis(0), 0);
    let im = channels.index_axis(Axis(0), 1);
    let mut out = Array2::zeros(re.dim());
    ndarray::Zip::from(&mut out)
        .and(&re)
        .and(&im)
        .for_each(|o, &r, &i| *o = Complex64::new(r, i));
    out
}

/// Ordered coil data sharing one grid shape.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilStack<T>(Vec<T>);

pub trait GridShape {
    fn grid_shape(&self) -> (usize, usize);
}

impl GridShape for ComplexImage {
    fn grid_shape(&self) -> (usize, usize) {
        self.shape()
    }
}

impl GridShape for KSpace {
    fn grid_shape(&self) -> (usize, usize) {
        self.shape()
    }
}

impl<T: GridShape> CoilStack<T> {
    pub fn new(coils: Vec<T>) -> Result<Self> {
        let first = coils.first().ok_or(ReconError::EmptyCoilStack)?.grid_shape();
        for coil in &coils[1..] {
            let shape = coil.grid_shape();
            if shape != first {
                return Err(ReconError::shape("coil stack", &[first.0, first.1], &[shape.0, shape.1]));
            }
        }
        Ok(Self(coils))
    }

    pub fn coils(&self) -> &[T] {
        &self.0
    }

    pub fn into_coils(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0[0].grid_shape()
    }
}

/// Cyclic shift by `(dr, dc)`: `out[(i + dr) % h, (j + dc) % w] = a[i, j]`.
fn roll(a: &Array2<Complex64>, dr: usize, dc: usize) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let oi = (i + dr) % h;
        for j in 0..w {
            out[[oi, (j + dc) % w]] = a[[i, j]];
        }
    }
    out
}

pub fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    roll(a, h / 2, w / 2)
}

pub fn ifftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    roll(a, h - h / 2, w - w / 2)
}

/// Unnormalized in-place 2D DFT (rows then columns).
fn fft2_inplace(a: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = a.dim();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        let data = a.as_slice_mut().expect("standard layout");
        row_fft.process(data);

        let mut column = vec![Complex64::new(0.0, 0.0); h];
        let mut scratch = vec![Complex64::new(0.0, 0.0); col_fft.get_inplace_scratch_len()];
        for j in 0..w {
            for i in 0..h {
                column[i] = data[i * w + j];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch);
            for i in 0..h {
                data[i * w + j] = column[i];
            }
        }
    });
}

pub(crate) fn fft2c_array(x: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut k = ifftshift(x);
    fft2_inplace(&mut k, false);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    k.mapv_inplace(|z| z * scale);
    fftshift(&k)
}

pub(crate) fn ifft2c_array(k: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = k.dim();
    let mut x = ifftshift(k);
    fft2_inplace(&mut x, true);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    x.mapv_inplace(|z| z * scale);
    fftshift(&x)
}

pub fn fft2c(img: &ComplexImage) -> Result<KSpace> {
    check_finite(&img.0, "image")?;
    Ok(KSpace(fft2c_array(&img.0)))
}

pub fn ifft2c(ksp: &KSpace) -> Result<ComplexImage> {
    check_finite(&ksp.0, "k-space")?;
    Ok(ComplexImage(ifft2c_array(&ksp.0)))
}

fn check_mask_width(width: usize, mask: &SamplingMask, context: &'static str) -> Result<()> {
    if mask.width() != width {
        return Err(ReconError::shape(context, &[width], &[mask.width()]));
    }
    Ok(())
}

/// Zeroes every column the mask does not sample.
pub(crate) fn mask_columns_inplace(k: &mut Array2<Complex64>, mask: &SamplingMask) {
    for (j, mut col) in k.axis_iter_mut(Axis(1)).enumerate() {
        if !mask.is_sampled(j) {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
}

/// `A x = D F x`.
pub fn apply_forward(img: &ComplexImage, mask: &SamplingMask) -> Result<KSpace> {
    check_mask_width(img.width(), mask, "apply_forward")?;
    let mut k = fft2c(img)?.0;
    mask_columns_inplace(&mut k, mask);
    Ok(KSpace(k))
}

/// `A^H y = F^{-1} D y`; `D` is diagonal so its transpose is itself.
pub fn zero_filled(y: &KSpace, mask: &SamplingMask) -> Result<ComplexImage> {
    check_mask_width(y.width(), mask, "zero_filled")?;
    check_finite(&y.0, "k-space")?;
    let mut k = y.0.clone();
    mask_columns_inplace(&mut k, mask);
    Ok(ComplexImage(ifft2c_array(&k)))
}

/// Replaces sampled columns of `F x` with `y` in place (no validation).
pub(crate) fn dc_project_array(x: &Array2<Complex64>, y: &Array2<Complex64>, mask: &SamplingMask) -> Array2<Complex64> {
    let mut k = fft2c_array(x);
    for j in mask.sampled_columns() {
        k.column_mut(j).assign(&y.column(j));
    }
    ifft2c_array(&k)
}

/// `F^{-1} (1 - D) F g`: the linear part of the data-consistency map. It is
/// self-adjoint, so it also serves as its own backward pass.
pub(crate) fn dc_null_projection_array(g: &Array2<Complex64>, mask: &SamplingMask) -> Array2<Complex64> {
    let mut k = fft2c_array(g);
    for j in mask.sampled_columns() {
        k.column_mut(j).fill(Complex64::new(0.0, 0.0));
    }
    ifft2c_array(&k)
}

/// `F^{-1} [D y + (1 - D) F x_net]`.
pub fn data_consistency(x_net: &ComplexImage, y: &KSpace, mask: &SamplingMask) -> Result<ComplexImage> {
    if x_net.shape() != y.shape() {
        let (a, b) = (x_net.shape(), y.shape());
        return Err(ReconError::shape("data_consistency", &[b.0, b.1], &[a.0, a.1]));
    }
    check_mask_width(y.width(), mask, "data_consistency")?;
    check_finite(&x_net.0, "image")?;
    check_finite(&y.0, "k-space")?;
    Ok(ComplexImage(dc_project_array(&x_net.0, &y.0, mask)))
}

/// Root-sum-of-squares coil combination.
pub fn rss(images: &CoilStack<ComplexImage>) -> Array2<f64> {
    let (h, w) = images.shape();
    let mut acc = Array2::<f64>::zeros((h, w));
    for coil in images.coils() {
        ndarray::Zip::from(&mut acc)
            .and(coil.data())
            .for_each(|a, z| *a += z.norm_sqr());
    }
    acc.mapv_inplace(f64::sqrt);
    acc
}

/// Mean-squared difference restricted to the sampled columns, relative to `y`
/// on those columns. Used to verify data consistency of emitted images.
pub fn sampled_column_error(x: &ComplexImage, y: &KSpace, mask: &SamplingMask) -> Result<f64> {
    check_mask_width(x.width(), mask, "sampled_column_error")?;
    let k = fft2c_array(&x.0);
    let mut diff = 0.0;
    let mut reference = 0.0;
    for j in mask.sampled_columns() {
        for i in 0..k.nrows() {
            diff += (k[[i, j]] - y.0[[i, j]]).norm_sqr();
            reference += y.0[[i, j]].norm_sqr();
        }
    }
    Ok((diff / reference.max(f64::MIN_POSITIVE)).sqrt())
}
