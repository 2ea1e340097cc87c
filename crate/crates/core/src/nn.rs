//! Convolution layers with explicit backward passes.
//!
//! Activations are `C x H x W` arrays. Both layer kinds lower to a matrix
//! product against an im2col buffer; the transposed convolution is the
//! adjoint of the strided convolution with the same geometry.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Square kernel geometry: `stride`, `kernel` size and zero `padding`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub stride: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Geometry {
    pub const fn new(stride: usize, kernel: usize, padding: usize) -> Self {
        Self { stride, kernel, padding }
    }

    /// Output extent of a strided convolution over `len` input pixels.
    pub fn conv_out(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `len` input pixels.
    pub fn deconv_out(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds `x` (`C x H x W`) into `(C k k) x (oh ow)` columns.
fn im2col(x: ArrayView3<'_, f64>, g: Geometry, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let k = g.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("standard layout");
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * g.stride) as isize - pad + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if g.stride == 1 {
                        let offset = kj as isize - pad;
                        let lo = (-offset).max(0) as usize;
                        let hi = ((w as isize - offset).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let start = (lo as isize + offset) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        }
                    } else {
                        for (oj, d) in dst_row.iter_mut().enumerate() {
                            let jj = (oj * g.stride) as isize - pad + kj as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into a `C x H x W` grid.
fn col2im(cols: ArrayView2<'_, f64>, c: usize, h: usize, w: usize, g: Geometry, oh: usize, ow: usize) -> Array3<f64> {
    let k = g.kernel;
    let mut x = Array3::<f64>::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("standard layout");
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &mut xs[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let col_row = &src[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * g.stride) as isize - pad + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let src_row = &col_row[oi * ow..(oi + 1) * ow];
                    if g.stride == 1 {
                        let offset = kj as isize - pad;
                        let lo = (-offset).max(0) as usize;
                        let hi = ((w as isize - offset).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let start = (lo as isize + offset) as usize;
                            for (d, s) in dst_row[start..start + (hi - lo)].iter_mut().zip(&src_row[lo..hi]) {
                                *d += *s;
                            }
                        }
                    } else {
                        for (oj, s) in src_row.iter().enumerate() {
                            let jj = (oj * g.stride) as isize - pad + kj as isize;
                            if jj >= 0 && jj < w as isize {
                                dst_row[jj as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn flat2(x: ArrayView3<'_, f64>) -> ArrayView2<'_, f64> {
    let (c, h, w) = x.dim();
    x.into_shape_with_order((c, h * w)).expect("contiguous activation")
}

fn add_bias(y: &mut Array3<f64>, bias: &Array1<f64>) {
    for (mut plane, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        plane += b;
    }
}

fn bias_grad(dy: ArrayView3<'_, f64>) -> Array1<f64> {
    dy.axis_iter(Axis(0)).map(|p| p.sum()).collect()
}

/// Strided convolution; weight layout `(C_out, C_in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub geometry: Geometry,
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, geometry: Geometry) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Array4::zeros((c_out, c_in, k, k)),
            bias: Array1::zeros(c_out),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        let (_, c_in, k, _) = self.weight.dim();
        c_in * k * k
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        if input[0] != self.in_channels() {
            return None;
        }
        Some([
            self.out_channels(),
            self.geometry.conv_out(input[1])?,
            self.geometry.conv_out(input[2])?,
        ])
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((co, ci * k * k)).expect("contiguous weight")
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let [co, oh, ow] = self
            .output_shape([c, h, w])
            .unwrap_or_else(|| panic!("conv input {:?} incompatible with weight {:?}", x.dim(), self.weight.dim()));
        let cols = im2col(x, self.geometry, oh, ow);
        let mut y = Array2::<f64>::zeros((co, oh * ow));
        general_mat_mul(1.0, &self.weight_matrix(), &cols, 0.0, &mut y);
        let mut y = y.into_shape_with_order((co, oh, ow)).expect("contiguous");
        add_bias(&mut y, &self.bias);
        y
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grad`, a layer of the same shape used as a gradient buffer.
    pub fn backward(&self, x: ArrayView3<'_, f64>, dy: ArrayView3<'_, f64>, grad: &mut Self) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (co, oh, ow) = dy.dim();
        let cols = im2col(x, self.geometry, oh, ow);
        let dy2 = dy.as_standard_layout();
        let dy2 = flat2(dy2.view()).to_owned();
        {
            let (_, ci, k, _) = self.weight.dim();
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((co, ci * k * k))
                .expect("contiguous");
            general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw);
        }
        grad.bias += &bias_grad(dy);
        let mut dcols = Array2::<f64>::zeros(cols.dim());
        general_mat_mul(1.0, &self.weight_matrix().t(), &dy2, 0.0, &mut dcols);
        col2im(dcols.view(), c, h, w, self.geometry, oh, ow)
    }
}

/// Transposed convolution; weight layout `(C_in, C_out, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub geometry: Geometry,
}

impl ConvTranspose2d {
    pub fn zeros(c_in: usize, c_out: usize, geometry: Geometry) -> Self {
        let k = geometry.kernel;
        Self {
            weight: Array4::zeros((c_in, c_out, k, k)),
            bias: Array1::zeros(c_out),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().1
    }

    /// Number of input taps feeding one output pixel on average.
    pub fn fan_in(&self) -> usize {
        let (ci, _, k, _) = self.weight.dim();
        let s = self.geometry.stride;
        (ci * k * k / (s * s)).max(1)
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        if input[0] != self.in_channels() {
            return None;
        }
        Some([
            self.out_channels(),
            self.geometry.deconv_out(input[1])?,
            self.geometry.deconv_out(input[2])?,
        ])
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (ci, co, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((ci, co * k * k)).expect("contiguous weight")
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let [co, oh, ow] = self
            .output_shape([c, h, w])
            .unwrap_or_else(|| panic!("deconv input {:?} incompatible with weight {:?}", x.dim(), self.weight.dim()));
        let x = x.as_standard_layout();
        let x2 = flat2(x.view());
        let k = self.geometry.kernel;
        let mut cols = Array2::<f64>::zeros((co * k * k, h * w));
        general_mat_mul(1.0, &self.weight_matrix().t(), &x2, 0.0, &mut cols);
        let mut y = col2im(cols.view(), co, oh, ow, self.geometry, h, w);
        add_bias(&mut y, &self.bias);
        y
    }

    pub fn backward(&self, x: ArrayView3<'_, f64>, dy: ArrayView3<'_, f64>, grad: &mut Self) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let dcols = im2col(dy, self.geometry, h, w);
        let x = x.as_standard_layout();
        let x2 = flat2(x.view());
        {
            let (ci, co, k, _) = self.weight.dim();
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((ci, co * k * k))
                .expect("contiguous");
            general_mat_mul(1.0, &x2, &dcols.t(), 1.0, &mut gw);
        }
        grad.bias += &bias_grad(dy);
        let mut dx = Array2::<f64>::zeros((c, h * w));
        general_mat_mul(1.0, &self.weight_matrix(), &dcols, 0.0, &mut dx);
        dx.into_shape_with_order((c, h, w)).expect("contiguous")
    }
}

pub fn relu(x: Array3<f64>) -> Array3<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Masks `dy` by `y > 0`, where `y` is the ReLU output.
pub fn relu_backward(y: ArrayView3<'_, f64>, mut dy: Array3<f64>) -> Array3<f64> {
    ndarray::Zip::from(&mut dy).and(&y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dy
}

/// Fills `values` with `U(-a, a)`, `a = sqrt(3) * std`, so every entry stays
/// within `sqrt(3)` standard deviations of zero.
pub fn fill_uniform<R: Rng>(values: &mut [f64], std: f64, rng: &mut R) {
    let a = 3f64.sqrt() * std;
    for v in values {
        *v = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
    }
}
