//! Pyramid convolutional RNN.
//!
//! Three ConvRNN modules run in sequence, each working at a different feature
//! resolution (4x, 2x and 1x downsampling of the image grid). A module
//! iterates
//!
//! ```text
//! h[k+1] = res(h[k]) + enc(x[k])          h[0] = 0
//! x[k+1] = DC(dec(h[k+1]), y, D)
//! ```
//!
//! where `DC(z) = F^-1 [D y + (1 - D) F z]`. A four-layer CNN fuses the three
//! module outputs and a final DC projection yields the reconstruction.
//!
//! Multi-coil inputs are stacked as `2 * n_c` channels (real/imaginary per
//! coil) and DC is applied coil by coil.

use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReconError, Result};
use crate::fourier::{
    dc_null_projection_array, dc_project_array, from_channels, rss, to_channels, zero_filled, CoilStack, ComplexImage, KSpace,
};
use crate::nn::{fill_uniform, relu, relu_backward, Conv2d, ConvTranspose2d, Geometry};
use crate::sampling::SamplingMask;

/// Default ConvRNN iteration count.
pub const DEFAULT_ITERATIONS: usize = 5;
/// Channel widths (module 1, 2, 3, fusion) of the full-size single-coil model.
pub const SINGLE_COIL_CHANNELS: [usize; 4] = [384, 192, 96, 96];
/// Channel widths of the full-size multi-coil model.
pub const MULTI_COIL_CHANNELS: [usize; 4] = [512, 256, 128, 128];
/// Channel widths of the CPU-sized preset (64x64 images).
pub const DESK_CHANNELS: [usize; 4] = [48, 24, 12, 12];
/// Coil count of the fastMRI knee multi-coil data.
pub const DEFAULT_COILS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    SingleCoil,
    MultiCoil { coils: usize },
}

impl Task {
    pub fn coils(&self) -> usize {
        match self {
            Task::SingleCoil => 1,
            Task::MultiCoil { coils } => *coils,
        }
    }

    /// Image channels seen by the network: real and imaginary per coil.
    pub fn image_channels(&self) -> usize {
        2 * self.coils()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    X4,
    X2,
    X1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub geometry: Geometry,
    pub out_channels: usize,
}

impl LayerSpec {
    const fn new(stride: usize, kernel: usize, padding: usize, out_channels: usize) -> Self {
        Self {
            geometry: Geometry::new(stride, kernel, padding),
            out_channels,
        }
    }

    fn conv_shape(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        Some([
            self.out_channels,
            self.geometry.conv_out(input[1])?,
            self.geometry.conv_out(input[2])?,
        ])
    }

    fn deconv_shape(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        Some([
            self.out_channels,
            self.geometry.deconv_out(input[1])?,
            self.geometry.deconv_out(input[2])?,
        ])
    }
}

const RES_CONV: Geometry = Geometry::new(1, 3, 1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvRnnConfig {
    pub scale: Scale,
    pub image_channels: usize,
    pub encoder: [LayerSpec; 2],
    pub resblock_channels: usize,
    pub decoder: [LayerSpec; 2],
    pub iterations: usize,
}

impl ConvRnnConfig {
    pub fn new(scale: Scale, image_channels: usize, channels: usize, iterations: usize) -> Self {
        let down = LayerSpec::new(2, 4, 1, channels);
        let same = LayerSpec::new(1, 3, 1, channels);
        let (encoder, decoder_first, decoder_last) = match scale {
            Scale::X4 => ([down, down], down, LayerSpec::new(2, 4, 1, image_channels)),
            Scale::X2 => ([same, down], down, LayerSpec::new(1, 3, 1, image_channels)),
            Scale::X1 => ([same, same], same, LayerSpec::new(1, 3, 1, image_channels)),
        };
        Self {
            scale,
            image_channels,
            encoder,
            resblock_channels: channels,
            decoder: [decoder_first, decoder_last],
            iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(ReconError::InvalidConfig("ConvRNN needs at least one iteration".into()));
        }
        if self.encoder[1].out_channels != self.resblock_channels || self.decoder[1].out_channels != self.image_channels {
            return Err(ReconError::InvalidConfig(format!(
                "{:?}: encoder must end at the hidden width and the decoder at the image width",
                self.scale
            )));
        }
        let down: usize = self.encoder.iter().map(|l| l.geometry.stride).product();
        let up: usize = self.decoder.iter().map(|l| l.geometry.stride).product();
        if down != up {
            return Err(ReconError::InvalidConfig(format!(
                "{:?}: encoder downsampling {down} does not match decoder upsampling {up}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Shape of the hidden state for an image of `h x w`.
    pub fn hidden_shape(&self, h: usize, w: usize) -> Option<[usize; 3]> {
        let e1 = self.encoder[0].conv_shape([self.image_channels, h, w])?;
        self.encoder[1].conv_shape(e1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub in_channels: usize,
    pub layers: [LayerSpec; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcrnnConfig {
    pub task: Task,
    pub modules: [ConvRnnConfig; 3],
    pub fusion: FusionConfig,
}

impl PcrnnConfig {
    /// `channels` lists the widths of ConvRNN 1, 2, 3 and the fusion CNN.
    pub fn new(task: Task, channels: [usize; 4], iterations: usize) -> Result<Self> {
        let ic = task.image_channels();
        if ic == 0 || channels.iter().any(|&c| c == 0) {
            return Err(ReconError::InvalidConfig("channel counts must be positive".into()));
        }
        let modules = [
            ConvRnnConfig::new(Scale::X4, ic, channels[0], iterations),
            ConvRnnConfig::new(Scale::X2, ic, channels[1], iterations),
            ConvRnnConfig::new(Scale::X1, ic, channels[2], iterations),
        ];
        let fused = 3 * ic;
        let fusion = FusionConfig {
            in_channels: fused,
            layers: [
                LayerSpec::new(1, 3, 1, fused),
                LayerSpec::new(1, 3, 1, channels[3]),
                LayerSpec::new(1, 3, 1, channels[3]),
                LayerSpec::new(1, 3, 1, ic),
            ],
        };
        let cfg = Self { task, modules, fusion };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-size architecture for 320x320 images.
    pub fn full_size(task: Task) -> Self {
        let channels = match task {
            Task::SingleCoil => SINGLE_COIL_CHANNELS,
            Task::MultiCoil { .. } => MULTI_COIL_CHANNELS,
        };
        Self::new(task, channels, DEFAULT_ITERATIONS).expect("valid preset")
    }

    /// Same topology with narrow layers, for 64x64 experiments on a CPU.
    pub fn desk(task: Task) -> Self {
        Self::new(task, DESK_CHANNELS, DEFAULT_ITERATIONS).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.modules {
            m.validate()?;
            if m.image_channels != self.task.image_channels() {
                return Err(ReconError::InvalidConfig("module image channels disagree with the task".into()));
            }
        }
        if self.fusion.in_channels != 3 * self.task.image_channels()
            || self.fusion.layers[3].out_channels != self.task.image_channels()
        {
            return Err(ReconError::InvalidConfig("fusion CNN must map three images to one".into()));
        }
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        self.task.image_channels()
    }

    /// Activation shapes of one pass through every layer, keyed like the
    /// parameter tensors, for an `h x w` image.
    pub fn trace_shapes(&self, h: usize, w: usize) -> Result<Vec<(String, [usize; 3])>> {
        let bad = || ReconError::InvalidConfig(format!("image {h}x{w} is incompatible with the layer strides"));
        let ic = self.image_channels();
        let mut out = vec![("input".to_string(), [ic, h, w])];
        for (i, m) in self.modules.iter().enumerate() {
            let name = format!("convrnn{}", i + 1);
            let e1 = m.encoder[0].conv_shape([ic, h, w]).ok_or_else(bad)?;
            let e2 = m.encoder[1].conv_shape(e1).ok_or_else(bad)?;
            out.push((format!("{name}.encoder.0"), e1));
            out.push((format!("{name}.encoder.1"), e2));
            let mut r = e2;
            for b in 0..2 {
                let a = LayerSpec { geometry: RES_CONV, out_channels: m.resblock_channels }.conv_shape(r).ok_or_else(bad)?;
                r = LayerSpec { geometry: RES_CONV, out_channels: m.resblock_channels }.conv_shape(a).ok_or_else(bad)?;
                out.push((format!("{name}.resblock.{b}"), r));
            }
            let d1 = m.decoder[0].deconv_shape(r).ok_or_else(bad)?;
            let d2 = m.decoder[1].deconv_shape(d1).ok_or_else(bad)?;
            out.push((format!("{name}.decoder.0"), d1));
            out.push((format!("{name}.decoder.1"), d2));
            if d2 != [ic, h, w] {
                return Err(bad());
            }
        }
        let mut f = [self.fusion.in_channels, h, w];
        for (i, layer) in self.fusion.layers.iter().enumerate() {
            f = layer.conv_shape(f).ok_or_else(bad)?;
            out.push((format!("fusion.{i}"), f));
        }
        out.push(("output".to_string(), f));
        Ok(out)
    }
}

/// Architecture for a task at full size.
pub fn build_configs(task: Task) -> PcrnnConfig {
    PcrnnConfig::full_size(task)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResConv {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRnn {
    pub config: ConvRnnConfig,
    pub encoder: [Conv2d; 2],
    pub resblock: [ResConv; 2],
    pub decoder: [ConvTranspose2d; 2],
}

/// All learnable tensors of the model, plus the architecture they belong to.
/// The same type doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct PcrnnParams {
    pub config: PcrnnConfig,
    pub modules: [ConvRnn; 3],
    pub fusion: [Conv2d; 4],
}

/// Recurrent state of one module at its bottleneck resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Array3<f64>,
    pub iteration: usize,
}

/// Undersampled measurements of one slice, one k-space per coil.
#[derive(Clone, Debug)]
pub struct Acquisition {
    pub kspace: Vec<KSpace>,
    pub mask: SamplingMask,
}

impl Acquisition {
    pub fn new(kspace: Vec<KSpace>, mask: SamplingMask) -> Result<Self> {
        let stack = CoilStack::new(kspace)?;
        if stack.shape().1 != mask.width() {
            return Err(ReconError::shape("acquisition mask", &[stack.shape().1], &[mask.width()]));
        }
        Ok(Self {
            kspace: stack.into_coils(),
            mask,
        })
    }

    pub fn single(kspace: KSpace, mask: SamplingMask) -> Result<Self> {
        Self::new(vec![kspace], mask)
    }

    pub fn coils(&self) -> usize {
        self.kspace.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kspace[0].shape()
    }

    /// Zero-filled images in channel form.
    pub fn zero_filled_channels(&self) -> Array3<f64> {
        let images: Vec<Array2<Complex64>> = self
            .kspace
            .iter()
            .map(|k| zero_filled(k, &self.mask).expect("validated acquisition").into_inner())
            .collect();
        images_to_channels(&images)
    }
}

pub(crate) fn images_to_channels(images: &[Array2<Complex64>]) -> Array3<f64> {
    let views: Vec<Array3<f64>> = images.iter().map(|im| to_channels(im.view())).collect();
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    concatenate(Axis(0), &refs).expect("equal coil shapes")
}

pub(crate) fn channels_to_images(x: ArrayView3<'_, f64>) -> Vec<Array2<Complex64>> {
    (0..x.dim().0 / 2)
        .map(|c| from_channels(x.slice(s![2 * c..2 * c + 2, .., ..])))
        .collect()
}

fn dc_channels(z: &Array3<f64>, acq: &Acquisition) -> Array3<f64> {
    let projected: Vec<_> = channels_to_images(z.view())
        .iter()
        .zip(&acq.kspace)
        .map(|(zi, y)| dc_project_array(zi, y.data(), &acq.mask))
        .collect();
    images_to_channels(&projected)
}

fn dc_backward(dx: &Array3<f64>, mask: &SamplingMask) -> Array3<f64> {
    let projected: Vec<_> = channels_to_images(dx.view())
        .iter()
        .map(|g| dc_null_projection_array(g, mask))
        .collect();
    images_to_channels(&projected)
}

struct ResTape {
    input: Array3<f64>,
    hidden: Array3<f64>,
}

struct IterTape {
    x_in: Array3<f64>,
    e1: Array3<f64>,
    e2: Array3<f64>,
    res: [ResTape; 2],
    h_out: Array3<f64>,
    d1: Array3<f64>,
}

impl ResConv {
    fn forward(&self, z: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
        let a = relu(self.conv1.forward(z.view()));
        let out = z + &self.conv2.forward(a.view());
        (out, a)
    }

    fn backward(&self, tape: &ResTape, d_out: &Array3<f64>, grad: &mut ResConv) -> Array3<f64> {
        let da = self.conv2.backward(tape.hidden.view(), d_out.view(), &mut grad.conv2);
        let da = relu_backward(tape.hidden.view(), da);
        let dz = self.conv1.backward(tape.input.view(), da.view(), &mut grad.conv1);
        dz + d_out
    }
}

impl ConvRnn {
    fn zeros(config: &ConvRnnConfig) -> Self {
        let ic = config.image_channels;
        let c = config.resblock_channels;
        let res = || ResConv {
            conv1: Conv2d::zeros(c, c, RES_CONV),
            conv2: Conv2d::zeros(c, c, RES_CONV),
        };
        Self {
            config: config.clone(),
            encoder: [
                Conv2d::zeros(ic, config.encoder[0].out_channels, config.encoder[0].geometry),
                Conv2d::zeros(config.encoder[0].out_channels, config.encoder[1].out_channels, config.encoder[1].geometry),
            ],
            resblock: [res(), res()],
            decoder: [
                ConvTranspose2d::zeros(c, config.decoder[0].out_channels, config.decoder[0].geometry),
                ConvTranspose2d::zeros(config.decoder[0].out_channels, ic, config.decoder[1].geometry),
            ],
        }
    }

    /// `h = 0` for an image of `h x w`.
    pub fn initial_state(&self, h: usize, w: usize) -> Result<HiddenState> {
        let shape = self
            .config
            .hidden_shape(h, w)
            .ok_or_else(|| ReconError::InvalidConfig(format!("image {h}x{w} too small for {:?}", self.config.scale)))?;
        Ok(HiddenState {
            h: Array3::zeros((shape[0], shape[1], shape[2])),
            iteration: 0,
        })
    }

    fn res_block(&self, h: &Array3<f64>) -> (Array3<f64>, [ResTape; 2]) {
        let (r1, a1) = self.resblock[0].forward(h);
        let (r2, a2) = self.resblock[1].forward(&r1);
        (
            r2,
            [
                ResTape {
                    input: h.clone(),
                    hidden: a1,
                },
                ResTape { input: r1, hidden: a2 },
            ],
        )
    }

    fn step(&self, x: &Array3<f64>, h: &Array3<f64>, acq: &Acquisition) -> (Array3<f64>, IterTape) {
        let e1 = relu(self.encoder[0].forward(x.view()));
        let e2 = relu(self.encoder[1].forward(e1.view()));
        let (r, res) = self.res_block(h);
        let h_out = r + &e2;
        let d1 = relu(self.decoder[0].forward(h_out.view()));
        let z = self.decoder[1].forward(d1.view());
        let x_next = dc_channels(&z, acq);
        (
            x_next,
            IterTape {
                x_in: x.clone(),
                e1,
                e2,
                res,
                h_out,
                d1,
            },
        )
    }

    fn check_input(&self, x: ArrayView3<'_, f64>, acq: &Acquisition) -> Result<()> {
        let (h, w) = acq.shape();
        let expected = [self.config.image_channels, h, w];
        let (c, xh, xw) = x.dim();
        if [c, xh, xw] != expected {
            return Err(ReconError::shape("ConvRNN input", &expected, &[c, xh, xw]));
        }
        if acq.coils() * 2 != self.config.image_channels {
            return Err(ReconError::CoilMismatch {
                expected: self.config.image_channels / 2,
                found: acq.coils(),
            });
        }
        Ok(())
    }

    /// One recurrence step: returns `(x[k+1], h[k+1])`.
    pub fn iterate(&self, x: ArrayView3<'_, f64>, state: &HiddenState, acq: &Acquisition) -> Result<(Array3<f64>, HiddenState)> {
        self.check_input(x, acq)?;
        let (h, w) = acq.shape();
        let expected = self.initial_state(h, w)?.h.dim();
        if state.h.dim() != expected {
            let e = [expected.0, expected.1, expected.2];
            let f = state.h.dim();
            return Err(ReconError::shape("hidden state", &e, &[f.0, f.1, f.2]));
        }
        let (x_next, tape) = self.step(&x.to_owned(), &state.h, acq);
        Ok((
            x_next,
            HiddenState {
                h: tape.h_out,
                iteration: state.iteration + 1,
            },
        ))
    }

    /// Runs all iterations from `h = 0` and returns the final image and state.
    pub fn run_with_state(&self, x_in: ArrayView3<'_, f64>, acq: &Acquisition) -> Result<(Array3<f64>, HiddenState)> {
        self.check_input(x_in, acq)?;
        let (h, w) = acq.shape();
        let mut state = self.initial_state(h, w)?;
        let mut x = x_in.to_owned();
        for _ in 0..self.config.iterations {
            let (next, s) = self.iterate(x.view(), &state, acq)?;
            x = next;
            state = s;
        }
        Ok((x, state))
    }

    pub fn run(&self, x_in: ArrayView3<'_, f64>, acq: &Acquisition) -> Result<Array3<f64>> {
        Ok(self.run_with_state(x_in, acq)?.0)
    }

    fn run_taped(&self, x_in: &Array3<f64>, acq: &Acquisition) -> (Array3<f64>, Vec<IterTape>) {
        let (h, w) = acq.shape();
        let mut hidden = self.initial_state(h, w).expect("checked by caller").h;
        let mut x = x_in.clone();
        let mut tapes = Vec::with_capacity(self.config.iterations);
        for _ in 0..self.config.iterations {
            let (next, tape) = self.step(&x, &hidden, acq);
            hidden = tape.h_out.clone();
            x = next;
            tapes.push(tape);
        }
        (x, tapes)
    }

    /// Backpropagates `dx_out` (gradient wrt the module output) through all
    /// iterations; returns the gradient wrt the module input.
    fn backward(&self, tapes: &[IterTape], dx_out: &Array3<f64>, mask: &SamplingMask, grad: &mut ConvRnn) -> Array3<f64> {
        let mut dx = dx_out.clone();
        let mut dh: Option<Array3<f64>> = None;
        for tape in tapes.iter().rev() {
            let dz = dc_backward(&dx, mask);
            let dd1 = self.decoder[1].backward(tape.d1.view(), dz.view(), &mut grad.decoder[1]);
            let dd1 = relu_backward(tape.d1.view(), dd1);
            let mut dh_out = self.decoder[0].backward(tape.h_out.view(), dd1.view(), &mut grad.decoder[0]);
            if let Some(next) = dh.take() {
                dh_out += &next;
            }
            let de2 = relu_backward(tape.e2.view(), dh_out.clone());
            let de1 = self.encoder[1].backward(tape.e1.view(), de2.view(), &mut grad.encoder[1]);
            let de1 = relu_backward(tape.e1.view(), de1);
            dx = self.encoder[0].backward(tape.x_in.view(), de1.view(), &mut grad.encoder[0]);

            let dr1 = self.resblock[1].backward(&tape.res[1], &dh_out, &mut grad.resblock[1]);
            dh = Some(self.resblock[0].backward(&tape.res[0], &dr1, &mut grad.resblock[0]));
        }
        dx
    }
}

/// Per-scale and fused reconstructions, each `2 n_c x H x W`.
#[derive(Clone, Debug)]
pub struct PyramidOutput {
    pub x0: Array3<f64>,
    pub x1: Array3<f64>,
    pub x2: Array3<f64>,
    pub x3: Array3<f64>,
    pub x_hat: Array3<f64>,
}

impl PyramidOutput {
    pub fn stages(&self) -> [(&'static str, &Array3<f64>); 4] {
        [("x1", &self.x1), ("x2", &self.x2), ("x3", &self.x3), ("x_hat", &self.x_hat)]
    }
}

/// Converts a channel stack into per-coil complex images.
pub fn coil_images(x: ArrayView3<'_, f64>) -> Vec<ComplexImage> {
    channels_to_images(x).into_iter().map(ComplexImage::from_raw).collect()
}

/// Magnitude of a single-coil output, or the RSS combination of a multi-coil one.
pub fn combined_magnitude(x: ArrayView3<'_, f64>) -> Array2<f64> {
    rss(&CoilStack::new(coil_images(x)).expect("at least one coil"))
}

/// Activations recorded by [`PcrnnParams::forward_taped`].
pub struct ForwardTape {
    modules: [Vec<IterTape>; 3],
    fusion_inputs: [Array3<f64>; 4],
}

impl ForwardTape {
    /// Activation shapes of the first iteration of every module and of the
    /// fusion CNN, keyed like [`PcrnnConfig::trace_shapes`].
    pub fn activation_shapes(&self, output: &PyramidOutput) -> Vec<(String, [usize; 3])> {
        let dims = |a: &Array3<f64>| {
            let (c, h, w) = a.dim();
            [c, h, w]
        };
        let mut out = vec![("input".to_string(), dims(&output.x0))];
        let module_out = [&output.x1, &output.x2, &output.x3];
        for (i, tapes) in self.modules.iter().enumerate() {
            let name = format!("convrnn{}", i + 1);
            let t = &tapes[0];
            out.push((format!("{name}.encoder.0"), dims(&t.e1)));
            out.push((format!("{name}.encoder.1"), dims(&t.e2)));
            out.push((format!("{name}.resblock.0"), dims(&t.res[1].input)));
            let r2 = &t.h_out - &t.e2;
            out.push((format!("{name}.resblock.1"), dims(&r2)));
            out.push((format!("{name}.decoder.0"), dims(&t.d1)));
            out.push((format!("{name}.decoder.1"), dims(module_out[i])));
        }
        for i in 1..4 {
            out.push((format!("fusion.{}", i - 1), dims(&self.fusion_inputs[i])));
        }
        out.push(("fusion.3".to_string(), dims(&output.x_hat)));
        out.push(("output".to_string(), dims(&output.x_hat)));
        out
    }
}

impl PcrnnParams {
    pub fn zeros(config: &PcrnnConfig) -> Self {
        let fc = &config.fusion;
        let f = |i: usize, c_in: usize| Conv2d::zeros(c_in, fc.layers[i].out_channels, fc.layers[i].geometry);
        Self {
            config: config.clone(),
            modules: [
                ConvRnn::zeros(&config.modules[0]),
                ConvRnn::zeros(&config.modules[1]),
                ConvRnn::zeros(&config.modules[2]),
            ],
            fusion: [
                f(0, fc.in_channels),
                f(1, fc.layers[0].out_channels),
                f(2, fc.layers[1].out_channels),
                f(3, fc.layers[2].out_channels),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Visits every `(key, weight, bias)` layer in a fixed order.
    fn for_each_layer<'a>(&'a self, mut f: impl FnMut(String, LayerRef<'a>)) {
        for (i, m) in self.modules.iter().enumerate() {
            let p = format!("convrnn{}", i + 1);
            for (j, l) in m.encoder.iter().enumerate() {
                f(format!("{p}.encoder.{j}"), LayerRef::Conv(l));
            }
            for (j, r) in m.resblock.iter().enumerate() {
                f(format!("{p}.resblock.{j}.conv1"), LayerRef::Conv(&r.conv1));
                f(format!("{p}.resblock.{j}.conv2"), LayerRef::Conv(&r.conv2));
            }
            for (j, l) in m.decoder.iter().enumerate() {
                f(format!("{p}.decoder.{j}"), LayerRef::Deconv(l));
            }
        }
        for (j, l) in self.fusion.iter().enumerate() {
            f(format!("fusion.{j}"), LayerRef::Conv(l));
        }
    }

    fn layers_mut(&mut self) -> Vec<(String, LayerMut<'_>)> {
        let mut out = Vec::new();
        for (i, m) in self.modules.iter_mut().enumerate() {
            let p = format!("convrnn{}", i + 1);
            for (j, l) in m.encoder.iter_mut().enumerate() {
                out.push((format!("{p}.encoder.{j}"), LayerMut::Conv(l)));
            }
            for (j, r) in m.resblock.iter_mut().enumerate() {
                out.push((format!("{p}.resblock.{j}.conv1"), LayerMut::Conv(&mut r.conv1)));
                out.push((format!("{p}.resblock.{j}.conv2"), LayerMut::Conv(&mut r.conv2)));
            }
            for (j, l) in m.decoder.iter_mut().enumerate() {
                out.push((format!("{p}.decoder.{j}"), LayerMut::Deconv(l)));
            }
        }
        for (j, l) in self.fusion.iter_mut().enumerate() {
            out.push((format!("fusion.{j}"), LayerMut::Conv(l)));
        }
        out
    }

    /// `(key, shape, values)` for every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.for_each_layer(|key, layer| {
            let (w, b) = match layer {
                LayerRef::Conv(l) => (&l.weight, &l.bias),
                LayerRef::Deconv(l) => (&l.weight, &l.bias),
            };
            out.push((format!("{key}.weight"), w.shape().to_vec(), w.as_slice().expect("contiguous")));
            out.push((format!("{key}.bias"), b.shape().to_vec(), b.as_slice().expect("contiguous")));
        });
        out
    }

    /// Mutable views of every tensor, in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (key, layer) in self.layers_mut() {
            let (w, b) = match layer {
                LayerMut::Conv(l) => (&mut l.weight, &mut l.bias),
                LayerMut::Deconv(l) => (&mut l.weight, &mut l.bias),
            };
            out.push((format!("{key}.weight"), w.as_slice_mut().expect("contiguous")));
            out.push((format!("{key}.bias"), b.as_slice_mut().expect("contiguous")));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    fn check_acquisition(&self, acq: &Acquisition) -> Result<()> {
        let expected = self.config.task.coils();
        if acq.coils() != expected {
            return Err(ReconError::CoilMismatch {
                expected,
                found: acq.coils(),
            });
        }
        let (h, w) = acq.shape();
        self.config.trace_shapes(h, w)?;
        Ok(())
    }

    fn fusion_forward(&self, input: Array3<f64>) -> (Array3<f64>, [Array3<f64>; 4]) {
        let a0 = input;
        let a1 = relu(self.fusion[0].forward(a0.view()));
        let a2 = relu(self.fusion[1].forward(a1.view()));
        let a3 = relu(self.fusion[2].forward(a2.view()));
        let z = self.fusion[3].forward(a3.view());
        (z, [a0, a1, a2, a3])
    }

    /// Runs the full pyramid and records activations for [`Self::backward`].
    pub fn forward_taped(&self, acq: &Acquisition) -> Result<(PyramidOutput, ForwardTape)> {
        self.check_acquisition(acq)?;
        let x0 = acq.zero_filled_channels();
        let (x1, t1) = self.modules[0].run_taped(&x0, acq);
        let (x2, t2) = self.modules[1].run_taped(&x1, acq);
        let (x3, t3) = self.modules[2].run_taped(&x2, acq);
        let cat = concatenate(Axis(0), &[x1.view(), x2.view(), x3.view()]).expect("equal shapes");
        let (z, fusion_inputs) = self.fusion_forward(cat);
        let x_hat = dc_channels(&z, acq);
        Ok((
            PyramidOutput { x0, x1, x2, x3, x_hat },
            ForwardTape {
                modules: [t1, t2, t3],
                fusion_inputs,
            },
        ))
    }

    pub fn forward(&self, acq: &Acquisition) -> Result<PyramidOutput> {
        Ok(self.forward_taped(acq)?.0)
    }

    /// Parameter gradients of a scalar loss given its gradient wrt `x_hat`.
    pub fn backward(&self, tape: &ForwardTape, mask: &SamplingMask, d_x_hat: &Array3<f64>) -> PcrnnParams {
        let mut grad = self.zeros_like();
        let dz = dc_backward(d_x_hat, mask);
        let a = &tape.fusion_inputs;
        let mut d = self.fusion[3].backward(a[3].view(), dz.view(), &mut grad.fusion[3]);
        for i in (0..3).rev() {
            d = relu_backward(a[i + 1].view(), d);
            d = self.fusion[i].backward(a[i].view(), d.view(), &mut grad.fusion[i]);
        }
        let ic = self.config.image_channels();
        let mut dx3 = d.slice(s![2 * ic..3 * ic, .., ..]).to_owned();
        let mut dx2 = d.slice(s![ic..2 * ic, .., ..]).to_owned();
        let mut dx1 = d.slice(s![0..ic, .., ..]).to_owned();

        dx2 += &self.modules[2].backward(&tape.modules[2], &dx3, mask, &mut grad.modules[2]);
        dx1 += &self.modules[1].backward(&tape.modules[1], &dx2, mask, &mut grad.modules[1]);
        // Gradient wrt the zero-filled input is not needed.
        dx3 = self.modules[0].backward(&tape.modules[0], &dx1, mask, &mut grad.modules[0]);
        drop(dx3);
        grad
    }
}

enum LayerRef<'a> {
    Conv(&'a Conv2d),
    Deconv(&'a ConvTranspose2d),
}

enum LayerMut<'a> {
    Conv(&'a mut Conv2d),
    Deconv(&'a mut ConvTranspose2d),
}

/// Fan-in-scaled uniform weights and zero biases, deterministic in `seed`.
///
/// Layers followed by a ReLU use `std = sqrt(2 / fan_in)`. The second conv
/// of each residual branch uses `0.1 / sqrt(fan_in)` so the recurrence starts
/// close to the identity, and the image heads (last decoder layer, last
/// fusion layer) use `0.01 / sqrt(fan_in)` so an untrained model starts close
/// to the zero-filled image.
pub fn init_params(config: &PcrnnConfig, seed: u64) -> PcrnnParams {
    const HEAD_GAIN: f64 = 0.01;
    let mut params = PcrnnParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (key, layer) in params.layers_mut() {
        let linear = key.ends_with("decoder.1") || key == "fusion.3";
        let residual = key.ends_with("conv2");
        let gain = if residual {
            0.1
        } else if linear {
            HEAD_GAIN
        } else {
            2.0f64.sqrt()
        };
        match layer {
            LayerMut::Conv(l) => {
                let std = gain / (l.fan_in() as f64).sqrt();
                fill_uniform(l.weight.as_slice_mut().expect("contiguous"), std, &mut rng);
            }
            LayerMut::Deconv(l) => {
                let std = gain / (l.fan_in() as f64).sqrt();
                fill_uniform(l.weight.as_slice_mut().expect("contiguous"), std, &mut rng);
            }
        }
    }
    params
}

/// `x_hat = DC(CNN(x1, x2, x3))` with all intermediate scales.
pub fn pcrnn_forward(acq: &Acquisition, params: &PcrnnParams) -> Result<PyramidOutput> {
    params.forward(acq)
}

/// RSS image of a multi-coil network output.
pub fn rss_output(x_hat: &CoilStack<ComplexImage>, task: Task) -> Result<Array2<f64>> {
    match task {
        Task::SingleCoil => Err(ReconError::NotMultiCoil("rss_output")),
        Task::MultiCoil { .. } => Ok(rss(x_hat)),
    }
}
