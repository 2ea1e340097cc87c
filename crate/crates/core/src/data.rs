//! Ground truth sourcing and k-space simulation: random-ellipse phantoms,
//! fastMRI-layout HDF5 volumes, noise injection, mean-magnitude
//! normalization and center cropping.

use std::collections::BTreeMap;
use std::path::Path;

use hdf5::types::{CompoundField, CompoundType, FloatSize, H5Type, TypeDescriptor};
use ndarray::{s, Array2, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{ReconError, Result};
use crate::fourier::{fft2c, ifft2c, rss, zero_filled, CoilStack, ComplexImage, KSpace};
use crate::model::{channels_to_images, images_to_channels, Acquisition};
use crate::sampling::{apply_mask, generate_mask, slice_seed, splitmix, MaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: usize,
    pub n_ellipses: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Adds a smooth, low-order phase map to the otherwise real image.
    pub smooth_phase: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_ellipses: 8,
            intensity_min: 0.1,
            intensity_max: 0.6,
            smooth_phase: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(ReconError::InvalidConfig(format!("phantom size must be at least 32, got {}", self.size)));
        }
        if !(0.0 <= self.intensity_min && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0) {
            return Err(ReconError::InvalidConfig("phantom intensities must satisfy 0 <= min <= max <= 1".into()));
        }
        Ok(())
    }
}

/// Sum of randomly placed, rotated ellipses on a `size x size` grid. The
/// first ellipse is a large "body" so the object fills most of the field of
/// view; the rest sit inside it.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ComplexImage> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = Array2::<f64>::zeros((n, n));
    for e in 0..spec.n_ellipses {
        let (cx, cy, a, b) = if e == 0 {
            (
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.65..0.85),
                rng.random_range(0.55..0.8),
            )
        } else {
            (
                rng.random_range(-0.45..0.45),
                rng.random_range(-0.45..0.45),
                rng.random_range(0.06..0.3),
                rng.random_range(0.06..0.3),
            )
        };
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = rng.random_range(spec.intensity_min..=spec.intensity_max);
        let (sin, cos) = theta.sin_cos();
        for i in 0..n {
            let y = 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
            for j in 0..n {
                let x = 2.0 * (j as f64 + 0.5) / n as f64 - 1.0;
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    img[[i, j]] += intensity;
                }
            }
        }
    }
    let data = if spec.smooth_phase {
        let (c1, c2, c3): (f64, f64, f64) = (
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        Array2::from_shape_fn((n, n), |(i, j)| {
            let y = 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
            let x = 2.0 * (j as f64 + 0.5) / n as f64 - 1.0;
            let phase = std::f64::consts::PI * (c1 * x + c2 * y + c3 * x * y);
            Complex64::from_polar(img[[i, j]], phase)
        })
    } else {
        img.mapv(|v| Complex64::new(v, 0.0))
    };
    ComplexImage::new(data)
}

/// Fully sampled reference for a slice.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    /// Single-coil complex image.
    Complex(ComplexImage),
    /// Per-coil complex images; the reference magnitude is their RSS.
    Coils(CoilStack<ComplexImage>),
    /// A provided real reconstruction (e.g. a stored ESC or RSS target).
    Magnitude(Array2<f64>),
}

impl GroundTruth {
    /// Real reference image used for evaluation.
    pub fn magnitude(&self) -> Array2<f64> {
        match self {
            GroundTruth::Complex(x) => x.magnitude(),
            GroundTruth::Coils(stack) => rss(stack),
            GroundTruth::Magnitude(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            GroundTruth::Complex(x) => x.shape(),
            GroundTruth::Coils(stack) => stack.shape(),
            GroundTruth::Magnitude(m) => m.dim(),
        }
    }

    fn scaled(&self, factor: f64) -> Self {
        match self {
            GroundTruth::Complex(x) => GroundTruth::Complex(x.scaled(factor)),
            GroundTruth::Coils(stack) => GroundTruth::Coils(
                CoilStack::new(stack.coils().iter().map(|c| c.scaled(factor)).collect()).expect("same shapes"),
            ),
            GroundTruth::Magnitude(m) => GroundTruth::Magnitude(m * factor),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Slice {
    pub volume_id: String,
    pub slice_index: usize,
    pub acquisition: Acquisition,
    pub ground_truth: GroundTruth,
    /// Factor the stored data has been divided by; multiply to return to the
    /// original intensity scale.
    pub norm_scale: f64,
}

impl Slice {
    pub fn id(&self) -> String {
        format!("{}_s{:03}", self.volume_id, self.slice_index)
    }

    /// Zero-filled magnitude (RSS across coils).
    pub fn zero_filled_magnitude(&self) -> Array2<f64> {
        let images: Vec<ComplexImage> = self
            .acquisition
            .kspace
            .iter()
            .map(|k| zero_filled(k, &self.acquisition.mask).expect("validated acquisition"))
            .collect();
        rss(&CoilStack::new(images).expect("non-empty"))
    }

    pub fn target_magnitude(&self) -> Array2<f64> {
        self.ground_truth.magnitude()
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(default)]
pub struct SimulationSettings {
    pub mask: MaskSpec,
    pub noise_sigma: f64,
    /// 1 simulates a single coil; more coils use synthetic sensitivity maps.
    pub coils: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            mask: MaskSpec::for_acceleration(4, 0),
            noise_sigma: 0.0,
            coils: 1,
        }
    }
}

/// Smooth complex sensitivity maps of `coils` receivers placed evenly on a
/// circle around the field of view.
pub fn coil_sensitivities(coils: usize, size: usize) -> Vec<Array2<Complex64>> {
    (0..coils)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / coils as f64;
            let (cy, cx) = (1.3 * angle.sin(), 1.3 * angle.cos());
            Array2::from_shape_fn((size, size), |(i, j)| {
                let y = 2.0 * (i as f64 + 0.5) / size as f64 - 1.0;
                let x = 2.0 * (j as f64 + 0.5) / size as f64 - 1.0;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let phase = 0.5 * (x * angle.cos() + y * angle.sin()) + angle;
                Complex64::from_polar((-d2 / 2.0).exp(), phase)
            })
        })
        .collect()
}

/// `y = D (F x + noise)` for every coil. The mask and noise are drawn from
/// `spec.seed`; `noise_sigma` is the standard deviation of each real and
/// imaginary component.
pub fn simulate_acquisition(
    ground_truth: GroundTruth,
    spec: &MaskSpec,
    noise_sigma: f64,
    volume_id: &str,
    slice_index: usize,
) -> Result<Slice> {
    if !(noise_sigma >= 0.0) {
        return Err(ReconError::InvalidConfig("noise sigma must be non-negative".into()));
    }
    let coils: Vec<ComplexImage> = match &ground_truth {
        GroundTruth::Complex(x) => vec![x.clone()],
        GroundTruth::Coils(stack) => stack.coils().to_vec(),
        GroundTruth::Magnitude(m) => vec![ComplexImage::new(m.mapv(|v| Complex64::new(v, 0.0)))?],
    };
    let width = coils[0].width();
    let mask = generate_mask(spec, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0x6e6f_6973_6500_0000));
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut kspace = Vec::with_capacity(coils.len());
    for coil in &coils {
        let mut k = fft2c(coil)?.into_inner();
        if noise_sigma > 0.0 {
            k.mapv_inplace(|z| z + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
        }
        kspace.push(apply_mask(&KSpace::new(k)?, &mask)?);
    }
    Ok(Slice {
        volume_id: volume_id.to_string(),
        slice_index,
        acquisition: Acquisition::new(kspace, mask)?,
        ground_truth,
        norm_scale: 1.0,
    })
}

/// The slice re-acquired with a fresh mask drawn from `seed`, keeping its
/// acceleration and center fraction. k-space is re-simulated from the stored
/// ground truth without noise.
pub fn resample_mask(slice: &Slice, seed: u64) -> Result<Slice> {
    let spec = slice
        .acquisition
        .mask
        .spec()
        .ok_or_else(|| ReconError::InvalidConfig("mask resampling needs a generated mask".into()))?
        .with_seed(seed);
    if slice.ground_truth.shape() != slice.acquisition.shape() {
        return Err(ReconError::InvalidConfig(format!(
            "{}: ground truth is not on the k-space grid, masks cannot be resampled",
            slice.id()
        )));
    }
    let mut out = simulate_acquisition(slice.ground_truth.clone(), &spec, 0.0, &slice.volume_id, slice.slice_index)?;
    out.norm_scale = slice.norm_scale;
    Ok(out)
}

/// Divides k-space and ground truth by the mean zero-filled magnitude.
pub fn normalize(slice: &Slice) -> Result<Slice> {
    let zf = slice.zero_filled_magnitude();
    let scale = zf.mean().unwrap_or(0.0);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(ReconError::DegenerateSlice);
    }
    let inv = 1.0 / scale;
    let kspace = slice.acquisition.kspace.iter().map(|k| k.scaled(inv)).collect();
    Ok(Slice {
        volume_id: slice.volume_id.clone(),
        slice_index: slice.slice_index,
        acquisition: Acquisition::new(kspace, slice.acquisition.mask.clone())?,
        ground_truth: slice.ground_truth.scaled(inv),
        norm_scale: slice.norm_scale * scale,
    })
}

/// Centered `crop_h x crop_w` window; an odd surplus drops the extra pixel on
/// the trailing side.
pub fn center_crop<T: Clone>(img: ArrayView2<'_, T>, crop_h: usize, crop_w: usize) -> Result<Array2<T>> {
    let (h, w) = img.dim();
    if crop_h > h || crop_w > w || crop_h == 0 || crop_w == 0 {
        return Err(ReconError::CropTooLarge {
            crop_h,
            crop_w,
            height: h,
            width: w,
        });
    }
    let (r0, c0) = ((h - crop_h) / 2, (w - crop_w) / 2);
    Ok(img.slice(s![r0..r0 + crop_h, c0..c0 + crop_w]).to_owned())
}

/// Generates `count` phantom slices, each its own volume, normalized.
pub fn phantom_dataset(base: &PhantomSpec, count: usize, settings: &SimulationSettings, seed: u64) -> Result<Vec<Slice>> {
    (0..count)
        .map(|i| {
            let id = format!("phantom_{seed}_{i:04}");
            let phantom_seed = splitmix(seed ^ splitmix(i as u64));
            let image = generate_phantom(&base.with_seed(phantom_seed))?;
            let gt = if settings.coils > 1 {
                let coils = coil_sensitivities(settings.coils, base.size)
                    .into_iter()
                    .map(|s| ComplexImage::new(s * image.data()))
                    .collect::<Result<Vec<_>>>()?;
                GroundTruth::Coils(CoilStack::new(coils)?)
            } else {
                GroundTruth::Complex(image)
            };
            let mask = settings.mask.with_seed(slice_seed(&id, 0, settings.mask.seed));
            normalize(&simulate_acquisition(gt, &mask, settings.noise_sigma, &id, 0)?)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityScale {
    /// As stored, after normalization.
    Normalized,
    /// Multiplied back by each slice's `norm_scale`.
    Original,
}

/// Squared norm of each volume's reference images.
pub fn volume_norms(slices: &[Slice], scale: IntensityScale) -> BTreeMap<String, f64> {
    let mut norms = BTreeMap::new();
    for s in slices {
        let factor = match scale {
            IntensityScale::Normalized => 1.0,
            IntensityScale::Original => s.norm_scale * s.norm_scale,
        };
        let n: f64 = s.target_magnitude().iter().map(|v| v * v).sum();
        *norms.entry(s.volume_id.clone()).or_insert(0.0) += factor * n;
    }
    norms
}

/// Deterministic volume-level split into `(train, validation)`.
pub fn split_by_volume(slices: Vec<Slice>, validation_fraction: f64, seed: u64) -> (Vec<Slice>, Vec<Slice>) {
    let mut ids: Vec<String> = volume_norms(&slices, IntensityScale::Normalized).into_keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_val = (ids.len() as f64 * validation_fraction).round() as usize;
    let val_ids: std::collections::BTreeSet<_> = ids[..n_val.min(ids.len())].iter().cloned().collect();
    slices.into_iter().partition(|s| !val_ids.contains(&s.volume_id))
}

/// fastMRI stores k-space as `complex64`, an HDF5 compound of two floats.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[repr(C)]
struct StoredComplex {
    r: f32,
    i: f32,
}

unsafe impl H5Type for StoredComplex {
    fn type_descriptor() -> TypeDescriptor {
        TypeDescriptor::Compound(CompoundType {
            fields: vec![
                CompoundField::new("r", TypeDescriptor::Float(FloatSize::U4), std::mem::offset_of!(StoredComplex, r), 0),
                CompoundField::new("i", TypeDescriptor::Float(FloatSize::U4), std::mem::offset_of!(StoredComplex, i), 1),
            ],
            size: std::mem::size_of::<StoredComplex>(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LoadMode {
    /// Uses the stored k-space as is (no crop); the reference is the fully
    /// sampled image of every coil.
    Raw { mask: MaskSpec },
    /// Crops the reference to `crop` and simulates k-space from it, so data
    /// consistency holds on the cropped grid.
    Simulate {
        crop: (usize, usize),
        mask: MaskSpec,
        noise_sigma: f64,
    },
}

/// One volume in fastMRI layout, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct FastMriVolume {
    /// `slices x coils` k-space grids.
    pub kspace: Vec<Vec<Array2<Complex64>>>,
    /// True when the file stores a coil axis.
    pub multi_coil: bool,
    /// `reconstruction_esc` or `reconstruction_rss` images, one per slice.
    pub reconstruction: Option<(String, Vec<Array2<f64>>)>,
}

pub const RECON_ESC: &str = "reconstruction_esc";
pub const RECON_RSS: &str = "reconstruction_rss";

pub fn write_fastmri_volume(path: &Path, volume: &FastMriVolume) -> Result<()> {
    let n_slices = volume.kspace.len();
    let first = volume.kspace.first().and_then(|s| s.first()).ok_or(ReconError::EmptyDataset)?;
    let (h, w) = first.dim();
    let n_coils = volume.kspace[0].len();
    let mut flat = Vec::with_capacity(n_slices * n_coils * h * w);
    for slice in &volume.kspace {
        if slice.len() != n_coils {
            return Err(ReconError::shape("fastMRI coils", &[n_coils], &[slice.len()]));
        }
        for coil in slice {
            if coil.dim() != (h, w) {
                return Err(ReconError::shape("fastMRI k-space", &[h, w], &[coil.nrows(), coil.ncols()]));
            }
            flat.extend(coil.iter().map(|z| StoredComplex {
                r: z.re as f32,
                i: z.im as f32,
            }));
        }
    }
    let file = hdf5::File::create(path)?;
    let builder = file.new_dataset::<StoredComplex>();
    let ds = if volume.multi_coil {
        builder.shape([n_slices, n_coils, h, w]).create("kspace")?
    } else {
        if n_coils != 1 {
            return Err(ReconError::shape("single-coil k-space", &[1], &[n_coils]));
        }
        builder.shape([n_slices, h, w]).create("kspace")?
    };
    ds.write_raw(&flat)?;
    if let Some((name, images)) = &volume.reconstruction {
        let (rh, rw) = images.first().map(|a| a.dim()).ok_or(ReconError::EmptyDataset)?;
        let data: Vec<f32> = images.iter().flat_map(|a| a.iter().map(|&v| v as f32)).collect();
        if data.len() != images.len() * rh * rw {
            return Err(ReconError::Format("reconstruction images differ in shape".into()));
        }
        file.new_dataset::<f32>()
            .shape([images.len(), rh, rw])
            .create(name.as_str())?
            .write_raw(&data)?;
    }
    Ok(())
}

pub fn read_fastmri_volume(path: &Path) -> Result<FastMriVolume> {
    let file = hdf5::File::open(path)?;
    if !file.link_exists("kspace") {
        return Err(ReconError::Missing("kspace".into()));
    }
    let ds = file.dataset("kspace")?;
    let shape = ds.shape();
    let (n_slices, n_coils, h, w, multi_coil) = match shape.as_slice() {
        &[s, h, w] => (s, 1, h, w, false),
        &[s, c, h, w] => (s, c, h, w, true),
        other => return Err(ReconError::Format(format!("unexpected kspace shape {other:?}"))),
    };
    if n_slices == 0 || n_coils == 0 || h == 0 || w == 0 {
        return Err(ReconError::Format(format!("degenerate kspace shape {shape:?}")));
    }
    let raw: Vec<StoredComplex> = ds.read_raw()?;
    let grid = h * w;
    let kspace = (0..n_slices)
        .map(|s| {
            (0..n_coils)
                .map(|c| {
                    let start = (s * n_coils + c) * grid;
                    Array2::from_shape_fn((h, w), |(i, j)| {
                        let z = raw[start + i * w + j];
                        Complex64::new(z.r as f64, z.i as f64)
                    })
                })
                .collect()
        })
        .collect();

    let mut reconstruction = None;
    for name in [RECON_ESC, RECON_RSS] {
        if file.link_exists(name) {
            let rds = file.dataset(name)?;
            let rshape = rds.shape();
            let &[rs, rh, rw] = rshape.as_slice() else {
                return Err(ReconError::Format(format!("unexpected {name} shape {rshape:?}")));
            };
            if rs != n_slices {
                return Err(ReconError::Format(format!("{name} has {rs} slices, kspace has {n_slices}")));
            }
            let data: Vec<f32> = rds.read_raw()?;
            let images = (0..rs)
                .map(|s| Array2::from_shape_fn((rh, rw), |(i, j)| data[(s * rh + i) * rw + j] as f64))
                .collect();
            reconstruction = Some((name.to_string(), images));
            break;
        }
    }
    Ok(FastMriVolume {
        kspace,
        multi_coil,
        reconstruction,
    })
}

/// Loads a fastMRI-layout volume as slices. Masks are seeded per slice from
/// the file stem, the slice index and `mask.seed`.
pub fn load_fastmri_volume(path: &Path, mode: &LoadMode) -> Result<Vec<Slice>> {
    let volume = read_fastmri_volume(path)?;
    let volume_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let mut slices = Vec::with_capacity(volume.kspace.len());
    for (index, coils) in volume.kspace.iter().enumerate() {
        let images: Vec<ComplexImage> = coils
            .iter()
            .map(|k| ifft2c(&KSpace::new(k.clone())?))
            .collect::<Result<_>>()?;
        let slice = match mode {
            LoadMode::Raw { mask } => {
                let gt = if volume.multi_coil {
                    GroundTruth::Coils(CoilStack::new(images)?)
                } else {
                    GroundTruth::Complex(images.into_iter().next().expect("one coil"))
                };
                let spec = mask.with_seed(slice_seed(&volume_id, index, mask.seed));
                simulate_acquisition(gt, &spec, 0.0, &volume_id, index)?
            }
            LoadMode::Simulate { crop, mask, noise_sigma } => {
                let gt = if volume.multi_coil {
                    let cropped = images
                        .iter()
                        .map(|im| ComplexImage::new(center_crop(im.view(), crop.0, crop.1)?))
                        .collect::<Result<Vec<_>>>()?;
                    GroundTruth::Coils(CoilStack::new(cropped)?)
                } else {
                    let reference = match &volume.reconstruction {
                        Some((_, recon)) => recon[index].mapv(|v| Complex64::new(v, 0.0)),
                        None => images[0].data().clone(),
                    };
                    GroundTruth::Complex(ComplexImage::new(center_crop(reference.view(), crop.0, crop.1)?)?)
                };
                let spec = mask.with_seed(slice_seed(&volume_id, index, mask.seed));
                simulate_acquisition(gt, &spec, *noise_sigma, &volume_id, index)?
            }
        };
        slices.push(slice);
    }
    Ok(slices)
}

#[derive(Serialize, Deserialize)]
struct SliceRecord {
    volume_id: String,
    slice_index: usize,
    norm_scale: f64,
    mask: crate::sampling::SamplingMask,
    ground_truth: String,
}

/// Serializes slices into the tensor archive (`kind = "dataset"`).
pub fn slices_to_archive(slices: &[Slice], metadata: serde_json::Value) -> Result<Archive> {
    let mut records = Vec::with_capacity(slices.len());
    let mut tensors = Vec::new();
    for (i, s) in slices.iter().enumerate() {
        let (kind, gt) = match &s.ground_truth {
            GroundTruth::Complex(x) => ("complex", images_to_channels(&[x.data().clone()]).into_dyn()),
            GroundTruth::Coils(stack) => {
                let imgs: Vec<_> = stack.coils().iter().map(|c| c.data().clone()).collect();
                ("coils", images_to_channels(&imgs).into_dyn())
            }
            GroundTruth::Magnitude(m) => ("magnitude", m.clone().into_dyn()),
        };
        let ks: Vec<_> = s.acquisition.kspace.iter().map(|k| k.data().clone()).collect();
        tensors.push((format!("slice{i}.kspace"), images_to_channels(&ks).into_dyn()));
        tensors.push((format!("slice{i}.ground_truth"), gt));
        records.push(SliceRecord {
            volume_id: s.volume_id.clone(),
            slice_index: s.slice_index,
            norm_scale: s.norm_scale,
            mask: s.acquisition.mask.clone(),
            ground_truth: kind.into(),
        });
    }
    let mut archive = Archive::new(
        "dataset",
        serde_json::json!({ "slices": records, "metadata": metadata }),
    );
    for (name, t) in tensors {
        archive.push_array(name, &t)?;
    }
    Ok(archive)
}

pub fn slices_from_archive(archive: &Archive) -> Result<Vec<Slice>> {
    if archive.kind != "dataset" {
        return Err(ReconError::Format(format!("expected a dataset archive, found {}", archive.kind)));
    }
    let records: Vec<SliceRecord> = serde_json::from_value(
        archive.metadata.get("slices").cloned().ok_or_else(|| ReconError::Missing("slices".into()))?,
    )?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let channels = |name: String| -> Result<Vec<Array2<Complex64>>> {
                let a = archive.array(&name)?.into_dimensionality::<ndarray::Ix3>().map_err(|e| ReconError::Format(e.to_string()))?;
                Ok(channels_to_images(a.view()))
            };
            let kspace = channels(format!("slice{i}.kspace"))?
                .into_iter()
                .map(KSpace::new)
                .collect::<Result<Vec<_>>>()?;
            let gt_name = format!("slice{i}.ground_truth");
            let ground_truth = match r.ground_truth.as_str() {
                "complex" => GroundTruth::Complex(ComplexImage::new(channels(gt_name)?.remove(0))?),
                "coils" => GroundTruth::Coils(CoilStack::new(
                    channels(gt_name)?.into_iter().map(ComplexImage::new).collect::<Result<Vec<_>>>()?,
                )?),
                "magnitude" => GroundTruth::Magnitude(
                    archive.array(&gt_name)?.into_dimensionality().map_err(|e| ReconError::Format(e.to_string()))?,
                ),
                other => return Err(ReconError::Format(format!("unknown ground truth kind {other}"))),
            };
            Ok(Slice {
                volume_id: r.volume_id,
                slice_index: r.slice_index,
                acquisition: Acquisition::new(kspace, r.mask)?,
                ground_truth,
                norm_scale: r.norm_scale,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::apply_forward;

    fn phantom(seed: u64) -> ComplexImage {
        generate_phantom(&PhantomSpec {
            seed,
            ..PhantomSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn phantom_examples() {
        let empty = generate_phantom(&PhantomSpec {
            n_ellipses: 0,
            ..PhantomSpec::default()
        })
        .unwrap();
        assert!(empty.data().iter().all(|z| z.norm() == 0.0));
        assert_eq!(phantom(3), phantom(3));
        assert_ne!(phantom(3), phantom(4));
        let spec = PhantomSpec::default();
        let bound = spec.n_ellipses as f64 * spec.intensity_max;
        let p = phantom(5);
        assert!(p.data().iter().all(|z| z.re >= 0.0 && z.re <= bound + 1e-12 && z.im == 0.0));
        assert!(generate_phantom(&PhantomSpec { size: 16, ..spec.clone() }).is_err());
        let complex = generate_phantom(&PhantomSpec {
            smooth_phase: true,
            ..spec
        })
        .unwrap();
        assert!(complex.data().iter().any(|z| z.im.abs() > 1e-3));
        assert!((complex.magnitude() - p.magnitude()).iter().count() > 0);
    }

    #[test]
    fn noiseless_simulation() {
        let gt = phantom(1);
        let full = MaskSpec {
            acceleration: 1,
            center_fraction: 0.08,
            seed: 0,
        };
        let s = simulate_acquisition(GroundTruth::Complex(gt.clone()), &full, 0.0, "v", 0).unwrap();
        let zf = zero_filled(&s.acquisition.kspace[0], &s.acquisition.mask).unwrap();
        assert!((zf.data() - gt.data()).iter().all(|z| z.norm() < 1e-10));

        let spec = MaskSpec::for_acceleration(4, 9);
        let s = simulate_acquisition(GroundTruth::Complex(gt.clone()), &spec, 0.0, "v", 0).unwrap();
        let expected = apply_forward(&gt, &s.acquisition.mask).unwrap();
        assert_eq!(s.acquisition.kspace[0], expected);
        for j in 0..64 {
            if !s.acquisition.mask.is_sampled(j) {
                assert!(s.acquisition.kspace[0].data().column(j).iter().all(|z| z.norm() == 0.0));
            }
        }
    }

    #[test]
    fn resampled_masks_keep_the_acquisition_model() {
        let s = &phantom_dataset(&PhantomSpec::default(), 1, &SimulationSettings::default(), 4).unwrap()[0];
        let r = resample_mask(s, 77).unwrap();
        let (old, new) = (s.acquisition.mask.spec().unwrap(), r.acquisition.mask.spec().unwrap());
        assert_eq!((old.acceleration, old.center_fraction), (new.acceleration, new.center_fraction));
        assert_eq!(new.seed, 77);
        assert_ne!(r.acquisition.mask, s.acquisition.mask);
        assert_eq!(r.norm_scale, s.norm_scale);
        let GroundTruth::Complex(gt) = &s.ground_truth else { panic!("complex phantom") };
        assert_eq!(r.acquisition.kspace[0], apply_forward(gt, &r.acquisition.mask).unwrap());
        assert_eq!(resample_mask(s, 77).unwrap().acquisition.kspace, r.acquisition.kspace);
    }

    #[test]
    fn noise_level_matches_sigma() {
        let gt = ComplexImage::zeros(128, 128);
        let full = MaskSpec {
            acceleration: 1,
            center_fraction: 0.08,
            seed: 4,
        };
        let sigma = 0.01;
        let s = simulate_acquisition(GroundTruth::Complex(gt), &full, sigma, "v", 0).unwrap();
        let values: Vec<f64> = s.acquisition.kspace[0].data().iter().flat_map(|z| [z.re, z.im]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - sigma).abs() < 0.05 * sigma, "{std}");
    }

    #[test]
    fn normalization_properties() {
        let spec = MaskSpec::for_acceleration(4, 2);
        let s = simulate_acquisition(GroundTruth::Complex(phantom(2).scaled(37.0)), &spec, 0.0, "v", 0).unwrap();
        let n1 = normalize(&s).unwrap();
        assert!((n1.zero_filled_magnitude().mean().unwrap() - 1.0).abs() < 1e-12);
        let n2 = normalize(&n1).unwrap();
        assert!((n2.norm_scale - n1.norm_scale).abs() < 1e-9 * n1.norm_scale);
        for (a, b) in n1.acquisition.kspace[0].data().iter().zip(n2.acquisition.kspace[0].data()) {
            assert!((a - b).norm() < 1e-9);
        }
        let back = n1.target_magnitude() * n1.norm_scale;
        assert!((&back - &s.target_magnitude()).iter().all(|d| d.abs() < 1e-9));

        let zero = simulate_acquisition(GroundTruth::Complex(ComplexImage::zeros(64, 64)), &spec, 0.0, "v", 0).unwrap();
        assert!(matches!(normalize(&zero), Err(ReconError::DegenerateSlice)));
    }

    #[test]
    fn archive_roundtrip() {
        let settings = SimulationSettings {
            mask: MaskSpec::for_acceleration(4, 0),
            noise_sigma: 0.01,
            ..SimulationSettings::default()
        };
        let spec = PhantomSpec {
            size: 32,
            smooth_phase: true,
            ..PhantomSpec::default()
        };
        let mut slices = phantom_dataset(&spec, 3, &settings, 2).unwrap();
        let coils = vec![phantom(1), phantom(2)];
        let mc = simulate_acquisition(
            GroundTruth::Coils(CoilStack::new(coils).unwrap()),
            &MaskSpec::for_acceleration(4, 1),
            0.0,
            "mc",
            4,
        )
        .unwrap();
        let mag = simulate_acquisition(GroundTruth::Magnitude(phantom(3).magnitude()), &MaskSpec::for_acceleration(8, 1), 0.0, "m", 0).unwrap();
        slices.push(mc);
        slices.push(mag);
        let archive = slices_to_archive(&slices, serde_json::json!({"seed": 2})).unwrap();
        let bytes = archive.to_bytes().unwrap();
        let back = slices_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.len(), slices.len());
        for (a, b) in back.iter().zip(&slices) {
            assert_eq!(a.id(), b.id());
            assert_eq!(a.norm_scale, b.norm_scale);
            assert_eq!(a.acquisition.kspace, b.acquisition.kspace);
            assert_eq!(a.acquisition.mask, b.acquisition.mask);
            assert_eq!(a.ground_truth, b.ground_truth);
        }
        assert_eq!(slices_to_archive(&back, serde_json::json!({"seed": 2})).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn crop_examples() {
        let a = Array2::from_shape_fn((322, 322), |(i, j)| (i * 1000 + j) as f64);
        let c = center_crop(a.view(), 320, 320).unwrap();
        assert_eq!(c.dim(), (320, 320));
        assert_eq!(c[[0, 0]], a[[1, 1]]);
        assert_eq!(c[[319, 319]], a[[320, 320]]);
        assert_eq!(center_crop(a.view(), 322, 322).unwrap(), a);
        let odd = Array2::from_shape_fn((5, 5), |(i, j)| (i * 10 + j) as f64);
        assert_eq!(center_crop(odd.view(), 4, 4).unwrap()[[0, 0]], 0.0);
        assert!(center_crop(odd.view(), 6, 4).is_err());
        let energy = |x: &Array2<f64>| x.iter().map(|v| v * v).sum::<f64>();
        assert!(energy(&c) <= energy(&a));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let settings = SimulationSettings {
            mask: MaskSpec::for_acceleration(4, 0),
            noise_sigma: 0.0,
            coils: 4,
        };
        let spec = PhantomSpec {
            size: 32,
            ..PhantomSpec::default()
        };
        let slices = phantom_dataset(&spec, 10, &settings, 1).unwrap();
        let ids = |v: &[Slice]| v.iter().map(|s| s.id()).collect::<Vec<_>>();
        let (t1, v1) = split_by_volume(slices.clone(), 0.3, 5);
        let (t2, v2) = split_by_volume(slices, 0.3, 5);
        assert_eq!(ids(&t1), ids(&t2));
        assert_eq!(ids(&v1), ids(&v2));
        assert_eq!(v1.len(), 3);
        assert_eq!(t1[0].acquisition.coils(), 4);
        assert!(ids(&t1).iter().all(|id| !ids(&v1).contains(id)));
    }

    #[test]
    fn fastmri_roundtrip_and_rss_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol_a.h5");
        let coils: Vec<Vec<Array2<Complex64>>> = (0..2)
            .map(|s| {
                (0..3)
                    .map(|c| {
                        let img = phantom(10 * s + c).into_inner();
                        let padded = Array2::from_shape_fn((68, 66), |(i, j)| {
                            if (2..66).contains(&i) && (1..65).contains(&j) {
                                img[[i - 2, j - 1]] * (1.0 + c as f64) * 0.5
                            } else {
                                Complex64::new(0.0, 0.0)
                            }
                        });
                        fft2c(&ComplexImage::new(padded).unwrap()).unwrap().into_inner()
                    })
                    .collect()
            })
            .collect();
        // Reference: our own RSS of the cropped coil images, stored as float32.
        let recon: Vec<Array2<f64>> = coils
            .iter()
            .map(|slice| {
                let imgs = slice
                    .iter()
                    .map(|k| {
                        let im = ifft2c(&KSpace::new(k.clone()).unwrap()).unwrap();
                        ComplexImage::new(center_crop(im.view(), 64, 64).unwrap()).unwrap()
                    })
                    .collect();
                rss(&CoilStack::new(imgs).unwrap())
            })
            .collect();
        let volume = FastMriVolume {
            kspace: coils,
            multi_coil: true,
            reconstruction: Some((RECON_RSS.into(), recon.clone())),
        };
        write_fastmri_volume(&path, &volume).unwrap();
        let back = read_fastmri_volume(&path).unwrap();
        assert_eq!(back.kspace.len(), 2);
        assert!(back.multi_coil);
        for (a, b) in back.kspace.iter().flatten().zip(volume.kspace.iter().flatten()) {
            assert!((a - b).iter().all(|z| z.norm() <= 1e-6 * (1.0 + b.iter().map(|v| v.norm()).fold(0.0, f64::max))));
        }

        let mode = LoadMode::Simulate {
            crop: (64, 64),
            mask: MaskSpec {
                acceleration: 1,
                center_fraction: 0.08,
                seed: 0,
            },
            noise_sigma: 0.0,
        };
        let slices = load_fastmri_volume(&path, &mode).unwrap();
        assert_eq!(slices.len(), 2);
        for (s, r) in slices.iter().zip(&recon) {
            let ours = s.zero_filled_magnitude();
            let rel = (&ours - r).iter().map(|d| d * d).sum::<f64>().sqrt() / r.iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!(rel < 1e-3, "{rel}");
            assert_eq!(s.volume_id, "vol_a");
        }

        let raw = load_fastmri_volume(&path, &LoadMode::Raw { mask: MaskSpec::for_acceleration(4, 1) }).unwrap();
        assert_eq!(raw[0].acquisition.shape(), (68, 66));
        assert_eq!(raw[0].acquisition.coils(), 3);
    }

    #[test]
    fn single_coil_file_and_missing_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("single.h5");
        let k = fft2c(&phantom(1)).unwrap().into_inner();
        let volume = FastMriVolume {
            kspace: vec![vec![k.clone()], vec![k]],
            multi_coil: false,
            reconstruction: Some((RECON_ESC.into(), vec![phantom(1).magnitude(), phantom(1).magnitude()])),
        };
        write_fastmri_volume(&path, &volume).unwrap();
        let slices = load_fastmri_volume(
            &path,
            &LoadMode::Simulate {
                crop: (48, 48),
                mask: MaskSpec::for_acceleration(4, 3),
                noise_sigma: 0.0,
            },
        )
        .unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[0].ground_truth.shape(), (48, 48));

        let empty = dir.path().join("empty.h5");
        hdf5::File::create(&empty).unwrap();
        assert!(matches!(read_fastmri_volume(&empty), Err(ReconError::Missing(_))));
    }
}
