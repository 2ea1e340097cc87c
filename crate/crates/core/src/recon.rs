//! Reconstruction of slices by any method, and per-slice evaluation at the
//! original intensity scale.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::cs::{tv_reconstruct_acquisition, CsConfig};
use crate::data::Slice;
use crate::error::{ReconError, Result};
use crate::fourier::{sampled_column_error, ComplexImage};
use crate::model::{coil_images, combined_magnitude, images_to_channels, PcrnnParams};
use crate::objectives::{metrics, Metrics, SsimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroFilled,
    Cs,
    Pcrnn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero_filled",
            Method::Cs => "cs",
            Method::Pcrnn => "pcrnn",
        }
    }
}

pub enum Reconstructor<'a> {
    ZeroFilled,
    Cs(CsConfig),
    Pcrnn(&'a PcrnnParams),
}

impl Reconstructor<'_> {
    pub fn method(&self) -> Method {
        match self {
            Reconstructor::ZeroFilled => Method::ZeroFilled,
            Reconstructor::Cs(_) => Method::Cs,
            Reconstructor::Pcrnn(_) => Method::Pcrnn,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub method: Method,
    /// Final image in channel form, at the slice's normalized scale.
    pub channels: Array3<f64>,
    /// `x1`, `x2`, `x3` for PC-RNN.
    pub stages: Option<[Array3<f64>; 3]>,
    pub norm_scale: f64,
}

impl Reconstruction {
    /// Final magnitude (RSS across coils) at the original scale.
    pub fn magnitude(&self) -> Array2<f64> {
        combined_magnitude(self.channels.view()) * self.norm_scale
    }

    pub fn stage_magnitudes(&self) -> Option<[Array2<f64>; 3]> {
        self.stages
            .as_ref()
            .map(|s| s.each_ref().map(|x| combined_magnitude(x.view()) * self.norm_scale))
    }

    /// Worst relative sampled-column mismatch over coils for each emitted
    /// image (stages first, then the final image).
    pub fn dc_errors(&self, slice: &Slice) -> Result<Vec<f64>> {
        let mut images: Vec<&Array3<f64>> = self.stages.iter().flatten().collect();
        images.push(&self.channels);
        images
            .into_iter()
            .map(|x| {
                coil_images(x.view())
                    .iter()
                    .zip(&slice.acquisition.kspace)
                    .map(|(img, y)| sampled_column_error(img, y, &slice.acquisition.mask))
                    .try_fold(0.0f64, |acc, e| Ok(acc.max(e?)))
            })
            .collect()
    }
}

pub fn reconstruct(slice: &Slice, reconstructor: &Reconstructor<'_>) -> Result<Reconstruction> {
    let acq = &slice.acquisition;
    let (channels, stages) = match reconstructor {
        Reconstructor::ZeroFilled => (acq.zero_filled_channels(), None),
        Reconstructor::Cs(cfg) => {
            let images: Vec<_> = tv_reconstruct_acquisition(acq, cfg)?
                .into_iter()
                .map(ComplexImage::into_inner)
                .collect();
            (images_to_channels(&images), None)
        }
        Reconstructor::Pcrnn(params) => {
            let out = params.forward(acq)?;
            (out.x_hat, Some([out.x1, out.x2, out.x3]))
        }
    };
    Ok(Reconstruction {
        method: reconstructor.method(),
        channels,
        stages,
        norm_scale: slice.norm_scale,
    })
}

/// Metrics of a real image against the slice's reference, both at the
/// original scale. `volume_norm_sq` must also be at the original scale.
pub fn evaluate_image(image: &Array2<f64>, slice: &Slice, volume_norm_sq: f64, cfg: &SsimConfig) -> Result<Metrics> {
    let target = slice.target_magnitude() * slice.norm_scale;
    if image.dim() != target.dim() {
        return Err(ReconError::shape(
            "evaluate",
            &[target.nrows(), target.ncols()],
            &[image.nrows(), image.ncols()],
        ));
    }
    metrics(image.view(), target.view(), volume_norm_sq, cfg)
}
