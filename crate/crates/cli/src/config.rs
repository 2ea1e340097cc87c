use std::path::{Path, PathBuf};

use pcrnn::cs::CsConfig;
use pcrnn::data::{
    load_fastmri_volume, normalize, phantom_dataset, LoadMode, PhantomSpec, SimulationSettings, Slice,
};
use pcrnn::model::{PcrnnConfig, Task, DEFAULT_COILS, DEFAULT_ITERATIONS};
use pcrnn::objectives::LossConfig;
use pcrnn::recon::Method;
use pcrnn::sampling::{splitmix, MaskSpec};
use pcrnn::trainer::{OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// 64x64-scale channels (48, 24, 12, 12).
    Desk,
    /// Full single- or multi-coil channels.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    /// Overrides the preset's `(c1, c2, c3, c4)` channel widths.
    pub channels: Option<[usize; 4]>,
    pub iterations: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Desk,
            channels: None,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Phantom,
    Fastmri,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastmriMode {
    Simulate,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub phantom: PhantomSpec,
    pub noise_sigma: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Accelerations mixed into the training split; empty means the run's
    /// acceleration.
    pub train_accelerations: Vec<u32>,
    pub fastmri_mode: FastmriMode,
    pub crop: [usize; 2],
    pub train_files: Vec<PathBuf>,
    pub val_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            phantom: PhantomSpec::default(),
            noise_sigma: 0.0,
            train: 16,
            val: 4,
            test: 16,
            train_accelerations: Vec::new(),
            fastmri_mode: FastmriMode::Simulate,
            crop: [320, 320],
            train_files: Vec::new(),
            val_files: Vec::new(),
            test_files: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_steps: Option<u64>,
    /// Draw new training masks every epoch instead of fixing one per slice.
    pub resample_masks: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// `(row, col, height, width)` of the zoomed region.
    pub zoom: Option<[usize; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub coils: usize,
    pub method: Method,
    pub acceleration: u32,
    /// Defaults to the fastMRI value for the acceleration.
    pub center_fraction: Option<f64>,
    pub data: DataSection,
    pub model: ModelSection,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub cs: CsConfig,
    pub report: ReportSection,
    pub checkpoint: Option<PathBuf>,
    /// Directory with `train.pcrn`, `val.pcrn`, `test.pcrn` from `simulate`.
    pub dataset_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Single,
            coils: DEFAULT_COILS,
            method: Method::Pcrnn,
            acceleration: 4,
            center_fraction: None,
            data: DataSection::default(),
            model: ModelSection::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            cs: CsConfig::default(),
            report: ReportSection::default(),
            checkpoint: None,
            dataset_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.mask_spec(self.acceleration).validate()?;
        self.model_config()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.cs.validate()?;
        if self.task == TaskKind::Multi && self.coils < 2 {
            return Err(CliError::Config("multi-coil runs need at least 2 coils".into()));
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self.task {
            TaskKind::Single => Task::SingleCoil,
            TaskKind::Multi => Task::MultiCoil { coils: self.coils },
        }
    }

    pub fn mask_spec(&self, acceleration: u32) -> MaskSpec {
        let base = MaskSpec::for_acceleration(acceleration, self.seed);
        match self.center_fraction {
            Some(cf) => MaskSpec {
                center_fraction: cf,
                ..base
            },
            None => base,
        }
    }

    pub fn model_config(&self) -> CliResult<PcrnnConfig> {
        let task = self.task();
        let preset = match self.model.preset {
            ModelPreset::Desk => PcrnnConfig::desk(task),
            ModelPreset::Full => PcrnnConfig::full_size(task),
        };
        let channels = self.model.channels.unwrap_or_else(|| {
            let m = &preset.modules;
            [
                m[0].resblock_channels,
                m[1].resblock_channels,
                m[2].resblock_channels,
                preset.fusion.layers[1].out_channels,
            ]
        });
        Ok(PcrnnConfig::new(task, channels, self.model.iterations)?)
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            optim: self.optim.clone(),
            loss: self.loss,
            max_steps: self.train.max_steps,
            checkpoint_dir,
            resample_masks: self.train.resample_masks,
        }
    }

    /// Deterministic slices of one split, generated or loaded per the config.
    pub fn build_split(&self, split: Split) -> CliResult<Vec<Slice>> {
        let split_seed = splitmix(self.seed ^ splitmix(split.tag()));
        let coils = match self.task {
            TaskKind::Single => 1,
            TaskKind::Multi => self.coils,
        };
        let accelerations = match split {
            Split::Train if !self.data.train_accelerations.is_empty() => self.data.train_accelerations.clone(),
            _ => vec![self.acceleration],
        };
        match self.data.source {
            DataSource::Phantom => {
                let count = match split {
                    Split::Train => self.data.train,
                    Split::Val => self.data.val,
                    Split::Test => self.data.test,
                };
                let mut slices = Vec::with_capacity(count);
                let n = accelerations.len();
                for (i, &accel) in accelerations.iter().enumerate() {
                    let share = count / n + usize::from(i < count % n);
                    let settings = SimulationSettings {
                        mask: self.mask_spec(accel).with_seed(split_seed),
                        noise_sigma: self.data.noise_sigma,
                        coils,
                    };
                    let seed = splitmix(split_seed ^ splitmix(accel as u64));
                    slices.extend(phantom_dataset(&self.data.phantom, share, &settings, seed)?);
                }
                Ok(slices)
            }
            DataSource::Fastmri => {
                let files = match split {
                    Split::Train => &self.data.train_files,
                    Split::Val => &self.data.val_files,
                    Split::Test => &self.data.test_files,
                };
                let mut slices = Vec::new();
                for (i, path) in files.iter().enumerate() {
                    let mask = self.mask_spec(accelerations[i % accelerations.len()]).with_seed(split_seed);
                    let mode = match self.data.fastmri_mode {
                        FastmriMode::Simulate => LoadMode::Simulate {
                            crop: (self.data.crop[0], self.data.crop[1]),
                            mask,
                            noise_sigma: self.data.noise_sigma,
                        },
                        FastmriMode::Raw => LoadMode::Raw { mask },
                    };
                    for s in load_fastmri_volume(path, &mode)? {
                        slices.push(normalize(&s)?);
                    }
                }
                Ok(slices)
            }
        }
    }
}
