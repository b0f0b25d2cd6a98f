//! TOML run configuration.

use std::path::Path;

use beamlab::das::DasConfig;
use beamlab::domain::{make_linear_array, make_pixel_grid, ArrayGeometry, PhantomSpec, PixelGrid, PlaneWaveTx};
use beamlab::evalbench::{CystRoi, RoiMode};
use beamlab::mvdr::MvdrConfig;
use beamlab::neural::UNetArch;
use beamlab::objective::LossWeights;
use beamlab::pipeline::ImagingContext;
use beamlab::simulator::{realize_phantom, series_phantom, synthesize_rf, RandomCysts, RfFrame, SimConfig};
use beamlab::training::TrainConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    pub n_elements: usize,
    pub pitch: f64,
    pub center_frequency: f64,
    pub sampling_frequency: f64,
    pub sound_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub n_x: usize,
    pub n_z: usize,
    pub patch_side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub n_frames: usize,
    #[serde(default)]
    pub steering_angle: f64,
    #[serde(default = "default_bandwidth")]
    pub fractional_bandwidth: f64,
    pub phantom: PhantomSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_cysts: Option<RandomCysts>,
}

fn default_bandwidth() -> f64 {
    0.6
}

/// MVDR settings; missing values take the element-count defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvdrSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subaperture_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagonal_loading: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub depth_levels: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub convs_per_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub val_every: u64,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointTarget {
    pub x: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Grid of the evaluation frames; defaults to the training grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    /// Phantom of the evaluation frame; its cysts define the contrast ROIs.
    pub phantom: PhantomSpec,
    /// Outer ROI radius as a multiple of the cyst radius.
    pub outer_radius_factor: f64,
    #[serde(default)]
    pub roi_mode: RoiMode,
    #[serde(default)]
    pub point_targets: Vec<PointTarget>,
    pub bench_repetitions: usize,
    pub bench_threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub array: ArraySection,
    pub grid: GridSection,
    pub simulation: SimulationSection,
    pub das: DasConfig,
    #[serde(default)]
    pub mvdr: MvdrSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Builds every derived object once so that bad values surface before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        let array = self.array()?;
        let grid = self.grid()?;
        self.tx()?;
        self.simulation.phantom.validate(&grid)?;
        self.eval.phantom.validate(&self.eval_grid()?)?;
        self.mvdr()?.validate(array.n_elements)?;
        self.arch().validate()?;
        LossWeights::new(self.training.alpha, self.training.beta)?;
        if self.simulation.n_frames == 0 {
            return Err(CliError::Config("invalid parameter `n_frames`: must be positive".into()));
        }
        if !(self.training.train_fraction > 0.0 && self.training.train_fraction < 1.0) {
            return Err(CliError::Config("invalid parameter `train_fraction`: must lie in (0, 1)".into()));
        }
        if !(self.training.learning_rate > 0.0) || self.training.batch == 0 || self.training.val_every == 0 {
            return Err(CliError::Config("invalid parameter `training`: learning_rate, batch and val_every must be positive".into()));
        }
        if !(self.eval.outer_radius_factor > 1.0) {
            return Err(CliError::Config("invalid parameter `outer_radius_factor`: must exceed 1".into()));
        }
        if self.eval.bench_repetitions == 0 || self.eval.bench_threads == 0 {
            return Err(CliError::Config("invalid parameter `eval`: bench_repetitions and bench_threads must be positive".into()));
        }
        ImagingContext::new(&grid, &array, &self.das)?;
        self.eval_context()?;
        Ok(())
    }

    pub fn array(&self) -> CliResult<ArrayGeometry> {
        let a = &self.array;
        Ok(make_linear_array(a.n_elements, a.pitch, a.center_frequency, a.sampling_frequency, a.sound_speed)?)
    }

    pub fn grid(&self) -> CliResult<PixelGrid> {
        build_grid(&self.grid)
    }

    pub fn eval_grid(&self) -> CliResult<PixelGrid> {
        build_grid(self.eval.grid.as_ref().unwrap_or(&self.grid))
    }

    pub fn tx(&self) -> CliResult<PlaneWaveTx> {
        Ok(PlaneWaveTx::new(self.simulation.steering_angle)?)
    }

    pub fn context(&self) -> CliResult<ImagingContext> {
        Ok(ImagingContext::new(&self.grid()?, &self.array()?, &self.das)?)
    }

    pub fn eval_context(&self) -> CliResult<ImagingContext> {
        Ok(ImagingContext::new(&self.eval_grid()?, &self.array()?, &self.das)?)
    }

    pub fn mvdr(&self) -> CliResult<MvdrConfig> {
        let d = MvdrConfig::default_for(self.array.n_elements);
        let m = &self.mvdr;
        Ok(MvdrConfig {
            subaperture_len: m.subaperture_len.unwrap_or(d.subaperture_len),
            temporal_window: m.temporal_window.unwrap_or(d.temporal_window),
            diagonal_loading: m.diagonal_loading.unwrap_or(d.diagonal_loading),
        })
    }

    pub fn arch(&self) -> UNetArch {
        let n = &self.network;
        UNetArch {
            in_channels: self.array.n_elements,
            depth_levels: n.depth_levels,
            base_channels: n.base_channels,
            channel_cap: n.channel_cap,
            convs_per_level: n.convs_per_level,
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.training;
        Ok(TrainConfig {
            steps: t.steps,
            batch: t.batch,
            weights: LossWeights::new(t.alpha, t.beta)?,
            seed: t.seed,
            val_every: t.val_every,
            lr: t.learning_rate,
        })
    }

    fn render(&self, spec: &PhantomSpec, grid: &PixelGrid) -> CliResult<RfFrame> {
        let (array, tx) = (self.array()?, self.tx()?);
        let mut sim = SimConfig::covering(grid, &array, &tx);
        sim.fractional_bandwidth = self.simulation.fractional_bandwidth;
        Ok(synthesize_rf(&realize_phantom(spec, grid), &array, &tx, &sim)?)
    }

    /// The training series: frame `i` uses the phantom template with seed offset `i`.
    pub fn simulate_series(&self) -> CliResult<Vec<RfFrame>> {
        let grid = self.grid()?;
        (0..self.simulation.n_frames)
            .into_par_iter()
            .map(|i| self.render(&series_phantom(&self.simulation.phantom, &grid, i, self.simulation.random_cysts.as_ref()), &grid))
            .collect()
    }

    pub fn simulate_eval(&self) -> CliResult<RfFrame> {
        self.render(&self.eval.phantom, &self.eval_grid()?)
    }

    /// Point targets alone, without speckle.
    pub fn simulate_points(&self) -> CliResult<RfFrame> {
        let spec = PhantomSpec {
            scatterers: self
                .eval
                .point_targets
                .iter()
                .map(|p| beamlab::domain::Scatterer { x: p.x, z: p.z, amplitude: 1.0 })
                .collect(),
            ..PhantomSpec::empty()
        };
        self.render(&spec, &self.eval_grid()?)
    }

    /// One ROI per cyst of the evaluation phantom.
    pub fn rois(&self) -> Vec<CystRoi> {
        self.eval
            .phantom
            .cysts
            .iter()
            .map(|c| CystRoi {
                center_x: c.center_x,
                center_z: c.center_z,
                inner_radius: c.radius,
                outer_radius: c.radius * self.eval.outer_radius_factor,
            })
            .collect()
    }
}

fn build_grid(g: &GridSection) -> CliResult<PixelGrid> {
    Ok(make_pixel_grid((g.x_min, g.x_max), (g.z_min, g.z_max), g.n_x, g.n_z, g.patch_side)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> String {
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
    }

    #[test]
    fn presets_parse_and_round_trip() {
        for name in ["toy.toml", "paper-scale.toml", "low-shot.toml"] {
            let cfg = RunConfig::from_toml(&preset(name)).unwrap();
            let text = cfg.to_toml().unwrap();
            let again = RunConfig::from_toml(&text).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(text, again.to_toml().unwrap());
        }
    }

    #[test]
    fn paper_scale_shape() {
        let cfg = RunConfig::from_toml(&preset("paper-scale.toml")).unwrap();
        assert_eq!(cfg.simulation.n_frames, 84);
        assert_eq!(cfg.array.n_elements, 64);
        assert_eq!(cfg.grid.patch_side, 32);
        assert_eq!(cfg.training.steps, 14_000);
        assert_eq!(cfg.grid().unwrap().n_patches(), 8);
        let low = RunConfig::from_toml(&preset("low-shot.toml")).unwrap();
        assert_eq!(low.simulation.n_frames, 32);
        assert_eq!((low.array, low.grid, low.training), (cfg.array, cfg.grid, cfg.training));
    }

    #[test]
    fn undersampling_names_the_field() {
        let text = preset("toy.toml").replace("sampling_frequency = 20000000.0", "sampling_frequency = 5000000.0");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sampling frequency"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = preset("toy.toml").replace("[array]", "[array]\nbogus = 1");
        assert_eq!(RunConfig::from_toml(&text).unwrap_err().exit_code(), 2);
    }
}
