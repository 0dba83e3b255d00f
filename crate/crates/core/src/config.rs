use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which side the observer-overlap fraction is taken over.
///
/// `Mask`: a frame observes an entity when ≥ tau_obs of the entity's cells
/// lie in the frame volume. `Frame`: the fraction is taken over the frame
/// volume instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapOver {
    Mask,
    Frame,
}

/// Consensus ablation switch. `StructuralOnly` forces the semantic rate to 1,
/// `SemanticOnly` forces the structural rate to 1, so the merge criterion
/// degenerates to a single-rate threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    None,
    StructuralOnly,
    SemanticOnly,
}

/// Every tunable the pipeline reads, with the published defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig<T: Scalar> {
    /// Minimum overlap fraction for a frame to count as an observer.
    pub tau_obs: T,
    /// Minimum containment fraction for a mask to encompass another.
    pub tau_sub: T,
    /// Merge when r_struct * r_sem reaches this value.
    pub tau_thres: T,
    /// Edge length of the voxel grid in meters.
    pub voxel_size: T,
    /// Percentile step (in percent) by which the observer-count threshold
    /// drops each merge generation.
    pub observer_percentile_step: T,
    /// Number of best-covering member masks used for feature aggregation.
    pub topk_masks: usize,
    /// Multi-scale crop levels per selected mask.
    pub crop_levels: usize,
    /// Bounding-box expansion factor added per crop level.
    pub crop_expand: T,
    /// Candidate instances offered to the language model (N_c).
    pub candidates: usize,
    /// Neighboring instances listed per candidate (N_s).
    pub neighbors: usize,
    /// Search radius in meters for those neighbors.
    pub neighbor_radius: T,
    /// Masks with fewer valid-depth pixels are dropped at load.
    pub min_mask_pixels: usize,
    /// Pixel subsampling stride for frame observation volumes.
    pub frame_stride: usize,
    /// Connected components smaller than this are discarded.
    pub min_component_voxels: usize,
    /// A member overlapping at least this fraction of two final instances
    /// is treated as under-segmented and removed.
    pub underseg_fraction: T,
    /// Hard cap on merge generations (fixpoint guard).
    pub max_generations: usize,
    /// Direction of the observer-overlap fraction.
    pub overlap_over: OverlapOver,
    /// Whether a mask may support a pair it belongs to.
    pub allow_self_support: bool,
    /// Recompute the percentile schedule over the surviving pair table each
    /// generation instead of fixing it from the initial table.
    pub reschedule_each_generation: bool,
    /// Consensus ablation (not persisted as a default; set per run).
    pub ablation: AblationMode,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        let c = |v: f64| T::from_f64_cfg(v);
        Self {
            tau_obs: c(0.3),
            tau_sub: c(0.8),
            tau_thres: c(0.6),
            voxel_size: c(0.05),
            observer_percentile_step: c(5.0),
            topk_masks: 5,
            crop_levels: 3,
            crop_expand: c(0.2),
            candidates: 8,
            neighbors: 5,
            neighbor_radius: c(2.0),
            min_mask_pixels: 50,
            frame_stride: 4,
            min_component_voxels: 10,
            underseg_fraction: c(0.3),
            max_generations: 50,
            overlap_over: OverlapOver::Mask,
            allow_self_support: false,
            reschedule_each_generation: false,
            ablation: AblationMode::None,
        }
    }
}

/// Serialized form of [`PipelineConfig`]. All fields optional so a config
/// file can override any subset of defaults key by key.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub tau_obs: Option<f64>,
    pub tau_sub: Option<f64>,
    pub tau_thres: Option<f64>,
    pub voxel_size: Option<f64>,
    pub observer_percentile_step: Option<f64>,
    pub topk_masks: Option<usize>,
    pub crop_levels: Option<usize>,
    pub crop_expand: Option<f64>,
    pub candidates: Option<usize>,
    pub neighbors: Option<usize>,
    pub neighbor_radius: Option<f64>,
    pub min_mask_pixels: Option<usize>,
    pub frame_stride: Option<usize>,
    pub min_component_voxels: Option<usize>,
    pub underseg_fraction: Option<f64>,
    pub max_generations: Option<usize>,
    pub overlap_over: Option<OverlapOver>,
    pub allow_self_support: Option<bool>,
    pub reschedule_each_generation: Option<bool>,
}

impl<T: Scalar> PipelineConfig<T> {
    /// Applies a raw override set on top of `self`, then validates.
    pub fn apply(&self, raw: &RawConfig) -> Result<Self> {
        let mut cfg = self.clone();
        let c = |v: f64| T::from_f64_cfg(v);
        if let Some(v) = raw.tau_obs {
            cfg.tau_obs = c(v);
        }
        if let Some(v) = raw.tau_sub {
            cfg.tau_sub = c(v);
        }
        if let Some(v) = raw.tau_thres {
            cfg.tau_thres = c(v);
        }
        if let Some(v) = raw.voxel_size {
            cfg.voxel_size = c(v);
        }
        if let Some(v) = raw.observer_percentile_step {
            cfg.observer_percentile_step = c(v);
        }
        if let Some(v) = raw.topk_masks {
            cfg.topk_masks = v;
        }
        if let Some(v) = raw.crop_levels {
            cfg.crop_levels = v;
        }
        if let Some(v) = raw.crop_expand {
            cfg.crop_expand = c(v);
        }
        if let Some(v) = raw.candidates {
            cfg.candidates = v;
        }
        if let Some(v) = raw.neighbors {
            cfg.neighbors = v;
        }
        if let Some(v) = raw.neighbor_radius {
            cfg.neighbor_radius = c(v);
        }
        if let Some(v) = raw.min_mask_pixels {
            cfg.min_mask_pixels = v;
        }
        if let Some(v) = raw.frame_stride {
            cfg.frame_stride = v;
        }
        if let Some(v) = raw.min_component_voxels {
            cfg.min_component_voxels = v;
        }
        if let Some(v) = raw.underseg_fraction {
            cfg.underseg_fraction = c(v);
        }
        if let Some(v) = raw.max_generations {
            cfg.max_generations = v;
        }
        if let Some(v) = raw.overlap_over {
            cfg.overlap_over = v;
        }
        if let Some(v) = raw.allow_self_support {
            cfg.allow_self_support = v;
        }
        if let Some(v) = raw.reschedule_each_generation {
            cfg.reschedule_each_generation = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads overrides from a TOML file on top of `self`.
    pub fn apply_file(&self, path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::load(path, &format!("cannot read config: {e}")))?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| Error::schema(format!("config {}: {e}", path.display())))?;
        self.apply(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = |name: &str, v: T| -> Result<()> {
            if v > T::zero() && v <= T::one() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        ratio("tau_obs", self.tau_obs)?;
        ratio("tau_sub", self.tau_sub)?;
        ratio("tau_thres", self.tau_thres)?;
        ratio("underseg_fraction", self.underseg_fraction)?;
        if !(self.voxel_size > T::zero()) {
            return Err(Error::config("voxel_size must be positive"));
        }
        if !(self.observer_percentile_step > T::zero()
            && self.observer_percentile_step <= T::from_f64_cfg(100.0))
        {
            return Err(Error::config("observer_percentile_step must lie in (0, 100]"));
        }
        if self.topk_masks < 1 {
            return Err(Error::config("topk_masks must be at least 1"));
        }
        if self.crop_levels < 1 {
            return Err(Error::config("crop_levels must be at least 1"));
        }
        if !(self.crop_expand >= T::zero()) {
            return Err(Error::config("crop_expand must be non-negative"));
        }
        if self.candidates < 1 {
            return Err(Error::config("candidates must be at least 1"));
        }
        if !(self.neighbor_radius > T::zero()) {
            return Err(Error::config("neighbor_radius must be positive"));
        }
        if self.frame_stride < 1 {
            return Err(Error::config("frame_stride must be at least 1"));
        }
        if self.max_generations < 1 {
            return Err(Error::config("max_generations must be at least 1"));
        }
        Ok(())
    }

    /// Exact serialized image of the effective config. Embedded in every
    /// output artifact; feeding it back through `apply` reproduces `self`.
    pub fn to_raw(&self) -> RawConfig {
        RawConfig {
            tau_obs: Some(self.tau_obs.to_f64_out()),
            tau_sub: Some(self.tau_sub.to_f64_out()),
            tau_thres: Some(self.tau_thres.to_f64_out()),
            voxel_size: Some(self.voxel_size.to_f64_out()),
            observer_percentile_step: Some(self.observer_percentile_step.to_f64_out()),
            topk_masks: Some(self.topk_masks),
            crop_levels: Some(self.crop_levels),
            crop_expand: Some(self.crop_expand.to_f64_out()),
            candidates: Some(self.candidates),
            neighbors: Some(self.neighbors),
            neighbor_radius: Some(self.neighbor_radius.to_f64_out()),
            min_mask_pixels: Some(self.min_mask_pixels),
            frame_stride: Some(self.frame_stride),
            min_component_voxels: Some(self.min_component_voxels),
            underseg_fraction: Some(self.underseg_fraction.to_f64_out()),
            max_generations: Some(self.max_generations),
            overlap_over: Some(self.overlap_over),
            allow_self_support: Some(self.allow_self_support),
            reschedule_each_generation: Some(self.reschedule_each_generation),
        }
    }

    pub fn dump_toml(&self) -> String {
        toml::to_string_pretty(&self.to_raw()).expect("config serializes")
    }
}
