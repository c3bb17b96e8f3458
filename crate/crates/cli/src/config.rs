//! Experiment configuration: one JSON document, with dotted-path overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use gaussct::density::DensityConfig;
use gaussct::geometry::{make_semicircle_geometry, ConeBeamGeometry, GridSpec};
use gaussct::initializer::InitConfig;
use gaussct::optim::{IterativeConfig, OptimConfig};
use gaussct::phantom::{Ellipsoid, PhantomPreset};
use gaussct::projector::RampFilter;
use gaussct::Error;

/// Where the ground-truth volume comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Phantom(PhantomPreset),
    Ellipsoids(Vec<Ellipsoid>),
    /// Raw volume with sidecar; its grid must match `grid`.
    Volume(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dims: [64, 64, 32] }
    }
}

impl GridConfig {
    pub fn spec(&self) -> gaussct::Result<GridSpec> {
        GridSpec::unit_cube(self.dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub num_views: usize,
    /// `[rows, cols]`.
    pub detector_shape: [usize; 2],
    pub source_distance: f64,
    pub detector_distance: f64,
    /// `[row pitch, col pitch]` in world units.
    pub detector_pixel_size: [f64; 2],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            num_views: 20,
            detector_shape: [128, 200],
            source_distance: 2.0,
            detector_distance: 2.0,
            detector_pixel_size: [0.016, 0.016],
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> gaussct::Result<ConeBeamGeometry> {
        if self.num_views == 0 {
            return Err(Error::config("geometry.num_views", "must be >= 1"));
        }
        make_semicircle_geometry(
            self.num_views,
            self.detector_shape,
            self.source_distance,
            self.detector_distance,
            self.detector_pixel_size,
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    #[default]
    Fbp,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Initial counts for the gaussian-count sweep (density control off).
    pub gaussian_counts: Vec<usize>,
    /// Initial counts for the density-control on/off pairs.
    pub density_counts: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            gaussian_counts: vec![1_000, 5_000, 15_000, 30_000, 40_000, 60_000],
            density_counts: vec![5_000, 15_000],
        }
    }
}

/// Additive Gaussian noise on simulated projections, as a fraction of the
/// largest projection value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub relative_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: Option<SourceConfig>,
    pub grid: GridConfig,
    pub geometry: GeometryConfig,
    pub noise: NoiseConfig,
    pub fbp: RampFilter,
    pub init_method: InitMethod,
    pub init: InitConfig,
    pub optim: OptimConfig,
    pub density: DensityConfig,
    pub iterative: IterativeConfig,
    pub ablation: AblationConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: None,
            grid: GridConfig::default(),
            geometry: GeometryConfig::default(),
            noise: NoiseConfig::default(),
            fbp: RampFilter::default(),
            init_method: InitMethod::Fbp,
            init: InitConfig::default(),
            optim: OptimConfig::default(),
            density: DensityConfig::default(),
            iterative: IterativeConfig::default(),
            ablation: AblationConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Built-in configuration used when no file is given.
    pub fn builtin() -> Self {
        ExperimentConfig {
            source: Some(SourceConfig::Phantom(PhantomPreset::Abdomen)),
            ..Default::default()
        }
    }

    /// Checks every section against its own invariants.
    pub fn validate(&self) -> gaussct::Result<()> {
        if self.source.is_none() {
            return Err(Error::config("source", "missing; give a phantom, ellipsoids or volume"));
        }
        let spec = self.grid.spec()?;
        let geom = self.geometry.build()?;
        geom.check_source_outside(&spec)?;
        if !(self.noise.relative_std.is_finite() && self.noise.relative_std >= 0.0) {
            return Err(Error::config("noise.relative_std", "must be finite and >= 0"));
        }
        self.fbp.validate()?;
        self.init.validate()?;
        self.optim.validate()?;
        self.density.validate()?;
        self.iterative.validate()?;
        if self.init.num_gaussians > self.density.max_gaussians {
            return Err(Error::config(
                "density.max_gaussians",
                "must be at least init.num_gaussians",
            ));
        }
        Ok(())
    }
}

/// Parses `a.b.c=value`. The value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = s
        .split_once('=')
        .with_context(|| format!("override `{s}` is not of the form key.path=value"))?;
    let keys: Vec<String> = path.split('.').map(str::to_owned).collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{s}` has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((keys, value))
}

pub fn apply_override(doc: &mut Value, keys: &[String], value: Value) -> Result<()> {
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap()
            }
            _ => bail!("cannot set `{}`: `{}` is not an object", keys.join("."), keys[..i].join(".")),
        };
        if i + 1 == keys.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Loads the config file (or the built-in default), applies overrides and
/// validates the result.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(ExperimentConfig::builtin())?,
    };
    for o in overrides {
        let (keys, value) = parse_override(o)?;
        apply_override(&mut doc, &keys, value)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc)
        .map_err(|e| Error::config("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
