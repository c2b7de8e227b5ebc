//! Experiment configuration: one versioned TOML document, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use mbcd_core::data::{DataGenConfig, Protocol};
use mbcd_core::flatness::default_radii;
use mbcd_core::model::{ModelConfig, DEFAULT_LN_EPS};
use mbcd_core::optim::AdamConfig;
use mbcd_core::train::{MbcdConfig, Method};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Overrides the `output_dir` root when set.
pub const OUTPUT_ROOT_ENV: &str = "MBCD_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatnessSplit {
    /// All rows of the (first) evaluated domain.
    TargetTest,
    SourceVal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatnessSettings {
    pub enabled: bool,
    pub radii: Vec<f64>,
    pub n_directions: usize,
    pub split: FlatnessSplit,
}

impl Default for FlatnessSettings {
    fn default() -> Self {
        FlatnessSettings {
            enabled: true,
            radii: default_radii(),
            n_directions: 32,
            split: FlatnessSplit::TargetTest,
        }
    }
}

/// Gaussian noise added to one modality of the evaluated domain at the
/// selected checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSettings {
    /// 0-based modality index.
    pub modality: usize,
    pub variances: Vec<f64>,
}

impl Default for RobustnessSettings {
    fn default() -> Self {
        RobustnessSettings {
            modality: 0,
            variances: vec![0.0, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    /// Label used in plot data; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `mbcd` honors the component flags in `[mbcd]`; `erm` and `ema_only`
    /// switch them off.
    pub method: Method,
    pub protocol: Protocol,
    /// Target domain (multi-source) or the source/only domain otherwise.
    pub target: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataGenConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub mbcd: MbcdConfig,
    #[serde(default)]
    pub flatness: FlatnessSettings,
    #[serde(default)]
    pub robustness: RobustnessSettings,
}

/// The default synthetic benchmark: three domains, three modalities, four
/// classes. Modality 1 carries the strongest signal and also shifts the most
/// between domains.
pub fn benchmark_data() -> DataGenConfig {
    DataGenConfig {
        num_domains: 3,
        num_classes: 4,
        latent_dim: 8,
        input_dims: vec![16, 16, 16],
        snr: vec![1.0, 0.35, 0.3],
        noise_std: vec![0.2, 1.0, 1.0],
        rotation_strength: vec![0.6, 0.1, 0.1],
        shift_scale: vec![1.0, 0.2, 0.2],
        centroid_scale: 4.0,
        train_per_domain: 600,
        val_per_domain: 150,
        test_per_domain: 750,
        seed: 0,
    }
}

pub fn benchmark_model(data: &DataGenConfig) -> ModelConfig {
    let m = data.modalities();
    ModelConfig {
        input_dims: data.input_dims.clone(),
        hidden_dims: vec![32; m],
        feature_dims: vec![16; m],
        num_classes: data.num_classes,
        init_seed: 0,
        ln_eps: DEFAULT_LN_EPS,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = benchmark_data();
        ExperimentConfig {
            format_version: FORMAT_VERSION,
            name: None,
            method: Method::Mbcd,
            protocol: Protocol::MultiSource,
            target: 0,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/default"),
            model: benchmark_model(&data),
            data,
            mbcd: MbcdConfig {
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..MbcdConfig::default()
            },
            flatness: FlatnessSettings::default(),
            robustness: RobustnessSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(LabError::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.mbcd.validate()?;
        if self.model.input_dims != self.data.input_dims {
            return Err(LabError::Config(format!(
                "model.input_dims {:?} differ from data.input_dims {:?}",
                self.model.input_dims, self.data.input_dims
            )));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(LabError::Config(format!(
                "model.num_classes {} differs from data.num_classes {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        if self.target >= self.data.num_domains {
            return Err(LabError::Config(format!(
                "target domain {} does not exist ({} domains)",
                self.target, self.data.num_domains
            )));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(LabError::Config("seeds must be distinct".into()));
        }
        let f = &self.flatness;
        if f.enabled {
            if f.n_directions == 0 {
                return Err(LabError::Config("flatness.n_directions must be >= 1".into()));
            }
            if f.radii.is_empty()
                || f.radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite())
                || f.radii.windows(2).any(|w| w[0] > w[1])
            {
                return Err(LabError::Config(
                    "flatness.radii must be non-empty, finite, non-negative and ascending".into(),
                ));
            }
        }
        let r = &self.robustness;
        if r.modality >= self.data.modalities() {
            return Err(LabError::Config(format!(
                "robustness.modality {} does not exist ({} modalities)",
                r.modality,
                self.data.modalities()
            )));
        }
        if r.variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(LabError::Config("robustness.variances must be finite and non-negative".into()));
        }
        if let Some(name) = &self.name {
            if name.is_empty() || name.contains([',', '"', '\n']) {
                return Err(LabError::Config(format!("name {name:?} must be non-empty without commas, quotes or newlines")));
            }
        }
        Ok(())
    }

    /// Label of this configuration in plot data.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| method_name(self.method).to_string())
    }

    /// The training flags actually used for `self.method`.
    pub fn effective_mbcd(&self) -> MbcdConfig {
        self.mbcd.for_method(self.method)
    }

    /// `output_dir`, re-rooted under `$MBCD_OUTPUT_ROOT` when that is set and
    /// the configured path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() && self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(io_err(path))
    }

    /// Applies `section.key=value` overrides, where `value` is a TOML value
    /// (bare strings are accepted). The result is re-validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| LabError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("override `{item}` is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let text = toml::to_string(&doc).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_toml(&text, Path::new("<overrides>"))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn method_name(method: Method) -> &'static str {
    match method {
        Method::Mbcd => "mbcd",
        Method::Erm => "erm",
        Method::EmaOnly => "ema_only",
    }
}

pub fn protocol_name(protocol: Protocol) -> &'static str {
    match protocol {
        Protocol::MultiSource => "multi_source",
        Protocol::SingleSource => "single_source",
        Protocol::InDomain => "in_domain",
    }
}
