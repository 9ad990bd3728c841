//! Run configuration: a TOML file, `--set section.key=value` overrides, and dedicated flags.

use std::fs;
use std::path::{Path, PathBuf};

use avsep::biometric::{BiometricConfig, BiometricTrainConfig};
use avsep::corpus::DatasetConfig;
use avsep::dsp::{DspConfig, DEFAULT_GL_ITERS};
use avsep::separation::{FusionMode, SeparatorConfig, SeparatorKind};
use avsep::training::TrainConfig;
use avsep::{Error, Result};
use serde::{Deserialize, Serialize};

/// File name of the effective configuration echoed into every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorSection {
    pub fusion: FusionMode,
    pub audio_channels: usize,
    pub visual_channels: usize,
    pub res_blocks: usize,
    pub mask_blocks: usize,
    pub kernel: usize,
}

impl Default for SeparatorSection {
    fn default() -> Self {
        let d = SeparatorConfig::default();
        Self {
            fusion: d.fusion,
            audio_channels: d.audio_channels,
            visual_channels: d.visual_channels,
            res_blocks: d.res_blocks,
            mask_blocks: d.mask_blocks,
            kernel: d.kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub gl_iters: usize,
    /// Scored output of two-output models.
    pub channel: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            gl_iters: DEFAULT_GL_ITERS,
            channel: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; the dataset seed and every training seed derive from it.
    pub seed: u64,
    /// Separator checkpoint cadence in steps (0 = final only).
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    pub dsp: DspConfig,
    pub biometric: BiometricConfig,
    pub biometric_train: BiometricTrainConfig,
    pub separator: SeparatorSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_every: 500,
            dataset: DatasetConfig::default(),
            dsp: DspConfig::default(),
            biometric: BiometricConfig::default(),
            biometric_train: BiometricTrainConfig::default(),
            separator: SeparatorSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, known: &toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut table = root;
    let mut schema = known;
    for part in parents {
        schema = schema
            .get(*part)
            .and_then(|v| v.as_table())
            .ok_or_else(|| Error::Argument(format!("unknown config section `{part}` in `{key}`")))?;
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Argument(format!("config key `{part}` is not a section")))?;
    }
    if !schema.contains_key(*last) {
        return Err(Error::Argument(format!("unknown config key `{key}`")));
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn check_keys(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Err(Error::Config(format!("unknown config key `{full}`"))),
            (toml::Value::Table(sub), Some(toml::Value::Table(ksub))) => check_keys(sub, ksub, &full)?,
            _ => {}
        }
    }
    Ok(())
}

impl RunConfig {
    /// File (optional) + overrides; unknown keys are rejected.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let known = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        check_keys(&root, &known, "")?;
        for s in sets {
            apply_override(&mut root, &known, s)?;
        }
        let mut cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.dataset.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.dsp.validate()?;
        self.biometric.validate()?;
        if self.dataset.sample_rate != self.dsp.sample_rate {
            return Err(Error::Config(format!(
                "dataset.sample_rate {} differs from dsp.sample_rate {}",
                self.dataset.sample_rate, self.dsp.sample_rate
            )));
        }
        if self.biometric.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "biometric.n_mels {} differs from dsp.n_mels {}",
                self.biometric.n_mels, self.dsp.n_mels
            )));
        }
        Ok(())
    }

    pub fn separator_config(&self, kind: SeparatorKind, identity: BiometricConfig) -> SeparatorConfig {
        let s = &self.separator;
        SeparatorConfig {
            kind,
            fusion: s.fusion,
            audio_channels: s.audio_channels,
            visual_channels: s.visual_channels,
            res_blocks: s.res_blocks,
            mask_blocks: s.mask_blocks,
            kernel: s.kernel,
            dsp: self.dsp.clone(),
            identity,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
