//! Model presets, the inference/training bundle and checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! config.json   preset, architecture, tap anchoring, schedule length, digests
//! base.bin      frozen base parameters
//! branch.bin    branch parameters
//! taps.bin      control-point projections
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branch::{DualBranchNet, TapAnchoring};
use crate::error::{PainterError, Result};
use crate::nn::{DenoiserSpec, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::text::{TextEncoder, Tokenizer};
use crate::vae::ToyVae;

pub const TOY_CONTEXT_LEN: usize = 16;
pub const TOY_TIMESTEPS: usize = 50;
pub const FULL_TIMESTEPS: usize = 1000;
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Preset {
    #[default]
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "sd15-adapter")]
    Sd15Adapter,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Sd15Adapter => "sd15-adapter",
        }
    }

    pub fn spec(self) -> DenoiserSpec {
        match self {
            Preset::Toy => DenoiserSpec::toy(TOY_CONTEXT_LEN),
            Preset::Sd15Adapter => DenoiserSpec::sd15_adapter(),
        }
    }

    pub fn default_timesteps(self) -> usize {
        match self {
            Preset::Toy => TOY_TIMESTEPS,
            Preset::Sd15Adapter => FULL_TIMESTEPS,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = PainterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "sd15-adapter" => Ok(Preset::Sd15Adapter),
            other => Err(PainterError::domain(format!("unknown preset `{other}`"))),
        }
    }
}

/// Network plus the fixed pieces around it.
#[derive(Debug, Clone)]
pub struct Models {
    pub preset: Preset,
    pub net: DualBranchNet,
    pub text: TextEncoder,
    pub vae: ToyVae,
    pub sched: NoiseSchedule,
}

impl Models {
    pub fn new(preset: Preset, net: DualBranchNet, timesteps: usize) -> Result<Self> {
        let spec = &net.spec;
        let text = TextEncoder::new(Tokenizer::new(spec.context_len, spec.vocab_size), spec.text_dim, spec.text_seed);
        Ok(Self {
            preset,
            sched: NoiseSchedule::scaled_linear(timesteps)?,
            text,
            vae: ToyVae,
            net,
        })
    }

    /// Fresh toy model with a seeded random base.
    pub fn toy(seed: u64) -> Result<Self> {
        Self::new(Preset::Toy, DualBranchNet::toy(TOY_CONTEXT_LEN, seed)?, TOY_TIMESTEPS)
    }

    /// Fresh model for `preset`. The SD1.5 adapter only fixes shapes; its
    /// base weights are not bundled.
    pub fn init(preset: Preset, seed: u64) -> Result<Self> {
        match preset {
            Preset::Toy => Self::toy(seed),
            Preset::Sd15Adapter => Err(PainterError::ModelNotLoaded(
                "sd15-adapter needs external base weights, which this build cannot load".into(),
            )),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Digests {
    base: String,
    branch: String,
    taps: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    format: u32,
    preset: Preset,
    spec: DenoiserSpec,
    anchoring: TapAnchoring,
    timesteps: usize,
    digests: Digests,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| PainterError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PainterError::io(path, e))
}

pub fn save_checkpoint(models: &Models, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PainterError::io(dir, e))?;
    let net = &models.net;
    let cfg = CheckpointConfig {
        format: FORMAT,
        preset: models.preset,
        spec: net.spec.clone(),
        anchoring: net.anchoring,
        timesteps: models.sched.total_steps(),
        digests: Digests {
            base: net.base.digest(),
            branch: net.branch.digest(),
            taps: net.tap_params.digest(),
        },
    };
    let mut json = serde_json::to_string_pretty(&cfg)?;
    json.push('\n');
    write(&dir.join("config.json"), json.as_bytes())?;
    write(&dir.join("base.bin"), &net.base.params().to_bytes())?;
    write(&dir.join("branch.bin"), &net.branch.to_bytes())?;
    write(&dir.join("taps.bin"), &net.tap_params.to_bytes())
}

fn load_params(dir: &Path, name: &str, digest: &str) -> Result<ParamStore> {
    let params = ParamStore::from_bytes(&read(&dir.join(name))?)?;
    if params.digest() != digest {
        return Err(PainterError::schema(None, format!("{name} does not match its recorded digest")));
    }
    Ok(params)
}

pub fn load_checkpoint(dir: &Path) -> Result<Models> {
    let raw = read(&dir.join("config.json"))?;
    let cfg: CheckpointConfig =
        serde_json::from_slice(&raw).map_err(|e| PainterError::schema(None, format!("config.json: {e}")))?;
    if cfg.format != FORMAT {
        return Err(PainterError::schema(None, format!("unsupported checkpoint format {}", cfg.format)));
    }
    let base = load_params(dir, "base.bin", &cfg.digests.base)?;
    let branch = load_params(dir, "branch.bin", &cfg.digests.branch)?;
    let taps = load_params(dir, "taps.bin", &cfg.digests.taps)?;
    let net = DualBranchNet::from_parts(cfg.spec, base, branch, taps, cfg.anchoring)
        .map_err(|e| PainterError::schema(None, format!("parameters do not fit the architecture: {e}")))?;
    Models::new(cfg.preset, net, cfg.timesteps).map_err(|e| PainterError::schema(None, e.to_string()))
}

/// Load and insist on a particular architecture.
pub fn load_checkpoint_for(dir: &Path, expected: &DenoiserSpec) -> Result<Models> {
    let models = load_checkpoint(dir)?;
    if &models.net.spec != expected {
        return Err(PainterError::schema(None, "checkpoint architecture differs from the requested one"));
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in [Preset::Toy, Preset::Sd15Adapter] {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("sd21".parse::<Preset>().is_err());
        assert!(matches!(Models::init(Preset::Sd15Adapter, 0), Err(PainterError::ModelNotLoaded(_))));
    }
}
