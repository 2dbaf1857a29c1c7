//! File-based driver: generate instances, attribute, quantize, verify.

pub mod commands;
pub mod format;
pub mod verify;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribution::DEFAULT_IG_STEPS;
use crate::error::{Error, Result};
use crate::quantizers::{Granularity, QuantConfig, DEFAULT_GROUP_SIZE};
use crate::toyblock::QuantizedExecution;
use crate::weighting::DEFAULT_IQR_MULTIPLIER;

pub use commands::{cmd_attribute, cmd_gen_model, cmd_quantize, GenModelArgs};
pub use verify::{cmd_verify, VerifyArgs, VerifyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cwe,
    Gptq,
    Rtn,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cwe" => Ok(Method::Cwe),
            "gptq" => Ok(Method::Gptq),
            "rtn" => Ok(Method::Rtn),
            _ => Err(Error::InvalidArgument(format!("unknown method '{s}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Cwe => "cwe",
            Method::Gptq => "gptq",
            Method::Rtn => "rtn",
        })
    }
}

/// Settings shared by `attribute` and `quantize`.
///
/// With `abits` set, weights use symmetric per-channel scales and
/// activations symmetric per-token scales. Without it the run is
/// weight-only with asymmetric group-wise weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub calib: PathBuf,
    pub method: Method,
    pub wbits: u32,
    pub abits: Option<u32>,
    pub group_size: usize,
    pub ig_steps: usize,
    pub iqr_k: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(model: PathBuf, calib: PathBuf, out: PathBuf) -> Self {
        Self {
            model,
            calib,
            method: Method::Cwe,
            wbits: 3,
            abits: None,
            group_size: DEFAULT_GROUP_SIZE,
            ig_steps: DEFAULT_IG_STEPS,
            iqr_k: DEFAULT_IQR_MULTIPLIER,
            seed: 0,
            out,
        }
    }

    pub fn weight_config(&self) -> QuantConfig {
        match self.abits {
            Some(_) => QuantConfig::symmetric(self.wbits, Granularity::PerChannel),
            None => QuantConfig::asymmetric_grouped(self.wbits, self.group_size),
        }
    }

    pub fn act_config(&self) -> Option<QuantConfig> {
        self.abits
            .map(|b| QuantConfig::symmetric(b, Granularity::PerToken))
    }

    pub fn execution(&self) -> QuantizedExecution {
        QuantizedExecution {
            weight_cfg: Some(self.weight_config()),
            act_cfg: self.act_config(),
            equalization: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weight_config().validate()?;
        if let Some(cfg) = self.act_config() {
            cfg.validate()?;
        }
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be at least 1".into()));
        }
        if !(self.iqr_k.is_finite() && self.iqr_k >= 0.0) {
            return Err(Error::Config(format!(
                "iqr_k must be >= 0, got {}",
                self.iqr_k
            )));
        }
        if self.method == Method::Gptq && self.abits.is_some() {
            return Err(Error::Config("gptq is weight-only; drop --abits".into()));
        }
        Ok(())
    }
}
