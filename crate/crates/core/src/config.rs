//! Run configuration: one JSON document per run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BridgeAdapter, Capabilities, ModelAdapter, ToyConfig, ToyModel};
use crate::policies::PolicyConfig;
use crate::simulator::{ClockConfig, SessionOptions, DEFAULT_CHUNK_MS, DEFAULT_MAX_NEW};

/// Decoder layer used for attention when the model is deep enough.
pub const DEFAULT_AGGREGATION_LAYER: usize = 3;
pub const DEFAULT_LAAL_CAP_S: f64 = 3.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    Toy {
        #[serde(default)]
        model: ToyConfig,
    },
    /// An external process speaking the bridge protocol.
    Bridge { command: Vec<String> },
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec::Toy { model: ToyConfig::default() }
    }
}

impl AdapterSpec {
    pub fn build(&self) -> Result<Box<dyn ModelAdapter>> {
        match self {
            AdapterSpec::Toy { model } => Ok(Box::new(ToyModel::new(model.clone())?)),
            AdapterSpec::Bridge { command } => {
                let (program, args) =
                    command.split_first().ok_or_else(|| Error::arg("bridge command is empty"))?;
                Ok(Box::new(BridgeAdapter::spawn(program, args)?))
            }
        }
    }
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub policy: PolicyConfig,
    /// Read-step duration; Local Agreement reads in steps of its own `ts_ms`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_ms: Option<f64>,
    #[serde(default)]
    pub adapter: AdapterSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_layer: Option<usize>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default)]
    pub clock: ClockConfig,
    /// Global CMVN statistics applied to every source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmvn: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laal_cap_s: Option<f64>,
}

impl SessionConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        Self {
            policy,
            chunk_ms: None,
            adapter: AdapterSpec::default(),
            aggregation_layer: None,
            max_new: DEFAULT_MAX_NEW,
            clock: ClockConfig::default(),
            cmvn: None,
            laal_cap_s: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        match (self.chunk_ms, &self.policy) {
            (Some(c), PolicyConfig::LocalAgreement { ts_ms, .. }) if c != *ts_ms as f64 => {
                return Err(Error::arg("local_agreement reads in steps of ts_ms; drop chunk_ms"));
            }
            (Some(c), _) if !(c.is_finite() && c > 0.0) => {
                return Err(Error::arg("chunk_ms must be positive"));
            }
            _ => {}
        }
        if self.max_new == 0 {
            return Err(Error::arg("max_new must be >= 1"));
        }
        if let Some(cap) = self.laal_cap_s {
            if !(cap > 0.0) {
                return Err(Error::arg("laal_cap_s must be positive"));
            }
        }
        if let AdapterSpec::Bridge { command } = &self.adapter {
            if command.is_empty() {
                return Err(Error::arg("bridge command is empty"));
            }
        }
        Ok(())
    }

    pub fn effective_chunk_ms(&self) -> f64 {
        match self.policy {
            PolicyConfig::LocalAgreement { ts_ms, .. } => ts_ms as f64,
            _ => self.chunk_ms.unwrap_or(DEFAULT_CHUNK_MS),
        }
    }

    /// Explicit layer, else the fourth layer, else the last one for shallow models.
    pub fn effective_layer(&self, caps: &Capabilities) -> usize {
        self.aggregation_layer.unwrap_or(if caps.num_layers > DEFAULT_AGGREGATION_LAYER {
            DEFAULT_AGGREGATION_LAYER
        } else {
            caps.num_layers.saturating_sub(1)
        })
    }

    /// Checks the parts of the configuration that depend on the model.
    pub fn check_model(&self, caps: &Capabilities) -> Result<()> {
        let layer = self.effective_layer(caps);
        if self.policy.uses_attention() && layer >= caps.num_layers {
            return Err(Error::arg(format!(
                "aggregation layer {layer} out of range for {} decoder layers",
                caps.num_layers
            )));
        }
        Ok(())
    }

    pub fn session_options(&self, caps: &Capabilities) -> SessionOptions {
        SessionOptions {
            chunk_ms: self.effective_chunk_ms(),
            aggregation_layer: self.effective_layer(caps),
            max_new: self.max_new,
        }
    }

    /// Name of the hyperparameter a sweep varies for this policy.
    pub fn sweep_param(&self) -> &'static str {
        match self.policy {
            PolicyConfig::AlignAtt { .. } => "f",
            PolicyConfig::EdAtt { .. } => "alpha",
            PolicyConfig::WaitK { .. } => "k",
            PolicyConfig::LocalAgreement { .. } => "ts_ms",
        }
    }

    /// Copy with the swept hyperparameter set to `value`.
    pub fn with_param(&self, value: f64) -> Result<Self> {
        let whole = || {
            if value.fract() == 0.0 && value >= 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::arg(format!("{} takes whole numbers, got {value}", self.sweep_param())))
            }
        };
        let mut c = self.clone();
        c.policy = match self.policy {
            PolicyConfig::AlignAtt { .. } => PolicyConfig::AlignAtt { f: whole()? },
            PolicyConfig::EdAtt { lambda, .. } => PolicyConfig::EdAtt { alpha: value, lambda },
            PolicyConfig::WaitK { .. } => PolicyConfig::WaitK { k: whole()? },
            PolicyConfig::LocalAgreement { window, .. } => {
                PolicyConfig::LocalAgreement { ts_ms: whole()? as u32, window }
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn param_value(&self) -> f64 {
        match self.policy {
            PolicyConfig::AlignAtt { f } => f as f64,
            PolicyConfig::EdAtt { alpha, .. } => alpha,
            PolicyConfig::WaitK { k } => k as f64,
            PolicyConfig::LocalAgreement { ts_ms, .. } => ts_ms as f64,
        }
    }
}
