//! Run configuration (TOML).
//!
//! ```toml
//! seed = 7
//! session_id = 1
//! [pass]      # PassProfile
//! [link]      # LinkBudgetParams
//! [source]    # SourceParams
//! [protocol]  # ProtocolConfig, with [protocol.sift]
//! [channel]   # ChannelParams
//! ```
//!
//! Every table is optional and every field defaults. Parse errors and
//! validation failures are reported with the line of the offending key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::channel::{ChannelError, ChannelParams};
use crate::distill::session::{ProtocolConfig, SessionError};
use crate::link::{LinkBudgetParams, LinkError, PassProfile};
use crate::source::{SourceError, SourceParams};

/// Allowed PA block sizes in bits.
pub const BLOCK_SIZE_LADDER: [usize; 9] =
    [100_000, 200_000, 300_000, 400_000, 500_000, 600_000, 700_000, 800_000, 900_000];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{}invalid [{section}]: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { section: &'static str, line: Option<usize>, message: String },
    #[error("block size {0} is not one of 100000, 200000, ..., 900000")]
    BlockSize(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub session_id: u64,
    pub pass: PassProfile,
    pub link: LinkBudgetParams,
    pub source: SourceParams,
    pub protocol: ProtocolConfig,
    pub channel: ChannelParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            session_id: 1,
            pass: PassProfile::default(),
            link: LinkBudgetParams::default(),
            source: SourceParams::default(),
            protocol: ProtocolConfig::default(),
            channel: ChannelParams::default(),
        }
    }
}

pub fn validate_block_size(bits: usize) -> Result<(), ConfigError> {
    if BLOCK_SIZE_LADDER.contains(&bits) {
        Ok(())
    } else {
        Err(ConfigError::BlockSize(bits))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.protocol.source = cfg.source;
        cfg.validate_in(Some(text))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_in(None)
    }

    fn validate_in(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let fail = |section: &'static str, key: Option<&str>, message: String| ConfigError::Invalid {
            section,
            line: text.and_then(|t| locate(t, section, key)),
            message,
        };
        self.pass.validate().map_err(|e| fail("pass", link_key(&e), e.to_string()))?;
        self.link.validate().map_err(|e| fail("link", link_key(&e), e.to_string()))?;
        self.source.validate().map_err(|e| fail("source", source_key(&e), e.to_string()))?;
        self.channel.validate().map_err(|e| fail("channel", channel_key(&e), e.to_string()))?;
        let mut protocol = self.protocol.clone();
        protocol.source = self.source;
        protocol.validate().map_err(|e| fail("protocol", session_key(&e), e.to_string()))?;
        validate_block_size(self.protocol.block_bits).map_err(|e| fail("protocol", Some("block_bits"), e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn link_key(e: &LinkError) -> Option<&'static str> {
    Some(match e {
        LinkError::MaxElevation(_) => "max_elevation",
        LinkError::Timing { .. } => "duration",
        LinkError::Altitude(_) => "orbit_altitude",
        LinkError::Param { name, .. } => name,
        LinkError::GateWiderThanPeriod { .. } => "gate_width",
        _ => return None,
    })
}

fn source_key(e: &SourceError) -> Option<&'static str> {
    match e {
        SourceError::Probabilities(_) => Some("p_signal"),
        SourceError::IntensityOrder { .. } => Some("nu"),
        SourceError::Contrast(_) => Some("intrinsic_contrast_db"),
        SourceError::EmptyStream => None,
    }
}

fn channel_key(e: &ChannelError) -> Option<&'static str> {
    Some(match e {
        ChannelError::Loss(_) => "frame_loss_prob",
        ChannelError::Param { name, .. } => name,
        ChannelError::RepeatInterval(_) => "repeat_interval",
        ChannelError::Outage(..) => "outages",
    })
}

fn session_key(e: &SessionError) -> Option<&'static str> {
    match e {
        SessionError::BlockSize { .. } => Some("block_bits"),
        SessionError::Param { name, .. } => Some(name),
        _ => None,
    }
}

/// 1-based line of `key` inside `[section]` (or any `[section.*]` subtable),
/// falling back to the section header.
fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim_matches(['[', ']', ' ']).to_string();
            if current == section && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        if let (true, Some(k)) = (in_section, key) {
            let lhs = line.split('=').next().unwrap_or("").trim();
            if line.contains('=') && lhs == k {
                return Some(i + 1);
            }
        }
    }
    header
}
