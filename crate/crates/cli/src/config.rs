//! Where the CLI finds its server and credential: flags, then the
//! environment, then the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;

pub const ENV_SERVER: &str = "CVMG_SERVER";
pub const ENV_CREDENTIAL: &str = "CVMG_CREDENTIAL";
pub const ENV_CONFIG: &str = "CVMG_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    #[default]
    Human,
    Json,
}

/// An `<id>:<secret>` pair. Debug and Display never show the secret.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential {
    pub id: String,
    secret: String,
}

impl Credential {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        match text.trim().split_once(':') {
            Some((id, secret)) if !id.is_empty() && !secret.is_empty() => Ok(Self {
                id: id.to_owned(),
                secret: secret.to_owned(),
            }),
            _ => Err(CliError::usage("credential must look like <id>:<secret>")),
        }
    }

    pub fn authorization(&self) -> String {
        format!("CVMG {}:{}", self.id, self.secret)
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Credential({}:<redacted>)", self.id)
    }
}

/// Contents of the config file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub server: Option<String>,
    pub credential: Option<String>,
    pub output: Option<OutputMode>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config file {}: {e}", path.display())))
    }
}

/// One source of settings; unset fields defer to the next source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layer {
    pub server: Option<String>,
    pub credential: Option<String>,
    pub output: Option<OutputMode>,
}

impl From<FileConfig> for Layer {
    fn from(f: FileConfig) -> Self {
        Self {
            server: f.server,
            credential: f.credential,
            output: f.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliConfig {
    pub server: Option<String>,
    pub credential: Option<Credential>,
    pub output: OutputMode,
}

impl CliConfig {
    /// Merges layers, highest precedence first.
    pub fn resolve(layers: &[Layer]) -> Result<Self, CliError> {
        let server = layers.iter().find_map(|l| l.server.clone().filter(|s| !s.trim().is_empty()));
        let credential = layers
            .iter()
            .find_map(|l| l.credential.clone().filter(|s| !s.trim().is_empty()))
            .map(|c| Credential::parse(&c))
            .transpose()?;
        let output = layers.iter().find_map(|l| l.output).unwrap_or_default();
        Ok(Self {
            server,
            credential,
            output,
        })
    }

    pub fn server(&self) -> Result<&str, CliError> {
        self.server
            .as_deref()
            .ok_or_else(|| CliError::usage(format!("no server configured (--server or {ENV_SERVER})")))
    }

    pub fn credential(&self) -> Result<&Credential, CliError> {
        self.credential
            .as_ref()
            .ok_or_else(|| CliError::usage(format!("no credential configured (--credential or {ENV_CREDENTIAL})")))
    }
}

/// `$XDG_CONFIG_HOME/cvmg/config.toml`, else `~/.config/cvmg/config.toml`.
pub fn default_config_path() -> Option<PathBuf> {
    let base = std::env::var_os("XDG_CONFIG_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".config")))?;
    Some(base.join("cvmg").join("config.toml"))
}
