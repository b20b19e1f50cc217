use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("config is missing `{0}`")]
    Missing(&'static str),
}

/// Server settings, read from `key = value` lines:
///
/// ```text
/// # comment
/// listen = 127.0.0.1:8080
/// credentials = credentials.txt
/// data_dir = data
/// token_ttl_secs = 28800
/// ```
///
/// `credentials` and `data_dir` are required. Values may be wrapped in
/// double quotes. Relative paths are resolved against the directory
/// holding the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub credentials: PathBuf,
    pub data_dir: PathBuf,
    pub token_ttl_secs: u64,
}

impl ServerConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut listen = None;
        let mut credentials = None;
        let mut data_dir = None;
        let mut ttl = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| ConfigError::Line { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            let fresh = match key {
                "listen" => listen
                    .replace(value.parse::<SocketAddr>().map_err(|e| bad(format!("listen: {e}")))?)
                    .is_none(),
                "credentials" => credentials.replace(base.join(value)).is_none(),
                "data_dir" => data_dir.replace(base.join(value)).is_none(),
                "token_ttl_secs" => ttl
                    .replace(value.parse::<u64>().map_err(|e| bad(format!("token_ttl_secs: {e}")))?)
                    .is_none(),
                other => return Err(bad(format!("unknown key `{other}`"))),
            };
            if !fresh {
                return Err(bad(format!("`{key}` is set twice")));
            }
        }
        Ok(ServerConfig {
            listen: listen.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 8080))),
            credentials: credentials.ok_or(ConfigError::Missing("credentials"))?,
            data_dir: data_dir.ok_or(ConfigError::Missing("data_dir"))?,
            token_ttl_secs: ttl.unwrap_or(8 * 3600),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
