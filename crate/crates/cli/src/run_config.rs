//! `key = value` run configuration: every model/training key plus the
//! `data`, `checkpoint_out` and `report_dir` paths.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cct::config::{parse_entries, CctConfig, ConfigError};

use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.txt";

const PATH_KEYS: [&str; 3] = ["data", "checkpoint_out", "report_dir"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: CctConfig,
    pub data: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parse without validating the model section, so that flag overrides
    /// can still fix it up.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut run = RunConfig::default();
        for (line, key, value) in parse_entries(text)? {
            match key.as_str() {
                "data" => run.data = Some(value.into()),
                "checkpoint_out" => run.checkpoint_out = Some(value.into()),
                "report_dir" => run.report_dir = Some(value.into()),
                _ => run.model.apply(line, &key, &value)?,
            }
        }
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Canonical text; [`RunConfig::parse`] of it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        for (key, value) in PATH_KEYS.iter().zip([&self.data, &self.checkpoint_out, &self.report_dir]) {
            if let Some(v) = value {
                writeln!(out, "{key} = {}", v.display()).expect("write to string");
            }
        }
        out
    }

    /// Write [`RunConfig::to_text`] as `config.txt` inside `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_with_paths() {
        let text = "# run\nepochs = 5\nlr = 0.001\ndata = /tmp/blood.npz\nreport_dir = out/report\n";
        let run = RunConfig::parse(text).unwrap();
        assert_eq!(run.model.epochs, 5);
        assert_eq!(run.model.lr, 0.001);
        assert_eq!(run.data.as_deref(), Some(Path::new("/tmp/blood.npz")));
        assert_eq!(run.checkpoint_out, None);
        assert_eq!(RunConfig::parse(&run.to_text()).unwrap(), run);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::parse("epoch = 3"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(RunConfig::parse("data = a\ndata = b"), Err(ConfigError::DuplicateKey { line: 2, .. })));
        assert!(matches!(RunConfig::parse("epochs = many"), Err(ConfigError::BadValue { .. })));
    }
}
