use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use handgcn::nn::Stream;
use handgcn::pipeline::{PreprocessConfig, TrainConfig};
use handgcn::{Error, Result};

/// Which stream(s) a training run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamChoice {
    One(Stream),
    Both,
}

impl StreamChoice {
    pub fn streams(self) -> Vec<Stream> {
        match self {
            StreamChoice::One(s) => vec![s],
            StreamChoice::Both => vec![Stream::Joint, Stream::Bone],
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            StreamChoice::One(s) => s.as_str(),
            StreamChoice::Both => "both",
        }
    }
}

/// Effective settings: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub pre: PreprocessConfig,
    pub train: TrainConfig,
    pub stream: StreamChoice,
    pub supplementary: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            pre: PreprocessConfig::default(),
            train: TrainConfig::default(),
            stream: StreamChoice::One(Stream::Joint),
            supplementary: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.learning_rate = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "precision" => self.train.precision = value.parse()?,
            "T" => self.pre.time_steps = parse(key, value)?,
            "missing" => self.pre.missing = value.parse()?,
            "resample" => self.pre.resample = value.parse()?,
            "supplementary" => self.supplementary = parse(key, value)?,
            "stream" => {
                self.stream = match value {
                    "both" => StreamChoice::Both,
                    other => StreamChoice::One(other.parse()?),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn resolve(file: Option<&Path>, flags: &[(&str, Option<&String>)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            cfg.apply_text(&text).map_err(|e| Error::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            })?;
        }
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.pre.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Canonical form; feeding it back through [`RunConfig::apply_text`] reproduces `self`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest={}", m.display());
        }
        let t = &self.train;
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "batch={}", t.batch_size);
        let _ = writeln!(s, "lr={}", t.learning_rate);
        let _ = writeln!(s, "T={}", self.pre.time_steps);
        let _ = writeln!(s, "momentum={}", t.momentum);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "precision={}", t.precision.bits());
        let _ = writeln!(s, "stream={}", self.stream.as_str());
        let _ = writeln!(s, "missing={}", self.pre.missing.as_str());
        let _ = writeln!(s, "resample={}", self.pre.resample.as_str());
        let _ = writeln!(s, "supplementary={}", self.supplementary);
        s
    }
}
