//! TOML run configuration shared by the `train`, `extract` and
//! `check-invariance` commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdmm::DistillConfig;
use crate::tokenizer::TokenizerConfig;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Checkpoints and `metrics.csv` go here; relative paths resolve against the config file.
    pub checkpoint_dir: PathBuf,
    /// Write `epoch-NNNN.ckpt` every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Points sampled from each OFF mesh in the manifest.
    pub mesh_points: usize,
    /// Minimum latent cosine accepted by `check-invariance`.
    pub invariance_threshold: f64,
    pub tokenizer: TokenizerConfig,
    pub transformer: TransformerConfig,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            manifest: PathBuf::from("manifest.tsv"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 10,
            mesh_points: 1024,
            invariance_threshold: 1.0 - 1e-3,
            tokenizer: TokenizerConfig::default(),
            transformer: TransformerConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(String::new, |s| {
                let start = text[..s.start].rfind('\n').map_or(0, |i| i + 1);
                let line = &text[start..text[s.start..].find('\n').map_or(text.len(), |i| s.start + i)];
                line.split('=').next().unwrap_or("").trim().to_string()
            });
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.checkpoint_dir = base.join(&cfg.checkpoint_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.transformer.validate(&self.tokenizer)?;
        self.distill.validate()?;
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::config("manifest", "must name a manifest file"));
        }
        if self.checkpoint_dir.as_os_str().is_empty() {
            return Err(Error::config("checkpoint_dir", "must name a directory"));
        }
        if self.mesh_points == 0 {
            return Err(Error::config("mesh_points", "must be at least 1"));
        }
        if !(self.invariance_threshold.is_finite()) {
            return Err(Error::config("invariance_threshold", "must be finite"));
        }
        let t = self.tokenizer.token_count;
        for (field, n) in [
            ("distill.global_points", self.distill.global_points),
            ("distill.local_points", self.distill.local_points),
        ] {
            if n < t {
                return Err(Error::config(field, format!("views of {n} points cannot hold {t} tokens")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 7\nprecision = \"f32\"\n[tokenizer]\ntoken_count = 64\nfeature_width = 128\n[distill]\nout_dim = 128\nepochs = 3\nwarmup_epochs = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.tokenizer.token_count, 64);
        assert_eq!(cfg.tokenizer.grid, 6);
        assert_eq!(cfg.distill.epochs, 3);
        assert_eq!(cfg.distill.student_temp, 0.4);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match RunConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field("[distill]\nteacher_temp = -1.0\n"), "distill.teacher_temp");
        assert_eq!(field("mesh_points = 0\n"), "mesh_points");
        assert_eq!(field("bogus = 1\n"), "bogus");
        assert_eq!(field("[distill]\nlocal_points = 8\n"), "distill.local_points");
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "manifest = \"data/manifest.tsv\"\ncheckpoint_dir = \"ck\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.manifest, dir.path().join("data/manifest.tsv"));
        assert_eq!(cfg.checkpoint_dir, dir.path().join("ck"));
    }
}
