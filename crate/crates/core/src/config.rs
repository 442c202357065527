//! Experiment configuration, read from TOML with every field defaulted.
//!
//! ```toml
//! rounds = 30
//! seed = 0
//! output_dir = "out"
//!
//! [train]
//! batch_size = 32
//! lambda = 0.04
//! temperature = 2.0
//! tau = 0.01
//!
//! [data]
//! source = "synthetic"          # or "files" / "dirichlet"
//! [data.synthetic]
//! clients = 3
//! dim = 32
//! classes = 4
//! n_per_client = 334
//! shift = "rotation"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::{SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::objective::ObjectiveConfig;
use crate::optim::OptimizerConfig;
use crate::wire::Codec;

/// Local training hyperparameters shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lambda: f64,
    /// Distillation temperature `T`.
    pub temperature: f64,
    /// Similarity softmax temperature `tau`.
    pub tau: f64,
    pub lr_fam: f64,
    pub lr_mlp: f64,
    pub scheduler_gamma: f64,
    pub local_epochs: usize,
    pub mlp_hidden: usize,
    pub mask_window: f64,
    pub fam_masking: bool,
    pub reset_fam_optimizer: bool,
    pub detach_mlp_input: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lambda: 0.04,
            temperature: 2.0,
            tau: 0.01,
            lr_fam: 5e-4,
            lr_mlp: 1e-3,
            scheduler_gamma: 0.97,
            local_epochs: 1,
            mlp_hidden: 256,
            mask_window: 1.0,
            fam_masking: true,
            reset_fam_optimizer: false,
            detach_mlp_input: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            tau: self.tau,
            temperature: self.temperature,
            lambda: self.lambda,
            detach_mlp_input: self.detach_mlp_input,
            fixed_varpi: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch_size", self.batch_size as f64),
            ("train.temperature", self.temperature),
            ("train.tau", self.tau),
            ("train.scheduler_gamma", self.scheduler_gamma),
            ("train.local_epochs", self.local_epochs as f64),
            ("train.mlp_hidden", self.mlp_hidden as f64),
            ("train.mask_window", self.mask_window),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [
            ("train.lambda", self.lambda),
            ("train.lr_fam", self.lr_fam),
            ("train.lr_mlp", self.lr_mlp),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(key, format!("must be >= 0, got {v}")));
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| config_err("train.optimizer", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    /// One bank per client.
    pub clients: Vec<PathBuf>,
    /// Optional unseen global bank evaluated with the FAM only.
    #[serde(default)]
    pub global: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletSource {
    /// Pooled bank divided across clients.
    pub bank: PathBuf,
    pub clients: usize,
    pub alpha: f64,
    #[serde(default)]
    pub global: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default)]
        synthetic: SynthSpec,
    },
    Files {
        files: FileSource,
    },
    Dirichlet {
        dirichlet: DirichletSource,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            synthetic: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub codec: Codec,
    /// Worker threads for client-parallel phases; 0 uses all cores.
    pub threads: usize,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            seed: 0,
            output_dir: PathBuf::from("out"),
            codec: Codec::Compressed,
            threads: 0,
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            data: DataConfig::default(),
        }
    }
}

pub(crate) fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            // Name the offending text and its line; the span may cover a whole table.
            let key = e.span().map_or_else(
                || "<root>".to_string(),
                |s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    let snippet = text[s.clone()].lines().next().unwrap_or("").trim();
                    format!("line {line}: {snippet}")
                },
            );
            config_err(&key, e.message().to_string())
        })?;
        Ok(cfg)
    }

    /// Parses the file and resolves relative bank paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Synthetic { .. } => {}
            DataConfig::Files { files } => {
                files.clients.iter_mut().for_each(fix);
                files.global.as_mut().map(fix);
            }
            DataConfig::Dirichlet { dirichlet } => {
                fix(&mut dirichlet.bank);
                dirichlet.global.as_mut().map(fix);
            }
        }
    }

    /// Checks values and that every referenced bank file exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let fr = [self.split.train, self.split.val, self.split.test];
        if fr.iter().any(|f| *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("split", "fractions must be >= 0 and sum to 1"));
        }
        let exists = |key: &str, p: &Path| -> Result<()> {
            if p.is_file() {
                Ok(())
            } else {
                Err(config_err(
                    key,
                    format!("bank file {} does not exist", p.display()),
                ))
            }
        };
        match &self.data {
            DataConfig::Synthetic { synthetic } => {
                if synthetic.clients == 0 {
                    return Err(config_err(
                        "data.synthetic.clients",
                        "need at least one client",
                    ));
                }
                if synthetic.classes < 2 || synthetic.dim < synthetic.classes {
                    return Err(config_err("data.synthetic", "need dim >= classes >= 2"));
                }
            }
            DataConfig::Files { files } => {
                if files.clients.is_empty() {
                    return Err(config_err(
                        "data.files.clients",
                        "need at least one client bank",
                    ));
                }
                for (i, p) in files.clients.iter().enumerate() {
                    exists(&format!("data.files.clients[{i}]"), p)?;
                }
                if let Some(g) = &files.global {
                    exists("data.files.global", g)?;
                }
            }
            DataConfig::Dirichlet { dirichlet } => {
                exists("data.dirichlet.bank", &dirichlet.bank)?;
                if let Some(g) = &dirichlet.global {
                    exists("data.dirichlet.global", g)?;
                }
                if dirichlet.clients < 2 {
                    return Err(config_err(
                        "data.dirichlet.clients",
                        "need at least 2 clients",
                    ));
                }
                if !(dirichlet.alpha > 0.0) {
                    return Err(config_err("data.dirichlet.alpha", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_paper_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train.lambda, 0.04);
        assert_eq!(cfg.train.temperature, 2.0);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.scheduler_gamma, 0.97);
        assert_eq!(cfg.train.optimizer.weight_decay, 0.02);
        assert_eq!(
            (cfg.train.optimizer.beta1, cfg.train.optimizer.beta2),
            (0.99, 0.98)
        );
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.split.train, 0.6);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_file_sources() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            rounds = 2
            [data]
            source = "files"
            [data.files]
            clients = ["a.femb", "b.femb"]
            "#,
        )
        .unwrap();
        match &cfg.data {
            DataConfig::Files { files } => assert_eq!(files.clients.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("data.files.clients[0]"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("roundz = 3").is_err());
        let err = ExperimentConfig::from_toml_str("rounds = 2\n[train]\nlamda = 0.1")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3: lamda"), "{err}");
    }

    #[test]
    fn bad_values_are_named() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.tau = 0.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train.tau"));
    }
}
