//! End-to-end experiment: data preparation, client setup, and the round loop.

use std::sync::Arc;

use crate::client::{evaluate_fam, ClientData, ClientState, EpochReport, Split};
use crate::config::{DataConfig, ExperimentConfig};
use crate::datastore::{dirichlet_partition, gen_synthetic, load_bank, split_bank, EmbeddingBank};
use crate::error::{Error, Result};
use crate::masked::FamModel;
use crate::par::{with_threads, Parallelism};
use crate::params::Parameterized;
use crate::rng::{stream, StreamId};
use crate::server::{
    best_checkpoint, ClientRound, CommRecord, RoundReport, RoundTiming, ServerState,
};
use crate::wire::{f32_baseline_bytes, pack_with};

/// Client banks before splitting, plus the optional unseen global bank.
#[derive(Debug, Clone)]
pub struct Banks {
    pub clients: Vec<EmbeddingBank>,
    pub global: Option<EmbeddingBank>,
}

pub fn load_banks(cfg: &ExperimentConfig) -> Result<Banks> {
    match &cfg.data {
        DataConfig::Synthetic { synthetic } => {
            let data = gen_synthetic(synthetic)?;
            Ok(Banks {
                clients: data.clients,
                global: Some(data.global),
            })
        }
        DataConfig::Files { files } => Ok(Banks {
            clients: files
                .clients
                .iter()
                .map(|p| load_bank(p))
                .collect::<Result<_>>()?,
            global: files.global.as_deref().map(load_bank).transpose()?,
        }),
        DataConfig::Dirichlet { dirichlet } => {
            let pooled = load_bank(&dirichlet.bank)?;
            Ok(Banks {
                clients: dirichlet_partition(
                    &pooled,
                    dirichlet.clients,
                    dirichlet.alpha,
                    cfg.seed,
                )?,
                global: dirichlet.global.as_deref().map(load_bank).transpose()?,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub global_bank: Option<EmbeddingBank>,
    pub warnings: Vec<String>,
}

/// Everything a run produces. Only `timing` depends on the machine.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Scores before any training, reported as round 0.
    pub initial: RoundReport,
    pub history: Vec<RoundReport>,
    /// Round whose scores are summarized; 0 when no round ran.
    pub best_round: usize,
    pub comm: Vec<CommRecord>,
    pub fam_params: usize,
    pub timing: Vec<RoundTiming>,
    pub warnings: Vec<String>,
}

impl RunOutput {
    pub fn best(&self) -> &RoundReport {
        self.history
            .iter()
            .find(|r| r.round == self.best_round)
            .unwrap_or(&self.initial)
    }
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let banks = load_banks(config)?;
        Self::from_banks(config, banks)
    }

    pub fn from_banks(config: &ExperimentConfig, banks: Banks) -> Result<Self> {
        let first = banks
            .clients
            .first()
            .ok_or_else(|| Error::Empty("no client banks".into()))?;
        let (dim, classes) = (first.dim(), first.classes());
        for (i, b) in banks.clients.iter().chain(&banks.global).enumerate() {
            if b.dim() != dim || b.classes() != classes {
                return Err(Error::InvalidInput(format!(
                    "bank {i} has D={} C={}, expected D={dim} C={classes}",
                    b.dim(),
                    b.classes()
                )));
            }
        }
        let t = &config.train;
        let mut rng = stream(config.seed, StreamId::FamInit);
        let fam = FamModel::init(dim, t.mask_window, t.fam_masking, &mut rng);
        let mut warnings = Vec::new();
        let mut clients = Vec::with_capacity(banks.clients.len());
        for (id, bank) in banks.clients.iter().enumerate() {
            let s = split_bank(bank, &config.split, id)?;
            warnings.extend(s.warnings.into_iter().map(|w| format!("client {id}: {w}")));
            let data = Arc::new(ClientData {
                train: s.train,
                val: s.val,
                test: s.test,
            });
            clients.push(ClientState::new(id, config.seed, &fam, data, *t)?);
        }
        Ok(Self {
            config: config.clone(),
            server: ServerState::new(fam, config.codec),
            clients,
            global_bank: banks.global,
            warnings,
        })
    }

    /// Scores of the current models without training, as a round-0 report.
    pub fn snapshot(&self) -> Result<RoundReport> {
        let exported = self.server.global.export();
        let packet = pack_with(&exported, self.config.codec)?;
        let idle = EpochReport {
            contrastive: 0.0,
            cross_entropy: 0.0,
            similarity: 0.0,
            total: 0.0,
            varpi: 0.0,
            batches: 0,
        };
        let clients = self
            .clients
            .iter()
            .map(|c| {
                let val = c.evaluate(Split::Val)?;
                let test = c.evaluate(Split::Test)?;
                Ok(ClientRound {
                    client: c.id,
                    epoch: idle,
                    val: val.ensemble,
                    val_fam: val.fam,
                    test: test.ensemble,
                    test_fam: test.fam,
                    test_mlp: test.mlp,
                    download_bytes: 0,
                    upload_bytes: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global = self
            .global_bank
            .as_ref()
            .map(|b| evaluate_fam(&self.server.global, b, self.config.train.tau))
            .transpose()?;
        Ok(RoundReport {
            round: 0,
            clients,
            global,
            packet_bytes: packet.len(),
            baseline_bytes: f32_baseline_bytes(&exported),
        })
    }

    /// Runs all configured rounds on a pool of `config.threads` workers.
    pub fn run(&mut self, mode: Parallelism) -> Result<RunOutput> {
        self.run_with(mode, |_| {})
    }

    /// Like [`Experiment::run`], calling `on_round` after every round.
    pub fn run_with(
        &mut self,
        mode: Parallelism,
        mut on_round: impl FnMut(&RoundReport) + Send,
    ) -> Result<RunOutput> {
        let threads = self.config.threads;
        with_threads(threads, || {
            let initial = self.snapshot()?;
            let mut history = Vec::with_capacity(self.config.rounds);
            for _ in 0..self.config.rounds {
                let report =
                    self.server
                        .run_round(&mut self.clients, mode, self.global_bank.as_ref())?;
                on_round(&report);
                history.push(report);
            }
            let best_round = if history.is_empty() {
                0
            } else {
                best_checkpoint(&history)?
            };
            Ok(RunOutput {
                initial,
                history,
                best_round,
                comm: self.server.comm_log.clone(),
                fam_params: self.server.global.num_params(),
                timing: self.server.timing_log.clone(),
                warnings: self.warnings.clone(),
            })
        })
    }
}
