//! Per-client training state: local epochs, ensemble evaluation, and the
//! FAM exchange hooks used by the server.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::datastore::EmbeddingBank;
use crate::error::{Error, Result};
use crate::losses::ensemble_predict;
use crate::masked::{FamModel, MlpModel};
use crate::metrics::{accuracy, ece, macro_f1};
use crate::numerics::{softmax_unchecked, Matrix};
use crate::objective::{batch_objective, cosine_matrix, fam_probabilities};
use crate::optim::AdamW;
use crate::params::{NamedTensor, Parameterized};
use crate::rng::{stream, StreamId};

pub const ECE_BINS: usize = 10;

/// A client's private train/val/test banks.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: EmbeddingBank,
    pub val: EmbeddingBank,
    pub test: EmbeddingBank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl ClientData {
    pub fn get(&self, split: Split) -> &EmbeddingBank {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Mean losses over one local epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub contrastive: f64,
    pub cross_entropy: f64,
    pub similarity: f64,
    pub total: f64,
    pub varpi: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub ece: f64,
}

/// Metrics of the ensemble and of each head on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ensemble: Scores,
    pub fam: Scores,
    pub mlp: Scores,
    /// Per-sample ensemble distributions.
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, macro-F1 and ECE of a set of predictive distributions.
pub fn score(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Scores> {
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let conf: Vec<f64> = probs
        .iter()
        .zip(&preds)
        .map(|(p, &k)| p[k].clamp(0.0, 1.0))
        .collect();
    let correct: Vec<bool> = preds.iter().zip(labels).map(|(a, b)| a == b).collect();
    Ok(Scores {
        accuracy: accuracy(&preds, labels)?,
        macro_f1: macro_f1(&preds, labels, classes)?,
        ece: ece(&conf, &correct, ECE_BINS)?,
    })
}

/// FAM-only class distributions for every sample of a bank.
pub fn fam_distributions(fam: &FamModel, bank: &EmbeddingBank, tau: f64) -> Result<Vec<Vec<f64>>> {
    bank.require_nonempty("evaluation")?;
    if bank.dim() != fam.dim() {
        return Err(Error::mismatch(fam.dim(), bank.dim(), "bank dim vs FAM"));
    }
    let (masked, _) = fam.forward(&bank.features, None)?;
    let cos = cosine_matrix(&masked, &bank.text)?;
    Ok(fam_probabilities(&cos, tau))
}

/// FAM-only scores, the path used at a site without a local MLP.
pub fn evaluate_fam(fam: &FamModel, bank: &EmbeddingBank, tau: f64) -> Result<Scores> {
    let probs = fam_distributions(fam, bank, tau)?;
    score(&probs, &bank.labels, bank.classes())
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub fam: FamModel,
    pub mlp: MlpModel,
    pub opt_fam: AdamW,
    pub opt_mlp: AdamW,
    pub train: TrainConfig,
    pub data: Arc<ClientData>,
    pub epochs: usize,
    rng: ChaCha8Rng,
}

impl ClientState {
    /// Starts from a copy of the global FAM and a freshly seeded private MLP.
    pub fn new(
        id: usize,
        seed: u64,
        global: &FamModel,
        data: Arc<ClientData>,
        train: TrainConfig,
    ) -> Result<Self> {
        data.train.require_nonempty(&format!("client {id} train"))?;
        if data.train.dim() != global.dim() {
            return Err(Error::mismatch(
                global.dim(),
                data.train.dim(),
                "client feature dim",
            ));
        }
        let mut init = stream(seed, StreamId::MlpInit(id));
        let mlp = MlpModel::init(
            data.train.dim(),
            train.mlp_hidden,
            data.train.classes(),
            train.mask_window,
            &mut init,
        );
        let fam = global.clone();
        Ok(Self {
            id,
            opt_fam: AdamW::new(&fam, train.lr_fam, train.optimizer),
            opt_mlp: AdamW::new(&mlp, train.lr_mlp, train.optimizer),
            fam,
            mlp,
            train,
            data,
            epochs: 0,
            rng: stream(seed, StreamId::Shuffle(id)),
        })
    }

    /// One pass over the shuffled training bank, then one scheduler step.
    pub fn local_epoch(&mut self) -> Result<EpochReport> {
        let bank = &self.data.train;
        bank.require_nonempty(&format!("client {} train", self.id))?;
        let cfg = self.train.objective();
        let batch_size = self.train.batch_size.max(1);
        let mut order: Vec<usize> = (0..bank.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = [0.0; 5];
        let mut batches = 0;
        for (index, chunk) in order.chunks(batch_size).enumerate() {
            let d = bank.dim();
            let mut images = Matrix::zeros(chunk.len(), d);
            for (r, &i) in chunk.iter().enumerate() {
                images.row_mut(r).copy_from_slice(bank.features.row(i));
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| bank.labels[i]).collect();
            let out = batch_objective(
                &self.fam, &self.mlp, &images, &labels, &bank.text, &cfg, None,
            )?;
            let finite = out.total.is_finite()
                && out
                    .fam_grads
                    .iter()
                    .chain(&out.mlp_grads)
                    .flatten()
                    .all(|g| g.is_finite());
            if !finite {
                return Err(Error::TrainingDiverged {
                    client: self.id,
                    stage: format!("at batch {index}"),
                });
            }
            self.opt_fam.step(&mut self.fam, &out.fam_grads)?;
            self.opt_mlp.step(&mut self.mlp, &out.mlp_grads)?;
            // A huge step can overflow the parameters even from finite gradients.
            let params_finite = self
                .fam
                .param_slices()
                .into_iter()
                .chain(self.mlp.param_slices())
                .flatten()
                .all(|v| v.is_finite());
            if !params_finite {
                return Err(Error::TrainingDiverged {
                    client: self.id,
                    stage: format!("at batch {index}"),
                });
            }
            for (s, v) in sums.iter_mut().zip([
                out.contrastive,
                out.cross_entropy,
                out.similarity,
                out.total,
                out.varpi,
            ]) {
                *s += v;
            }
            batches += 1;
        }
        self.opt_fam.decay_lr(self.train.scheduler_gamma);
        self.opt_mlp.decay_lr(self.train.scheduler_gamma);
        self.epochs += 1;
        let n = batches as f64;
        Ok(EpochReport {
            contrastive: sums[0] / n,
            cross_entropy: sums[1] / n,
            similarity: sums[2] / n,
            total: sums[3] / n,
            varpi: sums[4] / n,
            batches,
        })
    }

    pub fn evaluate(&self, split: Split) -> Result<EvalResult> {
        self.evaluate_bank(self.data.get(split))
    }

    pub fn evaluate_bank(&self, bank: &EmbeddingBank) -> Result<EvalResult> {
        let p_fam = fam_distributions(&self.fam, bank, self.train.tau)?;
        let (masked, _) = self.fam.forward(&bank.features, None)?;
        let (logits, _) = self.mlp.forward(&masked, None)?;
        if !logits.is_finite() || p_fam.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged {
                client: self.id,
                stage: "in evaluation".into(),
            });
        }
        let p_mlp: Vec<Vec<f64>> = (0..logits.rows)
            .map(|j| softmax_unchecked(logits.row(j), 1.0))
            .collect();
        let p_ens = p_mlp
            .iter()
            .zip(&p_fam)
            .map(|(m, f)| ensemble_predict(m, f))
            .collect::<Result<Vec<_>>>()?;
        let c = bank.classes();
        Ok(EvalResult {
            ensemble: score(&p_ens, &bank.labels, c)?,
            fam: score(&p_fam, &bank.labels, c)?,
            mlp: score(&p_mlp, &bank.labels, c)?,
            predictions: p_ens.iter().map(|p| argmax(p)).collect(),
            probabilities: p_ens,
        })
    }

    /// FAM parameters in canonical order. The MLP never leaves the client.
    pub fn export_fam(&self) -> Vec<NamedTensor> {
        self.fam.export()
    }

    pub fn import_fam(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        self.fam.import(tensors)?;
        if self.train.reset_fam_optimizer {
            self.opt_fam.reset();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{gen_synthetic, split_bank, ShiftMode, SplitSpec, SynthSpec};

    fn client(train: TrainConfig) -> ClientState {
        let data = gen_synthetic(&SynthSpec {
            clients: 1,
            dim: 8,
            classes: 2,
            n_per_client: 60,
            shift: ShiftMode::Rotation,
            sigma: 0.15,
            seed: 3,
        })
        .unwrap();
        let s = split_bank(&data.clients[0], &SplitSpec::default(), 0).unwrap();
        let data = Arc::new(ClientData {
            train: s.train,
            val: s.val,
            test: s.test,
        });
        let mut rng = stream(3, StreamId::FamInit);
        let fam = FamModel::init(8, train.mask_window, train.fam_masking, &mut rng);
        ClientState::new(0, 3, &fam, data, train).unwrap()
    }

    #[test]
    fn one_batch_when_batch_exceeds_data() {
        let mut c = client(TrainConfig {
            batch_size: 1000,
            mlp_hidden: 16,
            ..TrainConfig::default()
        });
        assert_eq!(c.local_epoch().unwrap().batches, 1);
    }

    #[test]
    fn overflowing_step_is_divergence() {
        let mut c = client(TrainConfig {
            batch_size: 1000,
            mlp_hidden: 16,
            lr_fam: 1e200,
            lr_mlp: 1e200,
            ..TrainConfig::default()
        });
        // One huge step leaves finite but enormous weights; whichever stage
        // overflows first must report divergence.
        let err = c
            .local_epoch()
            .and_then(|_| c.evaluate(Split::Test).map(|_| ()))
            .unwrap_err();
        assert!(
            matches!(err, Error::TrainingDiverged { client: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn epochs_are_reproducible() {
        let cfg = TrainConfig {
            mlp_hidden: 16,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (client(cfg), client(cfg));
        for _ in 0..3 {
            assert_eq!(a.local_epoch().unwrap(), b.local_epoch().unwrap());
        }
        assert_eq!(a.fam.flat(), b.fam.flat());
        assert_eq!(a.mlp.flat(), b.mlp.flat());
    }

    #[test]
    fn lr_follows_schedule() {
        let mut c = client(TrainConfig {
            mlp_hidden: 16,
            ..TrainConfig::default()
        });
        for _ in 0..4 {
            c.local_epoch().unwrap();
        }
        let expect = 5e-4 * 0.97 * 0.97 * 0.97 * 0.97;
        assert!((c.opt_fam.lr - expect).abs() < 1e-18);
    }

    #[test]
    fn export_import_keeps_outputs_and_mlp() {
        let mut c = client(TrainConfig {
            mlp_hidden: 16,
            ..TrainConfig::default()
        });
        c.local_epoch().unwrap();
        let exported = c.export_fam();
        assert_eq!(exported.len(), 6);
        let before = c.evaluate(Split::Test).unwrap();
        let mlp = c.mlp.flat();
        c.import_fam(&exported).unwrap();
        assert_eq!(c.evaluate(Split::Test).unwrap(), before);
        assert_eq!(c.mlp.flat(), mlp);
    }

    #[test]
    fn evaluation_matches_hand_count() {
        let c = client(TrainConfig {
            mlp_hidden: 16,
            ..TrainConfig::default()
        });
        let r = c.evaluate(Split::Test).unwrap();
        let hits = r
            .predictions
            .iter()
            .zip(&c.data.test.labels)
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(r.ensemble.accuracy, hits as f64 / c.data.test.len() as f64);
    }

    #[test]
    fn import_rejects_wrong_layout() {
        let mut c = client(TrainConfig {
            mlp_hidden: 16,
            ..TrainConfig::default()
        });
        let mut t = c.export_fam();
        t.swap(0, 1);
        assert!(matches!(c.import_fam(&t), Err(Error::Protocol(_))));
    }
}
