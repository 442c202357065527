//! Round orchestration and mean aggregation.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{evaluate_fam, ClientState, EpochReport, Scores, Split};
use crate::datastore::EmbeddingBank;
use crate::error::{Error, Result};
use crate::masked::FamModel;
use crate::par::{map_mut, Parallelism};
use crate::params::{check_same_layout, NamedTensor, Parameterized};
use crate::wire::{f32_baseline_bytes, pack_with, unpack, unpack_bytes, Codec};

/// Elementwise mean with weight `1/N`, summed in ascending client order.
pub fn aggregate(uploads: &[Vec<NamedTensor>]) -> Result<Vec<NamedTensor>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Empty("aggregation needs at least one upload".into()))?;
    for (client, up) in uploads.iter().enumerate().skip(1) {
        check_same_layout(first, up)
            .map_err(|e| Error::Protocol(format!("client {client}: {e}")))?;
        for (t, r) in up.iter().zip(first) {
            if t.data.len() != r.data.len() {
                return Err(Error::Protocol(format!(
                    "client {client}: tensor `{}` has wrong length",
                    t.name
                )));
            }
        }
    }
    let n = uploads.len() as f64;
    let mut out: Vec<NamedTensor> = first
        .iter()
        .map(|t| NamedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: vec![0.0; t.data.len()],
        })
        .collect();
    for up in uploads {
        for (acc, t) in out.iter_mut().zip(up) {
            for (a, v) in acc.data.iter_mut().zip(&t.data) {
                *a += v;
            }
        }
    }
    for t in &mut out {
        t.data.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Bytes moved for one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub client: usize,
    pub download: usize,
    pub upload: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub epoch: EpochReport,
    pub val: Scores,
    pub val_fam: Scores,
    pub test: Scores,
    pub test_fam: Scores,
    pub test_mlp: Scores,
    pub download_bytes: usize,
    pub upload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRound>,
    /// FAM-only scores of the aggregated model on the unseen global bank.
    pub global: Option<Scores>,
    /// Size of the global FAM packet broadcast this round.
    pub packet_bytes: usize,
    /// 4-bytes-per-value size of the same parameters.
    pub baseline_bytes: usize,
}

impl RoundReport {
    pub fn mean_val_accuracy(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.val.accuracy))
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Wall-clock time per phase. Never part of the deterministic outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundTiming {
    pub broadcast: Duration,
    pub local: Duration,
    pub aggregate: Duration,
    pub evaluate: Duration,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: FamModel,
    pub round: usize,
    pub codec: Codec,
    pub comm_log: Vec<CommRecord>,
    pub timing_log: Vec<RoundTiming>,
}

impl ServerState {
    pub fn new(global: FamModel, codec: Codec) -> Self {
        Self {
            global,
            round: 0,
            codec,
            comm_log: Vec::new(),
            timing_log: Vec::new(),
        }
    }

    /// Broadcast, local training, upload, aggregation and report.
    ///
    /// Any client error aborts the round before aggregation, leaving the
    /// global model untouched.
    pub fn run_round(
        &mut self,
        clients: &mut [ClientState],
        mode: Parallelism,
        global_bank: Option<&EmbeddingBank>,
    ) -> Result<RoundReport> {
        if clients.is_empty() {
            return Err(Error::Empty("round needs at least one client".into()));
        }
        let round = self.round + 1;
        let codec = self.codec;
        let t0 = Instant::now();
        let exported = self.global.export();
        let packet = pack_with(&exported, codec)?;
        let download = packet.len();
        let t1 = Instant::now();

        let results = map_mut(clients, mode, |c| -> Result<(ClientRound, Vec<u8>)> {
            let tensors = unpack(&packet)?;
            c.import_fam(&tensors)?;
            let epoch = c.local_epoch()?;
            let val = c.evaluate(Split::Val)?;
            let test = c.evaluate(Split::Test)?;
            let up = pack_with(&c.export_fam(), codec)?;
            Ok((
                ClientRound {
                    client: c.id,
                    epoch,
                    val: val.ensemble,
                    val_fam: val.fam,
                    test: test.ensemble,
                    test_fam: test.fam,
                    test_mlp: test.mlp,
                    download_bytes: download,
                    upload_bytes: up.len(),
                },
                up.bytes,
            ))
        });
        let mut reports = Vec::with_capacity(results.len());
        let mut packets = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            let (rep, bytes) = r.map_err(|e| match e {
                Error::TrainingDiverged { .. } => e,
                other => Error::Protocol(format!("client {} failed: {other}", clients[i].id)),
            })?;
            reports.push(rep);
            packets.push(bytes);
        }
        let t2 = Instant::now();

        let uploads = packets
            .iter()
            .enumerate()
            .map(|(i, b)| {
                unpack_bytes(b)
                    .map_err(|e| Error::Protocol(format!("client {}: {e}", clients[i].id)))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, up) in uploads.iter().enumerate() {
            check_same_layout(&exported, up)
                .map_err(|e| Error::Protocol(format!("client {}: {e}", clients[i].id)))?;
        }
        let merged = aggregate(&uploads)?;
        self.global.import(&merged)?;
        let t3 = Instant::now();

        let global = global_bank
            .map(|bank| evaluate_fam(&self.global, bank, clients[0].train.tau))
            .transpose()?;
        let t4 = Instant::now();

        for r in &reports {
            self.comm_log.push(CommRecord {
                round,
                client: r.client,
                download: r.download_bytes,
                upload: r.upload_bytes,
            });
        }
        self.timing_log.push(RoundTiming {
            broadcast: t1 - t0,
            local: t2 - t1,
            aggregate: t3 - t2,
            evaluate: t4 - t3,
        });
        self.round = round;
        Ok(RoundReport {
            round,
            clients: reports,
            global,
            packet_bytes: download,
            baseline_bytes: f32_baseline_bytes(&exported),
        })
    }
}

/// Round with the highest mean client validation accuracy; ties go to the
/// earliest round.
pub fn best_checkpoint(history: &[RoundReport]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in history {
        let v = r.mean_val_accuracy();
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((r.round, v));
        }
    }
    best.map(|(r, _)| r)
        .ok_or_else(|| Error::Empty("no completed rounds".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[f64]) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new("a", vec![values.len()], values.to_vec()).unwrap(),
            NamedTensor::new("b", vec![1], vec![values[0] * 2.0]).unwrap(),
        ]
    }

    #[test]
    fn single_upload_is_identity() {
        let s = set(&[1.5, -2.0, 3.25]);
        assert_eq!(aggregate(std::slice::from_ref(&s)).unwrap(), s);
    }

    #[test]
    fn opposite_uploads_cancel() {
        let a = set(&[1.0, 2.0]);
        let b = set(&[-1.0, -2.0]);
        let m = aggregate(&[a, b]).unwrap();
        assert!(m.iter().flat_map(|t| &t.data).all(|v| *v == 0.0));
    }

    #[test]
    fn mismatch_names_the_client() {
        let a = set(&[1.0, 2.0]);
        let mut b = set(&[1.0, 2.0]);
        b[1].name = "c".into();
        let err = aggregate(&[a.clone(), a, b]).unwrap_err().to_string();
        assert!(err.contains("client 2"), "{err}");
    }

    fn report(round: usize, val: f64) -> RoundReport {
        let s = Scores {
            accuracy: val,
            macro_f1: 0.0,
            ece: 0.0,
        };
        let e = EpochReport {
            contrastive: 0.0,
            cross_entropy: 0.0,
            similarity: 0.0,
            total: 0.0,
            varpi: 0.5,
            batches: 1,
        };
        RoundReport {
            round,
            clients: vec![ClientRound {
                client: 0,
                epoch: e,
                val: s,
                val_fam: s,
                test: s,
                test_fam: s,
                test_mlp: s,
                download_bytes: 0,
                upload_bytes: 0,
            }],
            global: None,
            packet_bytes: 0,
            baseline_bytes: 0,
        }
    }

    #[test]
    fn best_checkpoint_rules() {
        assert!(best_checkpoint(&[]).is_err());
        assert_eq!(best_checkpoint(&[report(1, 0.3)]).unwrap(), 1);
        let rising: Vec<_> = (1..=5).map(|r| report(r, r as f64 / 10.0)).collect();
        assert_eq!(best_checkpoint(&rising).unwrap(), 5);
        let vals = [0.1, 0.2, 0.5, 0.9, 0.4, 0.6, 0.9, 0.3];
        let plateau: Vec<_> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| report(i + 1, *v))
            .collect();
        assert_eq!(best_checkpoint(&plateau).unwrap(), 4);
    }
}
