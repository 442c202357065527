//! Output tables. Everything except `timing.csv` is a pure function of the
//! run results, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::RunOutput;
use crate::params::{save_checkpoint, NamedTensor};
use crate::server::{mean, RoundReport};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const COMM_CSV: &str = "comm.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "global_fam.json";

/// Files whose content must not depend on threads or machine.
pub const DETERMINISTIC_FILES: [&str; 5] = [
    ROUNDS_FILE,
    METRICS_CSV,
    METRICS_TXT,
    COMM_CSV,
    CHECKPOINT_FILE,
];

/// One row of the final metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteRow {
    pub site: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub ece: f64,
    pub fam_accuracy: f64,
    pub mlp_accuracy: Option<f64>,
}

/// Per-client rows, then the global row if present, then AVG, which is the
/// mean of the client accuracies and the global accuracy.
pub fn site_rows(report: &RoundReport) -> Vec<SiteRow> {
    let mut rows: Vec<SiteRow> = report
        .clients
        .iter()
        .map(|c| SiteRow {
            site: format!("client_{}", c.client),
            accuracy: c.test.accuracy,
            macro_f1: c.test.macro_f1,
            ece: c.test.ece,
            fam_accuracy: c.test_fam.accuracy,
            mlp_accuracy: Some(c.test_mlp.accuracy),
        })
        .collect();
    if let Some(g) = &report.global {
        rows.push(SiteRow {
            site: "global".into(),
            accuracy: g.accuracy,
            macro_f1: g.macro_f1,
            ece: g.ece,
            fam_accuracy: g.accuracy,
            mlp_accuracy: None,
        });
    }
    let col = |f: fn(&SiteRow) -> f64| mean(rows.iter().map(f));
    let avg = SiteRow {
        site: "AVG".into(),
        accuracy: col(|r| r.accuracy),
        macro_f1: col(|r| r.macro_f1),
        ece: col(|r| r.ece),
        fam_accuracy: col(|r| r.fam_accuracy),
        mlp_accuracy: None,
    };
    rows.push(avg);
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn metrics_csv(out: &RunOutput) -> String {
    let mut s = String::from("round,site,accuracy,macro_f1,ece,fam_accuracy,mlp_accuracy\n");
    for r in site_rows(out.best()) {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            out.best_round,
            r.site,
            r.accuracy,
            r.macro_f1,
            r.ece,
            r.fam_accuracy,
            opt(r.mlp_accuracy)
        );
    }
    s
}

pub fn metrics_txt(out: &RunOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Test metrics at round {} (best mean validation accuracy)",
        out.best_round
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "site", "acc(%)", "F1(%)", "ECE", "FAM(%)", "MLP(%)"
    );
    for r in site_rows(out.best()) {
        let _ = writeln!(
            s,
            "{:<10} {:>9.2} {:>9.2} {:>9.4} {:>9.2} {:>9}",
            r.site,
            100.0 * r.accuracy,
            100.0 * r.macro_f1,
            r.ece,
            100.0 * r.fam_accuracy,
            r.mlp_accuracy
                .map_or_else(|| "-".into(), |m| format!("{:.2}", 100.0 * m))
        );
    }
    let c = comm_summary(out);
    let _ = writeln!(s);
    let _ = writeln!(s, "Communication up to round {}", out.best_round);
    let _ = writeln!(s, "  FAM parameters        {}", c.fam_params);
    let _ = writeln!(s, "  packet bytes          {}", c.packet_bytes);
    let _ = writeln!(s, "  f32 baseline bytes    {}", c.baseline_bytes);
    let _ = writeln!(s, "  packet / baseline     {:.4}", c.ratio);
    let _ = writeln!(s, "  uploaded bytes        {}", c.upload_bytes);
    let _ = writeln!(s, "  downloaded bytes      {}", c.download_bytes);
    let _ = writeln!(s, "  parameters exchanged  {}", c.params_exchanged);
    for w in &out.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommSummary {
    pub rounds: usize,
    pub clients: usize,
    pub fam_params: usize,
    pub packet_bytes: usize,
    pub baseline_bytes: usize,
    pub ratio: f64,
    pub upload_bytes: usize,
    pub download_bytes: usize,
    /// Parameter values sent in either direction.
    pub params_exchanged: usize,
}

/// Communication cost up to and including the best round.
pub fn comm_summary(out: &RunOutput) -> CommSummary {
    let best = out.best();
    let upto: Vec<_> = out
        .comm
        .iter()
        .filter(|c| c.round <= out.best_round)
        .collect();
    CommSummary {
        rounds: out.best_round,
        clients: best.clients.len(),
        fam_params: out.fam_params,
        packet_bytes: best.packet_bytes,
        baseline_bytes: best.baseline_bytes,
        ratio: best.packet_bytes as f64 / best.baseline_bytes.max(1) as f64,
        upload_bytes: upto.iter().map(|c| c.upload).sum(),
        download_bytes: upto.iter().map(|c| c.download).sum(),
        params_exchanged: 2 * upto.len() * out.fam_params,
    }
}

pub fn comm_csv(out: &RunOutput) -> String {
    let c = comm_summary(out);
    let mut s = String::from(
        "rounds,clients,fam_params,packet_bytes,baseline_bytes,ratio,upload_bytes,download_bytes,params_exchanged\n",
    );
    let _ = writeln!(
        s,
        "{},{},{},{},{},{:.6},{},{},{}",
        c.rounds,
        c.clients,
        c.fam_params,
        c.packet_bytes,
        c.baseline_bytes,
        c.ratio,
        c.upload_bytes,
        c.download_bytes,
        c.params_exchanged
    );
    s
}

/// One JSON object per round, starting with the round-0 snapshot.
pub fn rounds_jsonl(out: &RunOutput) -> Result<String> {
    let mut s = String::new();
    for r in std::iter::once(&out.initial).chain(&out.history) {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Serialization(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn timing_csv(out: &RunOutput) -> String {
    let mut s = String::from("round,broadcast_ms,local_ms,aggregate_ms,evaluate_ms\n");
    for (i, t) in out.timing.iter().enumerate() {
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        let _ = writeln!(
            s,
            "{},{:.3},{:.3},{:.3},{:.3}",
            i + 1,
            ms(t.broadcast),
            ms(t.local),
            ms(t.aggregate),
            ms(t.evaluate)
        );
    }
    s
}

/// Writes every table and the final global FAM into `dir`.
pub fn write_all(out: &RunOutput, global_fam: &[NamedTensor], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        (ROUNDS_FILE, rounds_jsonl(out)?),
        (METRICS_CSV, metrics_csv(out)),
        (METRICS_TXT, metrics_txt(out)),
        (COMM_CSV, comm_csv(out)),
        (TIMING_CSV, timing_csv(out)),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text)?;
        paths.push(p);
    }
    let p = dir.join(CHECKPOINT_FILE);
    save_checkpoint(global_fam, &p)?;
    paths.push(p);
    Ok(paths)
}
