//! Self-check suite: runs every stated invariant on seeded random instances
//! and reports one line per property.
//!
//! Output depends only on the build, never on timing or thread count, so two
//! runs print identical text.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::client::{ClientData, ClientState, Split};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::datastore::{
    dirichlet_partition, gen_synthetic, split_bank, EmbeddingBank, ShiftMode, SplitSpec, SynthSpec,
};
use crate::experiment::Experiment;
use crate::losses::{
    classwise_kl_loss, classwise_temp_softmax, contrastive_loss, dynamic_weight, ensemble_predict,
    mlp_ce_loss,
};
use crate::masked::{FamModel, MaskedLinear, MlpModel};
use crate::metrics::{ece, macro_f1, signed_rank_null_pmf};
use crate::numerics::{cosine_similarity, entropy, grad_check, softmax, Matrix};
use crate::objective::{batch_objective, Anchors, ObjectiveConfig};
use crate::optim::{AdamW, OptimizerConfig};
use crate::par::Parallelism;
use crate::params::{NamedTensor, Parameterized};
use crate::report;
use crate::rng::{stream, StreamId};
use crate::server::aggregate;
use crate::wire::{encode_payload, pack, unpack};

/// Uncompressed payload of one tensor `w` of shape `[2]` holding `[1.0, -2.0]`.
pub const GOLDEN_PAYLOAD: [u8; 23] = [
    b'F', b'M', b'C', b'1', // magic
    0x00, 0x01, // version
    0x00, 0x00, 0x00, 0x01, // tensor count
    0x00, 0x01, b'w', // name
    0x01, // dtype binary16
    0x01, // ndim
    0x00, 0x00, 0x00, 0x02, // dim 0
    0x3c, 0x00, // 1.0
    0xc0, 0x00, // -2.0
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Negative control: corrupt analytic gradients before they are checked.
    pub perturb_gradients: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&VerifyOptions) -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("numerics.softmax_is_distribution", softmax_is_distribution),
    (
        "numerics.softmax_shift_invariance",
        softmax_shift_invariance,
    ),
    ("numerics.entropy_bounds", entropy_bounds),
    ("numerics.cosine_scale", cosine_scale),
    ("losses.gradients_match_fd", loss_gradients),
    ("objective.total_gradient_matches_fd", total_gradient),
    ("losses.nonnegative", losses_nonnegative),
    ("losses.kl_zero_iff_equal", kl_zero_iff_equal),
    ("losses.varpi_complement", varpi_complement),
    ("losses.ensemble_is_distribution", ensemble_is_distribution),
    ("losses.temperature_scaling", temperature_scaling),
    ("masked.sparsity_monotone", sparsity_monotone),
    ("masked.gate_bounds", gate_bounds),
    ("masked.fam_param_count", fam_param_count),
    ("masked.forward_deterministic", forward_deterministic),
    ("wire.roundtrip_and_idempotence", wire_roundtrip),
    ("wire.quantization_bound", quantization_bound),
    ("wire.golden_header", golden_header),
    ("wire.fam_packet_ratio", fam_packet_ratio),
    ("datastore.bank_roundtrip", bank_roundtrip),
    ("datastore.partitions_exact", partitions_exact),
    ("datastore.stratification", stratification),
    ("client.import_keeps_mlp", import_keeps_mlp),
    ("client.lambda_zero_independence", lambda_zero_independence),
    ("client.lr_schedule", lr_schedule),
    ("optim.adamw_reference", adamw_reference),
    ("server.aggregate_permutation", aggregate_permutation),
    ("server.comm_accounting", comm_accounting),
    (
        "server.import_within_quantization",
        import_within_quantization,
    ),
    ("metrics.ece_zero_when_calibrated", ece_calibrated),
    ("metrics.f1_relabel_invariance", f1_relabel),
    ("metrics.wilcoxon_pmf_sums_to_one", wilcoxon_pmf),
    ("report.deterministic_and_avg", report_deterministic),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f(opts) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckOutcome {
                name,
                passed,
                detail,
            }
        })
        .collect()
}

pub fn render(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        let _ = writeln!(
            s,
            "{} {:<40} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    if failed.is_empty() {
        let _ = writeln!(s, "all {} properties passed", outcomes.len());
    } else {
        let _ = writeln!(
            s,
            "{} of {} properties failed: {}",
            failed.len(),
            outcomes.len(),
            failed.join(", ")
        );
    }
    s
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T>(r: crate::error::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(tag: u64) -> ChaCha8Rng {
    stream(0, StreamId::Custom(0x7e51_0000 + tag))
}

fn randn(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = randn(r, rows * cols)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Matrix { rows, cols, data }
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|v| (0.0..=1.0).contains(v)) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn softmax_is_distribution(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(1);
    for i in 0..500 {
        let n = r.random_range(1..12);
        let logits: Vec<f64> = randn(&mut r, n).iter().map(|v| v * 50.0).collect();
        let tau = 10f64.powf(r.random_range(-3.0..=6.0));
        let p = e2s(softmax(&logits, tau))?;
        ensure(is_distribution(&p), || {
            format!("case {i}: not a distribution at tau {tau}")
        })?;
    }
    Ok("500 cases".into())
}

fn softmax_shift_invariance(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let logits = randn(&mut r, 6);
        let c: f64 = r.random_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let tau = r.random_range(0.1..5.0);
        let a = e2s(softmax(&logits, tau))?;
        let b = e2s(softmax(&shifted, tau))?;
        worst = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(worst, f64::max);
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok("max deviation <= 1e-12".into())
}

fn entropy_bounds(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(3);
    for n in 1..10 {
        let uniform = vec![1.0 / n as f64; n];
        ensure((entropy(&uniform) - (n as f64).ln()).abs() < 1e-12, || {
            format!("uniform n={n}")
        })?;
        for _ in 0..50 {
            let w: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|v| v / s).collect();
            let h = entropy(&p);
            ensure(h >= 0.0 && h <= (n as f64).ln() + 1e-12, || {
                format!("H={h} for n={n}")
            })?;
        }
    }
    Ok("0 <= H <= ln n, equality at uniform".into())
}

fn cosine_scale(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(4);
    for _ in 0..200 {
        let a = randn(&mut r, 7);
        let s: f64 = r.random_range(0.01..100.0);
        let pos: Vec<f64> = a.iter().map(|v| v * s).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v * s).collect();
        ensure(
            (e2s(cosine_similarity(&a, &pos))? - 1.0).abs() < 1e-12,
            || "positive scale".into(),
        )?;
        ensure(
            (e2s(cosine_similarity(&a, &neg))? + 1.0).abs() < 1e-12,
            || "negative scale".into(),
        )?;
    }
    Ok("200 cases".into())
}

/// Perturbation applied by the mutation hook.
fn mutate(grad: &mut [f64], opts: &VerifyOptions) {
    if opts.perturb_gradients {
        if let Some(g) = grad.first_mut() {
            *g += 1e-2 * (1.0 + g.abs());
        }
    }
}

/// Max relative error over 20 random instances of each loss.
fn loss_gradients(opts: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let b = [2, 4][i % 2];
        let c = [2, 3][(i / 2) % 2];
        let tau = 0.5;
        let sim = rand_matrix(&mut r, b, b, 0.5);
        let e = e2s(grad_check(
            |t| {
                let m = Matrix::from_vec(b, b, t.to_vec())?;
                let out = contrastive_loss(&m, tau)?;
                let mut g = out.grad.data;
                mutate(&mut g, opts);
                Ok((out.value, g))
            },
            &sim.data,
            1e-5,
        ))?;
        worst = worst.max(e);

        let logits = rand_matrix(&mut r, b, c, 1.5);
        let labels: Vec<usize> = (0..b).map(|j| (j + i) % c).collect();
        let e = e2s(grad_check(
            |t| {
                let m = Matrix::from_vec(b, c, t.to_vec())?;
                let out = mlp_ce_loss(&m, &labels)?;
                let mut g = out.grad.data;
                mutate(&mut g, opts);
                Ok((out.value, g))
            },
            &logits.data,
            1e-5,
        ))?;
        worst = worst.max(e);

        let s = rand_matrix(&mut r, b, c, 1.5);
        let o = rand_matrix(&mut r, b, c, 1.5);
        let varpi: f64 = r.random();
        let theta = [s.data.clone(), o.data.clone()].concat();
        let e = e2s(grad_check(
            |t| {
                let sm = Matrix::from_vec(b, c, t[..b * c].to_vec())?;
                let om = Matrix::from_vec(b, c, t[b * c..].to_vec())?;
                let out = classwise_kl_loss(&sm, &om, 2.0, varpi)?;
                let mut g = [out.grad_s.data, out.grad_o.data].concat();
                mutate(&mut g, opts);
                Ok((out.value, g))
            },
            &theta,
            1e-5,
        ))?;
        worst = worst.max(e);
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("60 checks, max relative error {worst:.1e}"))
}

/// Relative error of the full objective's gradient on one random instance.
pub fn total_gradient_error(
    b: usize,
    d: usize,
    c: usize,
    tau: f64,
    seed: u64,
    perturb: bool,
) -> crate::error::Result<f64> {
    let mut r = stream(seed, StreamId::Custom(0x7e51_1000));
    let fam = FamModel::init(d, 1.0, true, &mut r);
    let mlp = MlpModel::init(d, 6, c, 1.0, &mut r);
    let images = rand_matrix(&mut r, b, d, 1.0);
    let text = rand_matrix(&mut r, c, d, 1.0);
    let labels: Vec<usize> = (0..b).map(|j| (j + seed as usize) % c).collect();
    let anchors = Anchors::capture(&fam, &mlp);
    let free = ObjectiveConfig {
        tau,
        ..ObjectiveConfig::default()
    };
    // The weight is a constant in backprop, so hold it fixed for the differences.
    let at = batch_objective(&fam, &mlp, &images, &labels, &text, &free, Some(&anchors))?;
    let cfg = ObjectiveConfig {
        fixed_varpi: Some(at.varpi),
        ..free
    };
    let n_fam = fam.num_params();
    let theta = [fam.flat(), mlp.flat()].concat();
    let opts = VerifyOptions {
        perturb_gradients: perturb,
    };
    grad_check(
        |t| {
            let mut f = fam.clone();
            let mut m = mlp.clone();
            f.set_flat(&t[..n_fam])?;
            m.set_flat(&t[n_fam..])?;
            let out = batch_objective(&f, &m, &images, &labels, &text, &cfg, Some(&anchors))?;
            let mut g: Vec<f64> = out
                .fam_grads
                .concat()
                .into_iter()
                .chain(out.mlp_grads.concat())
                .collect();
            mutate(&mut g, &opts);
            Ok((out.total, g))
        },
        &theta,
        1e-5,
    )
}

fn total_gradient(opts: &VerifyOptions) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let b = [2, 4][i as usize % 2];
        let d = [4, 8][(i as usize / 2) % 2];
        let c = [2, 3][(i as usize / 4) % 2];
        let tau = [0.5, 0.07, 0.01][i as usize % 3];
        worst = worst.max(e2s(total_gradient_error(
            b,
            d,
            c,
            tau,
            i,
            opts.perturb_gradients,
        ))?);
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!(
        "20 instances, tau 0.5 to 0.01, max relative error {worst:.1e}"
    ))
}

fn losses_nonnegative(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(6);
    for _ in 0..200 {
        let b = r.random_range(1..6);
        let c = r.random_range(2..5);
        let sim = rand_matrix(&mut r, b, b, 0.5);
        let logits = rand_matrix(&mut r, b, c, 3.0);
        let o = rand_matrix(&mut r, b, c, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let v = [
            e2s(contrastive_loss(&sim, 0.1))?.value,
            e2s(mlp_ce_loss(&logits, &labels))?.value,
            e2s(classwise_kl_loss(&logits, &o, 2.0, r.random()))?.value,
        ];
        ensure(v.iter().all(|x| *x >= -1e-12), || {
            format!("negative loss {v:?}")
        })?;
    }
    Ok("200 cases".into())
}

fn kl_zero_iff_equal(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(7);
    for _ in 0..100 {
        let s = rand_matrix(&mut r, 4, 3, 2.0);
        // A per-class constant shift leaves the batch-wise distributions unchanged.
        let mut same = s.clone();
        for j in 0..4 {
            for c in 0..3 {
                same.data[j * 3 + c] += c as f64 * 0.7;
            }
        }
        let z = e2s(classwise_kl_loss(&s, &same, 2.0, 0.3))?.value;
        ensure(z.abs() < 1e-12, || format!("equal distributions gave {z}"))?;
        let other = rand_matrix(&mut r, 4, 3, 2.0);
        let p = e2s(classwise_kl_loss(&s, &other, 2.0, 0.3))?.value;
        ensure(p > 0.0, || "distinct distributions gave zero".into())?;
    }
    Ok("100 cases".into())
}

fn random_dists(r: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let l = randn(r, c).iter().map(|v| v * 3.0).collect::<Vec<_>>();
            softmax(&l, 1.0).expect("finite logits")
        })
        .collect()
}

fn varpi_complement(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(8);
    for _ in 0..200 {
        let a = random_dists(&mut r, 5, 3);
        let b = random_dists(&mut r, 5, 3);
        let w1 = e2s(dynamic_weight(&a, &b))?;
        let w2 = e2s(dynamic_weight(&b, &a))?;
        ensure((0.0..=1.0).contains(&w1), || {
            format!("varpi {w1} outside [0,1]")
        })?;
        ensure((w1 + w2 - 1.0).abs() < 1e-12, || {
            format!("{w1} + {w2} != 1")
        })?;
    }
    Ok("200 cases".into())
}

fn ensemble_is_distribution(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(9);
    for _ in 0..200 {
        let a = random_dists(&mut r, 1, 4).remove(0);
        let b = random_dists(&mut r, 1, 4).remove(0);
        let p = e2s(ensemble_predict(&a, &b))?;
        ensure(is_distribution(&p), || format!("{p:?}"))?;
    }
    Ok("200 cases".into())
}

fn temperature_scaling(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = rand_matrix(&mut r, 5, 3, 2.0);
        let k: f64 = r.random_range(0.1..10.0);
        let scaled = Matrix {
            rows: 5,
            cols: 3,
            data: s.data.iter().map(|v| v * k).collect(),
        };
        let a = e2s(classwise_temp_softmax(&s, 2.0))?;
        let b = e2s(classwise_temp_softmax(&scaled, 2.0 * k))?;
        worst = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(worst, f64::max);
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok("max deviation <= 1e-12".into())
}

fn sparsity_monotone(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(11);
    for _ in 0..200 {
        let mut layer = MaskedLinear::init(6, 5, 1.0, &mut r);
        layer.kappa = (0..5).map(|_| r.random_range(0.0..0.3)).collect();
        let before = layer.hard_mask().values;
        let i = r.random_range(0..5);
        layer.kappa[i] += r.random_range(0.0..0.2);
        let after = layer.hard_mask().values;
        ensure(before.iter().zip(&after).all(|(b, a)| a <= b), || {
            "a mask bit turned on".into()
        })?;
    }
    Ok("200 cases".into())
}

fn gate_bounds(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(12);
    for _ in 0..50 {
        let fam = FamModel::init(8, 1.0, true, &mut r);
        let x = rand_matrix(&mut r, 4, 8, 3.0);
        let (y, cache) = e2s(fam.forward(&x, None))?;
        ensure(
            cache.gate.data.iter().all(|g| (0.0..=1.0).contains(g)),
            || "gate outside [0,1]".into(),
        )?;
        for ((yi, xi), g) in y.data.iter().zip(&x.data).zip(&cache.gate.data) {
            ensure(*yi == xi * g && yi.abs() <= xi.abs(), || {
                "output is not gated input".into()
            })?;
        }
    }
    Ok("50 cases".into())
}

fn fam_param_count(_: &VerifyOptions) -> Result<String, String> {
    let n = FamModel::constant_gate(512, true).num_params();
    ensure((500_000..=550_000).contains(&n), || {
        format!("{n} parameters")
    })?;
    Ok(format!("{n} parameters at D=512"))
}

fn forward_deterministic(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(13);
    let fam = FamModel::init(8, 1.0, true, &mut r);
    let mlp = MlpModel::init(8, 16, 3, 1.0, &mut r);
    let x = rand_matrix(&mut r, 5, 8, 1.0);
    let (a, _) = e2s(fam.forward(&x, None))?;
    let (b, _) = e2s(fam.forward(&x, None))?;
    let (la, _) = e2s(mlp.forward(&a, None))?;
    let (lb, _) = e2s(mlp.forward(&b, None))?;
    ensure(a == b && la == lb, || "outputs differ".into())?;
    Ok("bitwise identical".into())
}

fn wire_roundtrip(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(14);
    for i in 0..20 {
        let tensors: Vec<NamedTensor> = (0..r.random_range(0..5))
            .map(|k| {
                let shape: Vec<usize> = (0..r.random_range(1..4))
                    .map(|_| r.random_range(1..5))
                    .collect();
                let n = shape.iter().product();
                NamedTensor::new(format!("t{k}"), shape, randn(&mut r, n))
                    .expect("consistent shape")
            })
            .collect();
        let p1 = e2s(pack(&tensors))?;
        let back = e2s(unpack(&p1))?;
        let layout = |t: &[NamedTensor]| {
            t.iter()
                .map(|x| (x.name.clone(), x.shape.clone()))
                .collect::<Vec<_>>()
        };
        ensure(layout(&tensors) == layout(&back), || {
            format!("case {i}: layout changed")
        })?;
        let p2 = e2s(pack(&back))?;
        ensure(p1.bytes == p2.bytes, || format!("case {i}: repack differs"))?;
    }
    Ok("20 random tensor sets".into())
}

fn quantization_bound(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(15);
    let min_normal = 2f64.powi(-14);
    let mut values = Vec::with_capacity(20_000);
    for _ in 0..20_000 {
        let e: f64 = r.random_range(-24.0..15.9);
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        values.push(sign * 2f64.powf(e));
    }
    let t = [NamedTensor::new("v", vec![values.len()], values.clone()).map_err(|e| e.to_string())?];
    let back = e2s(unpack(&e2s(pack(&t))?))?;
    for (x, y) in values.iter().zip(&back[0].data) {
        let err = (x - y).abs();
        let ok = if x.abs() >= min_normal {
            err <= 2f64.powi(-11) * x.abs()
        } else {
            err <= 2f64.powi(-25)
        };
        ensure(ok, || format!("{x:e} -> {y:e}"))?;
    }
    Ok("20000 values within bound".into())
}

fn golden_header(_: &VerifyOptions) -> Result<String, String> {
    let t = [NamedTensor::new("w", vec![2], vec![1.0, -2.0]).map_err(|e| e.to_string())?];
    let payload = e2s(encode_payload(&t))?;
    ensure(payload == GOLDEN_PAYLOAD, || {
        format!("payload {payload:02x?}")
    })?;
    Ok("23 bytes match".into())
}

fn fam_packet_ratio(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(16);
    let fam = FamModel::init(512, 1.0, true, &mut r);
    let t = fam.export();
    let p = e2s(pack(&t))?;
    let ratio = p.len() as f64 / (4 * fam.num_params()) as f64;
    ensure(ratio <= 0.55, || format!("ratio {ratio:.4}"))?;
    Ok(format!("ratio {ratio:.4}"))
}

fn small_synth(seed: u64) -> crate::error::Result<crate::datastore::SyntheticData> {
    gen_synthetic(&SynthSpec {
        clients: 2,
        dim: 6,
        classes: 3,
        n_per_client: 40,
        shift: ShiftMode::Rotation,
        sigma: 0.15,
        seed,
    })
}

fn bank_roundtrip(_: &VerifyOptions) -> Result<String, String> {
    let data = e2s(small_synth(1))?;
    for b in data.clients.iter().chain(std::iter::once(&data.global)) {
        let bytes = e2s(b.to_bytes())?;
        let back = EmbeddingBank::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(&back == b, || "bank changed".into())?;
    }
    Ok("3 banks".into())
}

fn feature_multiset(banks: &[&EmbeddingBank]) -> Vec<(usize, Vec<u64>)> {
    let mut v: Vec<(usize, Vec<u64>)> = banks
        .iter()
        .flat_map(|b| {
            (0..b.len()).map(move |i| {
                (
                    b.labels[i],
                    b.features.row(i).iter().map(|x| x.to_bits()).collect(),
                )
            })
        })
        .collect();
    v.sort();
    v
}

fn partitions_exact(_: &VerifyOptions) -> Result<String, String> {
    for seed in 0..10 {
        let data = e2s(small_synth(seed))?;
        let bank = &data.clients[0];
        let whole = feature_multiset(&[bank]);
        let parts = e2s(dirichlet_partition(bank, 3, 0.5, seed))?;
        ensure(
            feature_multiset(&parts.iter().collect::<Vec<_>>()) == whole,
            || "dirichlet".into(),
        )?;
        let s = e2s(split_bank(
            bank,
            &SplitSpec {
                seed,
                ..SplitSpec::default()
            },
            0,
        ))?;
        ensure(
            feature_multiset(&[&s.train, &s.val, &s.test]) == whole,
            || "split".into(),
        )?;
    }
    Ok("10 banks, Dirichlet and stratified split".into())
}

fn stratification(_: &VerifyOptions) -> Result<String, String> {
    for seed in 0..10 {
        let data = e2s(small_synth(seed))?;
        let bank = &data.clients[1];
        let s = e2s(split_bank(bank, &SplitSpec::default(), 0))?;
        let total = bank.class_counts();
        let train = s.train.class_counts();
        for (c, (&n, &t)) in total.iter().zip(&train).enumerate() {
            if n >= 5 {
                let target = 0.6 * n as f64;
                ensure((t as f64 - target).abs() <= 1.0, || {
                    format!("class {c}: {t} of {n}")
                })?;
            }
        }
    }
    Ok("10 banks".into())
}

fn tiny_client(train: TrainConfig, seed: u64) -> crate::error::Result<ClientState> {
    let data = small_synth(seed)?;
    let s = split_bank(&data.clients[0], &SplitSpec::default(), 0)?;
    let fam = FamModel::init(
        6,
        train.mask_window,
        train.fam_masking,
        &mut stream(seed, StreamId::FamInit),
    );
    ClientState::new(
        0,
        seed,
        &fam,
        Arc::new(ClientData {
            train: s.train,
            val: s.val,
            test: s.test,
        }),
        train,
    )
}

fn small_train() -> TrainConfig {
    TrainConfig {
        mlp_hidden: 8,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn import_keeps_mlp(_: &VerifyOptions) -> Result<String, String> {
    let mut c = e2s(tiny_client(small_train(), 2))?;
    e2s(c.local_epoch())?;
    let mlp = c.mlp.flat();
    let mut other = FamModel::init(6, 1.0, true, &mut rng(17));
    other.layer1.bias[0] = 0.25;
    e2s(c.import_fam(&other.export()))?;
    ensure(c.mlp.flat() == mlp, || "MLP changed".into())?;
    ensure(c.fam.flat() == other.flat(), || "FAM not replaced".into())?;
    Ok("bitwise unchanged".into())
}

fn lambda_zero_independence(_: &VerifyOptions) -> Result<String, String> {
    let train = TrainConfig {
        lambda: 0.0,
        detach_mlp_input: true,
        ..small_train()
    };
    let mut a = e2s(tiny_client(train, 3))?;
    let mut b = a.clone();
    b.mlp = MlpModel::init(6, 8, 3, 1.0, &mut rng(18));
    b.opt_mlp = AdamW::new(&b.mlp, train.lr_mlp, train.optimizer);
    for _ in 0..3 {
        e2s(a.local_epoch())?;
        e2s(b.local_epoch())?;
    }
    ensure(a.fam.flat() == b.fam.flat(), || {
        "FAM depends on MLP state".into()
    })?;
    ensure(a.mlp.flat() != b.mlp.flat(), || {
        "MLPs did not differ".into()
    })?;
    Ok("3 epochs, bitwise".into())
}

fn lr_schedule(_: &VerifyOptions) -> Result<String, String> {
    let mut c = e2s(tiny_client(small_train(), 4))?;
    let mut expect = c.train.lr_fam;
    for _ in 0..5 {
        e2s(c.local_epoch())?;
        expect *= c.train.scheduler_gamma;
    }
    let exact = c.train.lr_fam * c.train.scheduler_gamma.powi(5);
    ensure(c.opt_fam.lr == expect, || {
        format!("{} != {expect}", c.opt_fam.lr)
    })?;
    ensure((c.opt_fam.lr - exact).abs() <= 1e-15 * exact, || {
        "drift from lr0 * gamma^k".into()
    })?;
    Ok("lr = lr0 * 0.97^k".into())
}

struct Toy([f64; 2]);

impl Parameterized for Toy {
    fn param_specs(&self) -> Vec<crate::params::ParamSpec> {
        vec![crate::params::ParamSpec {
            name: "w".into(),
            shape: vec![2],
            decay: true,
        }]
    }
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![&self.0]
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }
}

fn adamw_reference(_: &VerifyOptions) -> Result<String, String> {
    let cfg = OptimizerConfig::default();
    let lr = 1e-2;
    let mut toy = Toy([1.5, -0.5]);
    let mut opt = AdamW::new(&toy, lr, cfg);
    let (mut w, mut m, mut v) = ([1.5f64, -0.5], [0.0f64; 2], [0.0f64; 2]);
    let grad = |w: &[f64; 2]| [2.0 * (w[0] - 1.0), 6.0 * (w[1] + 2.0)];
    for t in 1..=100 {
        let g = grad(&toy.0);
        e2s(opt.step(&mut toy, &[g.to_vec()]))?;
        let g = grad(&w);
        for i in 0..2 {
            w[i] -= lr * cfg.weight_decay * w[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    let err = (toy.0[0] - w[0]).abs().max((toy.0[1] - w[1]).abs());
    ensure(err <= 1e-10, || format!("deviation {err:e}"))?;
    Ok("100 steps within 1e-10".into())
}

fn aggregate_permutation(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(19);
    let sets: Vec<Vec<NamedTensor>> = (0..5)
        .map(|_| FamModel::init(4, 1.0, true, &mut r).export())
        .collect();
    let base = e2s(aggregate(&sets))?;
    let mut worst: f64 = 0.0;
    for shift in 1..5 {
        let mut perm = sets.clone();
        perm.rotate_left(shift);
        perm.swap(0, 2);
        let other = e2s(aggregate(&perm))?;
        for (a, b) in base.iter().zip(&other) {
            worst = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(worst, f64::max);
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok("4 permutations of 5 clients".into())
}

fn tiny_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        rounds,
        train: small_train(),
        ..ExperimentConfig::default()
    };
    cfg.data = crate::config::DataConfig::Synthetic {
        synthetic: SynthSpec {
            clients: 3,
            dim: 6,
            classes: 3,
            n_per_client: 40,
            shift: ShiftMode::Rotation,
            sigma: 0.15,
            seed: 0,
        },
    };
    cfg
}

fn comm_accounting(_: &VerifyOptions) -> Result<String, String> {
    let mut exp = e2s(Experiment::build(&tiny_config(2)))?;
    let mut recount = 0usize;
    let mut logged = 0usize;
    for _ in 0..2 {
        let global_before = pack(&exp.server.global.export()).map_err(|e| e.to_string())?;
        let rep = e2s(exp
            .server
            .run_round(&mut exp.clients, Parallelism::Sequential, None))?;
        for (c, cr) in exp.clients.iter().zip(&rep.clients) {
            recount += global_before.len() + e2s(pack(&c.export_fam()))?.len();
            logged += cr.download_bytes + cr.upload_bytes;
        }
    }
    let log_total: usize = exp
        .server
        .comm_log
        .iter()
        .map(|c| c.upload + c.download)
        .sum();
    ensure(recount == logged && logged == log_total, || {
        format!("{recount} vs {logged} vs {log_total}")
    })?;
    let monotone = exp
        .server
        .comm_log
        .windows(2)
        .all(|w| w[0].round <= w[1].round);
    ensure(monotone, || "comm log out of order".into())?;
    Ok(format!("{log_total} bytes recounted"))
}

fn import_within_quantization(_: &VerifyOptions) -> Result<String, String> {
    let mut exp = e2s(Experiment::build(&tiny_config(1)))?;
    e2s(exp
        .server
        .run_round(&mut exp.clients, Parallelism::Sequential, None))?;
    let global = exp.server.global.export();
    let received = e2s(unpack(&e2s(pack(&global))?))?;
    for c in &mut exp.clients {
        e2s(c.import_fam(&received))?;
        for (a, b) in c.export_fam().iter().zip(&global) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let bound = if y.abs() >= 2f64.powi(-14) {
                    2f64.powi(-11) * y.abs()
                } else {
                    2f64.powi(-25)
                };
                ensure((x - y).abs() <= bound, || format!("{}: {x} vs {y}", a.name))?;
            }
        }
    }
    Ok("3 clients".into())
}

fn ece_calibrated(_: &VerifyOptions) -> Result<String, String> {
    // Each bin: confidence k/10 + 0.05 with exactly matching accuracy over 20 samples.
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for k in 0..10 {
        let c = (2 * k + 1) as f64 / 20.0;
        let hits = (c * 20.0).round() as usize;
        for i in 0..20 {
            conf.push(c);
            correct.push(i < hits);
        }
    }
    let v = e2s(ece(&conf, &correct, 10))?;
    ensure(v.abs() < 1e-12, || format!("ECE {v:e}"))?;
    Ok("ECE = 0".into())
}

fn f1_relabel(_: &VerifyOptions) -> Result<String, String> {
    let mut r = rng(20);
    for _ in 0..100 {
        let c = 4;
        let labels: Vec<usize> = (0..30).map(|_| r.random_range(0..c)).collect();
        let preds: Vec<usize> = (0..30).map(|_| r.random_range(0..c)).collect();
        let perm = [2, 0, 3, 1];
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let pp: Vec<usize> = preds.iter().map(|&l| perm[l]).collect();
        let a = e2s(macro_f1(&preds, &labels, c))?;
        let b = e2s(macro_f1(&pp, &pl, c))?;
        ensure((a - b).abs() < 1e-12, || format!("{a} vs {b}"))?;
    }
    Ok("100 cases".into())
}

fn wilcoxon_pmf(_: &VerifyOptions) -> Result<String, String> {
    for n in 1..=20u64 {
        let ranks2: Vec<u64> = (1..=n).map(|r| 2 * r).collect();
        let total: f64 = signed_rank_null_pmf(&ranks2).iter().sum();
        ensure((total - 1.0).abs() < 1e-12, || format!("n={n}: {total}"))?;
    }
    let tied = [3, 3, 6, 9, 9, 9, 14];
    let total: f64 = signed_rank_null_pmf(&tied).iter().sum();
    ensure((total - 1.0).abs() < 1e-12, || format!("tied: {total}"))?;
    Ok("n = 1..20 and a tied case".into())
}

fn report_deterministic(_: &VerifyOptions) -> Result<String, String> {
    let tables = |mode: Parallelism| -> Result<Vec<String>, String> {
        let mut exp = e2s(Experiment::build(&tiny_config(2)))?;
        let out = e2s(exp.run(mode))?;
        Ok(vec![
            e2s(report::rounds_jsonl(&out))?,
            report::metrics_csv(&out),
            report::metrics_txt(&out),
            report::comm_csv(&out),
        ])
    };
    let a = tables(Parallelism::Parallel)?;
    let b = tables(Parallelism::Sequential)?;
    ensure(a == b, || "tables differ between runs".into())?;
    let mut exp = e2s(Experiment::build(&tiny_config(2)))?;
    let out = e2s(exp.run(Parallelism::Sequential))?;
    let rows = report::site_rows(out.best());
    let (avg, sites) = rows.split_last().ok_or("no rows")?;
    let mean = sites.iter().map(|r| r.accuracy).sum::<f64>() / sites.len() as f64;
    ensure((avg.accuracy - mean).abs() < 1e-12, || {
        format!("AVG {} vs {mean}", avg.accuracy)
    })?;
    let c0 = &exp.clients[0];
    let direct = e2s(c0.evaluate(Split::Test))?;
    let last = out.history.last().ok_or("no rounds")?;
    ensure(direct.ensemble == last.clients[0].test, || {
        "report disagrees with evaluation".into()
    })?;
    Ok("identical tables; AVG recomputed".into())
}
