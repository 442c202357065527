use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedclip_core::client::{argmax, evaluate_fam, fam_distributions};
use fedclip_core::config::ExperimentConfig;
use fedclip_core::datastore::{gen_synthetic, load_bank, write_bank, ShiftMode, SynthSpec};
use fedclip_core::error::Error;
use fedclip_core::experiment::Experiment;
use fedclip_core::masked::FamModel;
use fedclip_core::metrics::wilcoxon_signed_rank;
use fedclip_core::par::{parallel_enabled, Parallelism};
use fedclip_core::params::{load_checkpoint, save_checkpoint, Parameterized};
use fedclip_core::report;
use fedclip_core::rng::{stream, StreamId};
use fedclip_core::verify::{render, run_suite, VerifyOptions};
use fedclip_core::wire::{
    f32_baseline_bytes, pack_with, unpack_bytes, Codec, DTYPE_F16, DTYPE_F32,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fedclip",
    version,
    about = "Federated masked-adapter CLIP simulator over embedding banks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment and write the result tables.
    Run(RunArgs),
    /// Generate synthetic client banks with a controlled feature shift.
    GenSynth(SynthArgs),
    /// Check every invariant and gradient property, one line each.
    Verify {
        /// Corrupt analytic gradients to confirm the suite catches it.
        #[arg(long)]
        perturb_gradients: bool,
    },
    /// Compress a JSON tensor checkpoint into a wire packet.
    Pack {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = CodecArg::Compressed)]
        codec: CodecArg,
    },
    /// Print the tensor table of a wire packet.
    Unpack {
        input: PathBuf,
        /// Also write the decoded tensors as a JSON checkpoint.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score a FAM checkpoint on a bank, optionally against a second one.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; every key defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, env = "FEDCLIP_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Disable float16 + zlib and send raw float32 tensors.
    #[arg(long)]
    no_compression: bool,
    /// Train clients one after another instead of in parallel.
    #[arg(long)]
    sequential: bool,
    /// Print one progress line per round.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short = 'k', default_value_t = 3)]
    clients: usize,
    #[arg(long, short = 'd', default_value_t = 32)]
    dim: usize,
    #[arg(long, short = 'c', default_value_t = 4)]
    classes: usize,
    #[arg(long, short = 'n', default_value_t = 200)]
    n_per_client: usize,
    #[arg(long, default_value = "rotation")]
    shift: ShiftMode,
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// FAM checkpoint (JSON tensors), e.g. `global_fam.json` from `run`.
    #[arg(long, required_unless_present = "identity")]
    fam: Option<PathBuf>,
    /// Score an all-open gate instead, i.e. zero-shot classification.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    /// Second checkpoint for a paired Wilcoxon signed-rank test.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Pairing::Sample)]
    pairing: Pairing,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Compressed,
    Raw32,
}

impl From<CodecArg> for Codec {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Compressed => Codec::Compressed,
            CodecArg::Raw32 => Codec::Raw32,
        }
    }
}

/// Unit paired by the Wilcoxon test.
#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    /// Per-sample correctness (1 or 0) of each model.
    Sample,
    /// Per-class accuracy of each model.
    Class,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", render_error(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The error chain joined by `: `, skipping causes that the previous message
/// already ends with (error enums often embed their source's text).
fn render_error(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        Some(Error::TrainingDiverged { .. }) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Verify { perturb_gradients } => {
            let out = run_suite(&VerifyOptions { perturb_gradients });
            print!("{}", render(&out));
            Ok(if out.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            })
        }
        Command::Pack {
            input,
            output,
            codec,
        } => cmd_pack(&input, &output, codec.into()),
        Command::Unpack { input, json } => cmd_unpack(&input, json.as_deref()),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config {
                    key: "--config".into(),
                    message: format!("{} does not exist", path.display()),
                }
                .into());
            }
            ExperimentConfig::from_file(path)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lambda {
        cfg.train.lambda = l;
    }
    if let Some(t) = args.tau {
        cfg.train.tau = t;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if args.no_compression {
        cfg.codec = Codec::Raw32;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&args)?;
    let mode = if args.sequential || cfg.threads == 1 {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let mut exp = Experiment::build(&cfg)?;
    for w in &exp.warnings {
        eprintln!("warning: {w}");
    }
    let verbose = args.verbose;
    let out = exp.run_with(mode, |r| {
        if verbose {
            let acc: Vec<String> = r
                .clients
                .iter()
                .map(|c| format!("{:.3}", c.test.accuracy))
                .collect();
            let global = r
                .global
                .map_or_else(|| "-".into(), |g| format!("{:.3}", g.accuracy));
            eprintln!(
                "round {:>3}  val {:.4}  test [{}]  global {}",
                r.round,
                r.mean_val_accuracy(),
                acc.join(" "),
                global
            );
        }
    })?;
    let paths = report::write_all(&out, &exp.server.global.export(), &cfg.output_dir)?;
    print!("{}", report::metrics_txt(&out));
    eprintln!(
        "wrote {} files to {} ({})",
        paths.len(),
        cfg.output_dir.display(),
        if parallel_enabled() && mode == Parallelism::Parallel {
            "parallel"
        } else {
            "sequential"
        }
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let spec = SynthSpec {
        clients: a.clients,
        dim: a.dim,
        classes: a.classes,
        n_per_client: a.n_per_client,
        shift: a.shift,
        sigma: a.sigma,
        seed: a.seed,
    };
    let data = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (k, bank) in data.clients.iter().enumerate() {
        let p = a.out_dir.join(format!("client_{k}.femb"));
        write_bank(bank, &p)?;
        println!(
            "{}  N={} D={} C={}",
            p.display(),
            bank.len(),
            bank.dim(),
            bank.classes()
        );
    }
    let p = a.out_dir.join("global.femb");
    write_bank(&data.global, &p)?;
    println!(
        "{}  N={} D={} C={}",
        p.display(),
        data.global.len(),
        data.global.dim(),
        data.global.classes()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_pack(input: &Path, output: &Path, codec: Codec) -> anyhow::Result<ExitCode> {
    let tensors = load_checkpoint(input)?;
    let packet = pack_with(&tensors, codec)?;
    std::fs::write(output, &packet.bytes)
        .with_context(|| format!("writing {}", output.display()))?;
    let baseline = f32_baseline_bytes(&tensors);
    let values: usize = tensors.iter().map(|t| t.numel()).sum();
    println!("tensors         {}", tensors.len());
    println!("values          {values}");
    println!("packet bytes    {}", packet.len());
    println!("payload bytes   {}", packet.raw_len);
    println!("f32 baseline    {baseline}");
    println!(
        "ratio           {:.4}",
        packet.len() as f64 / baseline.max(1) as f64
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_unpack(input: &Path, json: Option<&Path>) -> anyhow::Result<ExitCode> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let tensors = unpack_bytes(&bytes).map_err(Error::from)?;
    let dtype = if bytes.starts_with(fedclip_core::wire::MAGIC) {
        DTYPE_F32
    } else {
        DTYPE_F16
    };
    let dtype_name = if dtype == DTYPE_F16 { "f16" } else { "f32" };
    println!(
        "{:<24} {:<16} {:<6} {:>10}",
        "name", "shape", "dtype", "values"
    );
    for t in &tensors {
        let shape = format!("{:?}", t.shape);
        println!(
            "{:<24} {:<16} {:<6} {:>10}",
            t.name,
            shape,
            dtype_name,
            t.numel()
        );
    }
    if let Some(p) = json {
        save_checkpoint(&tensors, p)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn load_fam(path: &Path, dim: usize) -> anyhow::Result<FamModel> {
    let tensors = load_checkpoint(path)?;
    let mut fam = FamModel::init(dim, 1.0, true, &mut stream(0, StreamId::FamInit));
    fam.import(&tensors)
        .with_context(|| format!("{} is not a D={dim} FAM checkpoint", path.display()))?;
    Ok(fam)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let bank = load_bank(&a.bank)?;
    let fam = match (&a.fam, a.identity) {
        (_, true) => FamModel::constant_gate(bank.dim(), true),
        (Some(p), false) => load_fam(p, bank.dim())?,
        (None, false) => bail!("either --fam or --identity is required"),
    };
    let s = evaluate_fam(&fam, &bank, a.tau)?;
    println!("samples    {}", bank.len());
    println!("accuracy   {:.6}", s.accuracy);
    println!("macro_f1   {:.6}", s.macro_f1);
    println!("ece        {:.6}", s.ece);
    let Some(other) = &a.against else {
        return Ok(ExitCode::SUCCESS);
    };
    let fam_b = load_fam(other, bank.dim())?;
    let correct = |f: &FamModel| -> anyhow::Result<Vec<bool>> {
        Ok(fam_distributions(f, &bank, a.tau)?
            .iter()
            .zip(&bank.labels)
            .map(|(p, &y)| argmax(p) == y)
            .collect())
    };
    let (ca, cb) = (correct(&fam)?, correct(&fam_b)?);
    let diffs: Vec<f64> = match a.pairing {
        Pairing::Sample => ca
            .iter()
            .zip(&cb)
            .map(|(x, y)| *x as u8 as f64 - *y as u8 as f64)
            .collect(),
        Pairing::Class => (0..bank.classes())
            .filter_map(|c| {
                let idx: Vec<usize> = (0..bank.len()).filter(|&i| bank.labels[i] == c).collect();
                if idx.is_empty() {
                    return None;
                }
                let acc =
                    |v: &[bool]| idx.iter().filter(|&&i| v[i]).count() as f64 / idx.len() as f64;
                Some(acc(&ca) - acc(&cb))
            })
            .collect(),
    };
    let w = wilcoxon_signed_rank(&diffs).map_err(|e| anyhow!("Wilcoxon test: {e}"))?;
    println!(
        "wilcoxon   W+={} n={} p={:.6} ({})",
        w.w_plus,
        w.n,
        w.p_value,
        if w.exact { "exact" } else { "normal" }
    );
    Ok(ExitCode::SUCCESS)
}
