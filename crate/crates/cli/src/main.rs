use clap::{Args, Parser, Subcommand};
use lograsm::bounds::LipschitzReport;
use lograsm::certificate::CertMode;
use lograsm::learner::loss_trace_csv;
use lograsm::nn::Network;
use lograsm::orchestrator::{
    cegis, init_policy, pretrain_policy, simulate_reach_avoid, RunConfig, RunManifest, RunOutcome,
    RunResult,
};
use lograsm::system::{benchmark, benchmark_names};
use lograsm::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable read when `--threads` is absent.
const THREADS_ENV: &str = "LOGRASM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lograsm", version, about = "Learn and verify reach-avoid certificates for stochastic systems")]
struct Cli {
    /// Worker threads (defaults to $LOGRASM_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a policy on the system's shaping loss.
    Pretrain(PretrainArgs),
    /// Run the learner-verifier loop.
    Synthesize(SynthesizeArgs),
    /// Check a certificate for a fixed policy.
    Verify(VerifyArgs),
    /// Compare Lipschitz bounds of saved networks.
    Lipschitz(LipschitzArgs),
    /// Estimate the reach-avoid probability of a policy by simulation.
    Simulate(SimulateArgs),
    /// Evaluate a certificate on a regular grid and write a CSV.
    ExportGrid(ExportGridArgs),
    /// Print the available benchmarks.
    ListSystems,
}

#[derive(Debug, Args)]
struct Common {
    /// Benchmark name (see `list-systems`).
    #[arg(long)]
    system: Option<String>,
    /// Config file (TOML or JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Environment transitions to simulate.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct SpecArgs {
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    initial_mesh: Option<f64>,
    #[arg(long)]
    max_cells: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    LogRasm,
    Rasm,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    spec: SpecArgs,
    /// Start from this policy instead of pretraining one.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Start from this certificate.
    #[arg(long)]
    certificate: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Simulated episodes for a synthesized policy.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    certificate: PathBuf,
}

#[derive(Debug, Args)]
struct LipschitzArgs {
    /// Network files; repeat the flag for several.
    #[arg(long = "network", required = true)]
    networks: Vec<PathBuf>,
    /// Random pairs for the empirical lower bound.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Half-width of the input box sampled for the lower bound.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 500)]
    horizon: usize,
}

#[derive(Debug, Args)]
struct ExportGridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    certificate: PathBuf,
    /// Points per plotted axis.
    #[arg(long, default_value_t = 101)]
    resolution: usize,
    /// The two state axes to sweep (zero-based).
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
    axes: Vec<usize>,
    /// Values of the remaining coordinates (defaults to the center of the state space).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    slice: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV} must be an integer")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::ListSystems => {
            for name in benchmark_names() {
                let s = benchmark(name)?;
                println!(
                    "{name}\td={} m={} L_fx={} L_fu={}",
                    s.state_dim(),
                    s.action_dim(),
                    s.lipschitz_x,
                    s.lipschitz_u
                );
            }
            Ok(0)
        }
        Command::Pretrain(a) => pretrain(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Lipschitz(a) => lipschitz(a),
        Command::Simulate(a) => simulate(a),
        Command::ExportGrid(a) => export_grid(a),
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
    if is_toml {
        let v: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(Error::from)
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn set(obj: &mut Value, path: &[&str], v: Value) {
    let mut cur = obj;
    for key in &path[..path.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("object")
            .entry(key.to_string())
            .or_insert_with(|| json!({}));
    }
    cur.as_object_mut()
        .expect("object")
        .insert(path[path.len() - 1].to_string(), v);
}

/// Config file, then flags.
fn build_config(common: &Common, spec: Option<&SpecArgs>, extra: &[(&[&str], Value)]) -> Result<RunConfig> {
    let mut v = match &common.config {
        Some(p) => read_config_file(p)?,
        None => json!({}),
    };
    if !v.is_object() {
        return Err(Error::Config("config must be a table/object".into()));
    }
    if let Some(s) = &common.system {
        set(&mut v, &["system"], json!(s));
    }
    if v.get("system").is_none() {
        return Err(Error::Config("--system is required (or a config with `system`)".into()));
    }
    if let Some(seed) = common.seed {
        set(&mut v, &["seed"], json!(seed));
    }
    if let Some(s) = spec {
        if let Some(r) = s.rho {
            set(&mut v, &["rho"], json!(r));
        }
        if let Some(m) = s.mode {
            let mode = match m {
                ModeArg::LogRasm => CertMode::LogRasm,
                ModeArg::Rasm => CertMode::Rasm,
            };
            set(&mut v, &["mode"], serde_json::to_value(mode)?);
        }
        if let Some(t) = s.timeout {
            set(&mut v, &["timeout"], json!(t));
        }
        if let Some(m) = s.initial_mesh {
            set(&mut v, &["verifier", "initial_mesh"], json!(m));
        }
        if let Some(c) = s.max_cells {
            set(&mut v, &["verifier", "max_cells"], json!(c));
        }
    }
    for (path, val) in extra {
        set(&mut v, path, val.clone());
    }
    RunConfig::from_value(v)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, result: &RunResult) -> Result<()> {
    let manifest = RunManifest::new(command, &git_describe(), cfg, result);
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn print_iteration(entry: &lograsm::orchestrator::IterationLog) {
    let loss = entry
        .final_loss
        .map(|l| format!("loss {:.4} (L0 {:.4} LU {:.4} LE {:.4}) ", l.total, l.l_init, l.l_unsafe, l.l_decrease))
        .unwrap_or_default();
    let s = &entry.verifier;
    eprintln!(
        "iter {:>3}: {loss}verifier {:?}: {} cells, {} refinements, K={:.2} L_V={:.2} L_pi={:.2}, {} counterexamples, {:.1}s",
        entry.iteration,
        entry.verdict,
        s.cells_checked,
        s.refinements,
        s.k,
        s.l_v,
        s.l_pi,
        entry.counterexamples,
        s.elapsed_ms / 1e3
    );
}

fn exit_code(outcome: RunOutcome) -> u8 {
    match outcome {
        RunOutcome::Synthesized => 0,
        RunOutcome::TimedOut | RunOutcome::Failed => 2,
    }
}

fn pretrain(a: PretrainArgs) -> Result<u8> {
    let mut extra: Vec<(&[&str], Value)> = Vec::new();
    if let Some(s) = a.steps {
        extra.push((&["pretrain", "steps"], json!(s)));
    }
    if let Some(h) = a.horizon {
        extra.push((&["pretrain", "horizon"], json!(h)));
    }
    if let Some(h) = &a.hidden {
        extra.push((&["policy_hidden"], json!(h)));
    }
    let cfg = build_config(&a.common, None, &extra)?;
    prepare_out(&a.common.out)?;
    let sys = benchmark(&cfg.system)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = init_policy(sys.state_dim(), sys.action_dim(), &cfg.policy_hidden, &mut rng);
    let history = pretrain_policy(&sys, &mut policy, &cfg.pretrain, &mut rng)?;
    policy.save(a.common.out.join("policy.json"))?;
    let mut csv = String::from("update,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    std::fs::write(a.common.out.join("pretrain_loss.csv"), csv)?;
    eprintln!(
        "pretrained {} updates; final loss {:.4}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn write_run(out: &Path, command: &str, cfg: &RunConfig, result: &RunResult) -> Result<()> {
    result.policy.save(out.join("policy.json"))?;
    result.certificate.save(out.join("certificate.json"))?;
    let records: Vec<_> = result.loss_trace.iter().map(|(_, r)| *r).collect();
    if !records.is_empty() {
        let mut csv = String::from("iteration,");
        let body = loss_trace_csv(&records);
        let mut lines = body.lines();
        csv.push_str(lines.next().unwrap_or_default());
        csv.push('\n');
        for ((it, _), line) in result.loss_trace.iter().zip(lines) {
            let _ = writeln!(csv, "{it},{line}");
        }
        std::fs::write(out.join("loss_trace.csv"), csv)?;
    }
    if let Some(v) = &result.last_verification {
        v.write_jsonl(out.join("verdicts.jsonl"))?;
        std::fs::write(out.join("verifier_summary.json"), v.summary_json()? + "\n")?;
    }
    write_manifest(out, command, cfg, result)
}

fn synthesize(a: SynthesizeArgs) -> Result<u8> {
    let mut extra: Vec<(&[&str], Value)> = Vec::new();
    if let Some(n) = a.max_iterations {
        extra.push((&["max_iterations"], json!(n)));
    }
    if let Some(n) = a.episodes {
        extra.push((&["simulate_episodes"], json!(n)));
    }
    let cfg = build_config(&a.common, Some(&a.spec), &extra)?;
    let policy = a.policy.as_ref().map(Network::load).transpose()?;
    let certificate = a.certificate.as_ref().map(Network::load).transpose()?;
    prepare_out(&a.common.out)?;
    let result = cegis(&cfg, policy, certificate, &mut print_iteration)?;
    write_run(&a.common.out, "synthesize", &cfg, &result)?;
    eprintln!(
        "{:?} after {} iterations in {:.1}s",
        result.outcome, result.iterations, result.wall_time
    );
    if let Some(s) = result.simulation {
        eprintln!(
            "simulated reach-avoid probability {:.4} +- {:.4} over {} episodes",
            s.estimate, s.ci, s.episodes
        );
    }
    Ok(exit_code(result.outcome))
}

fn verify_cmd(a: VerifyArgs) -> Result<u8> {
    let cfg = build_config(&a.common, Some(&a.spec), &[(&["verify_only"], json!(true))])?;
    let policy = Network::load(&a.policy)?;
    let certificate = Network::load(&a.certificate)?;
    prepare_out(&a.common.out)?;
    let result = cegis(&cfg, Some(policy), Some(certificate), &mut print_iteration)?;
    let out = &a.common.out;
    if let Some(v) = &result.last_verification {
        v.write_jsonl(out.join("verdicts.jsonl"))?;
        std::fs::write(out.join("verifier_summary.json"), v.summary_json()? + "\n")?;
    }
    write_manifest(out, "verify", &cfg, &result)?;
    eprintln!("{:?}", result.outcome);
    Ok(exit_code(result.outcome))
}

fn lipschitz(a: LipschitzArgs) -> Result<u8> {
    std::fs::create_dir_all(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut csv = String::from(LipschitzReport::CSV_HEADER);
    csv.push('\n');
    for path in &a.networks {
        let net = Network::load(path)?;
        let domain = lograsm::interval::IntervalBox::cube(-a.radius, a.radius, net.input_dim())?;
        let report = LipschitzReport::compute(&net, &domain, a.samples, &mut rng)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("network");
        csv.push_str(&report.csv_row(id));
        csv.push('\n');
    }
    std::fs::write(a.out.join("lipschitz.csv"), &csv)?;
    print!("{csv}");
    Ok(0)
}

fn simulate(a: SimulateArgs) -> Result<u8> {
    let cfg = build_config(&a.common, None, &[])?;
    let sys = benchmark(&cfg.system)?;
    let policy = Network::load(&a.policy)?;
    prepare_out(&a.common.out)?;
    let r = simulate_reach_avoid(&sys, &policy, a.episodes, a.horizon, cfg.seed)?;
    let text = serde_json::to_string_pretty(&json!({
        "system": cfg.system,
        "seed": cfg.seed,
        "horizon": a.horizon,
        "result": r,
    }))?;
    std::fs::write(a.common.out.join("simulation.json"), text + "\n")?;
    println!("{:.6} +- {:.6} ({} / {})", r.estimate, r.ci, r.successes, r.episodes);
    Ok(0)
}

fn export_grid(a: ExportGridArgs) -> Result<u8> {
    let cfg = build_config(&a.common, None, &[])?;
    let sys = benchmark(&cfg.system)?;
    let v = Network::load(&a.certificate)?;
    let d = sys.state_dim();
    v.check_input(d)?;
    if a.resolution < 2 {
        return Err(Error::Config("resolution must be at least 2".into()));
    }
    let axes: Vec<usize> = if d == 1 { vec![0] } else { a.axes.clone() };
    if axes.iter().any(|&i| i >= d) || (d > 1 && (axes.len() != 2 || axes[0] == axes[1])) {
        return Err(Error::Config(format!("need two distinct axes below {d}")));
    }
    let mut base = sys.state_space.center();
    if let Some(s) = &a.slice {
        let rest: Vec<usize> = (0..d).filter(|i| !axes.contains(i)).collect();
        if s.len() != rest.len() {
            return Err(Error::Config(format!("--slice needs {} values", rest.len())));
        }
        for (i, val) in rest.into_iter().zip(s) {
            base[i] = *val;
        }
    }
    prepare_out(&a.common.out)?;
    let ivs = sys.state_space.intervals();
    let coord = |axis: usize, k: usize| {
        let iv = ivs[axis];
        iv.lo + iv.width() * k as f64 / (a.resolution - 1) as f64
    };
    let mut csv = String::new();
    for i in 0..d {
        let _ = write!(csv, "x{},", i + 1);
    }
    csv.push_str("v\n");
    let outer = if axes.len() == 2 { a.resolution } else { 1 };
    for i in 0..a.resolution {
        for j in 0..outer {
            let mut x = base.clone();
            x[axes[0]] = coord(axes[0], i);
            if axes.len() == 2 {
                x[axes[1]] = coord(axes[1], j);
            }
            let val = v.eval_scalar(&x)?;
            for c in &x {
                let _ = write!(csv, "{c},");
            }
            let _ = writeln!(csv, "{val}");
        }
    }
    std::fs::write(a.common.out.join("grid.csv"), csv)?;
    Ok(0)
}
