//! The learner-verifier loop, policy pretraining and simulation.

mod pretrain;
mod simulate;

pub use pretrain::{pretrain_policy, rollout_loss, PretrainConfig};
pub use simulate::{simulate_reach_avoid, wilson_half_width, SimulationResult};

use crate::certificate::{CertMode, Spec};
use crate::error::{Error, Result};
use crate::learner::{train_iteration, LossConfig, LossRecord, SampleBuffers, Trainer};
use crate::nn::Network;
use crate::system::{benchmark, make_partition, Dtss};
use crate::verifier::{verify, VerifierConfig, VerifierOutcome, VerifierStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::time::Instant;

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: String,
    pub rho: f64,
    pub mode: CertMode,
    pub seed: u64,
    /// Learner iterations before giving up.
    pub max_iterations: usize,
    /// Wall-clock limit in seconds for the whole loop.
    pub timeout: Option<f64>,
    pub noise_cells_per_axis: usize,
    pub policy_hidden: Vec<usize>,
    pub certificate_hidden: Vec<usize>,
    /// Added to the certificate's output bias at initialization.
    pub certificate_bias: f64,
    pub pretrain: PretrainConfig,
    pub loss: LossConfig,
    pub verifier: VerifierConfig,
    /// Check the given certificate without training.
    pub verify_only: bool,
    /// Episodes for the closing simulation of a synthesized policy (0 disables it).
    pub simulate_episodes: usize,
    pub simulate_horizon: usize,
}

impl RunConfig {
    /// Defaults for a benchmark, with dimension-dependent meshes and partitions.
    pub fn for_system(name: &str) -> Result<Self> {
        let sys = benchmark(name)?;
        Ok(Self {
            system: name.to_string(),
            rho: 0.9,
            mode: CertMode::LogRasm,
            seed: 0,
            max_iterations: 100,
            timeout: None,
            noise_cells_per_axis: sys.defaults.noise_cells_per_axis,
            policy_hidden: vec![64, 64],
            certificate_hidden: vec![64, 64],
            certificate_bias: 0.1,
            pretrain: PretrainConfig::default(),
            loss: LossConfig::for_system(&sys),
            verifier: VerifierConfig::for_system(&sys),
            verify_only: false,
            simulate_episodes: 0,
            simulate_horizon: 500,
        })
    }

    /// Builds a config from a (possibly partial) JSON object. Missing fields take the defaults
    /// of the named system; nested tables merge field by field.
    pub fn from_value(value: Value) -> Result<Self> {
        let name = value
            .get("system")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("config needs a `system` field".into()))?
            .to_string();
        let mut base = serde_json::to_value(Self::for_system(&name)?)?;
        merge(&mut base, value);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Spec::new(self.rho, self.mode)?;
        self.loss.validate()?;
        if self.noise_cells_per_axis == 0 {
            return Err(Error::Config("noise partition needs at least one cell per axis".into()));
        }
        if self.policy_hidden.contains(&0) || self.certificate_hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be nonempty".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<Spec> {
        Spec::new(self.rho, self.mode)
    }
}

/// Recursive merge of JSON objects; `patch` wins on conflicts.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunOutcome {
    Synthesized,
    TimedOut,
    Failed,
}

/// Per-iteration record of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub final_loss: Option<LossRecord>,
    pub verifier: VerifierStats,
    pub verdict: crate::verifier::Verdict,
    pub counterexamples: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: RunOutcome,
    /// Learner iterations performed.
    pub iterations: usize,
    pub wall_time: f64,
    pub certificate: Network,
    pub policy: Network,
    pub last_verification: Option<VerifierOutcome>,
    pub loss_trace: Vec<(usize, LossRecord)>,
    pub log: Vec<IterationLog>,
    pub simulation: Option<SimulationResult>,
}

/// Fresh certificate network with a slightly positive output bias.
pub fn init_certificate(d: usize, hidden: &[usize], bias: f64, rng: &mut ChaCha8Rng) -> Network {
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut v = Network::random(&dims, rng);
    v.output_layer_mut().bias[0] += bias;
    v
}

pub fn init_policy(d: usize, m: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Network {
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(m);
    Network::random(&dims, rng)
}

/// Hook called after each verification with the iteration number and the log entry.
pub type Observer<'a> = dyn FnMut(&IterationLog) + 'a;

/// Runs the learner-verifier loop. A missing policy is initialized and pretrained; a missing
/// certificate is initialized at random.
pub fn cegis(
    cfg: &RunConfig,
    policy: Option<Network>,
    certificate: Option<Network>,
    observer: &mut Observer<'_>,
) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let sys = benchmark(&cfg.system)?;
    let spec = cfg.spec()?;
    let noise = make_partition(sys.noise_dim, cfg.noise_cells_per_axis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = sys.state_dim();

    let mut policy = match policy {
        Some(p) => p,
        None => {
            let mut p = init_policy(d, sys.action_dim(), &cfg.policy_hidden, &mut rng);
            pretrain_policy(&sys, &mut p, &cfg.pretrain, &mut rng)?;
            p
        }
    };
    let mut v = match certificate {
        Some(v) => v,
        None => init_certificate(d, &cfg.certificate_hidden, cfg.certificate_bias, &mut rng),
    };

    let elapsed = |s: &Instant| s.elapsed().as_secs_f64();
    let remaining = |s: &Instant| cfg.timeout.map(|t| (t - elapsed(s)).max(0.0));
    let mut result = RunResult {
        outcome: RunOutcome::TimedOut,
        iterations: 0,
        wall_time: 0.0,
        certificate: v.clone(),
        policy: policy.clone(),
        last_verification: None,
        loss_trace: Vec::new(),
        log: Vec::new(),
        simulation: None,
    };

    if cfg.verify_only {
        let mut vcfg = cfg.verifier.clone();
        vcfg.time_budget = min_budget(vcfg.time_budget, remaining(&start));
        let out = verify(&v, &policy, &sys, &noise, spec, &vcfg)?;
        let entry = IterationLog {
            iteration: 0,
            final_loss: None,
            verifier: out.stats.clone(),
            verdict: out.verdict,
            counterexamples: out.counterexamples.len(),
        };
        observer(&entry);
        result.log.push(entry);
        result.outcome = match out.verdict {
            crate::verifier::Verdict::Verified => RunOutcome::Synthesized,
            crate::verifier::Verdict::Exhausted => RunOutcome::TimedOut,
            crate::verifier::Verdict::Counterexamples => RunOutcome::Failed,
        };
        result.last_verification = Some(out);
        return finish(result, &sys, cfg, start);
    }

    let mut loss_cfg = cfg.loss.clone();
    let mut buffers = SampleBuffers::new(&loss_cfg);
    let mut trainer = Trainer::new(&v, &policy, &loss_cfg);
    for iteration in 0..cfg.max_iterations {
        if remaining(&start) == Some(0.0) {
            break;
        }
        let records = train_iteration(
            &mut v,
            &mut policy,
            &sys,
            &spec,
            &mut buffers,
            &mut loss_cfg,
            &mut trainer,
            &mut rng,
        )?;
        result.iterations = iteration + 1;
        result
            .loss_trace
            .extend(records.iter().map(|r| (iteration, *r)));
        if remaining(&start) == Some(0.0) {
            break;
        }
        let mut vcfg = cfg.verifier.clone();
        vcfg.time_budget = min_budget(vcfg.time_budget, remaining(&start));
        let out = verify(&v, &policy, &sys, &noise, spec, &vcfg)?;
        let entry = IterationLog {
            iteration,
            final_loss: records.last().copied(),
            verifier: out.stats.clone(),
            verdict: out.verdict,
            counterexamples: out.counterexamples.len(),
        };
        observer(&entry);
        result.log.push(entry);
        let verified = out.is_verified();
        if !verified {
            buffers.add_counterexamples(&sys, &out.counterexamples, loss_cfg.refresh_fraction, &mut rng);
        }
        result.last_verification = Some(out);
        if verified {
            result.outcome = RunOutcome::Synthesized;
            break;
        }
    }
    result.certificate = v;
    result.policy = policy;
    finish(result, &sys, cfg, start)
}

fn min_budget(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn finish(mut result: RunResult, sys: &Dtss, cfg: &RunConfig, start: Instant) -> Result<RunResult> {
    if result.outcome == RunOutcome::Synthesized && cfg.simulate_episodes > 0 {
        result.simulation = Some(simulate_reach_avoid(
            sys,
            &result.policy,
            cfg.simulate_episodes,
            cfg.simulate_horizon,
            cfg.seed,
        )?);
    }
    result.wall_time = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Record of a run written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub git_describe: String,
    pub command: String,
    pub config: RunConfig,
    pub outcome: RunOutcome,
    pub iterations: usize,
    pub wall_time: f64,
    pub log: Vec<IterationLog>,
    pub simulation: Option<SimulationResult>,
}

impl RunManifest {
    pub fn new(command: &str, git_describe: &str, cfg: &RunConfig, result: &RunResult) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_describe: git_describe.to_string(),
            command: command.to_string(),
            config: cfg.clone(),
            outcome: result.outcome,
            iterations: result.iterations,
            wall_time: result.wall_time,
            log: result.log.clone(),
            simulation: result.simulation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{toy_certificate, toy_policy};

    #[test]
    fn partial_config_merges_defaults() {
        let v: Value = serde_json::json!({
            "system": "pendulum",
            "rho": 0.99,
            "verifier": {"initial_mesh": 0.05}
        });
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.rho, 0.99);
        assert_eq!(cfg.verifier.initial_mesh, 0.05);
        assert_eq!(cfg.verifier.refine_factor, 10.0);
        assert_eq!(cfg.noise_cells_per_axis, 12);
        let bad = serde_json::json!({"system": "pendulum", "bogus": 1});
        assert!(RunConfig::from_value(bad).is_err());
        assert!(RunConfig::from_value(serde_json::json!({"rho": 0.9})).is_err());
    }

    #[test]
    fn zero_iterations_time_out() {
        let mut cfg = RunConfig::for_system("contracting-toy").unwrap();
        cfg.max_iterations = 0;
        let r = cegis(&cfg, Some(toy_policy()), None, &mut |_| {}).unwrap();
        assert_eq!(r.outcome, RunOutcome::TimedOut);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn verify_only_fixture() {
        let mut cfg = RunConfig::for_system("contracting-toy").unwrap();
        cfg.verify_only = true;
        let r = cegis(&cfg, Some(toy_policy()), Some(toy_certificate()), &mut |_| {}).unwrap();
        assert_eq!(r.outcome, RunOutcome::Synthesized);
        assert_eq!(r.iterations, 0);
    }
}
