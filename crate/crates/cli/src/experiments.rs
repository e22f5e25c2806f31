//! Replica runs, checks and the standard experiment set.

use std::path::Path;

use anyhow::Context;
use noisy_fedavg::analysis::{check_bound, d_constant, fit_rate, seed_mean, BoundSpec, BoundVariant, CheckLine};
use noisy_fedavg::channel::{NoiseDistribution, TransmissionMode};
use noisy_fedavg::engine::{run, ChannelLayer, Pathloss, RoundTrace, RunConfig};
use noisy_fedavg::policy::{DiversitySteps, LearningRateSchedule, PolicyKind, ScheduleClock};
use noisy_fedavg::task::{derive_constants, QuadraticTask, TaskSpec};
use noisy_fedavg::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Check, ExperimentFile, TaskSource};
use crate::io::{header_lines, trace_csv, write_atomic};

/// Constants written alongside every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConstants {
    pub mu: f64,
    pub lipschitz: f64,
    pub kappa: f64,
    /// Non-IID gap `Γ`.
    pub gamma_noniid: f64,
    /// Learning-rate shift `γ`.
    pub gamma: f64,
    pub beta: f64,
    /// `H²` over the ball of radius `trajectory_radius`.
    pub grad_bound: f64,
    pub sgd_var: Vec<f64>,
    pub variant: BoundVariant,
    pub d: f64,
    pub trajectory_radius: f64,
    pub initial_gap: f64,
    pub dimension: usize,
}

pub fn resolve_constants(
    exp: &ExperimentFile,
    task: &QuadraticTask,
    variant: BoundVariant,
    radius: f64,
) -> anyhow::Result<(ResolvedConstants, BoundSpec<f64>)> {
    let cfg = &exp.run;
    let c = derive_constants(task, cfg.batch, radius)?;
    let dim = task.dimension();
    let gap = cfg.initial(dim).sub(&task.optimum())?.norm_sq();
    let spec = BoundSpec::from_constants(
        variant,
        &c,
        cfg.local_steps,
        cfg.clients,
        cfg.participants,
        exp.nu(),
        dim,
        gap,
    )?;
    let s: &LearningRateSchedule<f64> = &spec.schedule;
    let resolved = ResolvedConstants {
        mu: c.mu,
        lipschitz: c.lipschitz,
        kappa: c.kappa,
        gamma_noniid: c.gamma_noniid,
        gamma: s.gamma(),
        beta: s.beta(),
        grad_bound: c.grad_bound,
        sgd_var: c.sgd_var.clone(),
        variant,
        d: d_constant(&spec)?,
        trajectory_radius: radius,
        initial_gap: gap,
        dimension: dim,
    };
    Ok((resolved, spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaStatus {
    pub seed: u64,
    pub rounds_completed: usize,
    pub final_sq_dist: Option<f64>,
    /// Round and reason when the run diverged.
    pub diverged: Option<(usize, String)>,
    pub retransmissions: usize,
    pub ball_exits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub t: usize,
    pub mean_sq_dist: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentFile,
    pub constants: ResolvedConstants,
    pub replicas: Vec<ReplicaStatus>,
    pub final_mean: Option<f64>,
    /// Log-log slope of the seed mean over the last three quarters.
    pub slope: Option<f64>,
    /// Mean cumulative energy at the last round.
    pub energy: Option<f64>,
    pub checks: Vec<CheckLine>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summary: Summary,
    /// Trace per replica, partial for diverged ones.
    pub traces: Vec<(u64, Vec<RoundTrace>)>,
    /// Seed mean over the replicas that completed.
    pub means: Vec<MeanRow>,
}

impl ExperimentResult {
    pub fn passed(&self) -> bool {
        self.summary.passed
    }

    pub fn diverged(&self) -> usize {
        self.summary.replicas.iter().filter(|r| r.diverged.is_some()).count()
    }

    pub fn points(&self) -> Vec<(usize, f64)> {
        self.means.iter().map(|m| (m.t, m.mean_sq_dist)).collect()
    }
}

pub fn pool(workers: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    Ok(b.build()?)
}

type ReplicaRun = (u64, Vec<RoundTrace>, ReplicaStatus);

fn run_replica(cfg: &RunConfig, task: &QuadraticTask) -> anyhow::Result<ReplicaRun> {
    let seed = cfg.seed;
    match run(cfg, task) {
        Ok(out) => {
            let status = ReplicaStatus {
                seed,
                rounds_completed: out.trace.len(),
                final_sq_dist: out.trace.last().map(|r| r.sq_dist),
                diverged: None,
                retransmissions: out.retransmissions,
                ball_exits: out.ball_exits,
            };
            Ok((seed, out.trace, status))
        }
        Err(Error::Divergence { round, reason, partial }) => {
            let status = ReplicaStatus {
                seed,
                rounds_completed: partial.len(),
                final_sq_dist: None,
                diverged: Some((round, reason)),
                retransmissions: 0,
                ball_exits: 0,
            };
            Ok((seed, *partial, status))
        }
        Err(e) => Err(e).with_context(|| format!("replica with seed {seed}")),
    }
}

/// Window `[⌈T/4⌉, T]` used for the summary slope.
pub fn default_window(rounds: usize) -> (usize, usize) {
    (rounds.div_ceil(4).max(1), rounds)
}

/// Window over the final third of the run.
pub fn final_third(rounds: usize) -> (usize, usize) {
    ((2 * rounds).div_ceil(3).max(1), rounds)
}

/// Run every replica of `exp` on `task` and evaluate its checks.
pub fn run_experiment(
    exp: &ExperimentFile,
    task: &QuadraticTask,
    workers: Option<usize>,
) -> anyhow::Result<ExperimentResult> {
    exp.run.validate(task)?;
    let configs: Vec<RunConfig> = exp
        .seeds()
        .into_iter()
        .map(|seed| RunConfig {
            seed,
            ..exp.run.clone()
        })
        .collect();
    let runs: Vec<ReplicaRun> = pool(workers)?.install(|| {
        configs
            .par_iter()
            .map(|cfg| run_replica(cfg, task))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;

    let complete: Vec<Vec<RoundTrace>> = runs
        .iter()
        .filter(|r| r.2.diverged.is_none())
        .map(|r| r.1.clone())
        .collect();
    let means: Vec<MeanRow> = seed_mean(&complete)
        .into_iter()
        .map(|(t, m, se)| MeanRow {
            t,
            mean_sq_dist: m,
            std_err: se,
        })
        .collect();
    let max_sq = runs
        .iter()
        .flat_map(|r| r.1.iter().map(|row| row.sq_dist))
        .filter(|d| d.is_finite())
        .fold(0.0f64, f64::max);
    let gap = exp.run.initial(task.dimension()).sub(&task.optimum())?.norm_sq();
    let observed_radius = gap.max(max_sq).sqrt().max(1e-9);

    let variant = exp.default_variant();
    let (constants, _) = resolve_constants(exp, task, variant, observed_radius)?;
    let points: Vec<(usize, f64)> = means.iter().map(|m| (m.t, m.mean_sq_dist)).collect();
    let diverged = runs.iter().filter(|r| r.2.diverged.is_some()).count();

    let mut checks = Vec::new();
    for check in &exp.checks {
        checks.push(evaluate_check(check, exp, task, &means, &points, observed_radius)?);
    }
    if !exp.checks.is_empty() {
        checks.push(CheckLine {
            label: "replicas completed without divergence".into(),
            estimate: diverged as f64,
            reference: 0.0,
            tolerance: 0.0,
            passed: diverged == 0,
        });
    }
    let energy = {
        let ends: Vec<f64> = complete.iter().filter_map(|t| t.last().map(|r| r.energy_cum)).collect();
        (!ends.is_empty()).then(|| ends.iter().sum::<f64>() / ends.len() as f64)
    };
    let summary = Summary {
        config: exp.clone(),
        constants,
        replicas: runs.iter().map(|r| r.2.clone()).collect(),
        final_mean: means.last().filter(|m| m.t == exp.run.rounds).map(|m| m.mean_sq_dist),
        slope: fit_rate(&points, default_window(exp.run.rounds)).ok().map(|f| f.slope),
        energy,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    Ok(ExperimentResult {
        summary,
        traces: runs.into_iter().map(|r| (r.0, r.1)).collect(),
        means,
    })
}

fn evaluate_check(
    check: &Check,
    exp: &ExperimentFile,
    task: &QuadraticTask,
    means: &[MeanRow],
    points: &[(usize, f64)],
    observed_radius: f64,
) -> anyhow::Result<CheckLine> {
    let line = |label: String, estimate: f64, reference: f64, tolerance: f64, passed: bool| CheckLine {
        label,
        estimate,
        reference,
        tolerance,
        passed,
    };
    Ok(match *check {
        Check::Bound { variant, radius } => {
            let variant = variant.unwrap_or_else(|| exp.default_variant());
            let r = radius.unwrap_or(observed_radius);
            let (_, spec) = resolve_constants(exp, task, variant, r)?;
            let triples: Vec<(usize, f64, f64)> = means.iter().map(|m| (m.t, m.mean_sq_dist, m.std_err)).collect();
            let b = check_bound(&triples, &spec)?;
            let label = match b.violations.first() {
                Some((t, m, bound)) => format!(
                    "{variant:?} bound: {} rounds violated, first t={t} mean={m:.4e} bound={bound:.4e}",
                    b.violations.len()
                ),
                None if means.is_empty() => format!("{variant:?} bound: no replica completed"),
                None => format!("{variant:?} bound: seed mean below bound at all {} rounds", means.len()),
            };
            let passed = b.violations.is_empty() && !means.is_empty();
            line(label, b.worst_ratio, 1.0, 0.0, passed)
        }
        Check::Slope { from, to, min, max } => {
            let label = format!("slope over rounds {from}..={to} in [{min}, {max}]");
            match fit_rate(points, (from, to)) {
                Ok(f) => line(
                    label,
                    f.slope,
                    0.5 * (min + max),
                    0.5 * (max - min),
                    f.slope >= min && f.slope <= max,
                ),
                Err(e) => line(
                    format!("{label}: {e}"),
                    f64::NAN,
                    0.5 * (min + max),
                    0.5 * (max - min),
                    false,
                ),
            }
        }
        Check::Plateau { min } => {
            let w = final_third(exp.run.rounds);
            let label = format!("final-third slope over rounds {}..={} above {min}", w.0, w.1);
            match fit_rate(points, w) {
                Ok(f) => line(label, f.slope, min, 0.0, f.slope > min),
                Err(e) => line(format!("{label}: {e}"), f64::NAN, min, 0.0, false),
            }
        }
    })
}

/// Configuration written into the header of one replica's trace: the
/// experiment narrowed to that seed.
pub fn replica_config(exp: &ExperimentFile, seed: u64) -> ExperimentFile {
    let mut one = exp.clone();
    one.run.seed = seed;
    one.replicas = 1;
    one.output = None;
    one
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

/// Write per-replica traces, the seed-mean CSV and `summary.json` into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> anyhow::Result<()> {
    let exp = &result.summary.config;
    let constants = &result.summary.constants;
    for (seed, trace) in &result.traces {
        let header = header_lines(&replica_config(exp, *seed), constants)?;
        write_atomic(&dir.join(trace_file_name(*seed)), &trace_csv(&header, trace)?)?;
    }
    let mut buf = header_lines(exp, constants)?.into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for m in &result.means {
            w.serialize(m)?;
        }
        if result.means.is_empty() {
            w.write_record(["t", "mean_sq_dist", "std_err"])?;
        }
        w.flush()?;
    }
    write_atomic(&dir.join("seed_mean.csv"), &buf)?;
    let json = serde_json::to_string_pretty(&result.summary)?;
    write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    Ok(())
}

pub fn format_checks(checks: &[CheckLine]) -> String {
    checks
        .iter()
        .map(|c| {
            format!(
                "  [{}] {}: estimate={:.4e} reference={:.4e} tolerance={:.3e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.label,
                c.estimate,
                c.reference,
                c.tolerance
            )
        })
        .collect()
}

pub fn format_summary(s: &Summary) -> String {
    let c = &s.constants;
    let mut out = format!(
        "constants: mu={:.4} L={:.4} kappa={:.3} Gamma={:.4} gamma={:.2} H2={:.4e} D={:.4e} radius={:.3} gap={:.4}\n",
        c.mu, c.lipschitz, c.kappa, c.gamma_noniid, c.gamma, c.grad_bound, c.d, c.trajectory_radius, c.initial_gap
    );
    for r in &s.replicas {
        match &r.diverged {
            Some((round, reason)) => out.push_str(&format!("  seed {}: diverged at round {round}: {reason}\n", r.seed)),
            None => out.push_str(&format!(
                "  seed {}: {} rounds, final sq_dist {:.4e}\n",
                r.seed,
                r.rounds_completed,
                r.final_sq_dist.unwrap_or(f64::NAN)
            )),
        }
    }
    out.push_str(&format!(
        "seed mean: final={:.4e} slope={:.3} energy={:.4e}\n",
        s.final_mean.unwrap_or(f64::NAN),
        s.slope.unwrap_or(f64::NAN),
        s.energy.unwrap_or(f64::NAN)
    ));
    out.push_str(&format_checks(&s.checks));
    out
}

pub const STANDARD_ROUNDS: usize = 200;
pub const STANDARD_REPLICAS: usize = 20;
pub const REFERENCE_SNR_DB: f64 = 10.0;

pub fn standard_task(clients: usize) -> TaskSpec {
    TaskSpec {
        clients,
        dimension: 20,
        samples_per_client: 100,
        heterogeneity: 0.5,
        ridge: 0.5,
        label_noise: 0.5,
        seed: 1,
    }
}

fn standard_run(clients: usize, participants: usize, policy: PolicyKind) -> RunConfig {
    RunConfig {
        clients,
        participants,
        rounds: STANDARD_ROUNDS,
        local_steps: 5,
        batch: 10,
        mode: TransmissionMode::Mt,
        layer: ChannelLayer::EffectiveNoise,
        distribution: NoiseDistribution::Gaussian,
        policy,
        clock: ScheduleClock::Round,
        initial_model: None,
        pathloss: Pathloss::default(),
        seed: 0,
        noise_multiplier: 1.0,
        normalize: false,
        trace_virtual: false,
        train_all: false,
        ball_radius: None,
    }
}

/// Rate experiment for one bound variant: the noise schedule at equality,
/// indexed on the SGD-iteration clock, checked against the bound and a
/// slope in `[−1.3, −0.7]` over rounds 50..=200.
pub fn theorem_experiment(variant: BoundVariant, distribution: NoiseDistribution) -> ExperimentFile {
    let mut run = match variant {
        BoundVariant::Thm1 => standard_run(10, 10, PolicyKind::Theorem1MtFull {}),
        BoundVariant::Thm2 => standard_run(50, 5, PolicyKind::Theorem2MtPartial {}),
        BoundVariant::Thm3 => {
            let mut r = standard_run(50, 5, PolicyKind::Theorem3Mdt { nu: 10.0 });
            r.mode = TransmissionMode::Mdt;
            r
        }
    };
    run.distribution = distribution;
    run.clock = ScheduleClock::Iteration;
    ExperimentFile {
        task: TaskSource::Generate(standard_task(run.clients)),
        run,
        replicas: STANDARD_REPLICAS,
        output: None,
        checks: vec![
            Check::Bound {
                variant: Some(variant),
                radius: None,
            },
            Check::Slope {
                from: 50,
                to: STANDARD_ROUNDS,
                min: -1.3,
                max: -0.7,
            },
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    NoiseFree,
    EqualPower,
    PowerT2,
    DiversityT2,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::NoiseFree,
        Preset::EqualPower,
        Preset::PowerT2,
        Preset::DiversityT2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::NoiseFree => "noise_free",
            Preset::EqualPower => "equal_power",
            Preset::PowerT2 => "power_t2",
            Preset::DiversityT2 => "diversity_t2",
        }
    }

    /// Policies share the energy budget `T·ρ₀` per link, `ρ₀` = 10 dB.
    pub fn policy(self) -> PolicyKind {
        let snr = noisy_fedavg::policy::db_to_linear(REFERENCE_SNR_DB);
        match self {
            Preset::NoiseFree => PolicyKind::NoiseFree {},
            Preset::EqualPower => PolicyKind::EqualPower { snr },
            Preset::PowerT2 => PolicyKind::PowerT2 {
                budget: None,
                reference_snr: snr,
            },
            Preset::DiversityT2 => PolicyKind::DiversityT2 {
                budget: None,
                reference_snr: snr,
                max_order: 25,
                steps: DiversitySteps::Computed,
            },
        }
    }
}

/// One of the four schemes on the full-participation standard task.
pub fn preset_experiment(preset: Preset) -> ExperimentFile {
    ExperimentFile {
        task: TaskSource::Generate(standard_task(10)),
        run: standard_run(10, 10, preset.policy()),
        replicas: STANDARD_REPLICAS,
        output: None,
        checks: Vec::new(),
    }
}
