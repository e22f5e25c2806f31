//! Lemma oracles and theorem rate checks.

use noisy_fedavg::analysis::{
    lemma1_oracle, lemma2_oracle, lemma3_oracle, lemma4_oracle, BoundVariant, CheckLine, Lemma4Case, LemmaReport,
};
use noisy_fedavg::channel::NoiseDistribution;
use noisy_fedavg::model::ModelVector;
use noisy_fedavg::policy::LearningRateSchedule;
use noisy_fedavg::task::{derive_constants, make_task, QuadraticTask, TaskConstants, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::config::Check;
use crate::experiments::{run_experiment, theorem_experiment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Lemmas,
    Theorems,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Monte-Carlo replicas of the lemma oracles; each oracle's default when absent.
    pub replicas: Option<usize>,
    /// Seeds per theorem experiment; 20 when absent.
    pub theorem_replicas: Option<usize>,
    /// Scales every scheduled noise variance of the theorem runs.
    pub noise_multiplier: f64,
    pub distributions: Vec<NoiseDistribution>,
    pub workers: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            replicas: None,
            theorem_replicas: None,
            noise_multiplier: 1.0,
            distributions: vec![NoiseDistribution::Gaussian],
            workers: None,
        }
    }
}

pub const LEMMA2_REPLICAS: usize = 100_000;
pub const LEMMA1_REPLICAS: usize = 10_000;
pub const LEMMA4_REPLICAS: usize = 10_000;
pub const LEMMA3_CONFIGURATIONS: usize = 50;

/// Small heterogeneous task used by the local-training lemmas.
pub fn lemma_task(clients: usize) -> anyhow::Result<(QuadraticTask, TaskConstants)> {
    let task = make_task(&TaskSpec {
        clients,
        dimension: 5,
        samples_per_client: 30,
        heterogeneity: 1.0,
        ridge: 0.5,
        label_noise: 0.5,
        seed: 3,
    })?;
    let c = derive_constants(&task, 5, 2.0)?;
    Ok((task, c))
}

fn offset_start(c: &TaskConstants, by: f64) -> ModelVector<f64> {
    let d = c.opt.dim();
    c.opt.add(&ModelVector::new(vec![by; d])).expect("same dimension")
}

pub fn lemma2_report(opts: &VerifyOptions) -> anyhow::Result<LemmaReport> {
    let dist = opts.distributions.first().copied().unwrap_or_default();
    Ok(lemma2_oracle(
        4,
        3,
        0.5,
        dist,
        opts.replicas.unwrap_or(LEMMA2_REPLICAS),
        opts.seed,
    )?)
}

pub fn lemma3_report(opts: &VerifyOptions) -> anyhow::Result<LemmaReport> {
    let (task, c) = lemma_task(6)?;
    let s = LearningRateSchedule::new(c.mu, c.lipschitz, 3)?;
    Ok(lemma3_oracle(
        &task,
        &c,
        &s,
        2,
        3,
        1.5,
        LEMMA3_CONFIGURATIONS,
        opts.seed,
    )?)
}

pub fn lemma1_report(opts: &VerifyOptions) -> anyhow::Result<LemmaReport> {
    let (task, c) = lemma_task(4)?;
    let s = LearningRateSchedule::new(c.mu, c.lipschitz, 2)?;
    let start = offset_start(&c, 0.5);
    Ok(lemma1_oracle(
        &task,
        &c,
        &s,
        2,
        &start,
        1,
        opts.replicas.unwrap_or(LEMMA1_REPLICAS),
        opts.seed,
    )?)
}

/// MDT aggregation at `E ∈ {1, 5}` and `ν ∈ {1, 10}`, merged into one report.
pub fn lemma4_report(opts: &VerifyOptions) -> anyhow::Result<LemmaReport> {
    let (task, c) = lemma_task(10)?;
    let start = offset_start(&c, 0.5);
    let dist = opts.distributions.first().copied().unwrap_or_default();
    let mut checks = Vec::new();
    for local_steps in [1, 5] {
        for nu in [1.0, 10.0] {
            let case = Lemma4Case {
                local_steps,
                nu,
                participants: 5,
                round: 3,
            };
            let r = lemma4_oracle(
                &task,
                &c,
                case,
                &start,
                dist,
                opts.replicas.unwrap_or(LEMMA4_REPLICAS),
                opts.seed,
            )?;
            checks.extend(r.checks);
        }
    }
    Ok(LemmaReport {
        name: "MDT aggregation noise".into(),
        checks,
    })
}

pub fn verify_lemmas(opts: &VerifyOptions) -> anyhow::Result<Vec<LemmaReport>> {
    Ok(vec![
        lemma1_report(opts)?,
        lemma2_report(opts)?,
        lemma3_report(opts)?,
        lemma4_report(opts)?,
    ])
}

/// Bound and slope checks of one variant under one noise distribution.
pub fn theorem_report(
    variant: BoundVariant,
    distribution: NoiseDistribution,
    opts: &VerifyOptions,
) -> anyhow::Result<LemmaReport> {
    let mut exp = theorem_experiment(variant, distribution);
    exp.run.seed = opts.seed;
    exp.run.noise_multiplier = opts.noise_multiplier;
    if let Some(r) = opts.theorem_replicas {
        exp.replicas = r;
    }
    let task = exp.build_task()?;
    if opts.noise_multiplier != 1.0 {
        // The bound's H² is taken over the nominal trajectory; otherwise the
        // perturbed run would widen its own ball and loosen the bound with it.
        let mut nominal = exp.clone();
        nominal.run.noise_multiplier = 1.0;
        let r = run_experiment(&nominal, &task, opts.workers)?
            .summary
            .constants
            .trajectory_radius;
        for c in &mut exp.checks {
            if let Check::Bound { radius, .. } = c {
                *radius = Some(r);
            }
        }
    }
    let result = run_experiment(&exp, &task, opts.workers)?;
    Ok(LemmaReport {
        name: format!("{variant:?} rate, {distribution:?} noise"),
        checks: result.summary.checks,
    })
}

pub fn verify_theorems(opts: &VerifyOptions) -> anyhow::Result<Vec<LemmaReport>> {
    let mut out = Vec::new();
    for &dist in &opts.distributions {
        for variant in [BoundVariant::Thm1, BoundVariant::Thm2, BoundVariant::Thm3] {
            out.push(theorem_report(variant, dist, opts)?);
        }
    }
    Ok(out)
}

pub fn verify(scope: Scope, opts: &VerifyOptions) -> anyhow::Result<Vec<LemmaReport>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Lemmas | Scope::All) {
        out.extend(verify_lemmas(opts)?);
    }
    if matches!(scope, Scope::Theorems | Scope::All) {
        out.extend(verify_theorems(opts)?);
    }
    Ok(out)
}

pub fn format_report(reports: &[LemmaReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!("{} [{}]\n", r.name, if r.passed() { "PASS" } else { "FAIL" }));
        s.push_str(&crate::experiments::format_checks(&r.checks));
    }
    let failed: Vec<&CheckLine> = reports.iter().flat_map(|r| &r.checks).filter(|c| !c.passed).collect();
    s.push_str(&format!(
        "{} checks, {} failed\n",
        reports.iter().map(|r| r.checks.len()).sum::<usize>(),
        failed.len()
    ));
    s
}
