//! SNR-control schedules.
//!
//! The free functions evaluate the closed-form schedules and are generic over
//! [`Scalar`] so identities can be checked exactly. [`PolicyKind`] turns a
//! named scheme into per-round link controls for the engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVector;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule<S> {
    mu: S,
    kappa: S,
    gamma: S,
    beta: S,
}

impl<S: Scalar> LearningRateSchedule<S> {
    /// `γ = max{8κ, E}` with `κ = L/μ`.
    pub fn new(mu: S, lipschitz: S, local_steps: usize) -> Result<Self> {
        if !(mu > S::zero()) || lipschitz < mu {
            return Err(Error::Schedule(format!(
                "need 0 < μ ≤ L, got μ={mu:?}, L={lipschitz:?}"
            )));
        }
        let kappa = lipschitz / mu.clone();
        let eight = S::from_usize_exact(8);
        let gamma = S::max_of(eight * kappa.clone(), S::from_usize_exact(local_steps));
        Self::with_gamma(mu, kappa, gamma)
    }

    pub fn with_gamma(mu: S, kappa: S, gamma: S) -> Result<Self> {
        if !(mu > S::zero()) {
            return Err(Error::Schedule("μ must be positive".into()));
        }
        let two = S::from_usize_exact(2);
        let beta = two / mu.clone();
        Ok(Self { mu, kappa, gamma, beta })
    }

    pub fn mu(&self) -> S {
        self.mu.clone()
    }

    pub fn kappa(&self) -> S {
        self.kappa.clone()
    }

    pub fn gamma(&self) -> S {
        self.gamma.clone()
    }

    pub fn beta(&self) -> S {
        self.beta.clone()
    }

    /// `L = κμ`.
    pub fn lipschitz(&self) -> S {
        self.kappa.clone() * self.mu.clone()
    }

    /// `η_t = 2/(μ(γ+t))` on the SGD-iteration timeline.
    pub fn eta(&self, t: usize) -> Result<S> {
        if t == 0 {
            return Err(Error::Schedule("iteration index starts at 1".into()));
        }
        Ok(self.beta.clone() / self.shifted(t, 0))
    }

    /// `γ + t − back`
    fn shifted(&self, t: usize, back: usize) -> S {
        self.gamma.clone() + S::from_usize_exact(t) - S::from_usize_exact(back)
    }

    fn mu_sq(&self) -> S {
        self.mu.clone() * self.mu.clone()
    }

    fn checked_downlink_denominator(&self, t: usize) -> Result<S> {
        let lo = self.shifted(t, 2);
        if !(lo > S::zero()) {
            return Err(Error::Schedule(format!("γ+t−2 must be positive (t={t})")));
        }
        Ok(self.shifted(t, 0) * lo)
    }
}

fn four<S: Scalar>() -> S {
    S::from_usize_exact(4)
}

/// Total uplink and downlink noise powers at full participation:
/// `σ_t² = 4N²/(μ²(γ+t−1)²)`, `ζ_t² = 4N²/(μ²(γ+t)(γ+t−2))`.
pub fn thm1_noise<S: Scalar>(t: usize, n: usize, s: &LearningRateSchedule<S>) -> Result<(S, S)> {
    if t == 0 {
        return Err(Error::Schedule("round index starts at 1".into()));
    }
    let n = S::from_usize_exact(n);
    let num = four::<S>() * n.clone() * n;
    let up = s.shifted(t, 1);
    let sigma = num.clone() / (s.mu_sq() * up.clone() * up);
    let zeta = num / (s.mu_sq() * s.checked_downlink_denominator(t)?);
    Ok((sigma, zeta))
}

/// Equal split of a total over `n` clients.
pub fn per_client_split<S: Scalar>(total: S, n: usize) -> S {
    total / S::from_usize_exact(n)
}

/// Per-client schedules under partial participation:
/// `σ̄_t² = 4K/(μ²(γ+t−1)²)`, `ζ̄_t² = 4N/(μ²(γ+t)(γ+t−2))`.
pub fn thm2_noise<S: Scalar>(t: usize, n: usize, k: usize, s: &LearningRateSchedule<S>) -> Result<(S, S)> {
    if t == 0 {
        return Err(Error::Schedule("round index starts at 1".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("need 1 ≤ K ≤ N, got K={k}, N={n}")));
    }
    let up = s.shifted(t, 1);
    let sigma = four::<S>() * S::from_usize_exact(k) / (s.mu_sq() * up.clone() * up);
    let zeta = four::<S>() * S::from_usize_exact(n) / (s.mu_sq() * s.checked_downlink_denominator(t)?);
    Ok((sigma, zeta))
}

/// Per-client downlink variance for MDT with constant uplink SNR `ν`:
/// `(4/μ²) / [(1/N)(γ+t)(γ+t−2) + (1/K)(1+1/ν)(γ+t)²]`.
pub fn thm3_downlink<S: Scalar>(t: usize, n: usize, k: usize, nu: S, s: &LearningRateSchedule<S>) -> Result<S> {
    if !(nu > S::zero()) {
        return Err(Error::Policy(format!("ν must be positive, got {nu:?}")));
    }
    if t == 0 {
        return Err(Error::Schedule("round index starts at 1".into()));
    }
    let full = s.shifted(t, 0);
    let a = s.checked_downlink_denominator(t)? / S::from_usize_exact(n);
    let b = (S::one() + S::one() / nu) * full.clone() * full / S::from_usize_exact(k);
    Ok(four::<S>() / (s.mu_sq() * (a + b)))
}

/// Per-element variance that puts a client's differential at SNR `ν`,
/// using the instantaneous power `‖d‖²/dim` in place of its expectation.
pub fn mdt_uplink_variance(diff: &ModelVector<f64>, nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::Policy(format!("ν must be positive, got {nu}")));
    }
    Ok(diff.norm_sq() / (diff.dim() as f64 * nu))
}

/// `ρ_t^UL = μ²(γ+t−1)²/(4K)`
pub fn power_t2_uplink<S: Scalar>(t: usize, k: usize, s: &LearningRateSchedule<S>) -> S {
    let up = s.shifted(t, 1);
    s.mu_sq() * up.clone() * up / (four::<S>() * S::from_usize_exact(k))
}

/// `ρ_t^DL = r^α μ²(γ+t)(γ+t−2)/(4N)`; `pathloss_gain` is `r^α`.
pub fn power_t2_downlink<S: Scalar>(t: usize, n: usize, pathloss_gain: S, s: &LearningRateSchedule<S>) -> Result<S> {
    if !(pathloss_gain > S::zero()) {
        return Err(Error::Policy("path-loss gain must be positive".into()));
    }
    Ok(pathloss_gain * s.mu_sq() * s.checked_downlink_denominator(t)? / (four::<S>() * S::from_usize_exact(n)))
}

/// `P_t = 6P t²/(T(T+1)(2T+1))`, which sums to `P`.
pub fn budget_split<S: Scalar>(total: S, rounds: usize) -> Result<Vec<S>> {
    if !(total > S::zero()) || rounds == 0 {
        return Err(Error::Policy("budget split needs P > 0 and T ≥ 1".into()));
    }
    let tt = S::from_usize_exact(rounds);
    let denom = tt.clone() * (tt.clone() + S::one()) * (S::from_usize_exact(2) * tt + S::one());
    let scale = S::from_usize_exact(6) * total / denom;
    Ok((1..=rounds)
        .map(|t| {
            let t = S::from_usize_exact(t);
            scale.clone() * t.clone() * t
        })
        .collect())
}

/// `⌈required/available⌉`, at least one branch.
pub fn diversity_orders<S: Scalar>(required: S, available: S) -> Result<u64> {
    if !(required > S::zero()) || !(available > S::zero()) {
        return Err(Error::Policy("diversity powers must be positive".into()));
    }
    let ratio = required / available;
    let q = ratio
        .ceil_to_u64()
        .ok_or_else(|| Error::Policy(format!("diversity ratio {ratio:?} not representable")))?;
    Ok(q.max(1))
}

/// Round boundaries and orders of the stepped schedule for a 500-round run.
pub const STAIRCASE_DIVERSITY_STEPS: [(usize, u64); 5] = [(9, 1), (45, 4), (125, 9), (270, 16), (500, 25)];

/// Order of the stepped schedule at round `t` of `rounds`, with the
/// 500-round breakpoints rescaled to the run length.
pub fn staircase_diversity_order(t: usize, rounds: usize) -> u64 {
    let on_500 = (t * 500).div_ceil(rounds.max(1));
    STAIRCASE_DIVERSITY_STEPS
        .iter()
        .find(|(end, _)| on_500 <= *end)
        .map(|(_, q)| *q)
        .unwrap_or(STAIRCASE_DIVERSITY_STEPS[4].1)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Per-element noise variance giving SNR `target_db` on a unit-power signal.
pub fn equal_power(target_db: f64) -> f64 {
    1.0 / db_to_linear(target_db)
}

/// Which index the noise and power schedules are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleClock {
    /// Communication round `t`.
    #[default]
    Round,
    /// SGD iteration at the aggregation instant: `tE` for the uplink of round
    /// `t`, `(t−1)E` (at least 1) for its downlink.
    Iteration,
}

impl ScheduleClock {
    pub fn uplink_index(self, round: usize, local_steps: usize) -> usize {
        match self {
            Self::Round => round,
            Self::Iteration => round * local_steps,
        }
    }

    pub fn downlink_index(self, round: usize, local_steps: usize) -> usize {
        match self {
            Self::Round => round,
            Self::Iteration => ((round - 1) * local_steps).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiversitySteps {
    /// `⌈P_t/ρ_ref⌉` on the `t²` budget shape.
    #[default]
    Computed,
    /// The fixed 1/4/9/16/25 staircase, rescaled to the run length.
    Staircase,
}

/// Reads an SNR given either as a linear number or as a string such as `"10 dB"`.
pub fn deserialize_snr<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Linear(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Linear(x) => Ok(x),
        Raw::Text(s) => parse_snr(&s).map_err(serde::de::Error::custom),
    }
}

/// `"12.5"`, `"10 dB"` or `"-3dB"` to a linear ratio.
pub fn parse_snr(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    if let Some(db) = lower.strip_suffix("db") {
        db.trim()
            .parse::<f64>()
            .map(db_to_linear)
            .map_err(|_| format!("invalid dB value {s:?}"))
    } else {
        t.parse::<f64>()
            .map_err(|_| format!("invalid SNR {s:?}; use a number or \"<x> dB\""))
    }
}

fn default_reference_snr() -> f64 {
    10.0
}

fn default_max_order() -> u64 {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    NoiseFree {},
    /// Constant SNR on both links.
    EqualPower {
        #[serde(deserialize_with = "deserialize_snr")]
        snr: f64,
    },
    /// `t²` split of a budget `P` per link. Without an explicit budget,
    /// `P = T·reference_snr`, the energy of equal power at that SNR.
    PowerT2 {
        #[serde(default)]
        budget: Option<f64>,
        #[serde(default = "default_reference_snr", deserialize_with = "deserialize_snr")]
        reference_snr: f64,
    },
    /// Constant per-copy power with a growing number of combined copies.
    DiversityT2 {
        #[serde(default)]
        budget: Option<f64>,
        #[serde(default = "default_reference_snr", deserialize_with = "deserialize_snr")]
        reference_snr: f64,
        #[serde(default = "default_max_order")]
        max_order: u64,
        #[serde(default)]
        steps: DiversitySteps,
    },
    Theorem1MtFull {},
    Theorem2MtPartial {},
    Theorem3Mdt {
        #[serde(deserialize_with = "deserialize_snr")]
        nu: f64,
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NoiseFree {} => "noise_free",
            Self::EqualPower { .. } => "equal_power",
            Self::PowerT2 { .. } => "power_t2",
            Self::DiversityT2 { .. } => "diversity_t2",
            Self::Theorem1MtFull {} => "theorem1_mt_full",
            Self::Theorem2MtPartial {} => "theorem2_mt_partial",
            Self::Theorem3Mdt { .. } => "theorem3_mdt",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Policy(format!("{what} must be positive and finite, got {x}")))
            }
        };
        match self {
            Self::NoiseFree {} | Self::Theorem1MtFull {} | Self::Theorem2MtPartial {} => Ok(()),
            Self::EqualPower { snr } => positive(*snr, "snr"),
            Self::Theorem3Mdt { nu } => positive(*nu, "ν"),
            Self::PowerT2 { budget, reference_snr } => {
                positive(*reference_snr, "reference_snr")?;
                budget.map_or(Ok(()), |b| positive(b, "budget"))
            }
            Self::DiversityT2 {
                budget,
                reference_snr,
                max_order,
                ..
            } => {
                positive(*reference_snr, "reference_snr")?;
                if *max_order == 0 {
                    return Err(Error::Policy("max_order must be at least 1".into()));
                }
                budget.map_or(Ok(()), |b| positive(b, "budget"))
            }
        }
    }
}

/// What the channel does on one link in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkControl {
    Silent,
    /// Per-client, per-element effective noise variance.
    Variance(f64),
    /// Uplink variance chosen each round to hold the differential at SNR `ν`.
    ConstantSnr(f64),
    /// Per-copy transmit power and number of combined copies.
    Power {
        rho: f64,
        copies: u64,
    },
}

impl LinkControl {
    /// Transmit energy spent in one use of the link. Variance controls are
    /// charged at their equivalent power `1/σ²`.
    pub fn energy(&self) -> f64 {
        match *self {
            Self::Silent | Self::ConstantSnr(_) => 0.0,
            Self::Variance(v) => {
                if v > 0.0 {
                    1.0 / v
                } else {
                    0.0
                }
            }
            Self::Power { rho, copies } => rho * copies as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundControl {
    pub uplink: LinkControl,
    pub downlink: LinkControl,
}

/// Everything a policy needs besides the round index.
#[derive(Debug, Clone)]
pub struct PolicyContext {
    pub schedule: LearningRateSchedule<f64>,
    pub clients: usize,
    pub participants: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub clock: ScheduleClock,
}

/// Precomputed per-round controls for a run.
#[derive(Debug, Clone)]
pub struct PolicyPlan {
    kind: PolicyKind,
    ctx: PolicyContext,
    /// Per-round power for the budgeted presets.
    powers: Vec<f64>,
    /// Per-round copies for the diversity preset.
    orders: Vec<u64>,
}

impl PolicyPlan {
    pub fn new(kind: PolicyKind, ctx: PolicyContext) -> Result<Self> {
        kind.validate()?;
        let t_max = ctx.rounds;
        let budget_of = |budget: &Option<f64>, reference: f64| budget.unwrap_or(t_max as f64 * reference);
        let (powers, orders) = match &kind {
            PolicyKind::PowerT2 { budget, reference_snr } => {
                (budget_split(budget_of(budget, *reference_snr), t_max)?, vec![1; t_max])
            }
            PolicyKind::DiversityT2 {
                budget,
                reference_snr,
                max_order,
                steps,
            } => {
                let total = budget_of(budget, *reference_snr);
                let orders: Vec<u64> = match steps {
                    DiversitySteps::Computed => {
                        let shape = budget_split(total, t_max)?;
                        let reference = shape[t_max - 1] / *max_order as f64;
                        shape
                            .iter()
                            .map(|p| diversity_orders(*p, reference))
                            .collect::<Result<_>>()?
                    }
                    DiversitySteps::Staircase => (1..=t_max).map(|t| staircase_diversity_order(t, t_max)).collect(),
                };
                let per_copy = total / orders.iter().sum::<u64>() as f64;
                (vec![per_copy; t_max], orders)
            }
            _ => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            kind,
            ctx,
            powers,
            orders,
        })
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn context(&self) -> &PolicyContext {
        &self.ctx
    }

    pub fn control(&self, round: usize) -> Result<RoundControl> {
        let c = &self.ctx;
        if round == 0 || round > c.rounds {
            return Err(Error::Schedule(format!("round {round} outside 1..={}", c.rounds)));
        }
        let ul = c.clock.uplink_index(round, c.local_steps);
        let dl = c.clock.downlink_index(round, c.local_steps);
        let s = &c.schedule;
        let both = |l: LinkControl| RoundControl { uplink: l, downlink: l };
        Ok(match &self.kind {
            PolicyKind::NoiseFree {} => both(LinkControl::Silent),
            PolicyKind::EqualPower { snr } => both(LinkControl::Power { rho: *snr, copies: 1 }),
            PolicyKind::PowerT2 { .. } => both(LinkControl::Power {
                rho: self.powers[round - 1],
                copies: 1,
            }),
            PolicyKind::DiversityT2 { .. } => both(LinkControl::Power {
                rho: self.powers[round - 1],
                copies: self.orders[round - 1],
            }),
            PolicyKind::Theorem1MtFull {} => {
                let (sigma, _) = thm1_noise(ul, c.clients, s)?;
                let (_, zeta) = thm1_noise(dl, c.clients, s)?;
                RoundControl {
                    uplink: LinkControl::Variance(per_client_split(sigma, c.clients)),
                    downlink: LinkControl::Variance(per_client_split(zeta, c.clients)),
                }
            }
            PolicyKind::Theorem2MtPartial {} => {
                let (sigma, _) = thm2_noise(ul, c.clients, c.participants, s)?;
                let (_, zeta) = thm2_noise(dl, c.clients, c.participants, s)?;
                RoundControl {
                    uplink: LinkControl::Variance(sigma),
                    downlink: LinkControl::Variance(zeta),
                }
            }
            PolicyKind::Theorem3Mdt { nu } => RoundControl {
                uplink: LinkControl::ConstantSnr(*nu),
                downlink: LinkControl::Variance(thm3_downlink(dl, c.clients, c.participants, *nu, s)?),
            },
        })
    }
}
