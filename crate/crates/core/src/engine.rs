//! FedAvg over noisy links: sampling, broadcast, local SGD, upload and
//! aggregation, one round at a time.
//!
//! Every random draw comes from a stream keyed by (seed, purpose, client,
//! round), so the outcome of a client never depends on which other clients
//! were processed or in what order.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    add_effective_noise, analog_downlink_receive, analog_uplink_aggregate, diversity_combine, measure_global_snr,
    AnalogUplink, FadingDraw, NoiseDistribution, NoiseSpec, TransmissionMode,
};
use crate::error::{check_dim, Error, Result};
use crate::model::{denormalize, mean_of, normalize, squared_distance, ModelVector, NormStats};
use crate::policy::{
    mdt_uplink_variance, LearningRateSchedule, LinkControl, PolicyContext, PolicyKind, PolicyPlan, RoundControl,
    ScheduleClock,
};
use crate::task::{derive_constants, stochastic_gradient, QuadraticTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLayer {
    #[default]
    EffectiveNoise,
    AnalogPhysical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pathloss {
    pub distance: f64,
    pub exponent: f64,
}

impl Default for Pathloss {
    fn default() -> Self {
        Self {
            distance: 1.0,
            exponent: 3.0,
        }
    }
}

impl Pathloss {
    /// Large-scale power attenuation `r^{−α}`.
    pub fn attenuation(&self) -> f64 {
        self.distance.powf(-self.exponent)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub clients: usize,
    pub participants: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch: usize,
    #[serde(default)]
    pub mode: TransmissionMode,
    #[serde(default)]
    pub layer: ChannelLayer,
    #[serde(default)]
    pub distribution: NoiseDistribution,
    pub policy: PolicyKind,
    #[serde(default)]
    pub clock: ScheduleClock,
    /// Starting model; zeros when absent.
    #[serde(default)]
    pub initial_model: Option<Vec<f64>>,
    #[serde(default)]
    pub pathloss: Pathloss,
    pub seed: u64,
    /// Scales every scheduled noise variance (and divides every power).
    #[serde(default = "one")]
    pub noise_multiplier: f64,
    /// Transmit models in coordinates standardized by statistics of the
    /// clients' local optima.
    #[serde(default)]
    pub normalize: bool,
    /// Record the averaged analysis sequences (full participation only).
    #[serde(default)]
    pub trace_virtual: bool,
    /// Train every client each round and aggregate only the sampled ones.
    #[serde(default)]
    pub train_all: bool,
    /// Radius around `w*` whose exits are counted.
    #[serde(default)]
    pub ball_radius: Option<f64>,
}

impl RunConfig {
    pub fn validate(&self, task: &QuadraticTask) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.clients != task.num_clients() {
            return cfg(format!(
                "config has {} clients, task has {}",
                self.clients,
                task.num_clients()
            ));
        }
        if self.participants == 0 || self.participants > self.clients {
            return cfg(format!(
                "need 1 ≤ K ≤ N, got K={}, N={}",
                self.participants, self.clients
            ));
        }
        if self.rounds == 0 || self.local_steps == 0 {
            return cfg("rounds and local steps must be at least 1".into());
        }
        if self.batch == 0 || self.batch > task.samples_per_client() {
            return cfg(format!(
                "batch {} outside 1..={}",
                self.batch,
                task.samples_per_client()
            ));
        }
        if let Some(w0) = &self.initial_model {
            check_dim(task.dimension(), w0.len())?;
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return cfg(format!("noise multiplier {} invalid", self.noise_multiplier));
        }
        if !(self.pathloss.distance > 0.0) {
            return cfg("path-loss distance must be positive".into());
        }
        if self.trace_virtual && self.participants != self.clients {
            return cfg("virtual-sequence tracing needs full participation".into());
        }
        self.policy.validate()
    }

    pub fn initial(&self, dim: usize) -> ModelVector<f64> {
        self.initial_model
            .clone()
            .map(ModelVector::new)
            .unwrap_or_else(|| ModelVector::zeros(dim))
    }
}

/// One row of output per aggregation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub t: usize,
    pub sq_dist: f64,
    pub loss: f64,
    pub eta: f64,
    /// Per-client, per-element uplink noise variance actually applied.
    pub sigma2_ul: f64,
    pub zeta2_dl: f64,
    pub rho_ul: f64,
    pub rho_dl: f64,
    pub div_ul: u64,
    pub div_dl: u64,
    pub snr_global: f64,
    pub energy_cum: f64,
}

/// Averaged sequences at one aggregation instant: the local SGD result
/// `v̄`, its sampled average `ū`, the received average `p̄` (the new global
/// model) and the clients' next noisy copies `w̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualSequences {
    pub round: usize,
    pub v_bar: ModelVector<f64>,
    pub u_bar: ModelVector<f64>,
    pub p_bar: ModelVector<f64>,
    /// Unknown after the final round.
    pub w_bar: Option<ModelVector<f64>>,
    pub uplink_noise_mean: ModelVector<f64>,
    /// Mean of this round's downlink noises.
    pub downlink_noise_mean: ModelVector<f64>,
    /// Mean of the next round's downlink noises.
    pub next_downlink_noise_mean: Option<ModelVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<RoundTrace>,
    pub virtual_trace: Vec<VirtualSequences>,
    pub final_model: ModelVector<f64>,
    pub ball_exits: usize,
    pub retransmissions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sampling = 1,
    Downlink = 2,
    Local = 3,
    Uplink = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one (purpose, client, round).
pub fn stream_rng(seed: u64, stream: Stream, client: usize, round: usize) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for x in [stream as u64, client as u64, round as u64] {
        h = splitmix(h ^ splitmix(x));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Uniform subset of size `k` of `0..n`, in increasing order.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot sample {k} of {n} clients")));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut picks = index::sample(rng, n, k).into_vec();
    picks.sort_unstable();
    Ok(picks)
}

/// `E` SGD steps from `start`; step `τ` uses `η` at iteration `first_iteration + τ − 1`.
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng + ?Sized>(
    start: &ModelVector<f64>,
    task: &QuadraticTask,
    client: usize,
    local_steps: usize,
    batch: usize,
    schedule: &LearningRateSchedule<f64>,
    first_iteration: usize,
    rng: &mut R,
) -> Result<ModelVector<f64>> {
    if local_steps == 0 {
        return Err(Error::Config("local steps must be at least 1".into()));
    }
    let mut w = start.clone();
    for tau in 0..local_steps {
        let eta = schedule.eta(first_iteration + tau)?;
        let g = stochastic_gradient(task, client, &w, batch, rng)?;
        w.axpy(&-eta, &g)?;
        if !w.is_finite() {
            return Err(Error::Divergence {
                round: 0,
                reason: format!("client {client}: non-finite iterate at local step {}", tau + 1),
                partial: Box::default(),
            });
        }
    }
    Ok(w)
}

/// What the server reconstructs from client `k`'s transmission once noise
/// `noise` is added on the link. MT: `w_k + n`. MDT: the client sends
/// `w_k − ŵ_k` and the server adds its retained model: `w_prev + w_k − ŵ_k + n`.
pub fn uplink_transmit(
    local: &ModelVector<f64>,
    mode: TransmissionMode,
    server_prev: &ModelVector<f64>,
    received_prev: &ModelVector<f64>,
    noise: &ModelVector<f64>,
) -> Result<ModelVector<f64>> {
    match mode {
        TransmissionMode::Mt => local.add(noise),
        TransmissionMode::Mdt => server_prev.add(&local.sub(received_prev)?)?.add(noise),
    }
}

/// `(1/K) Σ_k w̃_k`
pub fn aggregate(received: &[ModelVector<f64>]) -> Result<ModelVector<f64>> {
    if received.is_empty() {
        return Err(Error::Aggregation("no models received".into()));
    }
    mean_of(received)
}

/// Link parameters that do not change from round to round.
#[derive(Debug, Clone)]
pub struct LinkSetup {
    pub layer: ChannelLayer,
    pub distribution: NoiseDistribution,
    pub pathloss: Pathloss,
    pub noise_multiplier: f64,
    pub analog: AnalogUplink,
    pub norm: Option<NormStats<f64>>,
}

impl LinkSetup {
    fn to_wire(&self, v: &ModelVector<f64>) -> Result<ModelVector<f64>> {
        match &self.norm {
            Some(s) => normalize(v, s),
            None => Ok(v.clone()),
        }
    }

    fn off_wire(&self, v: &ModelVector<f64>) -> Result<ModelVector<f64>> {
        match &self.norm {
            Some(s) => denormalize(v, s),
            None => Ok(v.clone()),
        }
    }

    fn spec(&self, variance: f64) -> Result<NoiseSpec> {
        NoiseSpec::new(variance * self.noise_multiplier, self.distribution)
    }

    /// `copies` independent noisy receptions of `x`, combined.
    fn effective_copies<R: Rng + ?Sized>(
        &self,
        x: &ModelVector<f64>,
        variance: f64,
        copies: u64,
        rng: &mut R,
    ) -> Result<ModelVector<f64>> {
        let spec = self.spec(variance)?;
        if copies <= 1 {
            return Ok(add_effective_noise(x, &spec, rng));
        }
        let rx: Vec<_> = (0..copies).map(|_| add_effective_noise(x, &spec, rng)).collect();
        diversity_combine(&rx)
    }
}

/// Client `k`'s copy of the broadcast model.
pub fn downlink_broadcast<R: Rng + ?Sized>(
    w: &ModelVector<f64>,
    control: LinkControl,
    link: &LinkSetup,
    rng: &mut R,
) -> Result<ModelVector<f64>> {
    if control == LinkControl::Silent {
        return Ok(w.clone());
    }
    let x = link.to_wire(w)?;
    let m = link.noise_multiplier;
    let rx = match (link.layer, control) {
        (_, LinkControl::ConstantSnr(_)) => {
            return Err(Error::Policy("constant-SNR control applies to the uplink only".into()))
        }
        (ChannelLayer::EffectiveNoise, LinkControl::Variance(v)) => link.effective_copies(&x, v, 1, rng)?,
        (ChannelLayer::EffectiveNoise, LinkControl::Power { rho, copies }) => {
            link.effective_copies(&x, 1.0 / rho, copies, rng)?
        }
        (ChannelLayer::AnalogPhysical, LinkControl::Variance(v)) => {
            let g = link.pathloss.attenuation();
            if v * m == 0.0 {
                x.clone()
            } else {
                analog_downlink_receive(&x, 1.0 / (g * v * m), g, 1, link.distribution, rng)?.0
            }
        }
        (ChannelLayer::AnalogPhysical, LinkControl::Power { rho, copies }) => {
            if m == 0.0 {
                x.clone()
            } else {
                let g = link.pathloss.attenuation();
                analog_downlink_receive(&x, rho / m, g, copies as usize, link.distribution, rng)?.0
            }
        }
        (_, LinkControl::Silent) => unreachable!(),
    };
    link.off_wire(&rx)
}

/// Result of one round's uplink.
#[derive(Debug, Clone)]
pub struct UplinkOutcome {
    /// Average of what the server reconstructs.
    pub aggregate: ModelVector<f64>,
    /// Noise of the aggregate, scaled to a sum over clients.
    pub noise_sum: ModelVector<f64>,
    /// Per-client per-element variance, or its equivalent on the physical layer.
    pub sigma2: f64,
    pub rho: f64,
    pub copies: u64,
    pub energy: f64,
    pub retransmissions: usize,
}

/// Upload the sampled clients' models (MT) or differentials (MDT).
///
/// `locals[i]` and `received[i]` belong to the `i`-th sampled client;
/// `rngs[i]` is its uplink stream on the effective layer, and the physical
/// layer draws shared fading and receiver noise from `shared`.
#[allow(clippy::too_many_arguments)]
pub fn uplink_round<R: Rng>(
    locals: &[ModelVector<f64>],
    received: &[ModelVector<f64>],
    server_prev: &ModelVector<f64>,
    mode: TransmissionMode,
    control: LinkControl,
    link: &LinkSetup,
    rngs: &mut [R],
    shared: &mut R,
) -> Result<UplinkOutcome> {
    let k = locals.len();
    if k == 0 {
        return Err(Error::Aggregation("no participating clients".into()));
    }
    check_dim(k, received.len())?;
    let m = link.noise_multiplier;
    let dim = server_prev.dim();
    let signals: Vec<ModelVector<f64>> = match mode {
        TransmissionMode::Mt => locals.to_vec(),
        TransmissionMode::Mdt => locals
            .iter()
            .zip(received)
            .map(|(w, r)| w.sub(r))
            .collect::<Result<_>>()?,
    };
    let wire: Vec<ModelVector<f64>> = signals.iter().map(|s| link.to_wire(s)).collect::<Result<_>>()?;
    let variances: Vec<f64> = match control {
        LinkControl::Silent => vec![0.0; k],
        LinkControl::Variance(v) => vec![v; k],
        LinkControl::ConstantSnr(nu) => wire.iter().map(|x| mdt_uplink_variance(x, nu)).collect::<Result<_>>()?,
        LinkControl::Power { rho, copies } => vec![1.0 / (rho * copies as f64); k],
    };
    let mean_var = variances.iter().sum::<f64>() / k as f64;
    let (rho, copies) = match control {
        LinkControl::Power { rho, copies } => (rho, copies),
        LinkControl::Silent => (0.0, 0),
        _ => (if mean_var > 0.0 { 1.0 / mean_var } else { 0.0 }, 1),
    };
    let energy = match control {
        LinkControl::Silent => 0.0,
        LinkControl::Power { rho, copies } => rho * copies as f64,
        _ => {
            variances
                .iter()
                .map(|v| if *v > 0.0 { 1.0 / v } else { 0.0 })
                .sum::<f64>()
                / k as f64
        }
    };

    let (wire_mean, retransmissions) = match (link.layer, control) {
        (_, LinkControl::Silent) => (mean_of(&wire)?, 0),
        (ChannelLayer::EffectiveNoise, _) => {
            check_dim(k, rngs.len())?;
            let per_copy = match control {
                LinkControl::Power { rho, .. } => 1.0 / rho,
                _ => 0.0,
            };
            let mut rx = Vec::with_capacity(k);
            for (i, (x, rng)) in wire.iter().zip(rngs.iter_mut()).enumerate() {
                let y = match control {
                    LinkControl::Power { copies, .. } => link.effective_copies(x, per_copy, copies, rng)?,
                    _ => link.effective_copies(x, variances[i], 1, rng)?,
                };
                rx.push(y);
            }
            (mean_of(&rx)?, 0)
        }
        (ChannelLayer::AnalogPhysical, _) => {
            // one aggregate noise of variance 1/ρ per copy; matching K
            // per-client variances σ² on average needs ρ = K/σ²
            let (power, copies) = match control {
                LinkControl::Power { rho, copies } => (rho, copies),
                _ => (k as f64 / mean_var, 1),
            };
            if m == 0.0 || !power.is_finite() {
                (mean_of(&wire)?, 0)
            } else {
                let mut total = 0;
                let mut copies_rx = Vec::with_capacity(copies as usize);
                for _ in 0..copies.max(1) {
                    let mut fades: Vec<Vec<FadingDraw>> = (0..k)
                        .map(|_| {
                            (0..dim)
                                .map(|_| FadingDraw::rayleigh(link.pathloss.distance, link.pathloss.exponent, shared))
                                .collect()
                        })
                        .collect();
                    let r = analog_uplink_aggregate(&wire, power / m, &mut fades, &link.analog, shared)?;
                    total += r.retransmissions;
                    copies_rx.push(r.estimate);
                }
                (diversity_combine(&copies_rx)?, total)
            }
        }
    };
    let mean_signal = link.off_wire(&wire_mean)?;
    let exact_mean = mean_of(&signals)?;
    let noise_sum = mean_signal.sub(&exact_mean)?.scale(&(k as f64));
    let aggregate = match mode {
        TransmissionMode::Mt => mean_signal,
        TransmissionMode::Mdt => server_prev.add(&mean_signal)?,
    };
    let sigma2 = match link.layer {
        ChannelLayer::EffectiveNoise => mean_var * m,
        ChannelLayer::AnalogPhysical => match control {
            LinkControl::Power { rho, copies } => k as f64 * m / (rho * copies as f64),
            _ => mean_var * m,
        },
    };
    Ok(UplinkOutcome {
        aggregate,
        noise_sum,
        sigma2,
        rho,
        copies,
        energy,
        retransmissions,
    })
}

fn downlink_stats(control: LinkControl, link: &LinkSetup) -> (f64, f64, u64, f64) {
    // (variance, power, copies, energy)
    let m = link.noise_multiplier;
    match control {
        LinkControl::Silent | LinkControl::ConstantSnr(_) => (0.0, 0.0, 0, 0.0),
        LinkControl::Variance(v) => (v * m, 1.0 / v, 1, 1.0 / v),
        LinkControl::Power { rho, copies } => {
            let gain = match link.layer {
                ChannelLayer::EffectiveNoise => 1.0,
                ChannelLayer::AnalogPhysical => link.pathloss.attenuation(),
            };
            (m / (gain * rho * copies as f64), rho, copies, rho * copies as f64)
        }
    }
}

/// Learning-rate schedule of a run on `task`.
pub fn schedule_for(task: &QuadraticTask, cfg: &RunConfig) -> Result<LearningRateSchedule<f64>> {
    let c = derive_constants(task, cfg.batch, 1.0)?;
    LearningRateSchedule::new(c.mu, c.lipschitz, cfg.local_steps)
}

pub fn plan_for(cfg: &RunConfig, schedule: LearningRateSchedule<f64>) -> Result<PolicyPlan> {
    PolicyPlan::new(
        cfg.policy.clone(),
        PolicyContext {
            schedule,
            clients: cfg.clients,
            participants: cfg.participants,
            rounds: cfg.rounds,
            local_steps: cfg.local_steps,
            clock: cfg.clock,
        },
    )
}

fn divergence(round: usize, reason: String, trace: &[RoundTrace]) -> Error {
    Error::Divergence {
        round,
        reason,
        partial: Box::new(trace.to_vec()),
    }
}

/// Execute `cfg.rounds` rounds of FedAvg on `task`.
pub fn run(cfg: &RunConfig, task: &QuadraticTask) -> Result<RunOutput> {
    cfg.validate(task)?;
    let schedule = schedule_for(task, cfg)?;
    let plan = plan_for(cfg, schedule.clone())?;
    let norm = if cfg.normalize {
        let optima: Vec<_> = (0..task.num_clients()).map(|k| task.client_optimum(k)).collect();
        Some(NormStats::fit(&optima)?)
    } else {
        None
    };
    let link = LinkSetup {
        layer: cfg.layer,
        distribution: cfg.distribution,
        pathloss: cfg.pathloss,
        noise_multiplier: cfg.noise_multiplier,
        analog: AnalogUplink::default(),
        norm,
    };
    let opt = task.optimum();
    let mut w = cfg.initial(task.dimension());
    let initial_gap = squared_distance(&w, &opt)?;
    let limit = 1e6 * initial_gap.max(1.0);
    let n = cfg.clients;
    let e = cfg.local_steps;

    let mut trace: Vec<RoundTrace> = Vec::with_capacity(cfg.rounds);
    let mut virtual_trace: Vec<VirtualSequences> = Vec::new();
    let mut energy = 0.0;
    let mut ball_exits = 0;
    let mut retransmissions = 0;

    for round in 1..=cfg.rounds {
        let control: RoundControl = plan.control(round)?;
        let sampled = sample_clients(
            n,
            cfg.participants,
            &mut stream_rng(cfg.seed, Stream::Sampling, 0, round),
        )?;
        let active: Vec<usize> = if cfg.train_all {
            (0..n).collect()
        } else {
            sampled.clone()
        };

        let mut received = Vec::with_capacity(active.len());
        let mut locals = Vec::with_capacity(active.len());
        for &k in &active {
            let hat = downlink_broadcast(
                &w,
                control.downlink,
                &link,
                &mut stream_rng(cfg.seed, Stream::Downlink, k, round),
            )?;
            let mut rng = stream_rng(cfg.seed, Stream::Local, k, round);
            let local =
                local_train(&hat, task, k, e, cfg.batch, &schedule, (round - 1) * e + 1, &mut rng).map_err(|err| {
                    match err {
                        Error::Divergence { reason, .. } => divergence(round, reason, &trace),
                        other => other,
                    }
                })?;
            received.push(hat);
            locals.push(local);
        }
        let pick = |v: &[ModelVector<f64>]| -> Vec<ModelVector<f64>> {
            if cfg.train_all {
                sampled.iter().map(|&k| v[k].clone()).collect()
            } else {
                v.to_vec()
            }
        };
        let (sel_locals, sel_received) = (pick(&locals), pick(&received));

        if let Some(prev) = virtual_trace.last_mut() {
            let mean_hat = mean_of(&received)?;
            prev.next_downlink_noise_mean = Some(mean_hat.sub(&w)?);
            prev.w_bar = Some(mean_hat);
        }

        let mut rngs: Vec<ChaCha8Rng> = sampled
            .iter()
            .map(|&k| stream_rng(cfg.seed, Stream::Uplink, k, round))
            .collect();
        let mut shared = stream_rng(cfg.seed, Stream::Uplink, usize::MAX, round);
        let up = uplink_round(
            &sel_locals,
            &sel_received,
            &w,
            cfg.mode,
            control.uplink,
            &link,
            &mut rngs,
            &mut shared,
        )?;
        retransmissions += up.retransmissions;

        let signal_sum = {
            let signals: Vec<ModelVector<f64>> = match cfg.mode {
                TransmissionMode::Mt => sel_locals.clone(),
                TransmissionMode::Mdt => sel_locals
                    .iter()
                    .zip(&sel_received)
                    .map(|(a, b)| a.sub(b))
                    .collect::<Result<_>>()?,
            };
            mean_of(&signals)?.scale(&(signals.len() as f64))
        };
        let downlink_sum = mean_of(&sel_received)?.sub(&w)?.scale(&(sampled.len() as f64));
        let snr = match cfg.mode {
            TransmissionMode::Mt => measure_global_snr(&signal_sum, &up.noise_sum, None, cfg.mode)?,
            TransmissionMode::Mdt => measure_global_snr(&signal_sum, &up.noise_sum, Some(&downlink_sum), cfg.mode)?,
        };

        if cfg.trace_virtual {
            let v_bar = mean_of(&sel_locals)?;
            virtual_trace.push(VirtualSequences {
                round,
                u_bar: v_bar.clone(),
                p_bar: up.aggregate.clone(),
                w_bar: None,
                uplink_noise_mean: up.noise_sum.scale(&(1.0 / sampled.len() as f64)),
                downlink_noise_mean: downlink_sum.scale(&(1.0 / sampled.len() as f64)),
                next_downlink_noise_mean: None,
                v_bar,
            });
        }

        w = up.aggregate;
        let (zeta2, rho_dl, div_dl, energy_dl) = downlink_stats(control.downlink, &link);
        energy += up.energy + energy_dl;
        let sq_dist = squared_distance(&w, &opt)?;
        let loss = task.loss(&w)?;
        let row = RoundTrace {
            t: round,
            sq_dist,
            loss,
            eta: schedule.eta(round * e)?,
            sigma2_ul: up.sigma2,
            zeta2_dl: zeta2,
            rho_ul: up.rho,
            rho_dl,
            div_ul: up.copies,
            div_dl,
            snr_global: snr.ratio,
            energy_cum: energy,
        };
        trace.push(row);
        if !w.is_finite() || !sq_dist.is_finite() {
            return Err(divergence(round, "non-finite global model".into(), &trace));
        }
        if sq_dist > limit {
            return Err(divergence(
                round,
                format!("squared distance {sq_dist:.3e} exceeds 1e6 × initial"),
                &trace,
            ));
        }
        if let Some(r) = cfg.ball_radius {
            if !task.in_ball(&w, r) {
                ball_exits += 1;
            }
        }
    }

    Ok(RunOutput {
        trace,
        virtual_trace,
        final_model: w,
        ball_exits,
        retransmissions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::NoiseDistribution;
    use crate::task::{make_task, ClientData, TaskSpec};
    use std::collections::HashMap;

    fn small_task(clients: usize, seed: u64) -> QuadraticTask {
        make_task(&TaskSpec {
            clients,
            dimension: 4,
            samples_per_client: 20,
            heterogeneity: 0.5,
            ridge: 0.5,
            label_noise: 0.3,
            seed,
        })
        .unwrap()
    }

    fn base_cfg(n: usize, k: usize, policy: PolicyKind) -> RunConfig {
        RunConfig {
            clients: n,
            participants: k,
            rounds: 20,
            local_steps: 3,
            batch: 5,
            mode: TransmissionMode::Mt,
            layer: ChannelLayer::EffectiveNoise,
            distribution: NoiseDistribution::Gaussian,
            policy,
            clock: ScheduleClock::Round,
            initial_model: None,
            pathloss: Pathloss::default(),
            seed: 7,
            noise_multiplier: 1.0,
            normalize: false,
            trace_virtual: false,
            train_all: false,
            ball_radius: None,
        }
    }

    #[test]
    fn full_sample_is_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_clients(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(sample_clients(3, 4, &mut rng).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn subsets_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut marginal = [0usize; 6];
        for _ in 0..draws {
            let s = sample_clients(6, 2, &mut rng).unwrap();
            for &k in &s {
                marginal[k] += 1;
            }
            *counts.entry(s).or_default() += 1;
        }
        assert_eq!(counts.len(), 15);
        let p = 1.0 / 15.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - p).abs() < 3.0 * se + 1e-4);
        }
        let q = 2.0 / 6.0;
        let se = (q * (1.0 - q) / draws as f64).sqrt();
        for m in marginal {
            assert!((m as f64 / draws as f64 - q).abs() < 3.0 * se + 1e-4);
        }
    }

    fn link(layer: ChannelLayer) -> LinkSetup {
        LinkSetup {
            layer,
            distribution: NoiseDistribution::Gaussian,
            pathloss: Pathloss::default(),
            noise_multiplier: 1.0,
            analog: AnalogUplink::default(),
            norm: None,
        }
    }

    #[test]
    fn silent_downlink_is_exact() {
        let w = ModelVector::new(vec![1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for layer in [ChannelLayer::EffectiveNoise, ChannelLayer::AnalogPhysical] {
            assert_eq!(
                downlink_broadcast(&w, LinkControl::Silent, &link(layer), &mut rng).unwrap(),
                w
            );
        }
    }

    #[test]
    fn downlink_variance_and_independence() {
        let w = ModelVector::new(vec![0.5; 100_000]);
        let zeta = 0.37;
        for layer in [ChannelLayer::EffectiveNoise, ChannelLayer::AnalogPhysical] {
            let l = link(layer);
            let a = downlink_broadcast(
                &w,
                LinkControl::Variance(zeta),
                &l,
                &mut stream_rng(3, Stream::Downlink, 0, 1),
            )
            .unwrap()
            .sub(&w)
            .unwrap();
            let b = downlink_broadcast(
                &w,
                LinkControl::Variance(zeta),
                &l,
                &mut stream_rng(3, Stream::Downlink, 1, 1),
            )
            .unwrap()
            .sub(&w)
            .unwrap();
            let var = a.norm_sq() / a.dim() as f64;
            assert!((var / zeta - 1.0).abs() < 0.05, "{layer:?}: {var}");
            let rho = a.dot(&b).unwrap() / (a.norm_sq() * b.norm_sq()).sqrt();
            assert!(rho.abs() < 0.02);
        }
    }

    #[test]
    fn local_train_fixed_point() {
        // targets consistent with w and no ridge: zero gradient
        let w = vec![0.3, -1.2];
        let features: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let targets = features.iter().map(|a| a[0] * w[0] + a[1] * w[1]).collect();
        let task = QuadraticTask::from_parts(vec![ClientData { features, targets }], 0.0, 2).unwrap();
        let s = LearningRateSchedule::new(0.5, 3.0, 1).unwrap();
        let start = ModelVector::new(w);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = local_train(&start, &task, 0, 5, 3, &s, 1, &mut rng).unwrap();
        for (a, b) in out.as_slice().iter().zip(start.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn local_train_single_full_batch_step() {
        // loss (1/2n)Σ(aᵀw − y)² + (λ/2)‖w‖², gradient by hand
        let features = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        let targets = vec![1.0, -1.0];
        let task = QuadraticTask::from_parts(vec![ClientData { features, targets }], 0.1, 2).unwrap();
        let s = LearningRateSchedule::with_gamma(1.0, 1.0, 8.0).unwrap();
        let w = ModelVector::new(vec![0.5, -0.5]);
        let r1 = 0.5 - 1.0 - 1.0; // a₁ᵀw − y₁
        let r2 = -0.5 + 1.0;
        let g = [
            (r1 * 1.0 + r2 * 0.0) / 2.0 + 0.1 * 0.5,
            (r1 * 2.0 + r2 * 1.0) / 2.0 - 0.1 * 0.5,
        ];
        let eta = 2.0 / 9.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = local_train(&w, &task, 0, 1, 2, &s, 1, &mut rng).unwrap();
        assert!((out.as_slice()[0] - (0.5 - eta * g[0])).abs() < 1e-14);
        assert!((out.as_slice()[1] - (-0.5 - eta * g[1])).abs() < 1e-14);
    }

    #[test]
    fn full_batch_gd_contracts() {
        let task = small_task(1, 6);
        let c = derive_constants(&task, 20, 1.0).unwrap();
        let s = LearningRateSchedule::new(c.mu, c.lipschitz, 1).unwrap();
        let opt = task.client_optimum(0);
        let mut w = ModelVector::new(vec![3.0; 4]);
        let mut prev = squared_distance(&w, &opt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..200 {
            w = local_train(&w, &task, 0, 1, 20, &s, t, &mut rng).unwrap();
            let d = squared_distance(&w, &opt).unwrap();
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn noise_free_uplink_is_exact_in_both_modes() {
        let local = ModelVector::new(vec![1.0, 2.0]);
        let prev = ModelVector::new(vec![0.5, 0.5]);
        let zero = ModelVector::zeros(2);
        assert_eq!(
            uplink_transmit(&local, TransmissionMode::Mt, &prev, &prev, &zero).unwrap(),
            local
        );
        assert_eq!(
            uplink_transmit(&local, TransmissionMode::Mdt, &prev, &prev, &zero).unwrap(),
            local
        );
    }

    #[test]
    fn mdt_reconstruction_carries_minus_downlink_noise() {
        let server = ModelVector::new(vec![0.25, -1.0, 2.0]);
        let e = ModelVector::new(vec![0.125, 0.5, -0.25]);
        let received = server.add(&e).unwrap();
        let local = ModelVector::new(vec![1.0, 0.0, 3.0]);
        let zero = ModelVector::zeros(3);
        let w_tilde = uplink_transmit(&local, TransmissionMode::Mdt, &server, &received, &zero).unwrap();
        assert_eq!(w_tilde.sub(&local).unwrap(), e.scale(&-1.0));
    }

    #[test]
    fn mt_uplink_residual_variance() {
        let dim = 100_000;
        let locals = vec![ModelVector::new(vec![0.2; dim])];
        let sigma = 0.21;
        let l = link(ChannelLayer::EffectiveNoise);
        let mut rngs = vec![stream_rng(9, Stream::Uplink, 0, 1)];
        let mut shared = stream_rng(9, Stream::Uplink, 1, 1);
        let prev = ModelVector::zeros(dim);
        let out = uplink_round(
            &locals,
            &locals,
            &prev,
            TransmissionMode::Mt,
            LinkControl::Variance(sigma),
            &l,
            &mut rngs,
            &mut shared,
        )
        .unwrap();
        let r = out.aggregate.sub(&locals[0]).unwrap();
        assert!((r.norm_sq() / dim as f64 / sigma - 1.0).abs() < 0.05);
    }

    #[test]
    fn aggregate_examples() {
        let a = ModelVector::new(vec![1.0, 2.0]);
        assert_eq!(aggregate(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(aggregate(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert!(matches!(aggregate(&[]).unwrap_err(), Error::Aggregation(_)));
    }

    #[test]
    fn degenerate_fl_is_gradient_descent() {
        let task = small_task(1, 10);
        let mut cfg = base_cfg(1, 1, PolicyKind::NoiseFree {});
        cfg.local_steps = 1;
        cfg.batch = 20;
        let out = run(&cfg, &task).unwrap();
        let s = schedule_for(&task, &cfg).unwrap();
        let mut w = ModelVector::zeros(4);
        for (t, row) in out.trace.iter().enumerate() {
            let g = task.gradient(&w).unwrap();
            w.axpy(&-s.eta(t + 1).unwrap(), &g).unwrap();
            let d = squared_distance(&w, &task.optimum()).unwrap();
            assert!((d - row.sq_dist).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let task = small_task(6, 11);
        for policy in [PolicyKind::Theorem2MtPartial {}, PolicyKind::EqualPower { snr: 10.0 }] {
            for layer in [ChannelLayer::EffectiveNoise, ChannelLayer::AnalogPhysical] {
                let mut cfg = base_cfg(6, 3, policy.clone());
                cfg.layer = layer;
                let a = run(&cfg, &task).unwrap().trace;
                let b = run(&cfg, &task).unwrap().trace;
                assert_eq!(a, b);
                cfg.seed += 1;
                assert_ne!(run(&cfg, &task).unwrap().trace, a);
            }
        }
    }

    #[test]
    fn virtual_fl_matches_sampled_training() {
        let task = small_task(6, 12);
        for mode in [TransmissionMode::Mt, TransmissionMode::Mdt] {
            let policy = match mode {
                TransmissionMode::Mt => PolicyKind::Theorem2MtPartial {},
                TransmissionMode::Mdt => PolicyKind::Theorem3Mdt { nu: 10.0 },
            };
            let mut cfg = base_cfg(6, 2, policy);
            cfg.mode = mode;
            let plain = run(&cfg, &task).unwrap();
            cfg.train_all = true;
            let all = run(&cfg, &task).unwrap();
            assert_eq!(plain.trace, all.trace);
        }
    }

    #[test]
    fn virtual_sequences_structure() {
        let task = small_task(4, 13);
        for mode in [TransmissionMode::Mt, TransmissionMode::Mdt] {
            let mut cfg = base_cfg(4, 4, PolicyKind::Theorem1MtFull {});
            cfg.mode = mode;
            cfg.trace_virtual = true;
            let out = run(&cfg, &task).unwrap();
            assert_eq!(out.virtual_trace.len(), cfg.rounds);
            for (v, row) in out.virtual_trace.iter().zip(&out.trace) {
                assert_eq!(v.u_bar, v.v_bar);
                // p̄ is the server's model
                let d = squared_distance(&v.p_bar, &task.optimum()).unwrap();
                assert_eq!(d, row.sq_dist);
                // ū − p̄ = −mean n (MT), −mean(n − e) (MDT)
                let gap = v.u_bar.sub(&v.p_bar).unwrap();
                let expect = match mode {
                    TransmissionMode::Mt => v.uplink_noise_mean.scale(&-1.0),
                    TransmissionMode::Mdt => v.downlink_noise_mean.sub(&v.uplink_noise_mean).unwrap(),
                };
                for (a, b) in gap.as_slice().iter().zip(expect.as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
                if let (Some(wb), Some(e)) = (&v.w_bar, &v.next_downlink_noise_mean) {
                    let g = wb.sub(&v.p_bar).unwrap();
                    for (a, b) in g.as_slice().iter().zip(e.as_slice()) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
            assert!(out.virtual_trace.last().unwrap().w_bar.is_none());
        }
    }

    #[test]
    fn mdt_aggregate_noise_contains_downlink_term() {
        // with the uplink silent, the MDT aggregate misses the local average by −mean e
        let task = small_task(4, 14);
        let mut cfg = base_cfg(4, 4, PolicyKind::Theorem1MtFull {});
        cfg.mode = TransmissionMode::Mdt;
        cfg.trace_virtual = true;
        cfg.rounds = 3;
        let plan = plan_for(&cfg, schedule_for(&task, &cfg).unwrap()).unwrap();
        assert!(matches!(plan.control(1).unwrap().uplink, LinkControl::Variance(_)));
        let out = run(&cfg, &task).unwrap();
        for v in &out.virtual_trace {
            let total = v.p_bar.sub(&v.v_bar).unwrap();
            let expect = v.uplink_noise_mean.sub(&v.downlink_noise_mean).unwrap();
            assert!(v.downlink_noise_mean.norm_sq() > 0.0);
            for (a, b) in total.as_slice().iter().zip(expect.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_returns_partial_trace() {
        let task = small_task(2, 15);
        let mut cfg = base_cfg(2, 2, PolicyKind::EqualPower { snr: 10.0 });
        cfg.noise_multiplier = 1e9;
        cfg.initial_model = Some(task.optimum().into_inner());
        match run(&cfg, &task).unwrap_err() {
            Error::Divergence { round, partial, .. } => {
                assert_eq!(partial.len(), round);
                assert!(round >= 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn energy_is_cumulative_and_rounds_increase() {
        let task = small_task(4, 16);
        let cfg = base_cfg(
            4,
            2,
            PolicyKind::PowerT2 {
                budget: None,
                reference_snr: 10.0,
            },
        );
        let out = run(&cfg, &task).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].t == w[0].t + 1);
            assert!(w[1].energy_cum >= w[0].energy_cum);
        }
        // both links spend the same T·snr budget
        let total = out.trace.last().unwrap().energy_cum;
        assert!((total / (2.0 * 20.0 * 10.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let task = small_task(3, 17);
        let mut cfg = base_cfg(3, 4, PolicyKind::NoiseFree {});
        assert!(matches!(run(&cfg, &task).unwrap_err(), Error::Config(_)));
        cfg.participants = 2;
        cfg.initial_model = Some(vec![0.0; 3]);
        assert!(matches!(run(&cfg, &task).unwrap_err(), Error::Dimension { .. }));
        cfg.initial_model = None;
        cfg.trace_virtual = true;
        assert!(matches!(run(&cfg, &task).unwrap_err(), Error::Config(_)));
    }

    #[test]
    fn normalization_keeps_noise_free_runs_exact() {
        let task = small_task(3, 18);
        let mut cfg = base_cfg(3, 3, PolicyKind::NoiseFree {});
        let a = run(&cfg, &task).unwrap();
        cfg.normalize = true;
        let b = run(&cfg, &task).unwrap();
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert!((x.sq_dist - y.sq_dist).abs() < 1e-10);
        }
    }
}
