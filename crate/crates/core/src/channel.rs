//! Channel models.
//!
//! Two layers share this module: an effective-noise channel that perturbs
//! every element with zero-mean noise of a scheduled variance, and an analog
//! over-the-air layer in which clients pre-invert their fading so the
//! superposed signals arrive as the average of the transmitted models.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{mean_of, ModelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    Uniform,
    Laplace,
}

/// Zero-mean IID noise, parameterized only by its per-element variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    variance: f64,
    distribution: NoiseDistribution,
}

impl NoiseSpec {
    pub fn new(variance: f64, distribution: NoiseDistribution) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::Policy(format!(
                "noise variance must be finite and nonnegative, got {variance}"
            )));
        }
        Ok(Self { variance, distribution })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn distribution(&self) -> NoiseDistribution {
        self.distribution
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.variance == 0.0 {
            return 0.0;
        }
        let sd = self.variance.sqrt();
        match self.distribution {
            NoiseDistribution::Gaussian => sd * rng.sample::<f64, _>(StandardNormal),
            // U(−a, a) has variance a²/3
            NoiseDistribution::Uniform => {
                let a = sd * 3f64.sqrt();
                rng.random_range(-a..a)
            }
            // Laplace(b) has variance 2b²; a signed exponential draw
            NoiseDistribution::Laplace => {
                let b = sd / 2f64.sqrt();
                let e: f64 = Exp1.sample(rng);
                if rng.random::<bool>() {
                    b * e
                } else {
                    -b * e
                }
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> ModelVector<f64> {
        ModelVector::new((0..dim).map(|_| self.sample(rng)).collect())
    }
}

/// `v + e` with `e` drawn IID from `spec`.
pub fn add_effective_noise<R: Rng + ?Sized>(v: &ModelVector<f64>, spec: &NoiseSpec, rng: &mut R) -> ModelVector<f64> {
    let noise = spec.draw(v.dim(), rng);
    v.add(&noise).expect("noise drawn at the model dimension")
}

/// One element's channel: large-scale attenuation `r^{−α/2}` times a
/// unit-power complex small-scale gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingDraw {
    pub pathloss_exponent: f64,
    pub distance: f64,
    pub small_scale: Complex64,
}

impl FadingDraw {
    /// Rayleigh draw: `h ~ CN(0, 1)`.
    pub fn rayleigh<R: Rng + ?Sized>(distance: f64, pathloss_exponent: f64, rng: &mut R) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Self {
            pathloss_exponent,
            distance,
            small_scale: Complex64::new(s * re, s * im),
        }
    }

    pub fn gain(&self) -> Complex64 {
        self.small_scale * self.distance.powf(-self.pathloss_exponent / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalogUplink {
    /// Minimum `|h|` at which channel inversion is attempted.
    pub inversion_floor: f64,
    pub max_retries: usize,
    pub noise_enabled: bool,
}

impl Default for AnalogUplink {
    fn default() -> Self {
        Self {
            inversion_floor: 0.05,
            max_retries: 10,
            noise_enabled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalogReception {
    /// `(1/K)Σ_k w_k + n/√ρ`
    pub estimate: ModelVector<f64>,
    /// The additive term `n/√ρ` of the estimate.
    pub noise: ModelVector<f64>,
    /// Elements that were re-sent on a fresh fade because `|h|` fell below the floor.
    pub retransmissions: usize,
}

/// Over-the-air aggregation with truncated channel inversion.
///
/// Client `k` sends element `i` with gain `√ρ / (r^{−α/2} h_{k,i})`, so the
/// superposition at the receiver is `(√ρ/K) Σ_k w_{k,i} + n_i`. Models ride on
/// the in-phase component; the estimate is the real part rescaled by `1/√ρ`.
/// `fades[k][i]` is replaced by a fresh draw whenever it is below the floor.
pub fn analog_uplink_aggregate<R: Rng + ?Sized>(
    models: &[ModelVector<f64>],
    power: f64,
    fades: &mut [Vec<FadingDraw>],
    cfg: &AnalogUplink,
    rng: &mut R,
) -> Result<AnalogReception> {
    let first = models
        .first()
        .ok_or_else(|| Error::Aggregation("no transmitting clients".into()))?;
    if !(power > 0.0) {
        return Err(Error::Channel(format!("uplink power must be positive, got {power}")));
    }
    check_dim(models.len(), fades.len())?;
    let dim = first.dim();
    let k = models.len() as f64;
    let amp = power.sqrt();
    let mut retransmissions = 0;
    let mut estimate = Vec::with_capacity(dim);
    let mut noise = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut superposed = Complex64::new(0.0, 0.0);
        for (w, client_fades) in models.iter().zip(fades.iter_mut()) {
            check_dim(dim, w.dim())?;
            check_dim(dim, client_fades.len())?;
            let mut tries = 0;
            while client_fades[i].small_scale.norm() < cfg.inversion_floor {
                if tries == cfg.max_retries {
                    return Err(Error::Channel(format!(
                        "element {i}: fade below inversion floor after {tries} retransmissions"
                    )));
                }
                let f = client_fades[i];
                client_fades[i] = FadingDraw::rayleigh(f.distance, f.pathloss_exponent, rng);
                tries += 1;
                retransmissions += 1;
            }
            let g = client_fades[i].gain();
            let tx = Complex64::new(amp, 0.0) / g;
            superposed += g * tx * w.as_slice()[i];
        }
        let n = if cfg.noise_enabled {
            rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let y = superposed / k + n;
        estimate.push(y.re / amp);
        noise.push(n / amp);
    }
    Ok(AnalogReception {
        estimate: ModelVector::new(estimate),
        noise: ModelVector::new(noise),
        retransmissions,
    })
}

/// Broadcast reception at one client: `Q` copies of `w` each received at
/// average SNR `r^{−α}ρ` and equalized, then combined.
///
/// Returns the combined estimate and its additive noise.
pub fn analog_downlink_receive<R: Rng + ?Sized>(
    w: &ModelVector<f64>,
    power: f64,
    pathloss_gain: f64,
    copies: usize,
    distribution: NoiseDistribution,
    rng: &mut R,
) -> Result<(ModelVector<f64>, ModelVector<f64>)> {
    if !(power > 0.0) || !(pathloss_gain > 0.0) {
        return Err(Error::Channel("downlink power and path gain must be positive".into()));
    }
    let per_copy = NoiseSpec::new(1.0 / (pathloss_gain * power), distribution)?;
    let receptions: Vec<_> = (0..copies.max(1))
        .map(|_| add_effective_noise(w, &per_copy, rng))
        .collect();
    let combined = diversity_combine(&receptions)?;
    let noise = combined.sub(w)?;
    Ok((combined, noise))
}

/// Coordinatewise average of independently received copies.
pub fn diversity_combine(copies: &[ModelVector<f64>]) -> Result<ModelVector<f64>> {
    if copies.is_empty() {
        return Err(Error::Combining("no copies to combine".into()));
    }
    mean_of(copies)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransmissionMode {
    /// Clients upload their updated local model.
    #[default]
    Mt,
    /// Clients upload the difference to the model they last received.
    Mdt,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrMeasurement {
    pub signal_power: f64,
    pub noise_power: f64,
    /// Linear ratio; `f64::INFINITY` when the noise power is zero.
    pub ratio: f64,
}

/// `‖Σ_k w_k‖² / ‖Σ_k noise_k‖²` for one round. Under MDT the aggregated
/// noise is `Σ(n_k − e_k)`; `downlink_sum` is ignored under MT.
pub fn measure_global_snr(
    signal_sum: &ModelVector<f64>,
    uplink_sum: &ModelVector<f64>,
    downlink_sum: Option<&ModelVector<f64>>,
    mode: TransmissionMode,
) -> Result<SnrMeasurement> {
    check_dim(signal_sum.dim(), uplink_sum.dim())?;
    let noise = match (mode, downlink_sum) {
        (TransmissionMode::Mdt, Some(dl)) => uplink_sum.sub(dl)?,
        _ => uplink_sum.clone(),
    };
    let signal_power = signal_sum.norm_sq();
    let noise_power = noise.norm_sq();
    let ratio = if noise_power > 0.0 {
        signal_power / noise_power
    } else {
        f64::INFINITY
    };
    Ok(SnrMeasurement {
        signal_power,
        noise_power,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, v)
    }

    #[test]
    fn zero_variance_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = ModelVector::new(vec![1.0, -2.0, 3.5]);
        for dist in [
            NoiseDistribution::Gaussian,
            NoiseDistribution::Uniform,
            NoiseDistribution::Laplace,
        ] {
            let spec = NoiseSpec::new(0.0, dist).unwrap();
            assert_eq!(add_effective_noise(&v, &spec, &mut rng), v);
        }
    }

    #[test]
    fn negative_variance_is_policy_error() {
        assert!(matches!(
            NoiseSpec::new(-0.1, NoiseDistribution::Gaussian).unwrap_err(),
            Error::Policy(_)
        ));
    }

    #[test]
    fn gaussian_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = NoiseSpec::new(1.0, NoiseDistribution::Gaussian).unwrap();
        let out = add_effective_noise(&ModelVector::zeros(100_000), &spec, &mut rng);
        let (_, v) = moments(out.as_slice());
        assert!((0.97..=1.03).contains(&v), "{v}");
    }

    #[test]
    fn uniform_quarter_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NoiseSpec::new(0.25, NoiseDistribution::Uniform).unwrap();
        let out = spec.draw(100_000, &mut rng);
        let (_, v) = moments(out.as_slice());
        assert!((0.24..=0.26).contains(&v), "{v}");
    }

    #[test]
    fn laplace_matches_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NoiseSpec::new(0.5, NoiseDistribution::Laplace).unwrap();
        let out = spec.draw(200_000, &mut rng);
        let (m, v) = moments(out.as_slice());
        assert!(m.abs() < 0.01);
        assert!((v / 0.5 - 1.0).abs() < 0.03, "{v}");
    }

    #[test]
    fn noise_streams_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NoiseSpec::new(1.0, NoiseDistribution::Gaussian).unwrap();
        let a = spec.draw(100_000, &mut rng);
        let b = spec.draw(100_000, &mut rng);
        let rho = a.dot(&b).unwrap() / (a.norm_sq() * b.norm_sq()).sqrt();
        assert!(rho.abs() < 0.02, "{rho}");
        // adjacent elements of one draw
        let s = a.as_slice();
        let lag: f64 = s.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / a.norm_sq();
        assert!(lag.abs() < 0.02);
    }

    fn fades(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<FadingDraw>> {
        (0..k)
            .map(|_| (0..dim).map(|_| FadingDraw::rayleigh(2.0, 3.0, rng)).collect())
            .collect()
    }

    #[test]
    fn inversion_cancels_fading_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let models = vec![
            ModelVector::new(vec![1.0, -2.0, 0.5, 4.0]),
            ModelVector::new(vec![3.0, 0.0, -0.5, 2.0]),
            ModelVector::new(vec![-1.0, 1.0, 1.5, 0.0]),
        ];
        let mut f = fades(3, 4, &mut rng);
        let cfg = AnalogUplink {
            noise_enabled: false,
            ..Default::default()
        };
        let out = analog_uplink_aggregate(&models, 7.0, &mut f, &cfg, &mut rng).unwrap();
        let mean = mean_of(&models).unwrap();
        for (a, b) in out.estimate.as_slice().iter().zip(mean.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(f.iter().flatten().all(|d| d.small_scale.norm() >= 0.05));
    }

    #[test]
    fn deep_fades_are_redrawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let models = vec![ModelVector::new(vec![1.0, 2.0])];
        let mut f = fades(1, 2, &mut rng);
        f[0][1].small_scale = Complex64::new(0.01, 0.0);
        let out = analog_uplink_aggregate(&models, 1.0, &mut f, &AnalogUplink::default(), &mut rng).unwrap();
        assert!(out.retransmissions >= 1);
        assert!(f[0][1].small_scale.norm() >= 0.05);
    }

    #[test]
    fn persistent_deep_fade_errors_after_retries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let models = vec![ModelVector::new(vec![1.0])];
        let mut f = fades(1, 1, &mut rng);
        f[0][0].small_scale = Complex64::new(0.0, 0.0);
        let cfg = AnalogUplink {
            inversion_floor: 100.0,
            ..Default::default()
        };
        assert!(matches!(
            analog_uplink_aggregate(&models, 1.0, &mut f, &cfg, &mut rng).unwrap_err(),
            Error::Channel(_)
        ));
    }

    #[test]
    fn high_power_residual_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = ModelVector::new(vec![0.7; 50_000]);
        let models = vec![s.clone(), s.clone()];
        let mut f = fades(2, 50_000, &mut rng);
        let rho = 1e4;
        let out = analog_uplink_aggregate(&models, rho, &mut f, &AnalogUplink::default(), &mut rng).unwrap();
        let resid = out.estimate.sub(&s).unwrap();
        let (_, v) = moments(resid.as_slice());
        assert!((v * rho - 1.0).abs() < 0.03, "{}", v * rho);
    }

    #[test]
    fn measured_snr_matches_prediction() {
        // signal power of the sum against ρ·‖Σw‖²/(dK²)
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dim = 8;
        let k = 3;
        let rho = 5.0;
        let trials = 10_000;
        let models: Vec<_> = (0..k)
            .map(|_| ModelVector::new((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
            .collect();
        let mut sum = ModelVector::zeros(dim);
        for m in &models {
            sum = sum.add(m).unwrap();
        }
        let predicted = rho * sum.norm_sq() / (dim * k * k) as f64;
        let mut noise_power = 0.0;
        for _ in 0..trials {
            let mut f = fades(k, dim, &mut rng);
            let out = analog_uplink_aggregate(&models, rho, &mut f, &AnalogUplink::default(), &mut rng).unwrap();
            noise_power += out.noise.norm_sq();
        }
        let mean = mean_of(&models).unwrap();
        let measured = mean.norm_sq() / (noise_power / trials as f64);
        assert!((measured / predicted - 1.0).abs() < 0.05, "{measured} vs {predicted}");
    }

    #[test]
    fn combining_single_copy_is_identity() {
        let v = ModelVector::new(vec![1.0, 2.0]);
        assert_eq!(diversity_combine(std::slice::from_ref(&v)).unwrap(), v);
        assert!(matches!(diversity_combine(&[]).unwrap_err(), Error::Combining(_)));
    }

    #[test]
    fn combining_divides_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = NoiseSpec::new(1.0, NoiseDistribution::Gaussian).unwrap();
        let s = ModelVector::new(vec![0.3; 100_000]);
        let copies: Vec<_> = (0..4).map(|_| add_effective_noise(&s, &spec, &mut rng)).collect();
        let combined = diversity_combine(&copies).unwrap();
        let (_, v) = moments(combined.sub(&s).unwrap().as_slice());
        assert!((v / 0.25 - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn four_copies_match_four_times_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dim = 50_000;
        let s = ModelVector::new((0..dim).map(|_| rng.sample(StandardNormal)).collect());
        let rho0 = 2.0;
        let (_, n4) = analog_downlink_receive(&s, rho0, 1.0, 4, NoiseDistribution::Gaussian, &mut rng).unwrap();
        let (_, n1) = analog_downlink_receive(&s, 4.0 * rho0, 1.0, 1, NoiseDistribution::Gaussian, &mut rng).unwrap();
        let snr4 = measure_global_snr(&s, &n4, None, TransmissionMode::Mt).unwrap().ratio;
        let snr1 = measure_global_snr(&s, &n1, None, TransmissionMode::Mt).unwrap().ratio;
        assert!((snr4 / snr1 - 1.0).abs() < 0.05, "{snr4} vs {snr1}");

        // uplink: four over-the-air receptions combined against one at 4ρ
        let models = vec![s.clone()];
        let mut f = fades(1, dim, &mut rng);
        let cfg = AnalogUplink::default();
        let copies: Vec<_> = (0..4)
            .map(|_| {
                analog_uplink_aggregate(&models, rho0, &mut f, &cfg, &mut rng)
                    .unwrap()
                    .estimate
            })
            .collect();
        let combined = diversity_combine(&copies).unwrap();
        let single = analog_uplink_aggregate(&models, 4.0 * rho0, &mut f, &cfg, &mut rng).unwrap();
        let snr_c = measure_global_snr(&s, &combined.sub(&s).unwrap(), None, TransmissionMode::Mt)
            .unwrap()
            .ratio;
        let snr_s = measure_global_snr(&s, &single.noise, None, TransmissionMode::Mt)
            .unwrap()
            .ratio;
        assert!((snr_c / snr_s - 1.0).abs() < 0.05, "{snr_c} vs {snr_s}");
    }

    #[test]
    fn snr_equal_powers_is_one() {
        let a = ModelVector::new(vec![3.0, 4.0]);
        let b = ModelVector::new(vec![0.0, 5.0]);
        assert_eq!(
            measure_global_snr(&a, &b, None, TransmissionMode::Mt).unwrap().ratio,
            1.0
        );
        let zero = ModelVector::zeros(2);
        assert_eq!(
            measure_global_snr(&a, &zero, None, TransmissionMode::Mt).unwrap().ratio,
            f64::INFINITY
        );
    }

    #[test]
    fn halving_noise_doubles_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dim = 20;
        let k = 5;
        let signal = ModelVector::new(vec![1.0; dim]);
        let mut ratio_for = |var: f64| {
            let spec = NoiseSpec::new(var, NoiseDistribution::Gaussian).unwrap();
            let mut noise = 0.0;
            let trials = 20_000;
            for _ in 0..trials {
                let mut sum = ModelVector::zeros(dim);
                for _ in 0..k {
                    sum = sum.add(&spec.draw(dim, &mut rng)).unwrap();
                }
                noise += sum.norm_sq();
            }
            signal.norm_sq() / (noise / trials as f64)
        };
        let r1 = ratio_for(0.4);
        let r2 = ratio_for(0.2);
        assert!((r2 / r1 - 2.0).abs() < 0.05, "{}", r2 / r1);
    }

    #[test]
    fn mdt_denominator_separates_downlink_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dim = 10;
        let k = 4;
        let (sigma2, zeta2) = (0.3, 0.2);
        let up = NoiseSpec::new(sigma2, NoiseDistribution::Gaussian).unwrap();
        let down = NoiseSpec::new(zeta2, NoiseDistribution::Gaussian).unwrap();
        let signal = ModelVector::new(vec![1.0; dim]);
        let trials = 20_000;
        let (mut with_dl, mut without_dl) = (0.0, 0.0);
        for _ in 0..trials {
            let mut n = ModelVector::zeros(dim);
            let mut e = ModelVector::zeros(dim);
            for _ in 0..k {
                n = n.add(&up.draw(dim, &mut rng)).unwrap();
                e = e.add(&down.draw(dim, &mut rng)).unwrap();
            }
            with_dl += measure_global_snr(&signal, &n, Some(&e), TransmissionMode::Mdt)
                .unwrap()
                .noise_power;
            without_dl += measure_global_snr(&signal, &n, None, TransmissionMode::Mdt)
                .unwrap()
                .noise_power;
        }
        let t = trials as f64;
        let full = with_dl / t;
        let ul_only = without_dl / t;
        let expected_full = (dim * k) as f64 * (sigma2 + zeta2);
        assert!((full / expected_full - 1.0).abs() < 0.03);
        assert!(((full - ul_only) / ((dim * k) as f64 * zeta2) - 1.0).abs() < 0.05);
    }
}
