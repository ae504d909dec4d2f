//! Generalization-bound evaluation and a Monte Carlo check of the per-code
//! concentration inequality.
//!
//! With a codebook of `L` vectors and `G` segments, a quantized message is
//! one of `L^G` combinations `Q_k`. For a fixed codebook and iid messages,
//! Hoeffding's inequality plus a union bound over all combinations gives,
//! with probability at least `1 - δ`, simultaneously for every `k`:
//!
//! ```text
//! |E[φ_k(q(h))] - (1/n) Σ φ_k(q(h_i))| <= |φ(Q_k)| · sqrt((G ln L + ln(2/δ)) / (2n))
//! ```
//!
//! where `φ_k(v) = φ(v) · 1{v = Q_k}`. [`concentration_check`] estimates how
//! often that fails.

use crate::error::{Error, Result};
use crate::quantizer::nearest_code;
use crate::seed::derive;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Inputs of the simplified Euclidean bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// Loss bound with discretization.
    #[serde(rename = "C_J")]
    pub loss_bound: f64,
    /// Loss bound without discretization.
    #[serde(rename = "tC_J")]
    pub loss_bound_continuous: f64,
    #[serde(rename = "L")]
    pub codebook_size: u64,
    #[serde(rename = "G")]
    pub segments: u32,
    /// Message dimension.
    pub m: u32,
    /// Parameter count.
    pub zeta: f64,
    pub delta: f64,
    pub n: f64,
    #[serde(rename = "L_d")]
    pub lipschitz: f64,
    #[serde(rename = "tL_d")]
    pub lipschitz_continuous: f64,
    pub rho: u32,
    /// Lipschitz constant of the loss in the representation.
    #[serde(default)]
    pub varsigma: f64,
    /// Radius of the representation space.
    #[serde(rename = "R_H", default)]
    pub radius: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.loss_bound, self.loss_bound_continuous, self.zeta, self.lipschitz, self.lipschitz_continuous, self.varsigma, self.radius];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("bound parameters must be finite and nonnegative".into()));
        }
        // δ = 1 is admitted so the ln(1/δ) term can be switched off.
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(Error::Config(format!("n must be at least 1, got {}", self.n)));
        }
        if self.rho == 0 || self.codebook_size == 0 || self.m == 0 {
            return Err(Error::Config("rho, L and m must be positive".into()));
        }
        Ok(())
    }
}

/// A bound value plus whether `L^G` left the `f64` range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundValue {
    pub value: f64,
    pub overflow: bool,
}

fn lipschitz_term(lipschitz: f64, rho: u32, n: f64) -> f64 {
    (lipschitz.powf(2.0 / rho as f64) / n).sqrt()
}

/// `4 L^G + 2 L m + 2 ζ + 2 ln(1/δ)`.
pub fn discretized_radicand(p: &BoundParams) -> f64 {
    let combos = (p.codebook_size as f64).powf(p.segments as f64);
    4.0 * combos + 2.0 * p.codebook_size as f64 * p.m as f64 + 2.0 * p.zeta + 2.0 * (1.0 / p.delta).ln()
}

/// `ln(4 (4√m)^m + 2 ζ + 2 ln(1/δ))`, evaluated without forming `(4√m)^m`.
pub fn continuous_ln_radicand(p: &BoundParams) -> f64 {
    let m = p.m as f64;
    let ln_cover = 4f64.ln() + m * (4f64.ln() + 0.5 * m.ln());
    let rest = 2.0 * p.zeta + 2.0 * (1.0 / p.delta).ln();
    if rest <= 0.0 {
        ln_cover
    } else {
        let hi = ln_cover.max(rest.ln());
        hi + ((ln_cover - hi).exp() + (rest.ln() - hi).exp()).ln()
    }
}

/// `(4√m)^m` via its logarithm.
pub fn covering_term(m: u32) -> f64 {
    let m = m as f64;
    (m * (4f64.ln() + 0.5 * m.ln())).exp()
}

/// `C_J sqrt((4L^G + 2Lm + 2ζ + 2 ln(1/δ)) / n) + sqrt(L_d^{2/ρ} / n)`.
pub fn discretized_bound(p: &BoundParams) -> Result<BoundValue> {
    p.validate()?;
    let radicand = discretized_radicand(p);
    if !radicand.is_finite() {
        return Ok(BoundValue { value: f64::INFINITY, overflow: true });
    }
    let value = p.loss_bound * (radicand / p.n).sqrt() + lipschitz_term(p.lipschitz, p.rho, p.n);
    Ok(BoundValue { value, overflow: false })
}

/// `tC_J sqrt((4(4√m)^m + 2ζ + 2 ln(1/δ)) / n) + sqrt(tL_d^{2/ρ} / n) + ς R_H`.
pub fn continuous_bound(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let complexity = if p.loss_bound_continuous == 0.0 { 0.0 } else { p.loss_bound_continuous * (0.5 * (continuous_ln_radicand(p) - p.n.ln())).exp() };
    Ok(complexity + lipschitz_term(p.lipschitz_continuous, p.rho, p.n) + p.varsigma * p.radius)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundComparison {
    pub with: f64,
    pub without: f64,
    pub with_overflow: bool,
    pub with_radicand: f64,
    pub without_radicand: f64,
    /// `log10(without_radicand / with_radicand)`.
    pub ratio_log10: f64,
}

pub fn bound_comparison(p: &BoundParams) -> Result<BoundComparison> {
    let with = discretized_bound(p)?;
    let without = continuous_bound(p)?;
    let with_radicand = discretized_radicand(p);
    let ln_without = continuous_ln_radicand(p);
    Ok(BoundComparison {
        with: with.value,
        without,
        with_overflow: with.overflow,
        with_radicand,
        without_radicand: ln_without.exp(),
        ratio_log10: (ln_without - with_radicand.ln()) / std::f64::consts::LN_10,
    })
}

/// Distribution of messages in `R^{G·dim}`.
pub trait MessageSampler {
    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MessageDistribution {
    /// Independent coordinates `N(mean, std²)`.
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Independent coordinates `U[low, high)`.
    Uniform {
        low: f64,
        high: f64,
    },
    PointMass {
        point: Vec<f64>,
    },
    /// Finitely many points with the given (unnormalised) weights.
    Discrete {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl MessageDistribution {
    pub fn validate(&self, width: usize) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self {
            Self::Gaussian { std, .. } if !(*std >= 0.0) => bad("gaussian std must be nonnegative"),
            Self::Uniform { low, high } if !(low < high) => bad("uniform needs low < high"),
            Self::PointMass { point } if point.len() != width => bad("point mass has the wrong width"),
            Self::Discrete { points, weights } => {
                if points.is_empty() || points.len() != weights.len() {
                    return bad("discrete distribution needs one weight per point");
                }
                if points.iter().any(|p| p.len() != width) {
                    return bad("discrete point has the wrong width");
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return bad("discrete weights must be nonnegative with positive sum");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl MessageSampler for MessageDistribution {
    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Self::Gaussian { mean, std } => {
                out.iter_mut().for_each(|v| *v = mean + std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
            }
            Self::Uniform { low, high } => out.iter_mut().for_each(|v| *v = rng.random_range(*low..*high)),
            Self::PointMass { point } => out.copy_from_slice(point),
            Self::Discrete { points, weights } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = points.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                out.copy_from_slice(&points[pick]);
            }
        }
    }
}

/// `φ(Q_k)` for every code combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Phi {
    Constant(f64),
    PerCode(Vec<f64>),
}

impl Default for Phi {
    fn default() -> Self {
        Phi::Constant(1.0)
    }
}

impl Phi {
    fn at(&self, k: u64) -> f64 {
        match self {
            Phi::Constant(v) => *v,
            Phi::PerCode(v) => v[k as usize],
        }
    }
}

/// Combination counts above this are sampled rather than enumerated.
pub const MAX_ENUMERATED: u64 = 10_000;
/// Combinations tracked when sampling.
pub const SAMPLED_COMBINATIONS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationSpec {
    #[serde(rename = "L")]
    pub codebook_size: usize,
    #[serde(rename = "G")]
    pub segments: usize,
    pub dim: usize,
    /// Messages per trial.
    pub n: usize,
    pub trials: usize,
    pub delta: f64,
    #[serde(default)]
    pub phi: Phi,
    #[serde(default)]
    pub seed: u64,
    /// Draws used to estimate the population probabilities.
    #[serde(default = "default_reference_samples")]
    pub reference_samples: usize,
    /// Fixed codebook, `L` rows of width `dim`. Defaults to code `j` being
    /// the constant vector `j`.
    #[serde(default)]
    pub codebook: Option<Vec<Vec<f64>>>,
    pub distribution: MessageDistribution,
}

fn default_reference_samples() -> usize {
    1_000_000
}

impl ConcentrationSpec {
    pub fn combinations(&self) -> Option<u64> {
        (self.codebook_size as u64).checked_pow(self.segments as u32)
    }

    pub fn codebook_tensor(&self) -> Result<Tensor> {
        match &self.codebook {
            Some(rows) => {
                let t = Tensor::from_rows(rows)?;
                if t.shape() != [self.codebook_size, self.dim] {
                    return Err(Error::Dimension(format!("codebook shape {:?} is not [{}, {}]", t.shape(), self.codebook_size, self.dim)));
                }
                Ok(t)
            }
            None => Tensor::new(&[self.codebook_size, self.dim], (0..self.codebook_size).flat_map(|j| vec![j as f64; self.dim]).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.segments == 0 || self.dim == 0 || self.n == 0 || self.trials == 0 || self.reference_samples == 0 {
            return Err(Error::Config("L, G, dim, n, trials and reference_samples must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        let combos = self.combinations().ok_or_else(|| Error::Config("L^G overflows".into()))?;
        if let Phi::PerCode(v) = &self.phi {
            if v.len() as u64 != combos {
                return Err(Error::Config(format!("phi has {} entries for {combos} code combinations", v.len())));
            }
        }
        self.distribution.validate(self.segments * self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeReport {
    /// Combination index: segment 0 is the most significant base-`L` digit.
    pub k: u64,
    pub phi: f64,
    pub population: f64,
    pub bound: f64,
    pub violation_rate: f64,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    /// Fraction of trials in which at least one tracked combination broke
    /// its bound.
    pub violation_rate: f64,
    pub trials: usize,
    pub n: usize,
    pub delta: f64,
    /// `sqrt((G ln L + ln(2/δ)) / (2n))`.
    pub epsilon: f64,
    /// Monte Carlo standard error of a rate equal to δ.
    pub sigma: f64,
    /// Fraction of the `L^G` combinations that were tracked.
    pub coverage: f64,
    pub codes: Vec<CodeReport>,
}

impl ConcentrationReport {
    /// `violation_rate <= δ + 3σ`.
    pub fn within_tolerance(&self) -> bool {
        self.violation_rate <= self.delta + 3.0 * self.sigma
    }
}

/// Combination index of every message in `batch` (row-major, width `G·dim`).
fn combination_index(message: &[f64], codebook: &Tensor, size: u64) -> u64 {
    let dim = codebook.shape()[1];
    message.chunks(dim).fold(0, |acc, seg| acc * size + nearest_code(seg, codebook) as u64)
}

fn count_combinations(
    sampler: &dyn MessageSampler,
    spec: &ConcentrationSpec,
    codebook: &Tensor,
    draws: usize,
    seed: u64,
    counts: &mut std::collections::HashMap<u64, u64>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; spec.segments * spec.dim];
    counts.clear();
    for _ in 0..draws {
        sampler.sample_into(&mut rng, &mut buf);
        *counts.entry(combination_index(&buf, codebook, spec.codebook_size as u64)).or_default() += 1;
    }
}

/// Estimates how often the union-bounded Hoeffding inequality fails.
///
/// The codebook is fixed before any sampling. Population probabilities come
/// from an independent reference draw of `reference_samples` messages.
pub fn concentration_check(spec: &ConcentrationSpec, sampler: &dyn MessageSampler) -> Result<ConcentrationReport> {
    spec.validate()?;
    let codebook = spec.codebook_tensor()?;
    let combos = spec.combinations().expect("validated");
    let tracked: Vec<u64> = if combos <= MAX_ENUMERATED {
        (0..combos).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, u64::MAX - 1));
        let mut picks: Vec<u64> = if combos <= usize::MAX as u64 {
            sample(&mut rng, combos as usize, SAMPLED_COMBINATIONS).into_iter().map(|k| k as u64).collect()
        } else {
            (0..SAMPLED_COMBINATIONS).map(|_| rng.random_range(0..combos)).collect()
        };
        picks.sort_unstable();
        picks.dedup();
        picks
    };

    let mut counts = std::collections::HashMap::new();
    count_combinations(sampler, spec, &codebook, spec.reference_samples, derive(spec.seed, u64::MAX), &mut counts);
    let population: Vec<f64> = tracked.iter().map(|k| counts.get(k).copied().unwrap_or(0) as f64 / spec.reference_samples as f64).collect();

    let n = spec.n as f64;
    let epsilon = (((spec.segments as f64) * (spec.codebook_size as f64).ln() + (2.0 / spec.delta).ln()) / (2.0 * n)).sqrt();
    let phis: Vec<f64> = tracked.iter().map(|&k| spec.phi.at(k).abs()).collect();
    let bounds: Vec<f64> = phis.iter().map(|p| p * epsilon).collect();
    let mut per_code_violations = vec![0usize; tracked.len()];
    let mut max_dev = vec![0.0f64; tracked.len()];
    let mut any_violations = 0usize;
    for trial in 0..spec.trials {
        count_combinations(sampler, spec, &codebook, spec.n, derive(spec.seed, trial as u64), &mut counts);
        let mut violated = false;
        for (i, k) in tracked.iter().enumerate() {
            let empirical = counts.get(k).copied().unwrap_or(0) as f64 / n;
            let deviation = phis[i] * (population[i] - empirical).abs();
            max_dev[i] = max_dev[i].max(deviation);
            if deviation > bounds[i] {
                per_code_violations[i] += 1;
                violated = true;
            }
        }
        any_violations += usize::from(violated);
    }

    let trials = spec.trials as f64;
    let codes = tracked
        .iter()
        .enumerate()
        .map(|(i, &k)| CodeReport {
            k,
            phi: spec.phi.at(k),
            population: population[i],
            bound: bounds[i],
            violation_rate: per_code_violations[i] as f64 / trials,
            max_deviation: max_dev[i],
        })
        .collect();
    Ok(ConcentrationReport {
        violation_rate: any_violations as f64 / trials,
        trials: spec.trials,
        n: spec.n,
        delta: spec.delta,
        epsilon,
        sigma: (spec.delta * (1.0 - spec.delta) / trials).sqrt(),
        coverage: tracked.len() as f64 / combos as f64,
        codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn params() -> BoundParams {
        BoundParams {
            loss_bound: 1.0,
            loss_bound_continuous: 1.0,
            codebook_size: 2,
            segments: 1,
            m: 2,
            zeta: 0.0,
            delta: 1.0,
            n: 16.0,
            lipschitz: 0.0,
            lipschitz_continuous: 0.0,
            rho: 1,
            varsigma: 0.0,
            radius: 0.0,
        }
    }

    #[test]
    fn discretized_direct_arithmetic() {
        let v = discretized_bound(&params()).unwrap();
        assert_eq!(v.value, 1.0);
        assert!(!v.overflow);
        let zero = BoundParams { loss_bound: 0.0, ..params() };
        assert_eq!(discretized_bound(&zero).unwrap().value, 0.0);
    }

    #[test]
    fn continuous_direct_arithmetic() {
        let p = BoundParams { m: 1, zeta: 3.0, delta: 0.5, ..params() };
        let expected = ((16.0 + 6.0 + 2.0 * 2f64.ln()) / 16.0).sqrt();
        assert!((continuous_bound(&p).unwrap() - expected).abs() < 1e-14);
        let zero = BoundParams { loss_bound_continuous: 0.0, ..params() };
        assert_eq!(continuous_bound(&zero).unwrap(), 0.0);
    }

    #[test]
    fn sensitivity_term_is_added_only_without_discretization() {
        let p = BoundParams { varsigma: 2.0, radius: 3.0, ..params() };
        let base = BoundParams { varsigma: 0.0, ..p.clone() };
        assert!((continuous_bound(&p).unwrap() - continuous_bound(&base).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(discretized_bound(&p).unwrap(), discretized_bound(&base).unwrap());
    }

    #[test]
    fn overflowing_code_count_is_flagged() {
        let p = BoundParams { codebook_size: 1 << 20, segments: 60, ..params() };
        let v = discretized_bound(&p).unwrap();
        assert!(v.overflow && v.value.is_infinite());
    }

    #[test]
    fn tiny_messages_are_reported_without_ordering() {
        let p = BoundParams { codebook_size: 1, segments: 1, m: 1, ..params() };
        let c = bound_comparison(&p).unwrap();
        assert_eq!(c.with_radicand, 6.0);
        assert!((c.without_radicand - 16.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_terms_cancel_in_the_radicand_difference() {
        let a = BoundParams { m: 3, zeta: 5.0, delta: 0.01, ..params() };
        let b = BoundParams { delta: 0.3, ..a.clone() };
        let ca = bound_comparison(&a).unwrap();
        let cb = bound_comparison(&b).unwrap();
        let da = ca.without_radicand - ca.with_radicand;
        let db = cb.without_radicand - cb.with_radicand;
        assert!((da - db).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(discretized_bound(&BoundParams { delta: 0.0, ..params() }).is_err());
        assert!(discretized_bound(&BoundParams { n: 0.5, ..params() }).is_err());
        assert!(continuous_bound(&BoundParams { zeta: -1.0, ..params() }).is_err());
        assert!(continuous_bound(&BoundParams { rho: 0, ..params() }).is_err());
    }

    fn spec(distribution: MessageDistribution) -> ConcentrationSpec {
        ConcentrationSpec {
            codebook_size: 2,
            segments: 1,
            dim: 1,
            n: 100,
            trials: 200,
            delta: 0.05,
            phi: Phi::default(),
            seed: 1,
            reference_samples: 100_000,
            codebook: None,
            distribution,
        }
    }

    #[test]
    fn point_mass_never_deviates() {
        let s = spec(MessageDistribution::PointMass { point: vec![0.9] });
        let r = concentration_check(&s, &s.distribution).unwrap();
        assert_eq!(r.violation_rate, 0.0);
        assert_eq!(r.codes[1].population, 1.0);
        assert!(r.codes.iter().all(|c| c.max_deviation == 0.0));
    }

    #[test]
    fn zero_phi_has_zero_bound_and_no_violations() {
        let s = ConcentrationSpec { phi: Phi::Constant(0.0), ..spec(MessageDistribution::Uniform { low: -1.0, high: 2.0 }) };
        let r = concentration_check(&s, &s.distribution).unwrap();
        assert_eq!(r.violation_rate, 0.0);
        assert!(r.codes.iter().all(|c| c.bound == 0.0 && c.max_deviation == 0.0));
    }

    #[test]
    fn combination_index_is_base_l_big_endian() {
        let cb = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(combination_index(&[2.1, 0.2], &cb, 3), 6);
        assert_eq!(combination_index(&[0.9, 1.8], &cb, 3), 5);
    }

    #[test]
    fn large_code_spaces_are_sampled() {
        let s = ConcentrationSpec {
            codebook_size: 16,
            segments: 4,
            trials: 5,
            reference_samples: 10_000,
            ..spec(MessageDistribution::Gaussian { mean: 7.5, std: 4.0 })
        };
        let r = concentration_check(&s, &s.distribution).unwrap();
        assert_eq!(r.codes.len(), SAMPLED_COMBINATIONS);
        assert!((r.coverage - 1000.0 / 65536.0).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let s = ConcentrationSpec { phi: Phi::PerCode(vec![1.0]), ..spec(MessageDistribution::Gaussian { mean: 0.0, std: 1.0 }) };
        assert!(s.validate().is_err());
        let s = spec(MessageDistribution::PointMass { point: vec![0.0, 1.0] });
        assert!(s.validate().is_err());
        let s = ConcentrationSpec { delta: 1.0, ..spec(MessageDistribution::Gaussian { mean: 0.0, std: 1.0 }) };
        assert!(s.validate().is_err());
    }
}
