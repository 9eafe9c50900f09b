//! Diagonal Gaussian mixture over the latent preference space.
//!
//! The mixture is a plain value: every operation reads its inputs and returns
//! new values, randomness is passed in as explicit seeds.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::rng_from_seed;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

/// Lower bound on any mixture weight after an update, keeps the simplex open.
const WEIGHT_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureDoc", into = "MixtureDoc")]
pub struct GaussianMixture {
    components: usize,
    dim: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
    weights: Vec<f64>,
}

/// JSON wire form: `{"M","D","means","variances","weights"}`.
#[derive(Serialize, Deserialize)]
struct MixtureDoc {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "D")]
    d: usize,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<MixtureDoc> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: MixtureDoc) -> Result<Self> {
        let g = GaussianMixture::new(doc.means, doc.variances, doc.weights)?;
        if g.components != doc.m || g.dim != doc.d {
            return Err(shape(format!(
                "header says M={} D={}, arrays are M={} D={}",
                doc.m, doc.d, g.components, g.dim
            )));
        }
        Ok(g)
    }
}

impl From<GaussianMixture> for MixtureDoc {
    fn from(g: GaussianMixture) -> Self {
        MixtureDoc {
            m: g.components,
            d: g.dim,
            means: g.means.chunks(g.dim).map(<[f64]>::to_vec).collect(),
            variances: g.variances.chunks(g.dim).map(<[f64]>::to_vec).collect(),
            weights: g.weights,
        }
    }
}

/// A latent draw `z`, tagged with the component that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub component: Option<usize>,
}

/// The random choices behind one sample: `z = mean[c] + sqrt(var[c]) * eps`.
/// Kept separately so training can differentiate through the draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamDraw {
    pub component: usize,
    pub eps: Vec<f64>,
}

/// Additive update in unconstrained coordinates (means, log-variances,
/// weight logits).
#[derive(Debug, Clone, PartialEq)]
pub struct GmmDelta {
    components: usize,
    dim: usize,
    pub d_means: Vec<f64>,
    pub d_log_variances: Vec<f64>,
    pub d_weight_logits: Vec<f64>,
}

impl GmmDelta {
    pub fn zeros(components: usize, dim: usize) -> Self {
        Self {
            components,
            dim,
            d_means: vec![0.0; components * dim],
            d_log_variances: vec![0.0; components * dim],
            d_weight_logits: vec![0.0; components],
        }
    }

    /// Length of the flattened form for a given mixture shape.
    pub fn flat_len(components: usize, dim: usize) -> usize {
        2 * components * dim + components
    }

    /// Splits a flat vector laid out as `[d_means | d_log_variances | d_weight_logits]`.
    pub fn from_flat(components: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::flat_len(components, dim) {
            return Err(shape(format!(
                "flat delta has {} entries, expected {}",
                flat.len(),
                Self::flat_len(components, dim)
            )));
        }
        let md = components * dim;
        Ok(Self {
            components,
            dim,
            d_means: flat[..md].to_vec(),
            d_log_variances: flat[md..2 * md].to_vec(),
            d_weight_logits: flat[2 * md..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_len(self.components, self.dim));
        v.extend_from_slice(&self.d_means);
        v.extend_from_slice(&self.d_log_variances);
        v.extend_from_slice(&self.d_weight_logits);
        v
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_finite(&self) -> bool {
        self.d_means
            .iter()
            .chain(&self.d_log_variances)
            .chain(&self.d_weight_logits)
            .all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.d_means
            .iter()
            .chain(&self.d_log_variances)
            .chain(&self.d_weight_logits)
            .all(|&v| v == 0.0)
    }
}

impl GaussianMixture {
    /// Builds a mixture from per-component means, diagonal variances and weights.
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 {
            return Err(invalid("mixture needs at least one component"));
        }
        if means.len() != m || variances.len() != m {
            return Err(shape(format!(
                "{} weights but {} means and {} variances",
                m,
                means.len(),
                variances.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(invalid("latent dimension must be positive"));
        }
        if means.iter().chain(&variances).any(|row| row.len() != d) {
            return Err(shape("ragged mean/variance rows"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite mean"));
        }
        if variances.iter().flatten().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(invalid("variances must be finite and positive"));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(invalid("weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            components: m,
            dim: d,
            means: means.into_iter().flatten().collect(),
            variances: variances.into_iter().flatten().collect(),
            weights,
        })
    }

    /// Equal weights, unit variances, means on a seed-rotated Halton set in
    /// `[-1, 1]^D`.
    ///
    /// The first coordinate follows the base-2 van der Corput sequence, so
    /// the means are pairwise distinct along it for any `M` (and evenly
    /// spaced when `M` is a power of two).
    pub fn init_uniform(components: usize, dim: usize, seed: u64) -> Result<Self> {
        if components == 0 || dim == 0 {
            return Err(invalid(format!("init_uniform needs M >= 1 and D >= 1 (got {components}, {dim})")));
        }
        let mut rng = rng_from_seed(seed);
        let shifts: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let primes = first_primes(dim);
        let mut means = Vec::with_capacity(components * dim);
        for k in 0..components {
            for d in 0..dim {
                let u = (radical_inverse(k as u64, primes[d]) + shifts[d]).fract();
                means.push(2.0 * u - 1.0);
            }
        }
        Ok(Self {
            components,
            dim,
            means,
            variances: vec![1.0; components * dim],
            weights: vec![1.0 / components as f64; components],
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, m: usize) -> &[f64] {
        &self.means[m * self.dim..(m + 1) * self.dim]
    }

    pub fn variance(&self, m: usize) -> &[f64] {
        &self.variances[m * self.dim..(m + 1) * self.dim]
    }

    pub fn means_flat(&self) -> &[f64] {
        &self.means
    }

    pub fn variances_flat(&self) -> &[f64] {
        &self.variances
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_variances(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.ln()).collect()
    }

    /// `ln(pi_m)`; any constant shift of these is an equivalent logit vector.
    pub fn weight_logits(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    /// Rebuilds a mixture from unconstrained coordinates. Variances are
    /// floored, weights pass through softmax.
    pub fn from_unconstrained(
        components: usize,
        dim: usize,
        means: Vec<f64>,
        log_variances: &[f64],
        weight_logits: &[f64],
        variance_floor: f64,
    ) -> Result<Self> {
        if means.len() != components * dim
            || log_variances.len() != components * dim
            || weight_logits.len() != components
        {
            return Err(shape("unconstrained parameter lengths do not match M and D"));
        }
        if means.iter().chain(log_variances).chain(weight_logits).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite mixture parameter"));
        }
        let variances = log_variances.iter().map(|lv| lv.exp().max(variance_floor)).collect();
        let weights = softmax_floored(weight_logits);
        Ok(Self { components, dim, means, variances, weights })
    }

    /// Draws the component indices and standard-normal noise for `n` samples.
    pub fn draw_reparam(&self, n: usize, seed: u64) -> Result<Vec<ReparamDraw>> {
        if n == 0 {
            return Err(invalid("sample count must be positive"));
        }
        let mut rng = rng_from_seed(seed);
        let mut cumulative = Vec::with_capacity(self.components);
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cumulative.push(acc);
        }
        let draws = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let component =
                    cumulative.iter().position(|&c| u < c).unwrap_or(self.components - 1);
                let eps = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                ReparamDraw { component, eps }
            })
            .collect();
        Ok(draws)
    }

    /// Maps a draw to its latent vector under this mixture's parameters.
    pub fn realize(&self, draw: &ReparamDraw) -> LatentSample {
        let c = draw.component;
        let z = self
            .mean(c)
            .iter()
            .zip(self.variance(c))
            .zip(&draw.eps)
            .map(|((mu, var), e)| mu + var.sqrt() * e)
            .collect();
        LatentSample { z, component: Some(c) }
    }

    /// `n` samples: component `i` with probability `pi_i`, then
    /// `z ~ N(mu_i, diag(var_i))`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<LatentSample>> {
        Ok(self.draw_reparam(n, seed)?.iter().map(|d| self.realize(d)).collect())
    }

    /// `ln pi_m + ln N(z | mu_m, var_m)` for each component.
    pub fn component_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(invalid(format!("point has dimension {}, mixture has {}", z.len(), self.dim)));
        }
        Ok((0..self.components)
            .map(|m| {
                let mut acc = 0.0;
                for ((x, mu), var) in z.iter().zip(self.mean(m)).zip(self.variance(m)) {
                    let d = x - mu;
                    acc += LN_2PI + var.ln() + d * d / var;
                }
                self.weights[m].ln() - 0.5 * acc
            })
            .collect())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_joint(z)?))
    }

    /// Posterior component membership `P(I = i | z)`.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.component_log_joint(z)?))
    }

    /// Applies `delta` scaled by `step` in unconstrained coordinates.
    pub fn apply_delta(&self, delta: &GmmDelta, step: f64, variance_floor: f64) -> Result<Self> {
        if delta.components != self.components || delta.dim != self.dim {
            return Err(shape(format!(
                "delta is {}x{}, mixture is {}x{}",
                delta.components, delta.dim, self.components, self.dim
            )));
        }
        if !delta.is_finite() {
            return Err(invalid("delta has non-finite entries"));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(invalid(format!("step must be positive, got {step}")));
        }
        let means = self.means.iter().zip(&delta.d_means).map(|(m, d)| m + step * d).collect();
        let log_vars: Vec<f64> = self
            .variances
            .iter()
            .zip(&delta.d_log_variances)
            .map(|(v, d)| v.ln() + step * d)
            .collect();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&delta.d_weight_logits)
            .map(|(w, d)| w.ln() + step * d)
            .collect();
        Self::from_unconstrained(self.components, self.dim, means, &log_vars, &logits, variance_floor)
    }

    /// Checks the simplex and variance-floor invariants.
    pub fn check_invariants(&self, variance_floor: f64) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvariantViolation(format!("weights not on the open simplex (sum {total})")));
        }
        if self.variances.iter().any(|&v| !(v >= variance_floor) || !v.is_finite()) {
            return Err(Error::InvariantViolation("variance below floor".into()));
        }
        if self.means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite mean".into()));
        }
        Ok(())
    }

    /// Returns a copy with new weights (validated).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.components {
            return Err(shape("weight count differs from component count"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid("weights must lie on the open simplex"));
        }
        Ok(Self { weights, ..self.clone() })
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Softmax with every entry kept above `WEIGHT_FLOOR`, then renormalized.
pub(crate) fn softmax_floored(xs: &[f64]) -> Vec<f64> {
    let mut w = softmax(xs);
    if w.iter().any(|&v| v < WEIGHT_FLOOR) {
        w.iter_mut().for_each(|v| *v = v.max(WEIGHT_FLOOR));
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    w
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * f;
        k /= base;
        f *= inv;
    }
    out
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}
