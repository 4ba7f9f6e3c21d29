//! Bayesian Gaussian mixture with a fixed spherical covariance, sampled by
//! collapsed Gibbs.
//!
//! Mixture weights carry a symmetric `Dir(a/K)` prior and component means a
//! `N(mu0, sigma0^2 I)` prior; both are integrated out, so the state is just
//! per-component counts and coordinate sums.
//!
//! Sums are kept in 64.64 fixed point. Adding and removing an embedding are
//! then exact inverses, and the statistics never depend on mutation order.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the acoustic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmHyper {
    /// Maximum number of components.
    pub k: usize,
    /// Dirichlet concentration; each component gets `a / k`.
    pub a: f64,
    pub mu0: Vec<f64>,
    pub sigma0_sq: f64,
    pub sigma_sq: f64,
}

impl GmmHyper {
    /// `sigma0^2 = sigma^2 / kappa0`, zero prior mean.
    pub fn with_kappa0(dim: usize, k: usize, a: f64, sigma_sq: f64, kappa0: f64) -> Result<Self> {
        let h = Self {
            k,
            a,
            mu0: vec![0.0; dim],
            sigma0_sq: sigma_sq / kappa0,
            sigma_sq,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !pos(self.a) || !pos(self.sigma0_sq) || !pos(self.sigma_sq) {
            return Err(Error::Config("a, sigma0_sq and sigma_sq must be positive".into()));
        }
        if self.mu0.is_empty() || self.mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mu0 must be a finite non-empty vector".into()));
        }
        Ok(())
    }
}

/// Configuration-level GMM settings; the prior mean is zero and
/// `sigma0^2 = sigma^2 / kappa0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmParams {
    pub k: usize,
    pub a: f64,
    pub sigma_sq: f64,
    pub kappa0: f64,
}

impl Default for GmmParams {
    fn default() -> Self {
        Self {
            k: 100,
            a: 1.0,
            sigma_sq: 0.005,
            kappa0: 0.05,
        }
    }
}

impl GmmParams {
    pub fn hyper(&self, dim: usize) -> Result<GmmHyper> {
        if !(self.kappa0.is_finite() && self.kappa0 > 0.0) {
            return Err(Error::Config("kappa0 must be positive".into()));
        }
        GmmHyper::with_kappa0(dim, self.k, self.a, self.sigma_sq, self.kappa0)
    }
}

/// Handle to an embedding currently held by a [`GmmState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemId(usize);

const FIXED_SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64
const MAX_ABS_COORD: f64 = 1.0e12;

fn to_fixed(x: f64) -> i128 {
    (x * FIXED_SCALE).round() as i128
}

fn from_fixed(v: i128) -> f64 {
    v as f64 / FIXED_SCALE
}

/// Per-component sufficient statistics plus the held items.
#[derive(Debug, Clone)]
pub struct GmmState {
    hyper: GmmHyper,
    counts: Vec<usize>,
    sums_fixed: Vec<i128>,
    sums: Vec<f64>,
    n: usize,
    items: Vec<Option<(usize, Vec<f64>)>>,
    free: Vec<usize>,
}

impl GmmState {
    pub fn new(hyper: GmmHyper) -> Result<Self> {
        hyper.validate()?;
        let (k, d) = (hyper.k, hyper.dim());
        Ok(Self {
            counts: vec![0; k],
            sums_fixed: vec![0; k * d],
            sums: vec![0.0; k * d],
            n: 0,
            items: Vec::new(),
            free: Vec::new(),
            hyper,
        })
    }

    pub fn hyper(&self) -> &GmmHyper {
        &self.hyper
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Sum of the embeddings held by component `k`.
    pub fn sum(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.sums[k * d..(k + 1) * d]
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn component_of(&self, id: ItemId) -> Option<usize> {
        self.items.get(id.0).and_then(|s| s.as_ref()).map(|(k, _)| *k)
    }

    fn check(&self, k: usize, x: &[f64]) -> Result<()> {
        if k >= self.k() {
            return Err(Error::Model(format!("component {k} out of range 0..{}", self.k())));
        }
        if x.len() != self.dim() {
            return Err(Error::Model(format!(
                "embedding of dim {} in a dim {} model",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !(v.is_finite() && v.abs() < MAX_ABS_COORD)) {
            return Err(Error::Model("embedding coordinates must be finite and bounded".into()));
        }
        Ok(())
    }

    fn refresh(&mut self, k: usize) {
        let d = self.dim();
        for j in k * d..(k + 1) * d {
            self.sums[j] = from_fixed(self.sums_fixed[j]);
        }
    }

    /// Assigns `x` to component `k`.
    pub fn add(&mut self, k: usize, x: &[f64]) -> Result<ItemId> {
        self.check(k, x)?;
        let d = self.dim();
        for (j, &v) in x.iter().enumerate() {
            self.sums_fixed[k * d + j] += to_fixed(v);
        }
        self.refresh(k);
        self.counts[k] += 1;
        self.n += 1;
        let slot = Some((k, x.to_vec()));
        let id = match self.free.pop() {
            Some(i) => {
                self.items[i] = slot;
                i
            }
            None => {
                self.items.push(slot);
                self.items.len() - 1
            }
        };
        Ok(ItemId(id))
    }

    /// Takes the item back out, returning its component and embedding.
    pub fn remove(&mut self, id: ItemId) -> Result<(usize, Vec<f64>)> {
        let (k, x) = self
            .items
            .get_mut(id.0)
            .and_then(Option::take)
            .ok_or_else(|| Error::Model(format!("item {} is not in the model", id.0)))?;
        if self.counts[k] == 0 {
            return Err(Error::Model(format!("component {k} is already empty")));
        }
        let d = self.dim();
        for (j, &v) in x.iter().enumerate() {
            self.sums_fixed[k * d + j] -= to_fixed(v);
        }
        self.refresh(k);
        self.counts[k] -= 1;
        self.n -= 1;
        self.free.push(id.0);
        Ok((k, x))
    }

    /// Recomputes counts and sums from the held items in plain `f64`.
    pub fn recompute(&self) -> (Vec<usize>, Vec<f64>) {
        let d = self.dim();
        let mut counts = vec![0; self.k()];
        let mut sums = vec![0.0; self.k() * d];
        for (k, x) in self.items.iter().flatten() {
            counts[*k] += 1;
            for (j, v) in x.iter().enumerate() {
                sums[k * d + j] += v;
            }
        }
        (counts, sums)
    }

    fn excluded(&self, exclude: Option<ItemId>) -> Option<(usize, &[f64])> {
        exclude.and_then(|id| {
            self.items
                .get(id.0)
                .and_then(|s| s.as_ref())
                .map(|(k, x)| (*k, x.as_slice()))
        })
    }

    /// `log P(z = k | z_rest)`. With `exclude`, the held item is left out of
    /// the counts (`(N_k\i + a/K) / (N + a - 1)`); without it the value is the
    /// predictive for a new item (`(N_k + a/K) / (N + a)`).
    pub fn log_prior_z(&self, k: usize, exclude: Option<ItemId>) -> f64 {
        let h = &self.hyper;
        let ex = self.excluded(exclude);
        let n_k = self.counts[k] - usize::from(matches!(ex, Some((c, _)) if c == k));
        let n_rest = self.n - usize::from(ex.is_some());
        ((n_k as f64 + h.a / h.k as f64) / (n_rest as f64 + h.a)).ln()
    }

    /// Posterior over component `k`'s mean: `(n, sigma_N^2, mu_N)`.
    pub fn posterior_mean(&self, k: usize, exclude: Option<ItemId>) -> (usize, f64, Vec<f64>) {
        let h = &self.hyper;
        let d = self.dim();
        let ex = self.excluded(exclude).filter(|(c, _)| *c == k);
        let n = self.counts[k] - usize::from(ex.is_some());
        let var_n = h.sigma_sq * h.sigma0_sq / (n as f64 * h.sigma0_sq + h.sigma_sq);
        let mu = (0..d)
            .map(|j| {
                let mut s = self.sums_fixed[k * d + j];
                if let Some((_, x)) = ex {
                    s -= to_fixed(x[j]);
                }
                var_n * (h.mu0[j] / h.sigma0_sq + from_fixed(s) / h.sigma_sq)
            })
            .collect();
        (n, var_n, mu)
    }

    /// `log p(x | X_k)` under the posterior predictive `N(mu_N, (sigma_N^2 + sigma^2) I)`.
    pub fn log_post_predictive(&self, k: usize, x: &[f64], exclude: Option<ItemId>) -> f64 {
        let (_, var_n, mu) = self.posterior_mean(k, exclude);
        log_normal_spherical(x, &mu, var_n + self.hyper.sigma_sq)
    }

    /// Per-component joint terms `log P(z=k) + log p(x | X_k)`.
    pub fn log_joint_terms(&self, x: &[f64], exclude: Option<ItemId>) -> Vec<f64> {
        (0..self.k())
            .map(|k| self.log_prior_z(k, exclude) + self.log_post_predictive(k, x, exclude))
            .collect()
    }

    /// `log p(x | everything held)`, marginalizing over the component.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint_terms(x, None))
    }

    /// Draws a component for a new `x` from its collapsed conditional and adds it.
    pub fn sample_assignment<R: Rng + ?Sized>(&mut self, x: &[f64], rng: &mut R) -> Result<(usize, ItemId)> {
        self.check(0, x)?;
        let terms = self.log_joint_terms(x, None);
        let k = sample_log_weights(&terms, 1.0, rng);
        let id = self.add(k, x)?;
        Ok((k, id))
    }

    /// Frozen scoring table for many `log_marginal` calls between mutations.
    pub fn predictive_table(&self) -> PredictiveTable {
        let d = self.dim();
        let mut means = Vec::with_capacity(self.k() * d);
        let mut inv_two_var = Vec::with_capacity(self.k());
        let mut offsets = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let (_, var_n, mu) = self.posterior_mean(k, None);
            let var = var_n + self.hyper.sigma_sq;
            means.extend(mu);
            inv_two_var.push(0.5 / var);
            offsets.push(self.log_prior_z(k, None) - 0.5 * d as f64 * (2.0 * PI * var).ln());
        }
        PredictiveTable {
            dim: d,
            means,
            inv_two_var,
            offsets,
        }
    }

    pub fn snapshot(&self, assignments: Vec<Vec<usize>>) -> GmmSnapshot {
        GmmSnapshot {
            hyper: self.hyper.clone(),
            counts: self.counts.clone(),
            sums: (0..self.k()).map(|k| self.sum(k).to_vec()).collect(),
            assignments,
        }
    }
}

/// Checkpoint of a model: hyperparameters, statistics, and the component of
/// every token (grouped per utterance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSnapshot {
    pub hyper: GmmHyper,
    pub counts: Vec<usize>,
    pub sums: Vec<Vec<f64>>,
    pub assignments: Vec<Vec<usize>>,
}

/// Posterior predictive parameters for every component at one instant.
#[derive(Debug, Clone)]
pub struct PredictiveTable {
    dim: usize,
    means: Vec<f64>,
    inv_two_var: Vec<f64>,
    offsets: Vec<f64>,
}

impl PredictiveTable {
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.offsets.len());
        for (k, &off) in self.offsets.iter().enumerate() {
            let mu = &self.means[k * self.dim..(k + 1) * self.dim];
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            let t = off - sq * self.inv_two_var[k];
            best = best.max(t);
            terms.push(t);
        }
        if best == f64::NEG_INFINITY {
            return best;
        }
        best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
    }
}

/// Sum over dimensions of `log N(x_d; mu_d, var)`.
pub fn log_normal_spherical(x: &[f64], mu: &[f64], var: f64) -> f64 {
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * x.len() as f64 * (2.0 * PI * var).ln() - sq / (2.0 * var)
}

/// Max-shifted `log sum exp`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Draws an index with probability proportional to `exp(scale * w_i)`.
pub fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], scale: f64, rng: &mut R) -> usize {
    let max = log_weights
        .iter()
        .map(|w| scale * w)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "no finite weight to sample from");
    let probs: Vec<f64> = log_weights.iter().map(|w| (scale * w - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    // rounding left u at the very top; take the last positive weight
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
