//! Acoustic word embeddings: Laplacian eigenmaps over a DTW kernel, with the
//! kernel out-of-sample extension for segments outside the reference set.
//!
//! Training solves `(L K + xi I) a = lambda K a`. Substituting `b = K a` turns
//! it into the symmetric problem `(L + xi K^-1) b = lambda b`, so the
//! reference set embeds to `b` and any segment `Y` embeds to
//! `h_j(Y) = sum_i a_ij k(Y_i, Y)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FrameSlice;
use crate::dtw::{self, DtwCost};
use crate::error::{Error, Result};

/// Ridge added to a singular Gram matrix before the single retry.
pub const GRAM_JITTER: f64 = 1e-8;

/// Embedding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedParams {
    pub dim: usize,
    pub knn: usize,
    pub sigma_k: f64,
    pub xi: f64,
    pub n_ref: usize,
    pub jitter_scale: f64,
    /// Candidates sampled to estimate the embedding spread; `None` uses all.
    pub sigma_e_sample: Option<usize>,
}

impl Default for EmbedParams {
    fn default() -> Self {
        Self {
            dim: 11,
            knn: 30,
            sigma_k: 0.04,
            xi: 2.0,
            n_ref: 8000,
            jitter_scale: 0.05,
            sigma_e_sample: Some(2000),
        }
    }
}

impl EmbedParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        if self.knn == 0 {
            return Err(Error::Config("knn must be at least 1".into()));
        }
        if !(self.sigma_k.is_finite() && self.sigma_k > 0.0) {
            return Err(Error::Config("sigma_k must be positive".into()));
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::Config("xi must be non-negative".into()));
        }
        if self.n_ref < self.dim + 1 {
            return Err(Error::Config(format!(
                "n_ref {} must exceed embedding dim {}",
                self.n_ref, self.dim
            )));
        }
        if !(self.jitter_scale.is_finite() && self.jitter_scale >= 0.0) {
            return Err(Error::Config("jitter_scale must be non-negative".into()));
        }
        if self.sigma_e_sample == Some(0) {
            return Err(Error::Config("sigma_e_sample must be positive".into()));
        }
        Ok(())
    }
}

/// Radial basis function of a DTW cost.
#[inline]
pub fn rbf_kernel(cost: DtwCost, sigma_k: f64) -> f64 {
    let c = cost.value();
    (-(c * c) / (2.0 * sigma_k * sigma_k)).exp()
}

/// A trained eigenmap projection.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    /// Reference exemplars, each flattened row-major with `feat_dim` columns.
    pub reference: Vec<Vec<f64>>,
    pub feat_dim: usize,
    pub sigma_k: f64,
    pub xi: f64,
    pub knn: usize,
    pub dim: usize,
    /// `n_ref x dim`; column `j` holds the weights of output dimension `j`.
    pub coefficients: DMatrix<f64>,
    /// Generalized eigenvalues of the retained directions.
    pub eigenvalues: Vec<f64>,
    pub jitter_scale: f64,
    /// Spread of raw embedding coordinates; set by calibration.
    pub sigma_e: Option<f64>,
    /// Diagonal ridge added to the Gram matrix to make it positive definite;
    /// zero when none was needed.
    pub gram_ridge: f64,
}

impl EmbeddingModel {
    pub fn n_ref(&self) -> usize {
        self.reference.len()
    }

    pub fn exemplar(&self, i: usize) -> FrameSlice<'_> {
        FrameSlice::new(&self.reference[i], self.feat_dim)
    }

    /// Model with caller-supplied coefficients and no training.
    pub fn from_parts(
        reference: Vec<Vec<f64>>,
        feat_dim: usize,
        sigma_k: f64,
        coefficients: DMatrix<f64>,
    ) -> Result<Self> {
        if coefficients.nrows() != reference.len() {
            return Err(Error::Config(format!(
                "{} coefficient rows for {} exemplars",
                coefficients.nrows(),
                reference.len()
            )));
        }
        if reference.iter().any(|r| r.is_empty() || r.len() % feat_dim != 0) {
            return Err(Error::Config("exemplars must be non-empty whole frames".into()));
        }
        Ok(Self {
            dim: coefficients.ncols(),
            reference,
            feat_dim,
            sigma_k,
            xi: 0.0,
            knn: 1,
            eigenvalues: Vec::new(),
            coefficients,
            jitter_scale: EmbedParams::default().jitter_scale,
            sigma_e: None,
            gram_ridge: 0.0,
        })
    }
}

/// Symmetric Gram matrix and the raw DTW costs behind it.
pub fn gram_matrix(reference: &[FrameSlice<'_>], sigma_k: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = reference.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| dtw::dtw_cost(reference[i], reference[j]).map(DtwCost::value))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut cost = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (off, &c) in row.iter().enumerate() {
            let j = i + 1 + off;
            cost[(i, j)] = c;
            cost[(j, i)] = c;
        }
    }
    let gram = cost.map(|c| rbf_kernel(DtwCost(c), sigma_k));
    Ok((gram, cost))
}

/// Union-symmetrized k-nearest-neighbour graph with kernel edge weights.
pub fn knn_graph(cost: &DMatrix<f64>, gram: &DMatrix<f64>, knn: usize) -> DMatrix<f64> {
    let n = cost.nrows();
    let k = knn.min(n.saturating_sub(1));
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| cost[(i, a)].total_cmp(&cost[(i, b)]).then(a.cmp(&b)));
        for &j in &others[..k] {
            w[(i, j)] = gram[(i, j)];
            w[(j, i)] = gram[(i, j)];
        }
    }
    w
}

/// `I - D^-1/2 W D^-1/2`; isolated nodes keep an identity row.
pub fn normalized_laplacian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = w.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let off = w[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    })
}

/// Restricts symmetric `m` to the complement of the graph's trivial
/// direction `u = Deg^1/2 1`: returns `P m P + c u u^T` with `P = I - u u^T`
/// and `c` above every other eigenvalue. The regularizer does not keep `u`
/// an eigenvector, so skipping the smallest eigenpair alone can retain a
/// near-constant direction.
fn deflate_trivial(m: DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut u = DVector::from_fn(n, |i, _| w.row(i).sum().sqrt());
    let norm = u.norm();
    if !(norm > 0.0) {
        return m;
    }
    u /= norm;
    let mu = &m * &u;
    let umu = u.dot(&mu);
    // P m P = m - mu u^T - u mu^T + (u^T m u) u u^T
    let mut out = m - &mu * u.transpose() - &u * mu.transpose() + &u * u.transpose() * umu;
    // Gershgorin bound on the complement spectrum
    let bound = (0..n).map(|i| out.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    out += &u * u.transpose() * (bound + 1.0);
    (&out + out.transpose()) * 0.5
}

/// Cholesky factor of the Gram matrix. DTW kernels need not be positive
/// semi-definite, so on failure a `GRAM_JITTER` ridge is tried, then a shift
/// past the most negative eigenvalue. Returns the matrix actually factored.
fn factor_gram(gram: DMatrix<f64>) -> Result<(DMatrix<f64>, f64, Cholesky<f64, Dyn>)> {
    if let Some(c) = gram.clone().cholesky() {
        return Ok((gram, 0.0, c));
    }
    let n = gram.nrows();
    let ridged = |r: f64| &gram + DMatrix::identity(n, n) * r;
    let mut ridge = GRAM_JITTER;
    let mut attempt = ridged(ridge).cholesky();
    if attempt.is_none() {
        let min_eig = gram.symmetric_eigenvalues().min();
        ridge = (-min_eig).max(0.0) * (1.0 + 1e-6) + GRAM_JITTER;
        attempt = ridged(ridge).cholesky();
    }
    let chol = attempt.ok_or_else(|| Error::Numerical("gram matrix could not be made positive definite".into()))?;
    log::warn!("gram matrix is not positive definite; added {ridge:.3e} to the diagonal");
    Ok((ridged(ridge), ridge, chol))
}

/// Trains the eigenmap on `reference`.
pub fn train_eigenmaps(
    reference: &[FrameSlice<'_>],
    knn: usize,
    sigma_k: f64,
    xi: f64,
    dim: usize,
) -> Result<EmbeddingModel> {
    let n = reference.len();
    if dim == 0 || dim + 1 > n {
        return Err(Error::Config(format!(
            "embedding dim {dim} needs at least {} exemplars, got {n}",
            dim + 1
        )));
    }
    if !(sigma_k > 0.0) || !(xi >= 0.0) || knn == 0 {
        return Err(Error::Config("sigma_k > 0, xi >= 0 and knn >= 1 required".into()));
    }
    let feat_dim = reference[0].dim();
    if reference.iter().any(|r| r.is_empty() || r.dim() != feat_dim) {
        return Err(Error::Config("exemplars must be non-empty with equal frame dim".into()));
    }

    let (gram, cost) = gram_matrix(reference, sigma_k)?;
    let w = knn_graph(&cost, &gram, knn);
    let lap = normalized_laplacian(&w);

    let (gram, gram_ridge, chol) = factor_gram(gram)?;
    let gram_inv = chol.inverse();
    let mut m = &lap + &gram_inv * xi;
    m = (&m + m.transpose()) * 0.5;
    let m = deflate_trivial(m, &w);
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));

    let mut coefficients = DMatrix::zeros(n, dim);
    let mut eigenvalues = Vec::with_capacity(dim);
    // the trivial direction sits at the top of the spectrum after deflation
    for (col, &idx) in order[..dim].iter().enumerate() {
        let mut b: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let scale = b.amax();
        if let Some(first) = b.iter().copied().find(|v| v.abs() > 1e-10 * scale) {
            if first < 0.0 {
                b.neg_mut();
            }
        }
        let a = chol.solve(&b);
        let embedded = &gram * &a;
        let sd = sample_std(embedded.as_slice());
        if !(sd.is_finite() && sd > 0.0) {
            return Err(Error::Numerical(format!(
                "embedded reference set has zero spread in dimension {col}"
            )));
        }
        coefficients.set_column(col, &(a / sd));
        eigenvalues.push(eig.eigenvalues[idx]);
    }

    Ok(EmbeddingModel {
        reference: reference.iter().map(FrameSlice::to_vec).collect(),
        feat_dim,
        sigma_k,
        xi,
        knn,
        dim,
        coefficients,
        eigenvalues,
        jitter_scale: EmbedParams::default().jitter_scale,
        sigma_e: None,
        gram_ridge,
    })
}

pub(crate) fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Kernel vector of `segment` against every exemplar.
pub fn kernel_vector(model: &EmbeddingModel, segment: FrameSlice<'_>) -> Result<Vec<f64>> {
    (0..model.n_ref())
        .map(|i| dtw::dtw_cost(segment, model.exemplar(i)).map(|c| rbf_kernel(c, model.sigma_k)))
        .collect()
}

/// Unnormalized embedding `[h_1(Y), ..., h_D(Y)]`.
pub fn embed_raw(model: &EmbeddingModel, segment: FrameSlice<'_>) -> Result<Vec<f64>> {
    let kvec = kernel_vector(model, segment)?;
    let mut out = vec![0.0; model.dim];
    accumulate_projection(&model.coefficients, &kvec, &mut out);
    Ok(out)
}

/// `out[j] += sum_i coefficients[i, j] * kvec[i]`, summing in exemplar order.
pub(crate) fn accumulate_projection(coefficients: &DMatrix<f64>, kvec: &[f64], out: &mut [f64]) {
    for (i, &k) in kvec.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += coefficients[(i, j)] * k;
        }
    }
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; fails on a zero vector.
    pub fn from_vec(mut v: Vec<f64>) -> Result<Self> {
        let n = dtw::norm(&v);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numerical("cannot normalize a zero embedding".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Adds `N(0, (jitter_scale * sigma_e)^2)` noise to each coordinate and
/// projects onto the unit sphere. Noise is redrawn once if the result is zero.
pub fn finalize_embedding<R: Rng + ?Sized>(
    raw: &[f64],
    sigma_e: f64,
    jitter_scale: f64,
    rng: &mut R,
) -> Result<Embedding> {
    if !(sigma_e >= 0.0) {
        return Err(Error::Config("sigma_e must be non-negative".into()));
    }
    let sd = jitter_scale * sigma_e;
    for _ in 0..2 {
        let v: Vec<f64> = raw
            .iter()
            .map(|&x| x + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if dtw::norm(&v) > 0.0 {
            return Embedding::from_vec(v);
        }
    }
    Err(Error::Numerical(
        "embedding is exactly zero after jitter".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn kernel_reference_values() {
        assert_eq!(rbf_kernel(DtwCost(0.0), 0.04), 1.0);
        let s = 0.04;
        let v = rbf_kernel(DtwCost(s * 2f64.sqrt()), s);
        assert!((v - (-1f64).exp()).abs() < 1e-12);
        assert!((rbf_kernel(DtwCost(0.04), 0.04) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn pure_normalization_without_jitter() {
        let e = finalize_embedding(&[3.0, 4.0], 1.0, 0.0, &mut rng_from(1)).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_without_noise_errors() {
        let err = finalize_embedding(&[0.0, 0.0], 0.0, 0.05, &mut rng_from(1)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn finalize_is_deterministic_per_seed() {
        let raw = [0.1, -0.2, 0.3];
        let a = finalize_embedding(&raw, 0.5, 0.05, &mut rng_from(9)).unwrap();
        let b = finalize_embedding(&raw, 0.5, 0.05, &mut rng_from(9)).unwrap();
        assert_eq!(a, b);
    }

    fn toy_reference(n: usize, len: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| (0..len * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_coefficients_give_zero_vector() {
        let reference = toy_reference(4, 3, 2, 3);
        let model =
            EmbeddingModel::from_parts(reference, 2, 0.3, DMatrix::zeros(4, 2)).unwrap();
        let y = [0.5, 0.5, -0.1, 0.2];
        assert_eq!(embed_raw(&model, FrameSlice::new(&y, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn basis_coefficients_pick_out_one_kernel() {
        let reference = toy_reference(4, 3, 2, 4);
        let mut coef = DMatrix::zeros(4, 2);
        coef[(2, 1)] = 1.0;
        let model = EmbeddingModel::from_parts(reference.clone(), 2, 0.3, coef).unwrap();
        let y = [0.5, 0.5, -0.1, 0.2, 0.3, 0.3];
        let ys = FrameSlice::new(&y, 2);
        let h = embed_raw(&model, ys).unwrap();
        let k = rbf_kernel(dtw::dtw_cost(FrameSlice::new(&reference[2], 2), ys).unwrap(), 0.3);
        assert_eq!(h[0], 0.0);
        assert_eq!(h[1], k);
    }

    #[test]
    fn identical_exemplars_take_the_ridge_fallback() {
        let frames = vec![0.2, 0.9, 0.4, 0.1, 0.7, 0.7];
        let other = vec![0.9, -0.2, 0.1, 0.8];
        let reference = vec![
            FrameSlice::new(&frames, 2),
            FrameSlice::new(&frames, 2),
            FrameSlice::new(&other, 2),
        ];
        let model = train_eigenmaps(&reference, 2, 0.1, 2.0, 1).unwrap();
        assert!(model.gram_ridge > 0.0);
        assert_eq!(model.coefficients.shape(), (3, 1));
    }

    #[test]
    fn dim_too_large_rejected() {
        let reference = toy_reference(3, 2, 2, 5);
        let slices: Vec<_> = reference.iter().map(|r| FrameSlice::new(r, 2)).collect();
        assert!(matches!(
            train_eigenmaps(&slices, 2, 0.5, 2.0, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coefficient_shape_is_nref_by_dim() {
        let reference = toy_reference(9, 4, 3, 6);
        let slices: Vec<_> = reference.iter().map(|r| FrameSlice::new(r, 3)).collect();
        let model = train_eigenmaps(&slices, 3, 0.1, 2.0, 4).unwrap();
        assert_eq!(model.coefficients.shape(), (9, 4));
        assert_eq!(model.eigenvalues.len(), 4);
        assert!(model.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn deflation_moves_trivial_direction_to_the_top() {
        let mut rng = rng_from(12);
        let n = 7;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = &a + a.transpose();
        let w = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.1 + ((i * j) % 5) as f64 * 0.1 });
        let out = deflate_trivial(m.clone(), &w);
        let mut u = DVector::from_fn(n, |i, _| w.row(i).sum().sqrt());
        u /= u.norm();
        let eig = SymmetricEigen::new(out.clone());
        let top = eig.eigenvalues.imax();
        assert!(eig.eigenvectors.column(top).dot(&u).abs() > 1.0 - 1e-9);
        // on the complement the operator is m compressed by the projector
        let p = DMatrix::identity(n, n) - &u * u.transpose();
        let v = &p * DVector::from_fn(n, |i, _| (i as f64).sin());
        assert!((&out * &v - &p * (&m * &v)).amax() < 1e-12);
    }

    #[test]
    fn gram_matrix_is_symmetric_with_unit_diagonal() {
        let reference = toy_reference(6, 3, 2, 8);
        let slices: Vec<_> = reference.iter().map(|r| FrameSlice::new(r, 2)).collect();
        let (gram, _) = gram_matrix(&slices, 0.3).unwrap();
        for i in 0..6 {
            assert_eq!(gram[(i, i)], 1.0);
            for j in 0..6 {
                assert_eq!(gram[(i, j)], gram[(j, i)]);
                assert!(gram[(i, j)] > 0.0 && gram[(i, j)] <= 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_linear_in_coefficients(
            seed in 0u64..1000,
            a in prop::collection::vec(-2.0f64..2.0, 10),
            b in prop::collection::vec(-2.0f64..2.0, 10),
        ) {
            let reference = toy_reference(5, 3, 2, seed);
            let ca = DMatrix::from_column_slice(5, 2, &a);
            let cb = DMatrix::from_column_slice(5, 2, &b);
            let y = toy_reference(1, 4, 2, seed + 1).remove(0);
            let ys = FrameSlice::new(&y, 2);
            let ha = embed_raw(&EmbeddingModel::from_parts(reference.clone(), 2, 0.4, ca.clone()).unwrap(), ys).unwrap();
            let hb = embed_raw(&EmbeddingModel::from_parts(reference.clone(), 2, 0.4, cb.clone()).unwrap(), ys).unwrap();
            let hab = embed_raw(&EmbeddingModel::from_parts(reference, 2, 0.4, ca + cb).unwrap(), ys).unwrap();
            for j in 0..2 {
                prop_assert!((hab[j] - (ha[j] + hb[j])).abs() < 1e-12);
            }
        }

        #[test]
        fn finalized_norm_is_one(raw in prop::collection::vec(-5.0f64..5.0, 1..16), seed in 0u64..100) {
            let e = finalize_embedding(&raw, 1.0, 0.05, &mut rng_from(seed)).unwrap();
            prop_assert!((dtw::norm(e.as_slice()) - 1.0).abs() < 1e-9);
        }
    }
}
