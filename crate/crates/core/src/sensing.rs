//! Sensing-matrix ensembles and the measurement model `y = Q(Ax + n)`.
//!
//! The model caches a full SVD of `A` once; every per-iteration Gaussian
//! computation downstream only rescales the singular values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, QcsError, Result};
use crate::quantizer::{QuantizerConfig, QuantizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    RowOrthogonal,
    IllConditioned,
    Correlated,
}

impl std::str::FromStr for EnsembleKind {
    type Err = QcsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "row_orthogonal" => Ok(EnsembleKind::RowOrthogonal),
            "ill_conditioned" => Ok(EnsembleKind::IllConditioned),
            "correlated" => Ok(EnsembleKind::Correlated),
            other => Err(QcsError::invalid(format!("unknown ensemble kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub m: usize,
    pub n: usize,
    /// Ratio of largest to smallest nonzero singular value (ill-conditioned only).
    #[serde(default = "one")]
    pub condition_number: f64,
    /// Toeplitz correlation coefficient `rho` (correlated only).
    #[serde(default)]
    pub correlation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl EnsembleSpec {
    pub fn row_orthogonal(m: usize, n: usize, seed: u64) -> Self {
        EnsembleSpec {
            kind: EnsembleKind::RowOrthogonal,
            m,
            n,
            condition_number: 1.0,
            correlation: 0.0,
            seed,
        }
    }

    pub fn ill_conditioned(m: usize, n: usize, kappa: f64, seed: u64) -> Self {
        EnsembleSpec {
            kind: EnsembleKind::IllConditioned,
            condition_number: kappa,
            ..Self::row_orthogonal(m, n, seed)
        }
    }

    pub fn correlated(m: usize, n: usize, rho: f64, seed: u64) -> Self {
        EnsembleSpec {
            kind: EnsembleKind::Correlated,
            correlation: rho,
            ..Self::row_orthogonal(m, n, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(QcsError::invalid(format!(
                "matrix dimensions must be positive, got {}x{}",
                self.m, self.n
            )));
        }
        match self.kind {
            EnsembleKind::IllConditioned if !(self.condition_number >= 1.0) => Err(
                QcsError::invalid(format!(
                    "condition number must be >= 1, got {}",
                    self.condition_number
                )),
            ),
            EnsembleKind::IllConditioned if !self.condition_number.is_finite() => {
                Err(QcsError::invalid("condition number must be finite"))
            }
            EnsembleKind::Correlated if !(0.0..1.0).contains(&self.correlation) => Err(
                QcsError::invalid(format!(
                    "correlation must lie in [0, 1), got {}",
                    self.correlation
                )),
            ),
            EnsembleKind::RowOrthogonal if self.m > self.n => Err(QcsError::invalid(format!(
                "row-orthogonal ensemble needs m <= n, got {}x{}",
                self.m, self.n
            ))),
            _ => Ok(()),
        }
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Row-major fill so that the draw order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// columns of `Q` rescaled by the signs of `diag(R)`.
pub fn haar_orthogonal<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let qr = gaussian_matrix(n, n, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `(i, j) -> rho^|i-j|`.
pub fn toeplitz_correlation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Symmetric square root through the eigendecomposition.
pub fn symmetric_sqrt(r: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(r.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Singular values of the ill-conditioned ensemble: a geometric progression
/// whose extremes differ by exactly `kappa`, scaled so the squares sum to `n`.
pub fn geometric_singular_values(rank: usize, n: usize, kappa: f64) -> Vec<f64> {
    let mut s: Vec<f64> = if rank == 1 {
        vec![1.0]
    } else {
        let ratio = kappa.powf(1.0 / (rank - 1) as f64);
        (0..rank).map(|i| ratio.powi(-(i as i32))).collect()
    };
    let scale = (n as f64 / s.iter().map(|v| v * v).sum::<f64>()).sqrt();
    s.iter_mut().for_each(|v| *v *= scale);
    s
}

/// Draws a sensing matrix from the ensemble. Pure in `(spec, spec.seed)`.
pub fn generate_matrix(spec: &EnsembleSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, n) = (spec.m, spec.n);
    let a = match spec.kind {
        EnsembleKind::RowOrthogonal => {
            let basis = haar_orthogonal(n, &mut rng);
            let scale = (n as f64 / m as f64).sqrt();
            basis.rows(0, m).into_owned() * scale
        }
        EnsembleKind::IllConditioned => {
            let rank = m.min(n);
            let left = haar_orthogonal(m, &mut rng);
            let right = haar_orthogonal(n, &mut rng);
            let s = geometric_singular_values(rank, n, spec.condition_number);
            let sigma = DMatrix::from_diagonal(&DVector::from_vec(s));
            left.columns(0, rank) * sigma * right.columns(0, rank).transpose()
        }
        EnsembleKind::Correlated => {
            let h = gaussian_matrix(m, n, &mut rng);
            if spec.correlation == 0.0 {
                h
            } else {
                let left = symmetric_sqrt(&toeplitz_correlation(m, spec.correlation));
                let right = symmetric_sqrt(&toeplitz_correlation(n, spec.correlation));
                left * h * right
            }
        }
    };
    Ok(a)
}

/// Sensing matrix with its cached SVD and the additive noise level.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    a: DMatrix<f64>,
    noise_std: f64,
    svd_u: DMatrix<f64>,
    svd_s: DVector<f64>,
    svd_v: DMatrix<f64>,
    row_norms_sq: DVector<f64>,
}

impl MeasurementModel {
    pub fn new(a: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        let (m, n) = a.shape();
        if m == 0 || n == 0 {
            return Err(QcsError::invalid("sensing matrix must be non-empty"));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(QcsError::invalid(format!(
                "noise std must be finite and >= 0, got {noise_std}"
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(QcsError::NonFinite("sensing matrix entry".into()));
        }

        let rank = m.min(n);
        let svd = a.clone().svd(true, true);
        let u_thin = svd.u.expect("svd computed with u");
        let v_t = svd.v_t.expect("svd computed with v");
        let mut order: Vec<usize> = (0..rank).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

        let mut svd_s = DVector::zeros(m);
        let mut u = DMatrix::zeros(m, m);
        let mut svd_v = DMatrix::zeros(n, rank);
        for (dst, &src) in order.iter().enumerate() {
            svd_s[dst] = svd.singular_values[src].max(0.0);
            u.set_column(dst, &u_thin.column(src));
            svd_v.set_column(dst, &v_t.row(src).transpose());
        }
        if m > rank {
            let complement = orthogonal_complement(&u.columns(0, rank).into_owned());
            u.columns_mut(rank, m - rank).copy_from(&complement);
        }

        let row_norms_sq = DVector::from_iterator(m, a.row_iter().map(|r| r.norm_squared()));

        Ok(MeasurementModel {
            a,
            noise_std,
            svd_u: u,
            svd_s,
            svd_v,
            row_norms_sq,
        })
    }

    pub fn generate(spec: &EnsembleSpec, noise_std: f64) -> Result<Self> {
        Self::new(generate_matrix(spec)?, noise_std)
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn with_noise_std(&self, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(QcsError::invalid(format!("invalid noise std {noise_std}")));
        }
        Ok(MeasurementModel {
            noise_std,
            ..self.clone()
        })
    }

    /// Full `M x M` left singular basis.
    pub fn svd_u(&self) -> &DMatrix<f64> {
        &self.svd_u
    }

    /// `M` singular values, descending, zero-padded when `M > N`.
    pub fn svd_s(&self) -> &DVector<f64> {
        &self.svd_s
    }

    /// Thin right singular basis, `N x min(M, N)`.
    pub fn svd_v(&self) -> &DMatrix<f64> {
        &self.svd_v
    }

    pub fn row_norms_sq(&self) -> &DVector<f64> {
        &self.row_norms_sq
    }

    /// Largest over smallest nonzero singular value.
    pub fn condition_number(&self) -> f64 {
        let smax = self.svd_s[0];
        let tol = smax * 1e-12 * self.m().max(self.n()) as f64;
        let smin = self
            .svd_s
            .iter()
            .copied()
            .filter(|&s| s > tol)
            .fold(f64::INFINITY, f64::min);
        smax / smin
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len("forward operator input", self.n(), x.len())?;
        Ok(&self.a * x)
    }

    pub fn adjoint(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len("adjoint operator input", self.m(), g.len())?;
        Ok(self.a.tr_mul(g))
    }

    /// Eigenvalues `sigma^2 + beta^2 s_i^2` of the perturbed noise covariance
    /// `sigma^2 I + beta^2 A A^T`, aligned with the columns of `svd_u`.
    pub fn gaussian_covariance_eigs(&self, beta: f64) -> DVector<f64> {
        let var = self.noise_std * self.noise_std;
        let b2 = beta * beta;
        self.svd_s.map(|s| var + b2 * s * s)
    }

    /// Draws `y = Q(Ax + n)`; returns `(y, Ax)`. Deterministic in `seed`.
    pub fn simulate(
        &self,
        quantizer: &QuantizerSpec,
        x: &DVector<f64>,
        seed: u64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let z = self.forward(x)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(QcsError::NonFinite("signal A x".into()));
        }
        let noisy = self.add_noise(&z, seed);
        let y = quantizer.quantize(noisy.as_slice())?;
        Ok((DVector::from_vec(y), z))
    }

    /// Like [`simulate`](Self::simulate) but resolves an auto-saturating
    /// quantizer from the clean signal first.
    pub fn simulate_with_config(
        &self,
        config: &QuantizerConfig,
        x: &DVector<f64>,
        seed: u64,
    ) -> Result<(QuantizerSpec, DVector<f64>, DVector<f64>)> {
        let z = self.forward(x)?;
        let quantizer = config.resolve(z.as_slice())?;
        let (y, z) = self.simulate(&quantizer, x, seed)?;
        Ok((quantizer, y, z))
    }

    fn add_noise(&self, z: &DVector<f64>, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        z.map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + self.noise_std * e
        })
    }
}

/// Orthonormal basis for the complement of the column span of `u`
/// (which must have orthonormal columns).
fn orthogonal_complement(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, r) = u.shape();
    let projector = DMatrix::identity(m, m) - u * u.transpose();
    let eig = SymmetricEigen::new(projector);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut out = DMatrix::zeros(m, m - r);
    for (dst, &src) in idx.iter().take(m - r).enumerate() {
        out.set_column(dst, &eig.eigenvectors.column(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn reconstruct(model: &MeasurementModel) -> DMatrix<f64> {
        let (m, n) = (model.m(), model.n());
        let r = m.min(n);
        let s = DMatrix::from_diagonal(&model.svd_s().rows(0, r).into_owned());
        model.svd_u().columns(0, r) * s * model.svd_v().transpose()
    }

    fn check_invariants(model: &MeasurementModel) {
        let a = model.matrix();
        assert!(rel_frobenius(&reconstruct(model), a) < 1e-10);
        let s = model.svd_s();
        assert!(s.iter().all(|&v| v >= 0.0));
        assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let u = model.svd_u();
        let m = model.m();
        assert!((u.transpose() * u - DMatrix::<f64>::identity(m, m)).amax() < 1e-10);
        let v = model.svd_v();
        let r = v.ncols();
        assert!((v.transpose() * v - DMatrix::<f64>::identity(r, r)).amax() < 1e-10);
        let gram = a * a.transpose();
        for i in 0..m {
            assert!((gram[(i, i)] - model.row_norms_sq()[i]).abs() < 1e-12 * gram[(i, i)].max(1.0));
        }
    }

    #[test]
    fn svd_invariants_all_shapes() {
        for (m, n) in [(5, 5), (3, 7), (9, 4), (1, 6), (6, 1)] {
            let spec = EnsembleSpec::correlated(m, n, 0.3, 11);
            let model = MeasurementModel::generate(&spec, 0.1).unwrap();
            check_invariants(&model);
        }
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = haar_orthogonal(12, &mut rng);
        let eye = DMatrix::<f64>::identity(12, 12);
        assert!((q.transpose() * &q - &eye).amax() < 1e-10);
        assert!((&q * q.transpose() - eye).amax() < 1e-10);
    }

    #[test]
    fn kappa_one_is_flat_spectrum() {
        let model =
            MeasurementModel::generate(&EnsembleSpec::ill_conditioned(6, 10, 1.0, 5), 0.0).unwrap();
        let s = model.svd_s();
        for i in 1..6 {
            assert!((s[i] / s[0] - 1.0).abs() < 1e-12);
        }
        assert!((model.matrix().norm_squared() - 10.0).abs() < 1e-10);
    }

    #[test]
    fn ill_conditioned_hits_requested_condition_number() {
        let spec = EnsembleSpec::ill_conditioned(400, 784, 1e3, 2024);
        let model = MeasurementModel::generate(&spec, 0.05).unwrap();
        assert!((model.condition_number() / 1e3 - 1.0).abs() < 1e-6);
        assert!((model.matrix().norm_squared() / 784.0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tall_ill_conditioned_pads_spectrum() {
        let model =
            MeasurementModel::generate(&EnsembleSpec::ill_conditioned(9, 4, 100.0, 1), 0.0).unwrap();
        check_invariants(&model);
        assert!(model.svd_s().rows(4, 5).iter().all(|&v| v.abs() < 1e-12));
        assert!((model.condition_number() / 100.0 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn correlated_rho_zero_is_iid() {
        let spec = EnsembleSpec::correlated(4, 6, 0.0, 77);
        let a = generate_matrix(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = gaussian_matrix(4, 6, &mut rng);
        assert_eq!(a, h);
    }

    #[test]
    fn correlated_row_covariance_smoke() {
        // Rows of R1^{1/2} H have covariance R1; average over many columns.
        let (m, n, rho) = (6, 4096, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let left = symmetric_sqrt(&toeplitz_correlation(m, rho));
        let h = gaussian_matrix(m, n, &mut rng);
        let b = left * h;
        let cov = &b * b.transpose() / n as f64;
        let target = toeplitz_correlation(m, rho);
        assert!((cov - &target).norm() / target.norm() < 0.10);
    }

    #[test]
    fn row_orthogonal_gram_is_scaled_identity() {
        let model = MeasurementModel::generate(&EnsembleSpec::row_orthogonal(5, 8, 4), 0.0).unwrap();
        let gram = model.matrix() * model.matrix().transpose();
        let c = 8.0 / 5.0;
        assert!((gram - DMatrix::<f64>::identity(5, 5) * c).amax() < 1e-12);
    }

    #[test]
    fn generate_is_pure() {
        for kind in [EnsembleSpec::row_orthogonal(3, 5, 9), EnsembleSpec::ill_conditioned(5, 3, 10.0, 9), EnsembleSpec::correlated(4, 4, 0.4, 9)] {
            assert_eq!(generate_matrix(&kind).unwrap(), generate_matrix(&kind).unwrap());
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_matrix(&EnsembleSpec::ill_conditioned(3, 3, 0.5, 0)).is_err());
        assert!(generate_matrix(&EnsembleSpec::correlated(3, 3, 1.0, 0)).is_err());
        assert!(generate_matrix(&EnsembleSpec::correlated(3, 3, -0.1, 0)).is_err());
        assert!(generate_matrix(&EnsembleSpec::row_orthogonal(0, 3, 0)).is_err());
        assert!(generate_matrix(&EnsembleSpec::row_orthogonal(4, 3, 0)).is_err());
    }

    #[test]
    fn covariance_eigs() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let model = MeasurementModel::new(a.clone(), 0.0).unwrap();
        let e = model.gaussian_covariance_eigs(1.0);
        assert!((e[0] - 4.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);

        let noisy = MeasurementModel::new(a, 0.3).unwrap();
        assert!(noisy.gaussian_covariance_eigs(0.0).iter().all(|&v| (v - 0.09).abs() < 1e-15));
    }

    #[test]
    fn covariance_eigs_match_dense_eigensolver() {
        let spec = EnsembleSpec::correlated(5, 5, 0.2, 31);
        let model = MeasurementModel::generate(&spec, 0.4).unwrap();
        let beta = 0.7;
        let a = model.matrix();
        let dense = DMatrix::<f64>::identity(5, 5) * 0.16 + a * a.transpose() * (beta * beta);
        let mut want: Vec<f64> = SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
        want.sort_by(|x, y| y.total_cmp(x));
        let got = model.gaussian_covariance_eigs(beta);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn simulate_examples() {
        let model = MeasurementModel::new(DMatrix::identity(2, 2), 0.0).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let (y, z) = model.simulate(&QuantizerSpec::sign(), &x, 1).unwrap();
        assert_eq!(y.as_slice(), &[1.0, -1.0]);
        assert_eq!(z.as_slice(), &[1.0, -2.0]);

        let spec = EnsembleSpec::correlated(20, 10, 0.1, 2);
        let noiseless = MeasurementModel::generate(&spec, 0.0).unwrap();
        let x = DVector::from_fn(10, |i, _| (i as f64 - 4.5) / 3.0);
        let (y, z) = noiseless.simulate(&QuantizerSpec::sign(), &x, 99).unwrap();
        for (yi, zi) in y.iter().zip(z.iter()) {
            assert_eq!(*yi, if *zi >= 0.0 { 1.0 } else { -1.0 });
        }

        let noisy = noiseless.with_noise_std(0.5).unwrap();
        let q = QuantizerSpec::uniform(3, 2.0).unwrap();
        let (y1, _) = noisy.simulate(&q, &x, 5).unwrap();
        let (y2, _) = noisy.simulate(&q, &x, 5).unwrap();
        assert_eq!(y1, y2);
        assert!(noisy.simulate(&q, &DVector::zeros(3), 5).is_err());
    }
}
