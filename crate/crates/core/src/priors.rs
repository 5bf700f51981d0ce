//! Prior specification, log-prior evaluation and the conjugate Gibbs
//! updates for the hierarchical hyperparameters.
//!
//! All densities carry their full normalizing constants, so
//! [`log_prior`] is a proper log-density wherever the prior is proper.
//!
//! Normal distributions are parameterized by precision throughout.

use std::f64::consts::{LN_2, PI};

use nalgebra::{Cholesky, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{BasicHyper, HyperState, ParameterState, PriorVariant, ScaledIwHyper};

/// Prior on each scale factor `xi_j` of the scaled inverse-Wishart model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum XiPrior {
    Uniform { lower: f64, upper: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Default for XiPrior {
    fn default() -> Self {
        XiPrior::Uniform {
            lower: 0.0,
            upper: 100.0,
        }
    }
}

impl XiPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            XiPrior::Uniform { lower, upper } => {
                if x > lower && x < upper {
                    -(upper - lower).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            XiPrior::Normal { mean, sd } => normal_log_density(x, mean, 1.0 / (sd * sd)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub variant: PriorVariant,
    /// Precision of the Normal priors on `mu`, `lambda` and hyper means.
    pub normal_fixed_precision: f64,
    /// Gamma(shape, rate) prior on the basic model's hyper precisions.
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    /// When set, the basic model's hyper precisions instead get a
    /// Uniform(0, upper) prior on the standard deviation.
    pub sd_uniform_upper: Option<f64>,
    /// Precision of the Normal priors on the logistic coefficients.
    pub logistic_precision: f64,
    pub iw_nu: f64,
    pub iw_scale: [[f64; 3]; 3],
    pub xi_prior: XiPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            variant: PriorVariant::Basic,
            normal_fixed_precision: 1e-6,
            gamma_shape: 0.01,
            gamma_rate: 0.01,
            sd_uniform_upper: None,
            logistic_precision: 1e-4,
            iw_nu: 4.0,
            iw_scale: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            xi_prior: XiPrior::default(),
        }
    }
}

impl PriorSpec {
    pub fn new(variant: PriorVariant) -> Self {
        PriorSpec {
            variant,
            ..Default::default()
        }
    }

    pub fn iw_scale_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.iw_scale[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("normal_fixed_precision", self.normal_fixed_precision),
            ("gamma_shape", self.gamma_shape),
            ("gamma_rate", self.gamma_rate),
            ("logistic_precision", self.logistic_precision),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(u) = self.sd_uniform_upper {
            if !(u > 0.0 && u.is_finite()) {
                return Err(Error::Config(format!("sd_uniform_upper must be positive, got {u}")));
            }
        }
        if !(self.iw_nu >= 4.0) {
            return Err(Error::Config(format!("iw_nu must be at least 4, got {}", self.iw_nu)));
        }
        let s = self.iw_scale_matrix();
        if s != s.transpose() || Cholesky::new(s).is_none() {
            return Err(Error::Config("iw_scale must be symmetric positive definite".into()));
        }
        match self.xi_prior {
            XiPrior::Uniform { lower, upper } if !(lower < upper) => {
                Err(Error::Config("xi_prior needs lower < upper".into()))
            }
            XiPrior::Normal { sd, .. } if !(sd > 0.0) => {
                Err(Error::Config("xi_prior needs sd > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `log N(x; mean, 1/precision)`.
pub fn normal_log_density(x: f64, mean: f64, precision: f64) -> f64 {
    if !(precision > 0.0) {
        return f64::NEG_INFINITY;
    }
    let d = x - mean;
    0.5 * (precision / (2.0 * PI)).ln() - 0.5 * precision * d * d
}

/// `log Gamma(x; shape, rate)`.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log-density of a precision `tau` whose standard deviation
/// `1/sqrt(tau)` is Uniform(0, upper).
pub fn uniform_sd_precision_log_density(tau: f64, upper: f64) -> f64 {
    if !(tau > 0.0) || tau.sqrt() * upper < 1.0 {
        return f64::NEG_INFINITY;
    }
    // |d sigma / d tau| = tau^{-3/2} / 2
    -upper.ln() - LN_2 - 1.5 * tau.ln()
}

fn ln_multivariate_gamma3(a: f64) -> f64 {
    1.5 * PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5) + ln_gamma(a - 1.0)
}

/// `log IW(sigma; nu, scale)` for 3x3 matrices; `-inf` off the SPD cone.
pub fn inverse_wishart_log_density(sigma: &Matrix3<f64>, nu: f64, scale: &Matrix3<f64>) -> f64 {
    let p = 3.0;
    let (Some(cs), Some(cw)) = (Cholesky::new(*sigma), Cholesky::new(*scale)) else {
        return f64::NEG_INFINITY;
    };
    let ln_det = |c: &Cholesky<f64, nalgebra::U3>| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = (scale * cs.inverse()).trace();
    0.5 * nu * ln_det(&cw) - 0.5 * nu * p * LN_2 - ln_multivariate_gamma3(0.5 * nu)
        - 0.5 * (nu + p + 1.0) * ln_det(&cs)
        - 0.5 * trace
}

/// `log MVN(x; mean, cov)` given the Cholesky factor of `cov`.
pub fn mvn_log_density(x: &[f64; 3], mean: &[f64; 3], chol: &Cholesky<f64, nalgebra::U3>) -> f64 {
    let d = Vector3::new(x[0] - mean[0], x[1] - mean[1], x[2] - mean[2]);
    let z = chol.l().solve_lower_triangular(&d).expect("nonsingular Cholesky factor");
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -1.5 * (2.0 * PI).ln() - 0.5 * ln_det - 0.5 * z.norm_squared()
}

fn basic_side_log_prior(stars: &[[f64; 3]], h: &BasicHyper, spec: &PriorSpec) -> f64 {
    let mut lp = 0.0;
    for j in 0..3 {
        lp += normal_log_density(h.mean[j], 0.0, spec.normal_fixed_precision);
        lp += match spec.sd_uniform_upper {
            Some(upper) => uniform_sd_precision_log_density(h.precision[j], upper),
            None => gamma_log_density(h.precision[j], spec.gamma_shape, spec.gamma_rate),
        };
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        for row in stars {
            lp += normal_log_density(row[j], h.mean[j], h.precision[j]);
        }
    }
    lp
}

fn scaled_iw_side_log_prior(stars: &[[f64; 3]], h: &ScaledIwHyper, spec: &PriorSpec) -> f64 {
    let mut lp = inverse_wishart_log_density(&h.lambda, spec.iw_nu, &spec.iw_scale_matrix());
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    for j in 0..3 {
        lp += spec.xi_prior.log_density(h.xi[j]);
        lp += normal_log_density(h.raw_mean[j], 0.0, spec.normal_fixed_precision);
    }
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let chol = Cholesky::new(h.lambda).expect("checked by the IW term");
    lp + stars
        .iter()
        .map(|row| mvn_log_density(row, &h.raw_mean, &chol))
        .sum::<f64>()
}

/// Log prior density of `state`; `-inf` outside the support or when the
/// state's hierarchy does not match `spec.variant`.
pub fn log_prior(state: &ParameterState, spec: &PriorSpec) -> f64 {
    let fixed = normal_log_density(state.mu, 0.0, spec.normal_fixed_precision)
        + normal_log_density(state.lambda, 0.0, spec.normal_fixed_precision);
    let logistic: f64 = state
        .gamma
        .iter()
        .chain(&state.eta)
        .map(|&c| normal_log_density(c, 0.0, spec.logistic_precision))
        .sum();
    let hier = match (&state.hyper, spec.variant) {
        (HyperState::Basic { attack, defence }, PriorVariant::Basic) => {
            basic_side_log_prior(&state.alpha_star, attack, spec)
                + basic_side_log_prior(&state.beta_star, defence, spec)
        }
        (HyperState::ScaledIw { attack, defence }, PriorVariant::ScaledIw) => {
            scaled_iw_side_log_prior(&state.alpha_star, attack, spec)
                + scaled_iw_side_log_prior(&state.beta_star, defence, spec)
        }
        _ => f64::NEG_INFINITY,
    };
    fixed + logistic + hier
}

/// Mean and precision of a Normal full conditional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalPosterior {
    pub mean: f64,
    pub precision: f64,
}

/// Conditional of a hyper mean given `coeffs ~ N(mean, 1/tau)` and a
/// `N(0, 1/prior_precision)` prior.
pub fn hyper_mean_posterior(coeffs: &[f64], tau: f64, prior_precision: f64) -> NormalPosterior {
    let precision = prior_precision + coeffs.len() as f64 * tau;
    NormalPosterior {
        mean: tau * coeffs.iter().sum::<f64>() / precision,
        precision,
    }
}

pub fn gibbs_update_hyper_mean<R: Rng + ?Sized>(
    coeffs: &[f64],
    tau: f64,
    prior_precision: f64,
    rng: &mut R,
) -> f64 {
    let post = hyper_mean_posterior(coeffs, tau, prior_precision);
    let z: f64 = rng.sample(StandardNormal);
    post.mean + z / post.precision.sqrt()
}

/// `(shape, rate)` of the Gamma conditional of a hyper precision.
pub fn hyper_precision_posterior(coeffs: &[f64], mean: f64, shape0: f64, rate0: f64) -> (f64, f64) {
    let ss: f64 = coeffs.iter().map(|c| (c - mean) * (c - mean)).sum();
    (shape0 + 0.5 * coeffs.len() as f64, rate0 + 0.5 * ss)
}

pub fn gibbs_update_hyper_precision<R: Rng + ?Sized>(
    coeffs: &[f64],
    mean: f64,
    shape0: f64,
    rate0: f64,
    rng: &mut R,
) -> f64 {
    let (shape, rate) = hyper_precision_posterior(coeffs, mean, shape0, rate0);
    sample_gamma(shape, rate, rng)
}

fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    // Tiny shapes can underflow to zero; keep the draw inside the support.
    g.sample(rng).max(f64::MIN_POSITIVE)
}

/// Precision update under a Uniform(0, upper) prior on the standard
/// deviation: Gamma(K/2 - 1/2, SS/2) truncated to `tau >= 1/upper^2`.
pub fn gibbs_update_precision_uniform_sd<R: Rng + ?Sized>(
    coeffs: &[f64],
    mean: f64,
    upper: f64,
    rng: &mut R,
) -> f64 {
    let ss: f64 = coeffs.iter().map(|c| (c - mean) * (c - mean)).sum();
    let shape = 0.5 * coeffs.len() as f64 - 0.5;
    let floor = 1.0 / (upper * upper);
    if shape <= 0.0 || ss <= 0.0 {
        // Conditional is improper or degenerate; stay at the boundary.
        return floor;
    }
    let rate = 0.5 * ss;
    for _ in 0..64 {
        let t = sample_gamma(shape, rate, rng);
        if t >= floor {
            return t;
        }
    }
    // Truncation point is deep in the upper tail: invert the CDF.
    use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};
    let dist = GammaDist::new(shape, rate).expect("valid gamma");
    let lo = dist.cdf(floor);
    let u: f64 = rng.random_range(lo..1.0);
    dist.inverse_cdf(u).max(floor)
}

/// Parameters of the inverse-Wishart full conditional for rows with
/// per-row means `means`: `(nu + K, scale + sum_k (r_k - m_k)(r_k - m_k)^T)`.
pub fn wishart_posterior(
    rows: &[[f64; 3]],
    means: &[[f64; 3]],
    nu: f64,
    scale: &Matrix3<f64>,
) -> (f64, Matrix3<f64>) {
    let mut s = *scale;
    for (r, m) in rows.iter().zip(means) {
        let d = Vector3::new(r[0] - m[0], r[1] - m[1], r[2] - m[2]);
        s += d * d.transpose();
    }
    (nu + rows.len() as f64, s)
}

/// Draws from IW(nu, scale) by Bartlett decomposition of the Wishart
/// draw for the inverse.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    nu: f64,
    scale: &Matrix3<f64>,
    rng: &mut R,
) -> Result<Matrix3<f64>> {
    let chol_s = Cholesky::new(*scale).ok_or(Error::NotPositiveDefinite("inverse-Wishart scale"))?;
    // Lower Cholesky factor of scale^{-1}.
    let inv = chol_s.inverse();
    let inv = 0.5 * (inv + inv.transpose());
    let l = Cholesky::new(inv)
        .ok_or(Error::NotPositiveDefinite("inverse-Wishart scale inverse"))?
        .l();
    let mut a = Matrix3::<f64>::zeros();
    for i in 0..3 {
        let chi = ChiSquared::new(nu - i as f64)
            .map_err(|_| Error::Config(format!("degrees of freedom {nu} too small")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // Wishart draw W = (LA)(LA)^T, so W^{-1} = (LA)^{-T}(LA)^{-1}.
    let la = l * a;
    let la_inv = la
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite("Bartlett factor"))?;
    let sigma = la_inv.transpose() * la_inv;
    let sigma = 0.5 * (sigma + sigma.transpose());
    if Cholesky::new(sigma).is_none() {
        return Err(Error::NotPositiveDefinite("inverse-Wishart draw"));
    }
    Ok(sigma)
}

pub fn gibbs_update_wishart<R: Rng + ?Sized>(
    rows: &[[f64; 3]],
    means: &[[f64; 3]],
    nu: f64,
    scale: &Matrix3<f64>,
    rng: &mut R,
) -> Result<Matrix3<f64>> {
    let (nu_post, scale_post) = wishart_posterior(rows, means, nu, scale);
    sample_inverse_wishart(nu_post, &scale_post, rng)
}

/// Conditional of the raw mean vector given rows `~ MVN(m, lambda)` and an
/// isotropic `N(0, 1/prior_precision)` prior: precision
/// `prior_precision I + K lambda^{-1}`, mean `P^{-1} lambda^{-1} sum_k r_k`.
pub fn raw_mean_posterior(
    rows: &[[f64; 3]],
    lambda: &Matrix3<f64>,
    prior_precision: f64,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let lam_inv = Cholesky::new(*lambda)
        .ok_or(Error::NotPositiveDefinite("lambda"))?
        .inverse();
    let k = rows.len() as f64;
    let precision = Matrix3::identity() * prior_precision + lam_inv * k;
    let sum = rows
        .iter()
        .fold(Vector3::zeros(), |acc, r| acc + Vector3::new(r[0], r[1], r[2]));
    let cov = Cholesky::new(precision)
        .ok_or(Error::NotPositiveDefinite("raw mean precision"))?
        .inverse();
    Ok((cov * (lam_inv * sum), cov))
}

pub fn gibbs_update_raw_mean<R: Rng + ?Sized>(
    rows: &[[f64; 3]],
    lambda: &Matrix3<f64>,
    prior_precision: f64,
    rng: &mut R,
) -> Result<[f64; 3]> {
    let (mean, cov) = raw_mean_posterior(rows, lambda, prior_precision)?;
    let l = Cholesky::new(cov)
        .ok_or(Error::NotPositiveDefinite("raw mean covariance"))?
        .l();
    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let draw = mean + l * z;
    Ok([draw[0], draw[1], draw[2]])
}

/// Reconstructed covariance of the team coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSummary {
    pub sigma: Matrix3<f64>,
    pub sigma2: [f64; 3],
    /// Correlations for the pairs `(0,1)`, `(0,2)`, `(1,2)`.
    pub rho: [f64; 3],
}

pub const RHO_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// `Sigma = Diag(xi) Lambda Diag(xi)`; correlations depend on `Lambda` only.
pub fn reconstruct_covariance(xi: &[f64; 3], lambda: &Matrix3<f64>) -> CovarianceSummary {
    let d = Matrix3::from_diagonal(&Vector3::new(xi[0], xi[1], xi[2]));
    let sigma = d * lambda * d;
    let sigma2 = [0, 1, 2].map(|j| xi[j] * xi[j] * lambda[(j, j)]);
    let rho = RHO_PAIRS.map(|(j, l)| lambda[(j, l)] / (lambda[(j, j)] * lambda[(l, l)]).sqrt());
    CovarianceSummary { sigma, sigma2, rho }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HyperState, ParameterState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basic_state(k: usize) -> ParameterState {
        let side = BasicHyper {
            mean: [0.0; 3],
            precision: [1.0; 3],
        };
        ParameterState {
            mu: 0.0,
            lambda: 0.0,
            alpha_star: vec![[0.0; 3]; k],
            beta_star: vec![[0.0; 3]; k],
            hyper: HyperState::Basic {
                attack: side.clone(),
                defence: side,
            },
            gamma: [0.0; 3],
            eta: [0.0; 4],
        }
    }

    fn iw_state(k: usize) -> ParameterState {
        let side = ScaledIwHyper {
            raw_mean: [0.0; 3],
            xi: [1.0; 3],
            lambda: Matrix3::identity(),
        };
        ParameterState {
            hyper: HyperState::ScaledIw {
                attack: side.clone(),
                defence: side,
            },
            ..basic_state(k)
        }
    }

    #[test]
    fn basic_prior_at_means_matches_term_sum() {
        let spec = PriorSpec::default();
        let k = 4;
        let s = basic_state(k);
        let ln_norm = |prec: f64| 0.5 * (prec / (2.0 * PI)).ln();
        // Gamma(1; 0.01, 0.01) = 0.01^0.01 / Gamma(0.01) * e^{-0.01}
        let ln_gamma_at_one = 0.01 * 0.01f64.ln() - ln_gamma(0.01) - 0.01;
        let expected = 2.0 * ln_norm(1e-6)
            + 7.0 * ln_norm(1e-4)
            + 2.0 * 3.0 * (ln_norm(1e-6) + ln_gamma_at_one + k as f64 * ln_norm(1.0));
        assert!((log_prior(&s, &spec) - expected).abs() < 1e-10);
    }

    #[test]
    fn out_of_support_is_neg_inf() {
        let spec = PriorSpec::default();
        let mut s = basic_state(3);
        if let HyperState::Basic { attack, .. } = &mut s.hyper {
            attack.precision[0] = -1.0;
        }
        assert_eq!(log_prior(&s, &spec), f64::NEG_INFINITY);

        let iw = PriorSpec::new(PriorVariant::ScaledIw);
        let mut s = iw_state(3);
        assert!(log_prior(&s, &iw).is_finite());
        if let HyperState::ScaledIw { attack, .. } = &mut s.hyper {
            attack.lambda[(0, 1)] = 2.0;
            attack.lambda[(1, 0)] = 2.0;
        }
        assert_eq!(log_prior(&s, &iw), f64::NEG_INFINITY);

        let mut s = iw_state(3);
        if let HyperState::ScaledIw { defence, .. } = &mut s.hyper {
            defence.xi[2] = 150.0;
        }
        assert_eq!(log_prior(&s, &iw), f64::NEG_INFINITY);
        // Variant mismatch.
        assert_eq!(log_prior(&basic_state(3), &iw), f64::NEG_INFINITY);
    }

    #[test]
    fn basic_prior_is_additive_over_blocks() {
        let spec = PriorSpec::default();
        let base = basic_state(5);
        let mut moved = base.clone();
        moved.eta[2] = 3.0;
        let delta = normal_log_density(3.0, 0.0, 1e-4) - normal_log_density(0.0, 0.0, 1e-4);
        assert!((log_prior(&moved, &spec) - log_prior(&base, &spec) - delta).abs() < 1e-12);
        let mut moved = base.clone();
        moved.beta_star[2][1] = 0.7;
        let delta = normal_log_density(0.7, 0.0, 1.0) - normal_log_density(0.0, 0.0, 1.0);
        assert!((log_prior(&moved, &spec) - log_prior(&base, &spec) - delta).abs() < 1e-12);
    }

    #[test]
    fn xi_normal_alternative() {
        let spec = PriorSpec {
            variant: PriorVariant::ScaledIw,
            xi_prior: XiPrior::Normal { mean: 0.0, sd: 10.0 },
            ..Default::default()
        };
        let mut s = iw_state(2);
        if let HyperState::ScaledIw { attack, .. } = &mut s.hyper {
            attack.xi[0] = 150.0;
        }
        assert!(log_prior(&s, &spec).is_finite());
    }

    #[test]
    fn hyper_mean_conjugate_formula() {
        let post = hyper_mean_posterior(&[1.0; 4], 1.0, 1e-6);
        assert!((post.precision - 4.000001).abs() < 1e-12);
        assert!((post.mean - 4.0 / 4.000001).abs() < 1e-15);
        assert!((post.mean - 0.99999975).abs() < 1e-9);
        let post = hyper_mean_posterior(&[], 3.0, 1e-6);
        assert_eq!(post.mean, 0.0);
        assert_eq!(post.precision, 1e-6);
        let post = hyper_mean_posterior(&[0.0; 6], 1e12, 1e-6);
        assert_eq!(post.mean, 0.0);
        assert!(post.precision > 1e12);
    }

    #[test]
    fn hyper_precision_conjugate_formula() {
        assert_eq!(hyper_precision_posterior(&[], 0.3, 0.01, 0.01), (0.01, 0.01));
        assert_eq!(hyper_precision_posterior(&[2.0; 12], 2.0, 0.01, 0.01), (6.01, 0.01));
        let (a, b) = hyper_precision_posterior(&[1.0, -1.0], 0.0, 0.01, 0.01);
        assert!((a - 1.01).abs() < 1e-15 && (b - 1.01).abs() < 1e-15);
    }

    #[test]
    fn wishart_zero_scatter_keeps_scale() {
        let rows = [[0.3, -0.2, 1.0]; 4];
        let (nu, s) = wishart_posterior(&rows, &rows, 4.0, &Matrix3::identity());
        assert_eq!(nu, 8.0);
        assert_eq!(s, Matrix3::identity());
    }

    #[test]
    fn wishart_draws_are_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = [[0.1, 0.2, 0.3], [-0.4, 0.0, 0.2], [0.5, -0.1, 0.0], [0.0, 0.3, -0.2], [0.2, 0.1, 0.1]];
        let means = [[0.05, 0.1, 0.05]; 5];
        for _ in 0..1000 {
            let l = gibbs_update_wishart(&rows, &means, 4.0, &Matrix3::identity(), &mut rng).unwrap();
            assert!(Cholesky::new(l).is_some());
            assert_eq!(l, l.transpose());
        }
        let bad = Matrix3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(sample_inverse_wishart(6.0, &bad, &mut rng).is_err());
    }

    #[test]
    fn uniform_sd_precision_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = gibbs_update_precision_uniform_sd(&[10.0, -10.0, 5.0, 0.0], 0.0, 2.0, &mut rng);
            assert!(t >= 0.25);
        }
        assert_eq!(uniform_sd_precision_log_density(0.01, 2.0), f64::NEG_INFINITY);
    }

    #[test]
    fn covariance_reconstruction_examples() {
        let lam = Matrix3::new(3.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 1.0);
        let c = reconstruct_covariance(&[1.0; 3], &lam);
        assert_eq!(c.sigma, lam);
        let c = reconstruct_covariance(&[2.0, 1.0, 1.0], &lam);
        assert_eq!(c.sigma2[0], 12.0);
        assert_eq!(c.sigma[(0, 0)], 12.0);
        let c = reconstruct_covariance(&[7.0, 0.1, 3.0], &Matrix3::identity());
        assert_eq!(c.rho, [0.0; 3]);
        let a = reconstruct_covariance(&[1.0, 2.0, 3.0], &lam).rho;
        let b = reconstruct_covariance(&[0.01, 20.0, 3e3], &lam).rho;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn iw_density_matches_direct_formula() {
        // Determinants by cofactor expansion, independent of the Cholesky route.
        let s = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0);
        let w = Matrix3::new(1.0, 0.0, 0.2, 0.0, 1.0, 0.0, 0.2, 0.0, 2.0);
        let nu = 6.5;
        let det = |m: &Matrix3<f64>| {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        };
        let inv = s.try_inverse().unwrap();
        let expected = 0.5 * nu * det(&w).ln()
            - 0.5 * nu * 3.0 * LN_2
            - (1.5 * PI.ln() + ln_gamma(nu / 2.0) + ln_gamma(nu / 2.0 - 0.5) + ln_gamma(nu / 2.0 - 1.0))
            - 0.5 * (nu + 4.0) * det(&s).ln()
            - 0.5 * (w * inv).trace();
        assert!((inverse_wishart_log_density(&s, nu, &w) - expected).abs() < 1e-10);
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let spec = PriorSpec::new(PriorVariant::ScaledIw);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"variant\":\"scaled-iw\""));
        let back: PriorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let partial: PriorSpec = serde_json::from_str(r#"{"iw_nu": 6}"#).unwrap();
        assert_eq!(partial.iw_nu, 6.0);
        assert_eq!(partial.gamma_shape, 0.01);
        assert!(PriorSpec { iw_nu: 3.0, ..Default::default() }.validate().is_err());
        assert!(PriorSpec { gamma_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(PriorSpec::default().validate().is_ok());
    }
}
