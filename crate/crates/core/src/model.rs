//! Linear predictors, likelihood terms and the joint log-posterior of the
//! three-part model: Poisson points, five-set logistic, home-win logistic.
//!
//! Team coefficients are stored unconstrained ("star" coefficients) and the
//! sum-to-zero constraint is imposed by subtracting each column's mean.

use nalgebra::Matrix3;
use statrs::function::gamma::ln_gamma;

use crate::data::{MatchRecord, SeasonData};
use crate::error::{Error, Result};
use crate::priors::{log_prior, PriorSpec};

/// Per-team coefficients; row `k` holds `(intercept, slope_1, slope_2)`.
pub type TeamCoefficients = Vec<[f64; 3]>;

/// Largest log-intensity whose exponential is finite.
const MAX_LOG_INTENSITY: f64 = 709.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorVariant {
    Basic,
    ScaledIw,
}

impl PriorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorVariant::Basic => "basic",
            PriorVariant::ScaledIw => "scaled-iw",
        }
    }
}

impl std::fmt::Display for PriorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PriorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(PriorVariant::Basic),
            "scaled-iw" | "scaled_iw" => Ok(PriorVariant::ScaledIw),
            other => Err(Error::Config(format!("unknown prior variant `{other}`"))),
        }
    }
}

/// Independent-normal hierarchy for one side (attack or defence).
#[derive(Clone, Debug, PartialEq)]
pub struct BasicHyper {
    pub mean: [f64; 3],
    pub precision: [f64; 3],
}

/// Scaled inverse-Wishart hierarchy for one side. The coefficient used in
/// the linear predictor is `xi[j] * star[k][j]`; the raw rows are
/// multivariate normal with mean `raw_mean` and covariance `lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledIwHyper {
    pub raw_mean: [f64; 3],
    pub xi: [f64; 3],
    pub lambda: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HyperState {
    Basic {
        attack: BasicHyper,
        defence: BasicHyper,
    },
    ScaledIw {
        attack: ScaledIwHyper,
        defence: ScaledIwHyper,
    },
}

impl HyperState {
    pub fn variant(&self) -> PriorVariant {
        match self {
            HyperState::Basic { .. } => PriorVariant::Basic,
            HyperState::ScaledIw { .. } => PriorVariant::ScaledIw,
        }
    }

    /// Per-column multipliers turning stars into effective coefficients.
    pub fn scales(&self, side: Side) -> [f64; 3] {
        match (self, side) {
            (HyperState::Basic { .. }, _) => [1.0; 3],
            (HyperState::ScaledIw { attack, .. }, Side::Attack) => attack.xi,
            (HyperState::ScaledIw { defence, .. }, Side::Defence) => defence.xi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Attack,
    Defence,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Attack, Side::Defence];

    /// Symbol used in parameter names (`alpha`, `beta`).
    pub fn symbol(self) -> &'static str {
        match self {
            Side::Attack => "alpha",
            Side::Defence => "beta",
        }
    }
}

/// One point in parameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterState {
    pub mu: f64,
    pub lambda: f64,
    pub alpha_star: TeamCoefficients,
    pub beta_star: TeamCoefficients,
    pub hyper: HyperState,
    pub gamma: [f64; 3],
    pub eta: [f64; 4],
}

impl ParameterState {
    pub fn n_teams(&self) -> usize {
        self.alpha_star.len()
    }

    pub fn stars(&self, side: Side) -> &TeamCoefficients {
        match side {
            Side::Attack => &self.alpha_star,
            Side::Defence => &self.beta_star,
        }
    }

    pub fn stars_mut(&mut self, side: Side) -> &mut TeamCoefficients {
        match side {
            Side::Attack => &mut self.alpha_star,
            Side::Defence => &mut self.beta_star,
        }
    }

    /// Unconstrained coefficients after applying any scale factors.
    pub fn effective_stars(&self, side: Side) -> TeamCoefficients {
        let s = self.hyper.scales(side);
        self.stars(side)
            .iter()
            .map(|r| [r[0] * s[0], r[1] * s[1], r[2] * s[2]])
            .collect()
    }

    pub fn centered_effects(&self) -> CenteredEffects {
        CenteredEffects {
            alpha: center_columns(&self.effective_stars(Side::Attack)),
            beta: center_columns(&self.effective_stars(Side::Defence)),
        }
    }

    pub fn is_finite(&self) -> bool {
        let hyper_ok = match &self.hyper {
            HyperState::Basic { attack, defence } => [attack, defence]
                .iter()
                .all(|h| h.mean.iter().chain(&h.precision).all(|v| v.is_finite())),
            HyperState::ScaledIw { attack, defence } => [attack, defence].iter().all(|h| {
                h.raw_mean.iter().chain(&h.xi).all(|v| v.is_finite())
                    && h.lambda.iter().all(|v| v.is_finite())
            }),
        };
        self.mu.is_finite()
            && self.lambda.is_finite()
            && self
                .alpha_star
                .iter()
                .chain(&self.beta_star)
                .flatten()
                .all(|v| v.is_finite())
            && self.gamma.iter().chain(&self.eta).all(|v| v.is_finite())
            && hyper_ok
    }
}

/// Sum-to-zero team effects.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredEffects {
    pub alpha: TeamCoefficients,
    pub beta: TeamCoefficients,
}

impl CenteredEffects {
    pub fn side(&self, side: Side) -> &TeamCoefficients {
        match side {
            Side::Attack => &self.alpha,
            Side::Defence => &self.beta,
        }
    }
}

/// Subtracts the column mean.
pub fn apply_sum_to_zero(column: &[f64]) -> Vec<f64> {
    if column.is_empty() {
        return Vec::new();
    }
    let mean = column.iter().sum::<f64>() / column.len() as f64;
    column.iter().map(|v| v - mean).collect()
}

/// Column-wise [`apply_sum_to_zero`] on a `K x 3` matrix.
pub fn center_columns(stars: &[[f64; 3]]) -> TeamCoefficients {
    let mut out = stars.to_vec();
    for j in 0..3 {
        let col: Vec<f64> = stars.iter().map(|r| r[j]).collect();
        for (row, v) in out.iter_mut().zip(apply_sum_to_zero(&col)) {
            row[j] = v;
        }
    }
    out
}

/// Expected points of the two sides in one match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringIntensities {
    pub theta_h: f64,
    pub theta_a: f64,
}

/// Log-intensities `(log theta_h, log theta_a)` given centered effects.
///
/// Home scoring uses the home attack (attack and serve efficiency) against
/// the away defence (defence and block efficiency); away scoring mirrors it.
pub fn log_intensities(
    mu: f64,
    lambda: f64,
    effects: &CenteredEffects,
    m: &MatchRecord,
) -> (f64, f64) {
    let (h, a) = (m.home.0, m.away.0);
    let eh = &m.eff_home;
    let ea = &m.eff_away;
    let att = |k: usize, attack: f64, serve: f64| {
        let c = &effects.alpha[k];
        c[0] + c[1] * attack + c[2] * serve
    };
    let def = |k: usize, defence: f64, block: f64| {
        let c = &effects.beta[k];
        c[0] + c[1] * defence + c[2] * block
    };
    let log_h = mu + lambda + att(h, eh.attack, eh.serve) + def(a, ea.defence, ea.block);
    let log_a = mu + att(a, ea.attack, ea.serve) + def(h, eh.defence, eh.block);
    (log_h, log_a)
}

pub fn scoring_intensity(state: &ParameterState, m: &MatchRecord) -> Result<ScoringIntensities> {
    scoring_intensity_with(state.mu, state.lambda, &state.centered_effects(), m)
}

pub fn scoring_intensity_with(
    mu: f64,
    lambda: f64,
    effects: &CenteredEffects,
    m: &MatchRecord,
) -> Result<ScoringIntensities> {
    let (lh, la) = log_intensities(mu, lambda, effects, m);
    for l in [lh, la] {
        if !(l <= MAX_LOG_INTENSITY) {
            return Err(Error::IntensityOverflow(l));
        }
    }
    Ok(ScoringIntensities {
        theta_h: lh.exp(),
        theta_a: la.exp(),
    })
}

/// `log Poisson(y; theta)` with the exact log-gamma normalizer.
pub fn poisson_log_pmf(y: u32, theta: f64) -> f64 {
    let y = f64::from(y);
    if y == 0.0 {
        return -theta;
    }
    y * theta.ln() - theta - ln_gamma(y + 1.0)
}

/// Joint log-density of both point counts under independent Poissons.
pub fn loglik_points(theta: ScoringIntensities, y_h: u32, y_a: u32) -> f64 {
    poisson_log_pmf(y_h, theta.theta_h) + poisson_log_pmf(y_a, theta.theta_a)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse logit, split on the sign so neither branch overflows.
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `d log p + (1 - d) log(1 - p)` with `p = inv_logit(z)`.
pub fn bernoulli_logit_log_pmf(d: f64, z: f64) -> f64 {
    -d * softplus(-z) - (1.0 - d) * softplus(z)
}

pub fn five_set_predictor(gamma: &[f64; 3], y_h: u32, y_a: u32) -> f64 {
    gamma[0] + gamma[1] * f64::from(y_h) + gamma[2] * f64::from(y_a)
}

pub fn home_win_predictor(eta: &[f64; 4], y_h: u32, y_a: u32, d_s: f64) -> f64 {
    eta[0] + eta[1] * f64::from(y_h) + eta[2] * f64::from(y_a) + eta[3] * d_s
}

/// Probability that the match goes to five sets.
pub fn prob_five_sets(gamma: &[f64; 3], y_h: u32, y_a: u32) -> f64 {
    inv_logit(five_set_predictor(gamma, y_h, y_a))
}

/// Probability that the home side wins.
pub fn prob_home_win(eta: &[f64; 4], y_h: u32, y_a: u32, d_s: f64) -> f64 {
    inv_logit(home_win_predictor(eta, y_h, y_a, d_s))
}

/// Log-likelihood contribution of one match: both Poisson terms and the two
/// Bernoulli indicator terms. `-inf` if an intensity overflows.
pub fn match_log_likelihood(
    state: &ParameterState,
    effects: &CenteredEffects,
    m: &MatchRecord,
) -> f64 {
    let points = match scoring_intensity_with(state.mu, state.lambda, effects, m) {
        Ok(theta) => loglik_points(theta, m.y_h, m.y_a),
        Err(_) => return f64::NEG_INFINITY,
    };
    let sets = bernoulli_logit_log_pmf(m.d_s, five_set_predictor(&state.gamma, m.y_h, m.y_a));
    let win = bernoulli_logit_log_pmf(
        m.d_m,
        home_win_predictor(&state.eta, m.y_h, m.y_a, m.d_s),
    );
    points + sets + win
}

pub fn log_likelihood(state: &ParameterState, data: &SeasonData) -> f64 {
    let effects = state.centered_effects();
    data.matches
        .iter()
        .map(|m| match_log_likelihood(state, &effects, m))
        .sum()
}

/// Unnormalized log-posterior: likelihood of all matches plus the prior.
/// Returns `-inf` (never an error) outside the prior support.
pub fn joint_log_posterior(state: &ParameterState, data: &SeasonData, prior: &PriorSpec) -> f64 {
    let lp = log_prior(state, prior);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    lp + log_likelihood(state, data)
}
