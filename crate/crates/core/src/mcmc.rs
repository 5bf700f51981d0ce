//! Adaptive Metropolis-within-Gibbs sampler.
//!
//! One sweep updates, in order: `mu`, `lambda`, every unconstrained team
//! coefficient, the scale factors (scaled-IW only), the five-set and
//! home-win logistic coefficients, and finally the conjugate blocks (hyper
//! means and precisions, or raw means and `Lambda`).
//!
//! Scalar moves are Gaussian random walks whose step sizes adapt in batches
//! of [`ADAPT_BATCH`] iterations during burn-in and are frozen afterwards.
//! Logistic coefficients move along fixed directions obtained by whitening
//! the design's Gram matrix; each move is still a one-dimensional symmetric
//! random walk.
//!
//! Points log-likelihood evaluations are incremental: every team
//! coefficient touches all matches through the column centering, so each
//! move costs one pass over the cached per-match log-intensities.

use nalgebra::{Cholesky, DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{validate_season, SeasonData};
use crate::error::{Error, Result};
use crate::model::{
    bernoulli_logit_log_pmf, center_columns, joint_log_posterior, BasicHyper, CenteredEffects,
    HyperState, ParameterState, PriorVariant, ScaledIwHyper, Side, TeamCoefficients,
};
use crate::priors::{
    gibbs_update_hyper_mean, gibbs_update_hyper_precision, gibbs_update_precision_uniform_sd,
    gibbs_update_raw_mean, gibbs_update_wishart, normal_log_density, reconstruct_covariance,
    CovarianceSummary, PriorSpec,
};

/// Iterations per step-size adaptation batch.
pub const ADAPT_BATCH: usize = 50;

const MAX_LOG_INTENSITY: f64 = 709.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Number of initial iterations during which step sizes adapt;
    /// `None` adapts over the whole burn-in.
    pub adapt_window: Option<usize>,
    pub target_accept: f64,
    /// Multiplier on the per-block initialization spread.
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 2,
            n_iter: 20_000,
            burn_in: 10_000,
            thin: 1,
            seed: 2017_2018,
            adapt_window: None,
            target_accept: 0.44,
            init_jitter: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_chains < 2 {
            return fail(format!("n_chains must be at least 2, got {}", self.n_chains));
        }
        if self.burn_in >= self.n_iter {
            return fail(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            ));
        }
        if self.thin == 0 {
            return fail("thin must be at least 1".into());
        }
        if self.adapt_window.is_some_and(|w| w > self.burn_in) {
            return fail("adapt_window must not exceed burn_in".into());
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail(format!("target_accept must lie in (0, 1), got {}", self.target_accept));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return fail(format!("init_jitter must be nonnegative, got {}", self.init_jitter));
        }
        Ok(())
    }

    /// Number of retained draws per chain.
    pub fn retained_len(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    fn adapt_until(&self) -> usize {
        self.adapt_window.unwrap_or(self.burn_in)
    }
}

/// Master seed plus the ChaCha stream a chain draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeed {
    pub master: u64,
    pub stream: u64,
}

impl RngSeed {
    pub fn rng(self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn chain_seed(master: u64, chain_id: usize) -> RngSeed {
    RngSeed {
        master,
        stream: chain_id as u64,
    }
}

/// Reconstructed covariances of both sides (scaled-IW model).
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSummaries {
    pub attack: CovarianceSummary,
    pub defence: CovarianceSummary,
}

/// A retained draw with its derived quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub state: ParameterState,
    pub effects: CenteredEffects,
    pub covariance: Option<CovarianceSummaries>,
    pub log_posterior: f64,
}

impl PosteriorSample {
    pub fn from_state(state: ParameterState, data: &SeasonData, prior: &PriorSpec) -> Self {
        let effects = state.centered_effects();
        let covariance = match &state.hyper {
            HyperState::ScaledIw { attack, defence } => Some(CovarianceSummaries {
                attack: reconstruct_covariance(&attack.xi, &attack.lambda),
                defence: reconstruct_covariance(&defence.xi, &defence.lambda),
            }),
            HyperState::Basic { .. } => None,
        };
        let log_posterior = joint_log_posterior(&state, data, prior);
        PosteriorSample {
            state,
            effects,
            covariance,
            log_posterior,
        }
    }

    /// Derived quantities only, for draws read back from storage.
    pub fn derived_from_state(state: ParameterState, log_posterior: f64) -> Self {
        let effects = state.centered_effects();
        let covariance = match &state.hyper {
            HyperState::ScaledIw { attack, defence } => Some(CovarianceSummaries {
                attack: reconstruct_covariance(&attack.xi, &attack.lambda),
                defence: reconstruct_covariance(&defence.xi, &defence.lambda),
            }),
            HyperState::Basic { .. } => None,
        };
        PosteriorSample {
            state,
            effects,
            covariance,
            log_posterior,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    pub chain_id: usize,
    pub seed: RngSeed,
    pub variant: PriorVariant,
    pub samples: Vec<PosteriorSample>,
    /// Post-burn-in acceptance rate per Metropolis coordinate.
    pub acceptance: Vec<(String, f64)>,
    /// Frozen step sizes, same order as `acceptance`.
    pub step_sizes: Vec<f64>,
}

/// Accepts a proposal with probability `min(1, exp(log_ratio))`. NaN and
/// `-inf` ratios are always rejected.
pub fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if !(log_ratio > f64::NEG_INFINITY) {
        return false;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// One Gaussian random-walk Metropolis step on a scalar.
pub fn metropolis_step<R, F>(current: f64, step_size: f64, mut log_target: F, rng: &mut R) -> (f64, bool)
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> f64,
{
    let z: f64 = rng.sample(StandardNormal);
    let proposal = current + step_size * z;
    let ratio = log_target(proposal) - log_target(current);
    if metropolis_accept(ratio, rng) {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// Robbins-Monro gain for adaptation batch `batch` (1-based).
pub fn adaptation_gain(batch: usize) -> f64 {
    (batch.max(1) as f64).powf(-0.5)
}

/// Multiplicative update `log s += gain (rate - target)`.
pub fn adapt_step_sizes(rates: &[f64], sizes: &[f64], gain: f64, target: f64) -> Vec<f64> {
    rates
        .iter()
        .zip(sizes)
        .map(|(r, s)| s * (gain * (r - target)).exp())
        .collect()
}

/// Precomputed per-match quantities.
struct Design {
    k: usize,
    home: Vec<usize>,
    away: Vec<usize>,
    /// Covariates multiplying coefficient columns j = 0, 1, 2.
    att_h: Vec<[f64; 3]>,
    att_a: Vec<[f64; 3]>,
    def_h: Vec<[f64; 3]>,
    def_a: Vec<[f64; 3]>,
    y_h: Vec<f64>,
    y_a: Vec<f64>,
    sets_x: Vec<[f64; 3]>,
    d_s: Vec<f64>,
    win_x: Vec<[f64; 4]>,
    d_m: Vec<f64>,
    gamma_dirs: Vec<[f64; 3]>,
    eta_dirs: Vec<[f64; 4]>,
}

/// Columns of `L^{-T}` where `L L^T = X^T X / 4 + prior I`: unit moves along
/// them are roughly one posterior standard deviation of a logistic fit.
fn whitened_directions<const D: usize>(rows: &[[f64; D]], prior_precision: f64) -> Vec<[f64; D]> {
    let mut g = DMatrix::<f64>::identity(D, D) * prior_precision;
    for r in rows {
        for a in 0..D {
            for b in 0..D {
                g[(a, b)] += 0.25 * r[a] * r[b];
            }
        }
    }
    let dirs = Cholesky::new(g)
        .and_then(|c| c.l().try_inverse())
        .map(|li| li.transpose());
    (0..D)
        .map(|c| {
            let mut d = [0.0; D];
            for (a, v) in d.iter_mut().enumerate() {
                *v = match &dirs {
                    Some(m) => m[(a, c)],
                    None => f64::from(u8::from(a == c)),
                };
            }
            d
        })
        .collect()
}

impl Design {
    fn new(data: &SeasonData, prior: &PriorSpec) -> Self {
        let ms = &data.matches;
        let sets_x: Vec<[f64; 3]> = ms
            .iter()
            .map(|m| [1.0, f64::from(m.y_h), f64::from(m.y_a)])
            .collect();
        let win_x: Vec<[f64; 4]> = ms
            .iter()
            .map(|m| [1.0, f64::from(m.y_h), f64::from(m.y_a), m.d_s])
            .collect();
        Design {
            k: data.n_teams(),
            home: ms.iter().map(|m| m.home.0).collect(),
            away: ms.iter().map(|m| m.away.0).collect(),
            att_h: ms.iter().map(|m| [1.0, m.eff_home.attack, m.eff_home.serve]).collect(),
            att_a: ms.iter().map(|m| [1.0, m.eff_away.attack, m.eff_away.serve]).collect(),
            def_h: ms.iter().map(|m| [1.0, m.eff_home.defence, m.eff_home.block]).collect(),
            def_a: ms.iter().map(|m| [1.0, m.eff_away.defence, m.eff_away.block]).collect(),
            y_h: ms.iter().map(|m| f64::from(m.y_h)).collect(),
            y_a: ms.iter().map(|m| f64::from(m.y_a)).collect(),
            gamma_dirs: whitened_directions(&sets_x, prior.logistic_precision),
            eta_dirs: whitened_directions(&win_x, prior.logistic_precision),
            sets_x,
            d_s: ms.iter().map(|m| m.d_s).collect(),
            win_x,
            d_m: ms.iter().map(|m| m.d_m).collect(),
        }
    }

    fn n(&self) -> usize {
        self.home.len()
    }
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Attack => 0,
        Side::Defence => 1,
    }
}

/// Builds a starting point. With zero jitter every chain starts from the
/// same deterministic point.
pub fn initialize_chain<R: Rng + ?Sized>(
    data: &SeasonData,
    spec: &PriorSpec,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ParameterState> {
    let mean = data.mean_points().ok_or(Error::NoMatches)?;
    if !(mean > 0.0) {
        return Err(Error::Config("season has no points scored".into()));
    }
    let design = Design::new(data, spec);
    Ok(initial_state(&design, spec, config, mean, rng))
}

fn initial_state<R: Rng + ?Sized>(
    design: &Design,
    spec: &PriorSpec,
    config: &SamplerConfig,
    mean_points: f64,
    rng: &mut R,
) -> ParameterState {
    let jitter = config.init_jitter;
    let mut noise = |scale: f64| -> f64 {
        if jitter == 0.0 {
            0.0
        } else {
            jitter * scale * rng.sample::<f64, _>(StandardNormal)
        }
    };
    let mu = mean_points.ln() + noise(0.05);
    let lambda = noise(0.05);
    let mut stars = || -> TeamCoefficients {
        (0..design.k)
            .map(|_| [noise(0.1), noise(0.1), noise(0.1)])
            .collect()
    };
    let alpha_star = stars();
    let beta_star = stars();
    let mut gamma = [0.0; 3];
    for dir in &design.gamma_dirs {
        let z = noise(1.0);
        for (g, d) in gamma.iter_mut().zip(dir) {
            *g += z * d;
        }
    }
    let mut eta = [0.0; 4];
    for dir in &design.eta_dirs {
        let z = noise(1.0);
        for (e, d) in eta.iter_mut().zip(dir) {
            *e += z * d;
        }
    }
    let hyper = match spec.variant {
        PriorVariant::Basic => {
            let side = BasicHyper {
                mean: [0.0; 3],
                precision: [1.0; 3],
            };
            HyperState::Basic {
                attack: side.clone(),
                defence: side,
            }
        }
        PriorVariant::ScaledIw => {
            let side = ScaledIwHyper {
                raw_mean: [0.0; 3],
                xi: [1.0; 3],
                lambda: Matrix3::identity(),
            };
            HyperState::ScaledIw {
                attack: side.clone(),
                defence: side,
            }
        }
    };
    ParameterState {
        mu,
        lambda,
        alpha_star,
        beta_star,
        hyper,
        gamma,
        eta,
    }
}

/// Metropolis coordinate layout.
struct Layout {
    k: usize,
    n_xi: usize,
}

impl Layout {
    const MU: usize = 0;
    const LAMBDA: usize = 1;

    fn star(&self, side: Side, team: usize, j: usize) -> usize {
        2 + side_index(side) * 3 * self.k + team * 3 + j
    }

    fn xi(&self, side: Side, j: usize) -> usize {
        2 + 6 * self.k + side_index(side) * 3 + j
    }

    fn gamma(&self, c: usize) -> usize {
        2 + 6 * self.k + self.n_xi + c
    }

    fn eta(&self, c: usize) -> usize {
        self.gamma(3) + c
    }

    fn len(&self) -> usize {
        self.eta(4)
    }

    fn names(&self) -> Vec<String> {
        let mut names = vec!["mu".to_string(), "lambda".to_string()];
        for side in Side::BOTH {
            for k in 0..self.k {
                for j in 0..3 {
                    names.push(format!("{}_star[{},{j}]", side.symbol(), k + 1));
                }
            }
        }
        if self.n_xi > 0 {
            for side in Side::BOTH {
                for j in 0..3 {
                    names.push(format!("xi_{}[{j}]", side.symbol()));
                }
            }
        }
        names.extend((0..3).map(|c| format!("gamma_dir[{c}]")));
        names.extend((0..4).map(|c| format!("eta_dir[{c}]")));
        names
    }
}

fn initial_step_sizes(layout: &Layout) -> Vec<f64> {
    let mut s = vec![0.0; layout.len()];
    s[Layout::MU] = 0.01;
    s[Layout::LAMBDA] = 0.02;
    for side in Side::BOTH {
        for k in 0..layout.k {
            for j in 0..3 {
                s[layout.star(side, k, j)] = 0.05;
            }
        }
        if layout.n_xi > 0 {
            for j in 0..3 {
                s[layout.xi(side, j)] = 0.05;
            }
        }
    }
    for c in 0..3 {
        s[layout.gamma(c)] = 1.0;
    }
    for c in 0..4 {
        s[layout.eta(c)] = 1.0;
    }
    s
}

fn points_log_lik(design: &Design, log_h: &[f64], log_a: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..design.n() {
        let (lh, la) = (log_h[i], log_a[i]);
        if lh > MAX_LOG_INTENSITY || la > MAX_LOG_INTENSITY {
            return f64::NEG_INFINITY;
        }
        ll += design.y_h[i] * lh - lh.exp() + design.y_a[i] * la - la.exp();
    }
    ll
}

fn sets_log_lik(design: &Design, gamma: &[f64; 3]) -> f64 {
    design
        .sets_x
        .iter()
        .zip(&design.d_s)
        .map(|(x, &d)| {
            let z = gamma[0] * x[0] + gamma[1] * x[1] + gamma[2] * x[2];
            bernoulli_logit_log_pmf(d, z)
        })
        .sum()
}

fn win_log_lik(design: &Design, eta: &[f64; 4]) -> f64 {
    design
        .win_x
        .iter()
        .zip(&design.d_m)
        .map(|(x, &d)| {
            let z = eta[0] * x[0] + eta[1] * x[1] + eta[2] * x[2] + eta[3] * x[3];
            bernoulli_logit_log_pmf(d, z)
        })
        .sum()
}

struct Sampler<'a> {
    design: &'a Design,
    spec: &'a PriorSpec,
    layout: Layout,
    state: ParameterState,
    /// Centered coefficients per side.
    centered: [TeamCoefficients; 2],
    log_h: Vec<f64>,
    log_a: Vec<f64>,
    scratch_h: Vec<f64>,
    scratch_a: Vec<f64>,
    ll_points: f64,
    ll_sets: f64,
    ll_win: f64,
    /// Inverse `Lambda` per side, scaled-IW only.
    row_precision: [Matrix3<f64>; 2],
    steps: Vec<f64>,
    batch_accepts: Vec<u32>,
    kept_accepts: Vec<u64>,
    delta: Vec<f64>,
}

impl<'a> Sampler<'a> {
    fn new(design: &'a Design, spec: &'a PriorSpec, state: ParameterState) -> Result<Self> {
        let n_xi = if spec.variant == PriorVariant::ScaledIw { 6 } else { 0 };
        let layout = Layout { k: design.k, n_xi };
        let n = design.n();
        let steps = initial_step_sizes(&layout);
        let mut s = Sampler {
            design,
            spec,
            state,
            centered: [Vec::new(), Vec::new()],
            log_h: vec![0.0; n],
            log_a: vec![0.0; n],
            scratch_h: vec![0.0; n],
            scratch_a: vec![0.0; n],
            ll_points: 0.0,
            ll_sets: 0.0,
            ll_win: 0.0,
            row_precision: [Matrix3::identity(); 2],
            batch_accepts: vec![0; steps.len()],
            kept_accepts: vec![0; steps.len()],
            steps,
            delta: vec![0.0; design.k],
            layout,
        };
        s.refresh()?;
        Ok(s)
    }

    /// Recomputes every cache from the state, discarding accumulated
    /// rounding from incremental updates.
    fn refresh(&mut self) -> Result<()> {
        let st = &self.state;
        self.centered = [
            center_columns(&st.effective_stars(Side::Attack)),
            center_columns(&st.effective_stars(Side::Defence)),
        ];
        let d = self.design;
        let (alpha, beta) = (&self.centered[0], &self.centered[1]);
        let dot = |c: &[f64; 3], x: &[f64; 3]| c[0] * x[0] + c[1] * x[1] + c[2] * x[2];
        for i in 0..d.n() {
            let (h, a) = (d.home[i], d.away[i]);
            self.log_h[i] = st.mu + st.lambda + dot(&alpha[h], &d.att_h[i]) + dot(&beta[a], &d.def_a[i]);
            self.log_a[i] = st.mu + dot(&alpha[a], &d.att_a[i]) + dot(&beta[h], &d.def_h[i]);
        }
        self.ll_points = points_log_lik(d, &self.log_h, &self.log_a);
        self.ll_sets = sets_log_lik(d, &st.gamma);
        self.ll_win = win_log_lik(d, &st.eta);
        if let HyperState::ScaledIw { attack, defence } = &st.hyper {
            for (slot, h) in self.row_precision.iter_mut().zip([attack, defence]) {
                *slot = Cholesky::new(h.lambda)
                    .ok_or(Error::NotPositiveDefinite("lambda"))?
                    .inverse();
            }
        }
        Ok(())
    }

    /// Fills the scratch buffers with log-intensities shifted by `shift(i)`
    /// and returns their log-likelihood.
    fn propose_points(&mut self, shift: impl Fn(usize) -> (f64, f64)) -> f64 {
        for i in 0..self.design.n() {
            let (dh, da) = shift(i);
            self.scratch_h[i] = self.log_h[i] + dh;
            self.scratch_a[i] = self.log_a[i] + da;
        }
        points_log_lik(self.design, &self.scratch_h, &self.scratch_a)
    }

    fn commit_points(&mut self, ll: f64) {
        std::mem::swap(&mut self.log_h, &mut self.scratch_h);
        std::mem::swap(&mut self.log_a, &mut self.scratch_a);
        self.ll_points = ll;
    }

    /// Log-likelihood after adding `self.delta` (already centered) to
    /// column `j` of the `side` coefficients.
    fn propose_column(&mut self, side: Side, j: usize) -> f64 {
        let d = self.design;
        let delta = std::mem::take(&mut self.delta);
        let ll = match side {
            Side::Attack => self.propose_points(|i| {
                (delta[d.home[i]] * d.att_h[i][j], delta[d.away[i]] * d.att_a[i][j])
            }),
            Side::Defence => self.propose_points(|i| {
                (delta[d.away[i]] * d.def_a[i][j], delta[d.home[i]] * d.def_h[i][j])
            }),
        };
        self.delta = delta;
        ll
    }

    fn commit_column(&mut self, side: Side, j: usize, ll: f64) {
        self.commit_points(ll);
        let col = &mut self.centered[side_index(side)];
        for (row, dv) in col.iter_mut().zip(&self.delta) {
            row[j] += dv;
        }
    }

    fn record(&mut self, idx: usize, accepted: bool) {
        if accepted {
            self.batch_accepts[idx] += 1;
        }
    }

    fn move_mu<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let idx = Layout::MU;
        let old = self.state.mu;
        let d = self.steps[idx] * rng.sample::<f64, _>(StandardNormal);
        let ll = self.propose_points(|_| (d, d));
        let p = self.spec.normal_fixed_precision;
        let ratio = ll - self.ll_points + normal_log_density(old + d, 0.0, p)
            - normal_log_density(old, 0.0, p);
        let ok = metropolis_accept(ratio, rng);
        if ok {
            self.state.mu = old + d;
            self.commit_points(ll);
        }
        self.record(idx, ok);
    }

    fn move_lambda<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let idx = Layout::LAMBDA;
        let old = self.state.lambda;
        let d = self.steps[idx] * rng.sample::<f64, _>(StandardNormal);
        let ll = self.propose_points(|_| (d, 0.0));
        let p = self.spec.normal_fixed_precision;
        let ratio = ll - self.ll_points + normal_log_density(old + d, 0.0, p)
            - normal_log_density(old, 0.0, p);
        let ok = metropolis_accept(ratio, rng);
        if ok {
            self.state.lambda = old + d;
            self.commit_points(ll);
        }
        self.record(idx, ok);
    }

    /// Change in the coefficient prior when `star[team][j]` moves to `new`.
    fn star_prior_delta(&self, side: Side, team: usize, j: usize, new: f64) -> f64 {
        let row = self.state.stars(side)[team];
        match &self.state.hyper {
            HyperState::Basic { attack, defence } => {
                let h = if side == Side::Attack { attack } else { defence };
                normal_log_density(new, h.mean[j], h.precision[j])
                    - normal_log_density(row[j], h.mean[j], h.precision[j])
            }
            HyperState::ScaledIw { attack, defence } => {
                let h = if side == Side::Attack { attack } else { defence };
                let p = &self.row_precision[side_index(side)];
                let quad = |r: &[f64; 3]| {
                    let d = [r[0] - h.raw_mean[0], r[1] - h.raw_mean[1], r[2] - h.raw_mean[2]];
                    let mut q = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            q += d[a] * p[(a, b)] * d[b];
                        }
                    }
                    q
                };
                let mut moved = row;
                moved[j] = new;
                -0.5 * (quad(&moved) - quad(&row))
            }
        }
    }

    fn move_star<R: Rng + ?Sized>(&mut self, side: Side, team: usize, j: usize, rng: &mut R) {
        let idx = self.layout.star(side, team, j);
        let old = self.state.stars(side)[team][j];
        let new = old + self.steps[idx] * rng.sample::<f64, _>(StandardNormal);
        let scale = self.state.hyper.scales(side)[j];
        let d_eff = (new - old) * scale;
        let k = self.design.k as f64;
        for (t, slot) in self.delta.iter_mut().enumerate() {
            *slot = if t == team { d_eff * (1.0 - 1.0 / k) } else { -d_eff / k };
        }
        let ll = self.propose_column(side, j);
        let ratio = ll - self.ll_points + self.star_prior_delta(side, team, j, new);
        let ok = metropolis_accept(ratio, rng);
        if ok {
            self.state.stars_mut(side)[team][j] = new;
            self.commit_column(side, j, ll);
        }
        self.record(idx, ok);
    }

    fn move_xi<R: Rng + ?Sized>(&mut self, side: Side, j: usize, rng: &mut R) {
        let idx = self.layout.xi(side, j);
        let old = self.state.hyper.scales(side)[j];
        let new = old + self.steps[idx] * rng.sample::<f64, _>(StandardNormal);
        let prior_delta = self.spec.xi_prior.log_density(new) - self.spec.xi_prior.log_density(old);
        if prior_delta == f64::NEG_INFINITY {
            self.record(idx, false);
            return;
        }
        let raw: Vec<f64> = self.state.stars(side).iter().map(|r| r[j]).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        for (slot, r) in self.delta.iter_mut().zip(&raw) {
            *slot = (new - old) * (r - mean);
        }
        let ll = self.propose_column(side, j);
        let ok = metropolis_accept(ll - self.ll_points + prior_delta, rng);
        if ok {
            if let HyperState::ScaledIw { attack, defence } = &mut self.state.hyper {
                let h = if side == Side::Attack { attack } else { defence };
                h.xi[j] = new;
            }
            self.commit_column(side, j, ll);
        }
        self.record(idx, ok);
    }

    fn move_gamma<R: Rng + ?Sized>(&mut self, c: usize, rng: &mut R) {
        let idx = self.layout.gamma(c);
        let z = self.steps[idx] * rng.sample::<f64, _>(StandardNormal);
        let old = self.state.gamma;
        let mut new = old;
        for (g, d) in new.iter_mut().zip(&self.design.gamma_dirs[c]) {
            *g += z * d;
        }
        let p = self.spec.logistic_precision;
        let prior: f64 = new
            .iter()
            .zip(&old)
            .map(|(n, o)| normal_log_density(*n, 0.0, p) - normal_log_density(*o, 0.0, p))
            .sum();
        let ll = sets_log_lik(self.design, &new);
        let ok = metropolis_accept(ll - self.ll_sets + prior, rng);
        if ok {
            self.state.gamma = new;
            self.ll_sets = ll;
        }
        self.record(idx, ok);
    }

    fn move_eta<R: Rng + ?Sized>(&mut self, c: usize, rng: &mut R) {
        let idx = self.layout.eta(c);
        let z = self.steps[idx] * rng.sample::<f64, _>(StandardNormal);
        let old = self.state.eta;
        let mut new = old;
        for (e, d) in new.iter_mut().zip(&self.design.eta_dirs[c]) {
            *e += z * d;
        }
        let p = self.spec.logistic_precision;
        let prior: f64 = new
            .iter()
            .zip(&old)
            .map(|(n, o)| normal_log_density(*n, 0.0, p) - normal_log_density(*o, 0.0, p))
            .sum();
        let ll = win_log_lik(self.design, &new);
        let ok = metropolis_accept(ll - self.ll_win + prior, rng);
        if ok {
            self.state.eta = new;
            self.ll_win = ll;
        }
        self.record(idx, ok);
    }

    fn gibbs<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let spec = self.spec;
        let k = self.design.k;
        let ParameterState {
            alpha_star,
            beta_star,
            hyper,
            ..
        } = &mut self.state;
        match hyper {
            HyperState::Basic { attack, defence } => {
                for (stars, h) in [(&*alpha_star, attack), (&*beta_star, defence)] {
                    for j in 0..3 {
                        let col: Vec<f64> = stars.iter().map(|r| r[j]).collect();
                        h.mean[j] = gibbs_update_hyper_mean(&col, h.precision[j], spec.normal_fixed_precision, rng);
                        h.precision[j] = match spec.sd_uniform_upper {
                            Some(upper) => gibbs_update_precision_uniform_sd(&col, h.mean[j], upper, rng),
                            None => gibbs_update_hyper_precision(&col, h.mean[j], spec.gamma_shape, spec.gamma_rate, rng),
                        };
                    }
                }
            }
            HyperState::ScaledIw { attack, defence } => {
                let scale = spec.iw_scale_matrix();
                for (s, (stars, h)) in [(&*alpha_star, attack), (&*beta_star, defence)].into_iter().enumerate() {
                    h.raw_mean = gibbs_update_raw_mean(stars, &h.lambda, spec.normal_fixed_precision, rng)?;
                    let means = vec![h.raw_mean; k];
                    h.lambda = gibbs_update_wishart(stars, &means, spec.iw_nu, &scale, rng)?;
                    self.row_precision[s] = Cholesky::new(h.lambda)
                        .ok_or(Error::NotPositiveDefinite("lambda"))?
                        .inverse();
                }
            }
        }
        Ok(())
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.refresh()?;
        self.move_mu(rng);
        self.move_lambda(rng);
        for side in Side::BOTH {
            for team in 0..self.design.k {
                for j in 0..3 {
                    self.move_star(side, team, j, rng);
                }
            }
        }
        if self.layout.n_xi > 0 {
            for side in Side::BOTH {
                for j in 0..3 {
                    self.move_xi(side, j, rng);
                }
            }
        }
        for c in 0..3 {
            self.move_gamma(c, rng);
        }
        for c in 0..4 {
            self.move_eta(c, rng);
        }
        self.gibbs(rng)
    }
}

fn check_inputs(data: &SeasonData, spec: &PriorSpec, config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    spec.validate()?;
    if data.matches.is_empty() {
        return Err(Error::NoMatches);
    }
    let report = validate_season(data);
    if !report.is_clean() {
        return Err(Error::InvalidData(format!("validation errors:\n{report}")));
    }
    Ok(())
}

/// Runs one chain. The trace is a pure function of
/// `(data, spec, config, chain_id)`.
pub fn run_chain(
    data: &SeasonData,
    spec: &PriorSpec,
    config: &SamplerConfig,
    chain_id: usize,
) -> Result<ChainTrace> {
    check_inputs(data, spec, config)?;
    let design = Design::new(data, spec);
    run_chain_with(&design, data, spec, config, chain_id)
}

fn run_chain_with(
    design: &Design,
    data: &SeasonData,
    spec: &PriorSpec,
    config: &SamplerConfig,
    chain_id: usize,
) -> Result<ChainTrace> {
    let seed = chain_seed(config.seed, chain_id);
    let mut rng = seed.rng();
    let mean = data.mean_points().ok_or(Error::NoMatches)?;
    let init = initial_state(design, spec, config, mean, &mut rng);
    let wrap = |iteration: usize, e: Error| Error::Sampler {
        chain: chain_id,
        iteration,
        source: Box::new(e),
    };
    let mut sampler = Sampler::new(design, spec, init).map_err(|e| wrap(0, e))?;
    let mut samples = Vec::with_capacity(config.retained_len());
    let adapt_until = config.adapt_until();
    let mut batch = 0;

    for it in 0..config.n_iter {
        sampler.sweep(&mut rng).map_err(|e| wrap(it, e))?;

        if it < adapt_until && (it + 1) % ADAPT_BATCH == 0 {
            batch += 1;
            let rates: Vec<f64> = sampler
                .batch_accepts
                .iter()
                .map(|&a| f64::from(a) / ADAPT_BATCH as f64)
                .collect();
            sampler.steps = adapt_step_sizes(&rates, &sampler.steps, adaptation_gain(batch), config.target_accept);
        }
        if it >= config.burn_in {
            for (kept, b) in sampler.kept_accepts.iter_mut().zip(&sampler.batch_accepts) {
                *kept += u64::from(*b);
            }
        }
        if it >= config.burn_in || (it + 1) % ADAPT_BATCH == 0 {
            sampler.batch_accepts.iter_mut().for_each(|a| *a = 0);
        }

        if it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0 {
            let sample = PosteriorSample::from_state(sampler.state.clone(), data, spec);
            if !sample.log_posterior.is_finite() {
                return Err(wrap(
                    it,
                    Error::Config(format!("non-finite log posterior {}", sample.log_posterior)),
                ));
            }
            samples.push(sample);
        }
    }

    let kept_iters = (config.n_iter - config.burn_in) as f64;
    let acceptance = sampler
        .layout
        .names()
        .into_iter()
        .zip(&sampler.kept_accepts)
        .map(|(n, &a)| (n, a as f64 / kept_iters))
        .collect();
    Ok(ChainTrace {
        chain_id,
        seed,
        variant: spec.variant,
        samples,
        acceptance,
        step_sizes: sampler.steps,
    })
}

fn tag_chain(chain_id: usize, e: Error) -> Error {
    match e {
        e @ Error::Sampler { .. } => e,
        other => Error::Sampler {
            chain: chain_id,
            iteration: 0,
            source: Box::new(other),
        },
    }
}

/// Runs `config.n_chains` chains in parallel; output is in chain order.
pub fn run_all_chains(data: &SeasonData, spec: &PriorSpec, config: &SamplerConfig) -> Result<Vec<ChainTrace>> {
    check_inputs(data, spec, config)?;
    let design = Design::new(data, spec);
    (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain_with(&design, data, spec, config, c).map_err(|e| tag_chain(c, e)))
        .collect()
}

/// Same as [`run_all_chains`] on the calling thread.
pub fn run_chains_sequential(
    data: &SeasonData,
    spec: &PriorSpec,
    config: &SamplerConfig,
) -> Result<Vec<ChainTrace>> {
    check_inputs(data, spec, config)?;
    let design = Design::new(data, spec);
    (0..config.n_chains)
        .map(|c| run_chain_with(&design, data, spec, config, c).map_err(|e| tag_chain(c, e)))
        .collect()
}
