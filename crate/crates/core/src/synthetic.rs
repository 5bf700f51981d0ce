//! Synthetic seasons drawn from the model itself, for recovery checks and
//! demos.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson};

use crate::data::{
    center_covariates, Efficiencies, MatchRecord, SeasonData, TeamId, TeamIndex, N_COVARIATES,
};
use crate::model::{
    apply_sum_to_zero, log_intensities, prob_five_sets, prob_home_win, BasicHyper, CenteredEffects,
    HyperState, ParameterState, TeamCoefficients,
};

/// Double round-robin schedule by the circle method. Every ordered pair of
/// distinct teams appears exactly once.
pub fn double_round_robin(k: usize) -> Vec<(usize, usize)> {
    let mut slots: Vec<Option<usize>> = (0..k).map(Some).collect();
    if k % 2 == 1 {
        slots.push(None);
    }
    let n = slots.len();
    let mut first = Vec::new();
    for round in 0..n.saturating_sub(1) {
        for i in 0..n / 2 {
            if let (Some(a), Some(b)) = (slots[i], slots[n - 1 - i]) {
                // Alternate venues so home games are spread out.
                first.push(if (round + i) % 2 == 0 { (a, b) } else { (b, a) });
            }
        }
        let last = slots.pop().expect("non-empty");
        slots.insert(1, last);
    }
    let second: Vec<(usize, usize)> = first.iter().map(|&(h, a)| (a, h)).collect();
    first.into_iter().chain(second).collect()
}

/// Ground truth for a synthetic season. Team coefficients are already
/// centered and apply to centered covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub mu: f64,
    pub lambda: f64,
    pub alpha: TeamCoefficients,
    pub beta: TeamCoefficients,
    pub gamma: [f64; 3],
    pub eta: [f64; 4],
    /// Per-team mean efficiencies (serve, attack, defence, block).
    pub team_skill: Vec<[f64; 4]>,
}

const SKILL_MEAN: [f64; 4] = [-0.02, 0.38, 0.22, 0.12];
const SKILL_TEAM_SD: [f64; 4] = [0.03, 0.05, 0.05, 0.04];
const SKILL_MATCH_SD: [f64; 4] = [0.06, 0.08, 0.10, 0.08];

fn centered_column<R: Rng + ?Sized>(k: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    let d = Normal::new(0.0, sd).expect("finite sd");
    let raw: Vec<f64> = (0..k).map(|_| d.sample(rng)).collect();
    apply_sum_to_zero(&raw)
}

fn coefficients<R: Rng + ?Sized>(k: usize, sds: [f64; 3], rng: &mut R) -> TeamCoefficients {
    let cols: Vec<Vec<f64>> = sds.iter().map(|&sd| centered_column(k, sd, rng)).collect();
    (0..k).map(|t| [cols[0][t], cols[1][t], cols[2][t]]).collect()
}

impl SyntheticTruth {
    /// Draws a plausible truth for `k` teams.
    pub fn draw<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let alpha = coefficients(k, [0.07, 0.2, 0.2], rng);
        let beta = coefficients(k, [0.08, 0.2, 0.2], rng);
        let team_skill = (0..k)
            .map(|_| {
                let mut s = [0.0; 4];
                for (i, v) in s.iter_mut().enumerate() {
                    *v = SKILL_MEAN[i] + SKILL_TEAM_SD[i] * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                s
            })
            .collect();
        SyntheticTruth {
            mu: 4.44,
            lambda: 0.03,
            alpha,
            beta,
            gamma: [-12.0, 0.06, 0.06],
            eta: [0.0, 0.15, -0.15, 0.0],
            team_skill,
        }
    }

    pub fn n_teams(&self) -> usize {
        self.alpha.len()
    }

    pub fn effects(&self) -> CenteredEffects {
        CenteredEffects {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
        }
    }

    /// The truth as a basic-prior parameter state (stars equal to the
    /// centered effects).
    pub fn state(&self) -> ParameterState {
        let hyper = BasicHyper {
            mean: [0.0; 3],
            precision: [1.0; 3],
        };
        ParameterState {
            mu: self.mu,
            lambda: self.lambda,
            alpha_star: self.alpha.clone(),
            beta_star: self.beta.clone(),
            hyper: HyperState::Basic {
                attack: hyper.clone(),
                defence: hyper,
            },
            gamma: self.gamma,
            eta: self.eta,
        }
    }
}

/// Set score consistent with the indicators; three-set and four-set wins
/// are equally likely when no fifth set was played.
fn sets_from_indicators<R: Rng + ?Sized>(d_s: bool, d_m: bool, rng: &mut R) -> (u32, u32) {
    let loser = if d_s { 2 } else { rng.random_range(0..2) };
    if d_m {
        (3, loser)
    } else {
        (loser, 3)
    }
}

/// Simulates one double round-robin season from `truth`. The returned
/// covariates are on the raw scale; the truth applies after
/// [`center_covariates`].
pub fn simulate_season<R: Rng + ?Sized>(truth: &SyntheticTruth, rng: &mut R) -> SeasonData {
    let k = truth.n_teams();
    let names: Vec<String> = (1..=k).map(|c| format!("Team {c:02}")).collect();
    let teams = TeamIndex::new(names).expect("k >= 2 distinct names");
    let schedule = double_round_robin(k);

    let noise = |i: usize, rng: &mut R| SKILL_MATCH_SD[i] * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let draw_eff = |team: usize, rng: &mut R| {
        let mut e = [0.0; 4];
        for (i, v) in e.iter_mut().enumerate() {
            *v = (truth.team_skill[team][i] + noise(i, rng)).clamp(-1.0, 1.0);
        }
        Efficiencies::from_array(e)
    };
    let matches: Vec<MatchRecord> = schedule
        .iter()
        .enumerate()
        .map(|(i, &(h, a))| MatchRecord {
            match_id: i as u32 + 1,
            home: TeamId(h),
            away: TeamId(a),
            y_h: 0,
            y_a: 0,
            s_h: 0,
            s_a: 0,
            d_s: 0.0,
            d_m: 0.0,
            eff_home: draw_eff(h, rng),
            eff_away: draw_eff(a, rng),
        })
        .collect();
    let raw = SeasonData {
        teams,
        matches,
        covariate_means: [0.0; N_COVARIATES],
    };
    let centered = center_covariates(&raw);
    let effects = truth.effects();

    let mut out = raw;
    for (m, c) in out.matches.iter_mut().zip(&centered.matches) {
        let (lh, la) = log_intensities(truth.mu, truth.lambda, &effects, c);
        let y_h = Poisson::new(lh.exp()).expect("finite intensity").sample(rng) as u32;
        let y_a = Poisson::new(la.exp()).expect("finite intensity").sample(rng) as u32;
        let p5 = prob_five_sets(&truth.gamma, y_h, y_a);
        let d_s = Bernoulli::new(p5).expect("probability").sample(rng);
        let pw = prob_home_win(&truth.eta, y_h, y_a, f64::from(u8::from(d_s)));
        let d_m = Bernoulli::new(pw).expect("probability").sample(rng);
        let (s_h, s_a) = sets_from_indicators(d_s, d_m, rng);
        m.y_h = y_h;
        m.y_a = y_a;
        m.s_h = s_h;
        m.s_a = s_a;
        m.d_s = f64::from(u8::from(d_s));
        m.d_m = f64::from(u8::from(d_m));
    }
    out
}
