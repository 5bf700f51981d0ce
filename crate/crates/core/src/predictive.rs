//! Posterior-predictive replication of matches and seasons, league tables,
//! ranking probabilities and cumulative points.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Efficiencies, MatchRecord, SeasonData, TeamId, TeamIndex, COVARIATE_NAMES, N_COVARIATES};
use crate::diagnostics::quantiles;
use crate::error::{Error, Result};
use crate::mcmc::{PosteriorSample, RngSeed};
use crate::model::{prob_five_sets, prob_home_win, scoring_intensity_with};

/// League points for a set score: 3-0 and 3-1 give 3 to the winner and 0
/// to the loser, 3-2 gives 2 and 1.
pub fn league_points(s_h: u32, s_a: u32) -> Result<(u32, u32)> {
    match (s_h, s_a) {
        (3, 0 | 1) => Ok((3, 0)),
        (3, 2) => Ok((2, 1)),
        (0 | 1, 3) => Ok((0, 3)),
        (2, 3) => Ok((1, 2)),
        _ => Err(Error::IllegalSets(s_h, s_a)),
    }
}

/// League points from the winner and five-set flags alone.
pub fn league_points_from_flags(five_sets: bool, home_won: bool) -> (u32, u32) {
    match (five_sets, home_won) {
        (false, true) => (3, 0),
        (true, true) => (2, 1),
        (false, false) => (0, 3),
        (true, false) => (1, 2),
    }
}

/// A match to replicate. Covariates are on the centered scale; zero means
/// league-average efficiency.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub home: TeamId,
    pub away: TeamId,
    pub eff_home: Efficiencies,
    pub eff_away: Efficiencies,
}

const ZERO_EFF: Efficiencies = Efficiencies {
    serve: 0.0,
    attack: 0.0,
    defence: 0.0,
    block: 0.0,
};

impl Fixture {
    pub fn new(home: TeamId, away: TeamId) -> Self {
        Fixture {
            home,
            away,
            eff_home: ZERO_EFF,
            eff_away: ZERO_EFF,
        }
    }

    fn context(&self) -> MatchRecord {
        MatchRecord {
            match_id: 0,
            home: self.home,
            away: self.away,
            y_h: 0,
            y_a: 0,
            s_h: 0,
            s_a: 0,
            d_s: 0.0,
            d_m: 0.0,
            eff_home: self.eff_home,
            eff_away: self.eff_away,
        }
    }
}

/// Which covariates replicated matches use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CovariatePolicy {
    /// Centered covariates at zero (league-average skill).
    #[default]
    Zero,
    /// The season's own covariates, which must already be centered.
    Observed,
}

/// The season's schedule, in match order.
pub fn fixtures_from_season(data: &SeasonData, policy: CovariatePolicy) -> Vec<Fixture> {
    data.matches
        .iter()
        .map(|m| match policy {
            CovariatePolicy::Zero => Fixture::new(m.home, m.away),
            CovariatePolicy::Observed => Fixture {
                home: m.home,
                away: m.away,
                eff_home: m.eff_home,
                eff_away: m.eff_away,
            },
        })
        .collect()
}

/// Reads fixtures with `home_team` and `away_team` columns. Optional
/// efficiency columns (same names as the season file) are taken on the raw
/// scale and centered with `covariate_means`; missing ones default to the
/// league average. Every unmatched team name is reported.
pub fn parse_fixtures_reader<R: Read>(
    reader: R,
    source: &str,
    teams: &TeamIndex,
    covariate_means: &[f64; N_COVARIATES],
) -> Result<Vec<Fixture>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let home_col = col("home_team").ok_or_else(|| Error::MissingColumn("home_team".into()))?;
    let away_col = col("away_team").ok_or_else(|| Error::MissingColumn("away_team".into()))?;
    let cov_cols: Vec<Option<usize>> = COVARIATE_NAMES.iter().map(|n| col(n)).collect();

    let mut fixtures = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let mut side = |c: usize| -> Option<TeamId> {
            let name = rec.get(c).unwrap_or("");
            let id = teams.id(name);
            if id.is_none() && !unknown.iter().any(|u| u == name) {
                unknown.push(name.to_string());
            }
            id
        };
        let (home, away) = (side(home_col), side(away_col));
        let mut cov = [0.0; N_COVARIATES];
        for (j, c) in cov_cols.iter().enumerate() {
            if let Some(c) = c {
                let field = rec.get(*c).unwrap_or("");
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: source.to_string(),
                    line,
                    message: format!("`{}`: invalid number `{field}`", COVARIATE_NAMES[j]),
                })?;
                cov[j] = v - covariate_means[j];
            }
        }
        if let (Some(home), Some(away)) = (home, away) {
            if home == away {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    message: "a team cannot play itself".into(),
                });
            }
            fixtures.push(Fixture {
                home,
                away,
                eff_home: Efficiencies::from_array([cov[0], cov[1], cov[2], cov[3]]),
                eff_away: Efficiencies::from_array([cov[4], cov[5], cov[6], cov[7]]),
            });
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownTeam(unknown.join(", ")));
    }
    if fixtures.is_empty() {
        return Err(Error::NoMatches);
    }
    Ok(fixtures)
}

pub fn parse_fixtures_csv(
    path: impl AsRef<Path>,
    teams: &TeamIndex,
    covariate_means: &[f64; N_COVARIATES],
) -> Result<Vec<Fixture>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_fixtures_reader(f, &path.display().to_string(), teams, covariate_means)
}

/// Re-indexes `data` onto `teams` by name. Fails naming every team that
/// appears on only one side.
pub fn align_season_teams(data: &SeasonData, teams: &TeamIndex) -> Result<SeasonData> {
    let extra: Vec<&str> = data
        .teams
        .names()
        .iter()
        .filter(|n| teams.id(n).is_none())
        .map(String::as_str)
        .collect();
    let missing: Vec<&str> = teams
        .names()
        .iter()
        .filter(|n| data.teams.id(n).is_none())
        .map(String::as_str)
        .collect();
    if !extra.is_empty() || !missing.is_empty() {
        let mut parts = Vec::new();
        if !extra.is_empty() {
            parts.push(format!("not in the fitted model: {}", extra.join(", ")));
        }
        if !missing.is_empty() {
            parts.push(format!("missing from the season: {}", missing.join(", ")));
        }
        return Err(Error::UnknownTeam(parts.join("; ")));
    }
    let map = |id: TeamId| teams.id(data.teams.name(id)).expect("checked above");
    let mut out = data.clone();
    for m in &mut out.matches {
        m.home = map(m.home);
        m.away = map(m.away);
    }
    out.teams = teams.clone();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MatchReplicate {
    pub y_h: u32,
    pub y_a: u32,
    pub d_s: bool,
    pub d_m: bool,
}

impl MatchReplicate {
    pub fn league_points(&self) -> (u32, u32) {
        league_points_from_flags(self.d_s, self.d_m)
    }
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    // One uniform per draw, so later draws stay aligned across parameter
    // changes.
    rng.random::<f64>() < p
}

fn poisson<R: Rng + ?Sized>(theta: f64, rng: &mut R) -> u32 {
    if theta <= 0.0 {
        return 0;
    }
    Poisson::new(theta).map_or(0, |d| d.sample(rng) as u32)
}

/// Draws points, then the five-set flag given the points, then the
/// home-win flag given both.
pub fn replicate_match<R: Rng + ?Sized>(
    sample: &PosteriorSample,
    fixture: &Fixture,
    rng: &mut R,
) -> Result<MatchReplicate> {
    let st = &sample.state;
    let theta = scoring_intensity_with(st.mu, st.lambda, &sample.effects, &fixture.context())?;
    let y_h = poisson(theta.theta_h, rng);
    let y_a = poisson(theta.theta_a, rng);
    let d_s = bernoulli(prob_five_sets(&st.gamma, y_h, y_a), rng);
    let d_m = bernoulli(prob_home_win(&st.eta, y_h, y_a, f64::from(u8::from(d_s))), rng);
    Ok(MatchReplicate { y_h, y_a, d_s, d_m })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TeamRecord {
    pub played: u32,
    pub points_scored: u32,
    pub points_conceded: u32,
    pub wins: u32,
    pub league_points: u32,
}

/// Final standings. `records` is indexed by team; `order` lists teams from
/// first to last place.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LeagueTable {
    pub records: Vec<TeamRecord>,
    pub order: Vec<TeamId>,
}

/// One played or replicated result, for table building.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResultLine {
    pub home: TeamId,
    pub away: TeamId,
    pub y_h: u32,
    pub y_a: u32,
    pub home_won: bool,
    pub points: (u32, u32),
}

impl LeagueTable {
    pub fn from_results(n_teams: usize, results: &[ResultLine]) -> Self {
        let mut records = vec![TeamRecord::default(); n_teams];
        for r in results {
            let h = &mut records[r.home.0];
            h.played += 1;
            h.points_scored += r.y_h;
            h.points_conceded += r.y_a;
            h.wins += u32::from(r.home_won);
            h.league_points += r.points.0;
            let a = &mut records[r.away.0];
            a.played += 1;
            a.points_scored += r.y_a;
            a.points_conceded += r.y_h;
            a.wins += u32::from(!r.home_won);
            a.league_points += r.points.1;
        }
        let mut order: Vec<TeamId> = (0..n_teams).map(TeamId).collect();
        // League points, then wins, then point difference; team code last
        // so the order is total.
        order.sort_by(|a, b| {
            let (ra, rb) = (&records[a.0], &records[b.0]);
            let diff = |r: &TeamRecord| i64::from(r.points_scored) - i64::from(r.points_conceded);
            rb.league_points
                .cmp(&ra.league_points)
                .then(rb.wins.cmp(&ra.wins))
                .then(diff(rb).cmp(&diff(ra)))
                .then(a.0.cmp(&b.0))
        });
        LeagueTable { records, order }
    }

    /// 1-based final position of every team.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.records.len()];
        for (p, t) in self.order.iter().enumerate() {
            pos[t.0] = p + 1;
        }
        pos
    }
}

/// Result lines of an observed season.
pub fn observed_results(data: &SeasonData) -> Result<Vec<ResultLine>> {
    data.matches
        .iter()
        .map(|m| {
            Ok(ResultLine {
                home: m.home,
                away: m.away,
                y_h: m.y_h,
                y_a: m.y_a,
                home_won: m.s_h > m.s_a,
                points: league_points(m.s_h, m.s_a)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeasonReplicate {
    /// Index of the posterior draw used.
    pub sample_index: usize,
    pub matches: Vec<MatchReplicate>,
    pub table: LeagueTable,
}

impl SeasonReplicate {
    pub fn results(&self, fixtures: &[Fixture]) -> Vec<ResultLine> {
        fixtures
            .iter()
            .zip(&self.matches)
            .map(|(f, m)| ResultLine {
                home: f.home,
                away: f.away,
                y_h: m.y_h,
                y_a: m.y_a,
                home_won: m.d_m,
                points: m.league_points(),
            })
            .collect()
    }
}

/// Stream offset keeping replicate streams apart from chain streams under
/// the same master seed.
const REPLICATE_STREAM_BASE: u64 = 1 << 32;

/// Seed of replicate `r`.
pub fn replicate_seed(master: u64, r: usize) -> RngSeed {
    RngSeed {
        master,
        stream: REPLICATE_STREAM_BASE + r as u64,
    }
}

/// Replicates every fixture `n_rep` times. Each replicate resamples one
/// posterior draw uniformly and uses its own RNG stream, so the output
/// does not depend on thread scheduling.
pub fn replicate_season(
    samples: &[PosteriorSample],
    fixtures: &[Fixture],
    n_teams: usize,
    n_rep: usize,
    seed: u64,
) -> Result<Vec<SeasonReplicate>> {
    if samples.is_empty() {
        return Err(Error::Config("no posterior draws to replicate from".into()));
    }
    if fixtures.is_empty() {
        return Err(Error::NoMatches);
    }
    if n_rep == 0 {
        return Err(Error::Config("n_rep must be at least 1".into()));
    }
    if let Some(f) = fixtures.iter().find(|f| f.home.0 >= n_teams || f.away.0 >= n_teams) {
        return Err(Error::UnknownTeam(format!(
            "team code {} outside 1..={n_teams}",
            f.home.code().max(f.away.code())
        )));
    }
    (0..n_rep)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_seed(seed, r).rng();
            let sample_index = rng.random_range(0..samples.len());
            let sample = &samples[sample_index];
            let matches = fixtures
                .iter()
                .map(|f| replicate_match(sample, f, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut rep = SeasonReplicate {
                sample_index,
                matches,
                table: LeagueTable {
                    records: Vec::new(),
                    order: Vec::new(),
                },
            };
            rep.table = LeagueTable::from_results(n_teams, &rep.results(fixtures));
            Ok(rep)
        })
        .collect()
}

/// `probs[team][position - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankDistribution {
    pub probs: Vec<Vec<f64>>,
}

pub fn rank_probabilities(replicates: &[SeasonReplicate], n_teams: usize) -> RankDistribution {
    let mut counts = vec![vec![0u64; n_teams]; n_teams];
    for r in replicates {
        for (team, pos) in r.table.positions().into_iter().enumerate() {
            counts[team][pos - 1] += 1;
        }
    }
    let n = replicates.len().max(1) as f64;
    RankDistribution {
        probs: counts
            .into_iter()
            .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
            .collect(),
    }
}

/// Running league-point totals per team, one entry per match the team
/// plays, in fixture order.
pub fn cumulative_points(n_teams: usize, results: &[ResultLine]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); n_teams];
    for r in results {
        for (team, pts) in [(r.home, r.points.0), (r.away, r.points.1)] {
            let prev = out[team.0].last().copied().unwrap_or(0);
            out[team.0].push(prev + pts);
        }
    }
    out
}

/// Mean replicated trajectory per team and match day.
pub fn mean_cumulative_points(replicates: &[SeasonReplicate], fixtures: &[Fixture], n_teams: usize) -> Vec<Vec<f64>> {
    let mut sums: Vec<Vec<f64>> = Vec::new();
    for r in replicates {
        let traj = cumulative_points(n_teams, &r.results(fixtures));
        if sums.is_empty() {
            sums = traj.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for (s, t) in sums.iter_mut().zip(&traj) {
            for (a, v) in s.iter_mut().zip(t) {
                *a += f64::from(*v);
            }
        }
    }
    let n = replicates.len().max(1) as f64;
    sums.into_iter()
        .map(|s| s.into_iter().map(|v| v / n).collect())
        .collect()
}

/// Mean and central 95% interval of one table cell across replicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

fn cell(values: &[f64]) -> CellSummary {
    let q = quantiles(values, &[0.025, 0.975]);
    CellSummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q025: q[0],
        q975: q[1],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeamSummary {
    pub team: String,
    pub scored: CellSummary,
    pub conceded: CellSummary,
    pub wins: CellSummary,
    pub points: CellSummary,
    pub position: CellSummary,
    pub observed: Option<TeamRecord>,
}

/// Per-team summary of replicated tables, ordered by mean league points.
pub fn summarize_league(
    replicates: &[SeasonReplicate],
    teams: &TeamIndex,
    observed: Option<&LeagueTable>,
) -> Vec<TeamSummary> {
    let k = teams.len();
    let collect = |f: &dyn Fn(&TeamRecord) -> u32, t: usize| -> Vec<f64> {
        replicates.iter().map(|r| f64::from(f(&r.table.records[t]))).collect()
    };
    let positions: Vec<Vec<usize>> = replicates.iter().map(|r| r.table.positions()).collect();
    let mut rows: Vec<TeamSummary> = (0..k)
        .map(|t| TeamSummary {
            team: teams.name(TeamId(t)).to_string(),
            scored: cell(&collect(&|r| r.points_scored, t)),
            conceded: cell(&collect(&|r| r.points_conceded, t)),
            wins: cell(&collect(&|r| r.wins, t)),
            points: cell(&collect(&|r| r.league_points, t)),
            position: cell(&positions.iter().map(|p| p[t] as f64).collect::<Vec<_>>()),
            observed: observed.map(|o| o.records[t]),
        })
        .collect();
    rows.sort_by(|a, b| b.points.mean.total_cmp(&a.points.mean));
    rows
}

pub fn write_league_summary_csv<W: Write>(writer: W, rows: &[TeamSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["team".to_string()];
    for stat in ["scored", "conceded", "wins", "points", "position"] {
        for part in ["mean", "q025", "q975"] {
            header.push(format!("{stat}_{part}"));
        }
    }
    header.extend(["observed_scored", "observed_conceded", "observed_wins", "observed_points"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.team.clone()];
        for c in [r.scored, r.conceded, r.wins, r.points, r.position] {
            rec.extend([c.mean, c.q025, c.q975].map(|v| v.to_string()));
        }
        match r.observed {
            Some(o) => rec.extend([o.points_scored, o.points_conceded, o.wins, o.league_points].map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<league>", e))?;
    Ok(())
}

pub fn write_rank_matrix_csv<W: Write>(writer: W, dist: &RankDistribution, teams: &TeamIndex) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let k = teams.len();
    let mut header = vec!["team".to_string()];
    header.extend((1..=k).map(|p| format!("pos{p}")));
    w.write_record(&header)?;
    for (t, row) in dist.probs.iter().enumerate() {
        let mut rec = vec![teams.name(TeamId(t)).to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<ranks>", e))?;
    Ok(())
}

/// Long format: `team, match_day, observed, predicted_mean`; `observed` is
/// empty when no observed season is given.
pub fn write_cumulative_csv<W: Write>(
    writer: W,
    teams: &TeamIndex,
    predicted: &[Vec<f64>],
    observed: Option<&[Vec<u32>]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["team", "match_day", "observed", "predicted_mean"])?;
    for (t, traj) in predicted.iter().enumerate() {
        for (d, mean) in traj.iter().enumerate() {
            let obs = observed
                .and_then(|o| o.get(t))
                .and_then(|o| o.get(d))
                .map_or_else(String::new, |v| v.to_string());
            w.write_record([
                teams.name(TeamId(t)).to_string(),
                (d + 1).to_string(),
                obs,
                mean.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<cumulative>", e))?;
    Ok(())
}
