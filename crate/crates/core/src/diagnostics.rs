//! Convergence diagnostics and posterior summaries.
//!
//! Both R-hat and effective sample size work on split chains: every chain
//! is cut into two halves (dropping the middle draw when the length is
//! odd), which makes within-chain drift visible as between-chain variance.

use std::io::Write;

use serde::Serialize;

use crate::data::TeamIndex;
use crate::error::{Error, Result};
use crate::model::PriorVariant;
use crate::trace::DrawTable;

/// Conventional R-hat threshold for declaring convergence.
pub const R_HAT_THRESHOLD: f64 = 1.05;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Halves of each chain, all of equal length.
pub fn split_chains<'a>(chains: &[&'a [f64]]) -> Result<Vec<&'a [f64]>> {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.is_empty() || n < 4 {
        return Err(Error::DegenerateTrace(format!(
            "need at least 4 draws per chain, found {n}"
        )));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::DegenerateTrace("chains have different lengths".into()));
    }
    let half = n / 2;
    Ok(chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..]])
        .collect())
}

struct VarianceParts {
    /// Mean within-chain variance.
    w: f64,
    /// Pooled variance estimate `(n-1)/n W + B/n`.
    var_plus: f64,
}

fn variance_parts(split: &[&[f64]]) -> Result<VarianceParts> {
    if split.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateTrace("non-finite draws".into()));
    }
    let n = split[0].len() as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let w = mean(&split.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b = n * sample_variance(&means);
    if w == 0.0 && b == 0.0 {
        return Err(Error::DegenerateTrace("all draws are identical".into()));
    }
    Ok(VarianceParts {
        w,
        var_plus: (n - 1.0) / n * w + b / n,
    })
}

/// Split-chain potential scale reduction factor. Chains that are each
/// constant at different values give `+inf`.
pub fn r_hat(chains: &[&[f64]]) -> Result<f64> {
    let split = split_chains(chains)?;
    let v = variance_parts(&split)?;
    if v.w == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((v.var_plus / v.w).sqrt())
}

/// Effective sample size estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ess {
    pub value: f64,
    /// True when the raw estimate exceeded the number of draws (antithetic
    /// chains) and was clamped.
    pub capped: bool,
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence truncation of the autocorrelation sum.
pub fn effective_sample_size(chains: &[&[f64]]) -> Result<Ess> {
    let split = split_chains(chains)?;
    let v = variance_parts(&split)?;
    let m = split.len() as f64;
    let n = split[0].len();
    let total = m * n as f64;
    if v.w == 0.0 {
        return Err(Error::DegenerateTrace("chains are individually constant".into()));
    }
    let rho = |t: usize| -> f64 {
        let acov: f64 = split.iter().map(|c| autocovariance(c, t)).sum::<f64>() / m;
        1.0 - (v.w - acov) / v.var_plus
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = (rho(t) + rho(t + 1)).min(prev);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        prev = pair;
        t += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / total.log10());
    let raw = total / tau;
    Ok(if raw > total {
        Ess { value: total, capped: true }
    } else {
        Ess { value: raw, capped: false }
    })
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(values: &[f64], ps: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    ps.iter().map(|&p| quantile_sorted(&v, p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub r_hat: Option<f64>,
    pub ess: Option<f64>,
    pub ess_capped: bool,
}

/// Summary of one quantity pooled over chains.
pub fn summarize_draws(name: &str, chains: &[&[f64]]) -> Result<ParameterSummary> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::DegenerateTrace(format!("`{name}` has no draws")));
    }
    let q = quantiles(&pooled, &[0.025, 0.5, 0.975]);
    let sd = if pooled.len() > 1 { sample_variance(&pooled).sqrt() } else { 0.0 };
    let ess = effective_sample_size(chains).ok();
    Ok(ParameterSummary {
        name: name.to_string(),
        mean: mean(&pooled),
        sd,
        q025: q[0],
        median: q[1],
        q975: q[2],
        r_hat: r_hat(chains).ok(),
        ess: ess.map(|e| e.value),
        ess_capped: ess.is_some_and(|e| e.capped),
    })
}

/// A summary row: display label and the trace column it reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub label: String,
    pub column: String,
}

fn team_rows(teams: &TeamIndex, label: &str, symbol: &str) -> Vec<Selection> {
    teams
        .ids()
        .map(|id| Selection {
            label: format!("{label}[{}]", teams.name(id)),
            column: format!("{symbol}[{},0]", id.code()),
        })
        .collect()
}

fn plain(column: &str, label: &str) -> Selection {
    Selection {
        label: label.to_string(),
        column: column.to_string(),
    }
}

/// Resolves a comma-separated selector into summary rows.
///
/// Group keywords: `default` (attack and defence per team, then home and
/// constant), `attack`, `defence`, `home`, `constant`, `all`. Any other
/// token is an exact column name, or a prefix matching `token[...]`.
pub fn resolve_selector(selector: &str, teams: &TeamIndex, names: &[String]) -> Result<Vec<Selection>> {
    let mut out = Vec::new();
    for token in selector.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "default" => {
                out.extend(team_rows(teams, "attack", "alpha"));
                out.extend(team_rows(teams, "defence", "beta"));
                out.push(plain("lambda", "home"));
                out.push(plain("mu", "constant"));
            }
            "attack" => out.extend(team_rows(teams, "attack", "alpha")),
            "defence" => out.extend(team_rows(teams, "defence", "beta")),
            "home" => out.push(plain("lambda", "home")),
            "constant" => out.push(plain("mu", "constant")),
            "all" => out.extend(names.iter().map(|n| plain(n, n))),
            name if names.iter().any(|n| n == name) => out.push(plain(name, name)),
            prefix => {
                let head = format!("{prefix}[");
                let matched: Vec<Selection> = names
                    .iter()
                    .filter(|n| n.starts_with(&head))
                    .map(|n| plain(n, n))
                    .collect();
                if matched.is_empty() {
                    return Err(Error::UnknownParameter(prefix.to_string()));
                }
                out.extend(matched);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty parameter selector".into()));
    }
    Ok(out)
}

/// Identified quantities whose convergence is checked after a fit. Raw
/// hyperparameters are left out: under the centering constraint the
/// hierarchy's location (and, for the scaled-IW prior, the split of `Sigma`
/// into scales and `Lambda`) is not identified by the data.
pub fn monitored_selector(variant: PriorVariant) -> &'static str {
    match variant {
        PriorVariant::Basic => "mu,lambda,alpha,beta,gamma,eta",
        PriorVariant::ScaledIw => "mu,lambda,alpha,beta,gamma,eta,sigma2_alpha,sigma2_beta,rho_alpha,rho_beta",
    }
}

/// Summaries of the selected quantities.
pub fn summarize(table: &DrawTable, teams: &TeamIndex, selector: &str) -> Result<Vec<ParameterSummary>> {
    resolve_selector(selector, teams, &table.names)?
        .into_iter()
        .map(|s| {
            let draws = table.column_by_name(&s.column)?;
            summarize_draws(&s.label, &draws)
        })
        .collect()
}

/// Quantities whose R-hat exceeds `threshold` or could not be computed.
pub fn convergence_warnings(summaries: &[ParameterSummary], threshold: f64) -> Vec<String> {
    summaries
        .iter()
        .filter_map(|s| match s.r_hat {
            Some(r) if r <= threshold => None,
            Some(r) => Some(format!("{}: r_hat {r:.3} exceeds {threshold}", s.name)),
            None => Some(format!("{}: r_hat undefined", s.name)),
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[ParameterSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "mean", "sd", "q025", "median", "q975", "r_hat", "ess"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.q025.to_string(),
            r.median.to_string(),
            r.q975.to_string(),
            opt(r.r_hat),
            opt(r.ess),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

pub fn write_summary_json<W: Write>(writer: W, rows: &[ParameterSummary]) -> Result<()> {
    serde_json::to_writer_pretty(writer, rows)?;
    Ok(())
}

/// One-sample Kolmogorov-Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov survival function `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    // The series converges slowly near zero, where the value is 1 to
    // double precision anyway.
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS test of `samples` against a continuous CDF, with the small-sample
/// correction `(sqrt(n) + 0.12 + 0.11/sqrt(n)) D`.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = cdf(*v);
        d = d.max(f - i as f64 / n).max((i as f64 + 1.0) / n - f);
    }
    let sn = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
    }
}
