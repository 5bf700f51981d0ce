use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use volley_core::data::{
    center_covariates, parse_season_csv, repair_indicators, validate_season, write_season_csv,
    SchemaOptions, SchemaVariant, SeasonData, TeamIndex,
};
use volley_core::diagnostics::{
    convergence_warnings, monitored_selector, summarize, write_summary_csv, write_summary_json,
    ParameterSummary, R_HAT_THRESHOLD,
};
use volley_core::mcmc::{run_all_chains, ChainTrace, PosteriorSample};
use volley_core::model::PriorVariant;
use volley_core::predictive::{
    align_season_teams, cumulative_points, fixtures_from_season, mean_cumulative_points,
    observed_results, parse_fixtures_csv, rank_probabilities, replicate_season, summarize_league,
    write_cumulative_csv, write_league_summary_csv, write_rank_matrix_csv, CovariatePolicy,
    Fixture, LeagueTable, TeamSummary,
};
use volley_core::synthetic::{simulate_season, SyntheticTruth};
use volley_core::trace::{read_trace_file, sha256_hex, write_trace_file, DrawTable, TraceMeta};
use volley_core::Error;

use crate::config::{manifest_name, trace_name, FitManifest, RunConfig, DEFAULT_N_REP};

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_summaries(rows: &[ParameterSummary]) {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!(
        "{:width$}  {:>9} {:>8} {:>9} {:>9} {:>9} {:>6} {:>7}",
        "name", "mean", "sd", "2.5%", "median", "97.5%", "r_hat", "ess"
    );
    for r in rows {
        let rh = r.r_hat.map_or_else(|| "NA".into(), |v| format!("{v:.3}"));
        let ess = r.ess.map_or_else(|| "NA".into(), |v| format!("{v:.0}"));
        println!(
            "{:width$}  {:>9.4} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>7}",
            r.name, r.mean, r.sd, r.q025, r.median, r.q975, rh, ess
        );
    }
}

pub fn validate(data: &Path, schema: SchemaVariant, repair_out: Option<&Path>) -> Result<i32> {
    let season = parse_season_csv(data, &SchemaOptions { variant: schema })?;
    let report = validate_season(&season);
    print!("{report}");
    if let Some(out) = repair_out {
        let fixed = repair_indicators(&season);
        write_season_csv(&fixed, create_file(out)?)?;
        let after = validate_season(&fixed);
        println!("repaired file written to {}", out.display());
        if !after.is_clean() {
            print!("remaining after repair:\n{after}");
            return Ok(1);
        }
        return Ok(0);
    }
    Ok(if report.is_clean() { 0 } else { 1 })
}

/// Parses and checks the season, repairing indicators when allowed.
/// Returns the data and the ids of repaired matches.
fn load_clean_season(path: &Path, schema: SchemaVariant, repair: bool) -> Result<(SeasonData, Vec<u32>)> {
    let season = parse_season_csv(path, &SchemaOptions { variant: schema })?;
    let report = validate_season(&season);
    if report.is_clean() {
        return Ok((season, Vec::new()));
    }
    if !repair {
        return Err(Error::InvalidData(format!(
            "{}:\n{report}rerun with --repair to recompute d_s/d_m from the set counts",
            path.display()
        ))
        .into());
    }
    let fixed = repair_indicators(&season);
    let after = validate_season(&fixed);
    if !after.is_clean() {
        return Err(Error::InvalidData(format!("{}: not repairable:\n{after}", path.display())).into());
    }
    let ids = report.rows.iter().map(|r| r.match_id).collect();
    Ok((fixed, ids))
}

pub fn fit(cfg: RunConfig) -> Result<i32> {
    let run = cfg.resolved()?;
    let data_path = run.data.clone().expect("resolved");
    let schema = run.schema.expect("resolved");
    let spec = run.prior_spec();
    let sampler = run.sampler();
    spec.validate()?;
    sampler.validate()?;
    let out = run.out_dir();
    let variant = spec.variant;

    let (season, repaired) = load_clean_season(&data_path, schema, run.repair == Some(true))?;
    if !repaired.is_empty() {
        eprintln!("repaired indicators in matches {repaired:?}");
    }
    let data = center_covariates(&season);
    let bytes = fs::read(&data_path).map_err(|e| Error::Io { path: data_path.clone(), source: e })?;

    eprintln!(
        "fitting {} prior: {} chains x {} iterations ({} burn-in, thin {})",
        variant, sampler.n_chains, sampler.n_iter, sampler.burn_in, sampler.thin
    );
    let start = Instant::now();
    let traces = run_all_chains(&data, &spec, &sampler)?;
    let wall = start.elapsed().as_secs_f64();

    create_dir(&out)?;
    let mut trace_files = Vec::new();
    for t in &traces {
        let name = trace_name(variant, t.chain_id);
        write_trace_file(out.join(&name), t, &TraceMeta::new(t, &data, &spec, &sampler))?;
        trace_files.push(name);
    }

    let table = DrawTable::from_traces(&traces, data.n_teams())?;
    let rows = summarize(&table, &data.teams, "default")?;
    let csv_name = format!("summary_{variant}.csv");
    let json_name = format!("summary_{variant}.json");
    write_summary_csv(create_file(&out.join(&csv_name))?, &rows)?;
    write_summary_json(create_file(&out.join(&json_name))?, &rows)?;

    let monitored = summarize(&table, &data.teams, monitored_selector(variant))?;
    let warnings = convergence_warnings(&monitored, R_HAT_THRESHOLD);

    let manifest = FitManifest {
        command: "fit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: volley_core::trace::config_hash(&spec, &sampler),
        run,
        data_sha256: sha256_hex(&bytes),
        teams: data.teams.names().to_vec(),
        n_matches: data.matches.len(),
        repaired_matches: repaired,
        wall_time_secs: wall,
        traces: trace_files,
        summaries: vec![csv_name, json_name],
        warnings: warnings.clone(),
    };
    write_json(&out.join(manifest_name(variant)), &manifest)?;

    print_summaries(&rows);
    for t in &traces {
        let (lo, hi) = t
            .acceptance
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), (_, r)| (lo.min(*r), hi.max(*r)));
        eprintln!("chain {}: acceptance rates {lo:.2}..{hi:.2}", t.chain_id);
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("wrote {} in {wall:.1}s", out.display());
    Ok(0)
}

/// Loaded chains of one fit.
struct Fitted {
    variant: PriorVariant,
    metas: Vec<TraceMeta>,
    traces: Vec<ChainTrace>,
    teams: TeamIndex,
    dir: Option<PathBuf>,
}

fn variant_of_trace_file(name: &str) -> Option<(PriorVariant, usize)> {
    let rest = name.strip_prefix("trace_")?.strip_suffix(".csv")?;
    let (v, chain) = rest.rsplit_once("_chain")?;
    Some((v.parse().ok()?, chain.parse().ok()?))
}

/// Trace files in `dir`, for `variant` or the only variant present.
fn find_traces(dir: &Path, variant: Option<PriorVariant>) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut found: Vec<(PriorVariant, usize, PathBuf)> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        if let Some((v, c)) = e.file_name().to_str().and_then(variant_of_trace_file) {
            found.push((v, c, e.path()));
        }
    }
    let variants: std::collections::BTreeSet<&str> = found.iter().map(|f| f.0.as_str()).collect();
    let chosen = match variant {
        Some(v) => v,
        None if variants.len() == 1 => found[0].0,
        None if variants.is_empty() => {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no trace files"),
            }
            .into())
        }
        None => {
            return Err(Error::Config(format!(
                "{} holds traces for several priors ({}); pick one with --prior",
                dir.display(),
                variants.into_iter().collect::<Vec<_>>().join(", ")
            ))
            .into())
        }
    };
    found.retain(|f| f.0 == chosen);
    found.sort_by_key(|f| f.1);
    if found.is_empty() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("no {chosen} traces")),
        }
        .into());
    }
    Ok(found.into_iter().map(|f| f.2).collect())
}

fn load_fitted(paths: &[PathBuf], variant: Option<PriorVariant>) -> Result<Fitted> {
    let (files, dir) = match paths {
        [single] if single.is_dir() => (find_traces(single, variant)?, Some(single.clone())),
        _ => (paths.to_vec(), paths.first().and_then(|p| p.parent()).map(Path::to_path_buf)),
    };
    let mut metas = Vec::new();
    let mut traces = Vec::new();
    for f in &files {
        let (meta, trace) = read_trace_file(f)?;
        metas.push(meta);
        traces.push(trace);
    }
    let first = metas.first().ok_or_else(|| Error::Config("no trace files given".into()))?;
    for m in &metas[1..] {
        if m.variant != first.variant || m.teams != first.teams || m.config_hash != first.config_hash {
            return Err(Error::Config("trace files come from different fits".into()).into());
        }
    }
    if let Some(v) = variant {
        if v != first.variant {
            return Err(Error::Config(format!("traces were fitted with the {} prior, not {v}", first.variant)).into());
        }
    }
    Ok(Fitted {
        variant: first.variant,
        teams: TeamIndex::new(first.teams.clone())?,
        metas,
        traces,
        dir: dir.filter(|d| !d.as_os_str().is_empty()),
    })
}

pub fn summarize_cmd(paths: &[PathBuf], variant: Option<PriorVariant>, select: &str, out: Option<&Path>) -> Result<i32> {
    let fitted = load_fitted(paths, variant)?;
    let table = DrawTable::from_traces(&fitted.traces, fitted.teams.len())?;
    let rows = summarize(&table, &fitted.teams, select)?;
    match out {
        Some(p) if p.extension().is_some_and(|e| e == "json") => write_summary_json(create_file(p)?, &rows)?,
        Some(p) => write_summary_csv(create_file(p)?, &rows)?,
        None => write_summary_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(0)
}

pub struct PredictOptions {
    pub traces: Vec<PathBuf>,
    pub prior: Option<PriorVariant>,
    pub fixtures: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub schema: Option<SchemaVariant>,
    pub n_rep: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub covariates: CovariatePolicy,
}

#[derive(Serialize)]
struct PredictManifest {
    command: String,
    version: String,
    prior: PriorVariant,
    config_hash: String,
    fixtures_source: String,
    covariates: String,
    n_rep: usize,
    seed: u64,
    n_draws: usize,
    outputs: Vec<String>,
}

fn read_manifest(dir: &Path, variant: PriorVariant) -> Option<FitManifest> {
    let text = fs::read_to_string(dir.join(manifest_name(variant))).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn predict(opts: PredictOptions) -> Result<i32> {
    let fitted = load_fitted(&opts.traces, opts.prior)?;
    let variant = fitted.variant;
    let meta = &fitted.metas[0];
    let teams = &fitted.teams;
    let manifest = fitted.dir.as_deref().and_then(|d| read_manifest(d, variant));

    let n_rep = opts
        .n_rep
        .or_else(|| manifest.as_ref().and_then(|m| m.run.n_rep))
        .unwrap_or(DEFAULT_N_REP);
    let seed = opts.seed.unwrap_or(meta.config.seed);
    let out = opts
        .out
        .clone()
        .or_else(|| fitted.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));

    let data_path = opts.data.clone().or_else(|| manifest.as_ref().and_then(|m| m.run.data.clone()));
    let schema = opts
        .schema
        .or_else(|| manifest.as_ref().and_then(|m| m.run.schema))
        .unwrap_or_default();
    let repair = manifest.as_ref().and_then(|m| m.run.repair).unwrap_or(false);

    let (fixtures, observed, source): (Vec<Fixture>, Option<Vec<_>>, String) = match (&opts.fixtures, &data_path) {
        (Some(f), _) => (parse_fixtures_csv(f, teams, &meta.covariate_means)?, None, f.display().to_string()),
        (None, Some(d)) => {
            let (season, _) = load_clean_season(d, schema, repair)?;
            let season = align_season_teams(&season, teams)?;
            let observed = observed_results(&season).ok();
            let centered = center_covariates(&season);
            (fixtures_from_season(&centered, opts.covariates), observed, d.display().to_string())
        }
        (None, None) => {
            return Err(Error::Config("no fixtures: give --fixtures or --data (or keep the fit manifest beside the traces)".into()).into())
        }
    };

    let samples: Vec<PosteriorSample> = fitted.traces.into_iter().flat_map(|t| t.samples).collect();
    let k = teams.len();
    let reps = replicate_season(&samples, &fixtures, k, n_rep, seed)?;
    let observed_table = observed.as_ref().map(|o| LeagueTable::from_results(k, o));
    let league = summarize_league(&reps, teams, observed_table.as_ref());
    let ranks = rank_probabilities(&reps, k);
    let predicted = mean_cumulative_points(&reps, &fixtures, k);
    let observed_traj = observed.as_ref().map(|o| cumulative_points(k, o));

    create_dir(&out)?;
    let names = [
        format!("league_{variant}.csv"),
        format!("ranks_{variant}.csv"),
        format!("cumulative_{variant}.csv"),
    ];
    write_league_summary_csv(create_file(&out.join(&names[0]))?, &league)?;
    write_rank_matrix_csv(create_file(&out.join(&names[1]))?, &ranks, teams)?;
    write_cumulative_csv(create_file(&out.join(&names[2]))?, teams, &predicted, observed_traj.as_deref())?;
    write_json(
        &out.join(format!("predict_{variant}.json")),
        &PredictManifest {
            command: "predict".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            prior: variant,
            config_hash: meta.config_hash.clone(),
            fixtures_source: source,
            covariates: match opts.covariates {
                CovariatePolicy::Zero => "zero".into(),
                CovariatePolicy::Observed => "observed".into(),
            },
            n_rep,
            seed,
            n_draws: samples.len(),
            outputs: names.to_vec(),
        },
    )?;
    print_league(&league);
    eprintln!("wrote predictions for {n_rep} replicates to {}", out.display());
    Ok(0)
}

fn print_league(rows: &[TeamSummary]) {
    let width = rows.iter().map(|r| r.team.len()).max().unwrap_or(4).max(4);
    println!("{:width$}  {:>8} {:>8} {:>6} {:>7} {:>9}", "team", "scored", "conc'd", "wins", "points", "obs pts");
    for r in rows {
        let obs = r.observed.map_or_else(String::new, |o| o.league_points.to_string());
        println!(
            "{:width$}  {:>8.1} {:>8.1} {:>6.1} {:>7.1} {:>9}",
            r.team, r.scored.mean, r.conceded.mean, r.wins.mean, r.points.mean, obs
        );
    }
}

pub fn simulate(teams: usize, seed: u64, out: Option<&Path>) -> Result<i32> {
    if teams < 2 {
        return Err(Error::Config("need at least two teams".into()).into());
    }
    let mut rng = volley_core::mcmc::chain_seed(seed, 0).rng();
    let truth = SyntheticTruth::draw(teams, &mut rng);
    let season = simulate_season(&truth, &mut rng);
    match out {
        Some(p) => write_season_csv(&season, create_file(p)?)?,
        None => write_season_csv(&season, std::io::stdout().lock())?,
    }
    Ok(0)
}
