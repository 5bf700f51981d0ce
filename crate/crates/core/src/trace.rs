//! Flat parameter naming and CSV persistence of chain traces.
//!
//! A trace file starts with one `# meta=` line holding JSON run metadata,
//! followed by a CSV table with one row per retained draw. Values are
//! written in shortest round-trip form, so reading a trace back reproduces
//! the draws bit for bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SeasonData, N_COVARIATES};
use crate::error::{Error, Result};
use crate::mcmc::{ChainTrace, PosteriorSample, RngSeed, SamplerConfig};
use crate::model::{BasicHyper, HyperState, ParameterState, PriorVariant, ScaledIwHyper, Side};
use crate::priors::{PriorSpec, RHO_PAIRS};

/// Column names for a model with `k` teams: sampled state, then derived
/// quantities, then `log_post`.
pub fn column_names(variant: PriorVariant, k: usize) -> Vec<String> {
    let mut names = state_names(variant, k);
    for side in Side::BOTH {
        for t in 1..=k {
            for j in 0..3 {
                names.push(format!("{}[{t},{j}]", side.symbol()));
            }
        }
    }
    if variant == PriorVariant::ScaledIw {
        for side in Side::BOTH {
            let s = side.symbol();
            names.extend((0..3).map(|j| format!("sigma2_{s}[{j}]")));
            names.extend(RHO_PAIRS.iter().map(|(a, b)| format!("rho_{s}[{a},{b}]")));
        }
    }
    names.push("log_post".into());
    names
}

fn state_names(variant: PriorVariant, k: usize) -> Vec<String> {
    let mut names = vec!["mu".to_string(), "lambda".to_string()];
    for side in Side::BOTH {
        for t in 1..=k {
            for j in 0..3 {
                names.push(format!("{}_star[{t},{j}]", side.symbol()));
            }
        }
    }
    for side in Side::BOTH {
        let s = side.symbol();
        match variant {
            PriorVariant::Basic => {
                names.extend((0..3).map(|j| format!("mu_{s}[{j}]")));
                names.extend((0..3).map(|j| format!("tau_{s}[{j}]")));
            }
            PriorVariant::ScaledIw => {
                names.extend((0..3).map(|j| format!("mu_raw_{s}[{j}]")));
                names.extend((0..3).map(|j| format!("xi_{s}[{j}]")));
                for a in 0..3 {
                    for b in a..3 {
                        names.push(format!("Lambda_{s}[{a},{b}]"));
                    }
                }
            }
        }
    }
    names.extend((0..3).map(|i| format!("gamma[{i}]")));
    names.extend((0..4).map(|i| format!("eta[{i}]")));
    names
}

/// Values of one draw in [`column_names`] order.
pub fn sample_row(sample: &PosteriorSample) -> Vec<f64> {
    let st = &sample.state;
    let mut row = vec![st.mu, st.lambda];
    for stars in [&st.alpha_star, &st.beta_star] {
        row.extend(stars.iter().flatten());
    }
    match &st.hyper {
        HyperState::Basic { attack, defence } => {
            for h in [attack, defence] {
                row.extend(h.mean);
                row.extend(h.precision);
            }
        }
        HyperState::ScaledIw { attack, defence } => {
            for h in [attack, defence] {
                row.extend(h.raw_mean);
                row.extend(h.xi);
                for a in 0..3 {
                    for b in a..3 {
                        row.push(h.lambda[(a, b)]);
                    }
                }
            }
        }
    }
    row.extend(st.gamma);
    row.extend(st.eta);
    for eff in [&sample.effects.alpha, &sample.effects.beta] {
        row.extend(eff.iter().flatten());
    }
    if let Some(cov) = &sample.covariance {
        for c in [&cov.attack, &cov.defence] {
            row.extend(c.sigma2);
            row.extend(c.rho);
        }
    }
    row.push(sample.log_posterior);
    row
}

/// Rebuilds the sampled state from a row in [`column_names`] order.
pub fn state_from_row(variant: PriorVariant, k: usize, row: &[f64]) -> Result<ParameterState> {
    let need = state_names(variant, k).len();
    if row.len() < need {
        return Err(Error::Config(format!(
            "trace row has {} values, expected at least {need}",
            row.len()
        )));
    }
    let mut it = row.iter().copied();
    let mut next = || it.next().expect("length checked");
    let mu = next();
    let lambda = next();
    let stars = |next: &mut dyn FnMut() -> f64| -> Vec<[f64; 3]> {
        (0..k).map(|_| [next(), next(), next()]).collect()
    };
    let alpha_star = stars(&mut next);
    let beta_star = stars(&mut next);
    let three = |next: &mut dyn FnMut() -> f64| [next(), next(), next()];
    let hyper = match variant {
        PriorVariant::Basic => {
            let mut side = || BasicHyper {
                mean: three(&mut next),
                precision: three(&mut next),
            };
            let attack = side();
            let defence = side();
            HyperState::Basic { attack, defence }
        }
        PriorVariant::ScaledIw => {
            let mut side = || {
                let raw_mean = three(&mut next);
                let xi = three(&mut next);
                let mut lambda = Matrix3::zeros();
                for a in 0..3 {
                    for b in a..3 {
                        let v = next();
                        lambda[(a, b)] = v;
                        lambda[(b, a)] = v;
                    }
                }
                ScaledIwHyper { raw_mean, xi, lambda }
            };
            let attack = side();
            let defence = side();
            HyperState::ScaledIw { attack, defence }
        }
    };
    let gamma = [next(), next(), next()];
    let eta = [next(), next(), next(), next()];
    Ok(ParameterState {
        mu,
        lambda,
        alpha_star,
        beta_star,
        hyper,
        gamma,
        eta,
    })
}

/// Run metadata stored in the header line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub chain_id: usize,
    pub seed: RngSeed,
    pub variant: PriorVariant,
    pub teams: Vec<String>,
    pub covariate_means: [f64; N_COVARIATES],
    pub config: SamplerConfig,
    pub prior: PriorSpec,
    pub config_hash: String,
    pub acceptance: Vec<(String, f64)>,
    pub step_sizes: Vec<f64>,
}

impl TraceMeta {
    pub fn new(trace: &ChainTrace, data: &SeasonData, spec: &PriorSpec, config: &SamplerConfig) -> Self {
        TraceMeta {
            chain_id: trace.chain_id,
            seed: trace.seed,
            variant: trace.variant,
            teams: data.teams.names().to_vec(),
            covariate_means: data.covariate_means,
            config: config.clone(),
            prior: spec.clone(),
            config_hash: config_hash(spec, config),
            acceptance: trace.acceptance.clone(),
            step_sizes: trace.step_sizes.clone(),
        }
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical JSON of the prior and sampler settings.
pub fn config_hash(spec: &PriorSpec, config: &SamplerConfig) -> String {
    let json = serde_json::to_vec(&(spec, config)).expect("plain data serializes");
    sha256_hex(&json)
}

const META_PREFIX: &str = "# meta=";

pub fn write_trace<W: Write>(mut writer: W, trace: &ChainTrace, meta: &TraceMeta) -> Result<()> {
    writeln!(writer, "{META_PREFIX}{}", serde_json::to_string(meta)?).map_err(|e| Error::io("<trace>", e))?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(column_names(trace.variant, meta.teams.len()))?;
    for s in &trace.samples {
        w.write_record(sample_row(s).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &ChainTrace, meta: &TraceMeta) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(std::io::BufWriter::new(f), trace, meta)
}

pub fn read_trace<R: Read>(reader: R, source: &str) -> Result<(TraceMeta, ChainTrace)> {
    let mut reader = BufReader::new(reader);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(source, e))?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let json = first
        .trim_end()
        .strip_prefix(META_PREFIX)
        .ok_or_else(|| parse_err(1, "missing `# meta=` header".into()))?;
    let meta: TraceMeta = serde_json::from_str(json).map_err(|e| parse_err(1, e.to_string()))?;
    let k = meta.teams.len();
    let expected = column_names(meta.variant, k);

    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(parse_err(2, "trace columns do not match the recorded model".into()));
    }
    let lp = expected.len() - 1;
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 3;
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, format!("`{f}`: {e}"))))
            .collect::<Result<_>>()?;
        if row.len() != expected.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", expected.len(), row.len())));
        }
        let state = state_from_row(meta.variant, k, &row)?;
        samples.push(PosteriorSample::derived_from_state(state, row[lp]));
    }
    let trace = ChainTrace {
        chain_id: meta.chain_id,
        seed: meta.seed,
        variant: meta.variant,
        samples,
        acceptance: meta.acceptance.clone(),
        step_sizes: meta.step_sizes.clone(),
    };
    Ok((meta, trace))
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<(TraceMeta, ChainTrace)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(f, &path.display().to_string())
}

/// Draws of every column, laid out `[chain][column][draw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawTable {
    pub names: Vec<String>,
    pub chains: Vec<Vec<Vec<f64>>>,
}

impl DrawTable {
    pub fn from_traces(traces: &[ChainTrace], k: usize) -> Result<Self> {
        let first = traces.first().ok_or_else(|| Error::Config("no chains".into()))?;
        let names = column_names(first.variant, k);
        let mut chains = Vec::with_capacity(traces.len());
        for t in traces {
            if t.variant != first.variant {
                return Err(Error::Config("chains use different prior variants".into()));
            }
            let mut cols = vec![Vec::with_capacity(t.samples.len()); names.len()];
            for s in &t.samples {
                let row = sample_row(s);
                if row.len() != names.len() {
                    return Err(Error::Config(format!("draw has {} values, expected {}", row.len(), names.len())));
                }
                for (c, v) in cols.iter_mut().zip(row) {
                    c.push(v);
                }
            }
            chains.push(cols);
        }
        Ok(DrawTable { names, chains })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain draws of one column.
    pub fn column(&self, idx: usize) -> Vec<&[f64]> {
        self.chains.iter().map(|c| c[idx].as_slice()).collect()
    }

    /// Per-chain draws of a named column.
    pub fn column_by_name(&self, name: &str) -> Result<Vec<&[f64]>> {
        let idx = self
            .column_index(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.column(idx))
    }
}
