//! Run configuration shared by flags, JSON config files and manifests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use volley_core::data::SchemaVariant;
use volley_core::mcmc::SamplerConfig;
use volley_core::model::PriorVariant;
use volley_core::priors::PriorSpec;
use volley_core::Error;

/// Every run parameter, all optional so that layers can be merged. Flags
/// override the config file, which overrides defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<SchemaVariant>,
    pub prior: Option<PriorVariant>,
    pub chains: Option<usize>,
    pub iters: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub adapt_window: Option<usize>,
    pub target_accept: Option<f64>,
    pub init_jitter: Option<f64>,
    pub n_rep: Option<usize>,
    pub out: Option<PathBuf>,
    pub repair: Option<bool>,
    /// Full prior settings, for robustness reruns. The `prior` field, when
    /// set, overrides its variant.
    pub prior_spec: Option<PriorSpec>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f),)* }
    };
}

impl RunConfig {
    /// Fields set in `top` win.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay!(base, top; data, schema, prior, chains, iters, burn_in, thin, seed,
            adapt_window, target_accept, init_jitter, n_rep, out, repair, prior_spec)
    }

    /// Reads a config file: either a bare `RunConfig` or a fit manifest,
    /// whose `run` section is used.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let run = match value.get("run") {
            Some(run) if value.get("command").is_some() => run.clone(),
            _ => value,
        };
        serde_json::from_value(run)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn sampler(&self) -> SamplerConfig {
        let d = SamplerConfig::default();
        let n_iter = self.iters.unwrap_or(d.n_iter);
        SamplerConfig {
            n_chains: self.chains.unwrap_or(d.n_chains),
            n_iter,
            // Half the run by default, so that shortening --iters alone
            // stays valid.
            burn_in: self.burn_in.unwrap_or(if self.iters.is_some() { n_iter / 2 } else { d.burn_in }),
            thin: self.thin.unwrap_or(d.thin),
            seed: self.seed.unwrap_or(d.seed),
            adapt_window: self.adapt_window.or(d.adapt_window),
            target_accept: self.target_accept.unwrap_or(d.target_accept),
            init_jitter: self.init_jitter.unwrap_or(d.init_jitter),
        }
    }

    pub fn prior_variant(&self) -> PriorVariant {
        self.prior
            .or(self.prior_spec.as_ref().map(|p| p.variant))
            .unwrap_or(PriorVariant::Basic)
    }

    pub fn prior_spec(&self) -> PriorSpec {
        let variant = self.prior_variant();
        let mut spec = self.prior_spec.clone().unwrap_or_else(|| PriorSpec::new(variant));
        spec.variant = variant;
        spec
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("volley-out"))
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        self.data
            .clone()
            .ok_or_else(|| Error::Config("no data file given (use --data)".into()).into())
    }

    /// The fully resolved configuration, as recorded in manifests.
    pub fn resolved(&self) -> Result<RunConfig> {
        let sampler = self.sampler();
        let spec = self.prior_spec();
        let data = self.data_path()?;
        let data = std::fs::canonicalize(&data).with_context(|| format!("resolving {}", data.display()))?;
        Ok(RunConfig {
            data: Some(data),
            schema: Some(self.schema.unwrap_or_default()),
            prior: Some(spec.variant),
            chains: Some(sampler.n_chains),
            iters: Some(sampler.n_iter),
            burn_in: Some(sampler.burn_in),
            thin: Some(sampler.thin),
            seed: Some(sampler.seed),
            adapt_window: sampler.adapt_window,
            target_accept: Some(sampler.target_accept),
            init_jitter: Some(sampler.init_jitter),
            n_rep: Some(self.n_rep.unwrap_or(DEFAULT_N_REP)),
            out: Some(self.out_dir()),
            repair: Some(self.repair.unwrap_or(false)),
            prior_spec: Some(spec),
        })
    }
}

pub const DEFAULT_N_REP: usize = 1000;

/// Written by `fit` next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitManifest {
    pub command: String,
    pub version: String,
    pub run: RunConfig,
    pub config_hash: String,
    pub data_sha256: String,
    pub teams: Vec<String>,
    pub n_matches: usize,
    pub repaired_matches: Vec<u32>,
    pub wall_time_secs: f64,
    pub traces: Vec<String>,
    pub summaries: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn manifest_name(variant: PriorVariant) -> String {
    format!("manifest_{variant}.json")
}

pub fn trace_name(variant: PriorVariant, chain: usize) -> String {
    format!("trace_{variant}_chain{chain}.csv")
}
