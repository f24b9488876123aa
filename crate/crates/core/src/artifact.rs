//! Versioned JSON artifacts.
//!
//! Schema strings look like `name/MAJOR.MINOR`. Loaders accept any minor version of the
//! major they were built for.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dgpfco::{Chain, DgpConfig, PosteriorSpectrum};
use crate::error::{Error, Result};
use crate::pcemu::PCBasis;
use crate::spectra::{ErrorCovConvention, WeightedSpectrum};

pub const POSTERIOR_SCHEMA: &str = "dgpemu.posterior/1.0";
pub const BASIS_SCHEMA: &str = "dgpemu.basis/1.0";

fn split(schema: &str) -> Option<(&str, u32)> {
    let (name, ver) = schema.split_once('/')?;
    let major = ver.split('.').next()?.parse().ok()?;
    Some((name, major))
}

pub fn check_schema(found: &str, expected: &str) -> Result<()> {
    let bad = || Error::Schema {
        found: found.to_string(),
        expected: expected.to_string(),
    };
    let (fname, fmajor) = split(found).ok_or_else(bad)?;
    let (ename, emajor) = split(expected).ok_or_else(bad)?;
    if fname != ename || fmajor != emajor {
        return Err(bad());
    }
    Ok(())
}

#[derive(Deserialize)]
struct SchemaOnly {
    schema: String,
}

/// Reads a JSON artifact after checking its schema tag.
pub fn read_json<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let head: SchemaOnly = serde_json::from_str(&text).map_err(|e| Error::Schema {
        found: format!("unreadable schema tag ({e})"),
        expected: expected.to_string(),
    })?;
    check_schema(&head.schema, expected)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Fitted posterior of one cosmology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArtifact {
    pub schema: String,
    pub cosmology_id: String,
    pub k: Vec<f64>,
    pub x: Vec<f64>,
    pub ybar: Vec<f64>,
    pub convention: ErrorCovConvention,
    pub config: DgpConfig,
    pub theta_s: Vec<f64>,
    pub theta_w: Vec<f64>,
    pub loglik: Vec<f64>,
    pub accept_rate_theta_s: f64,
    pub accept_rate_theta_w: f64,
    pub posterior: PosteriorSpectrum,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warps: Option<Vec<Vec<f64>>>,
}

impl PosteriorArtifact {
    pub fn new(ws: &WeightedSpectrum, cfg: &DgpConfig, chain: &Chain, posterior: PosteriorSpectrum, keep_warps: bool) -> Self {
        Self {
            schema: POSTERIOR_SCHEMA.to_string(),
            cosmology_id: ws.cosmology_id.clone(),
            k: ws.k.clone(),
            x: ws.x.clone(),
            ybar: ws.ybar.iter().copied().collect(),
            convention: ws.convention,
            config: cfg.clone(),
            theta_s: chain.samples.iter().map(|s| s.theta_s).collect(),
            theta_w: chain.samples.iter().map(|s| s.theta_w).collect(),
            loglik: chain.samples.iter().map(|s| s.loglik).collect(),
            accept_rate_theta_s: chain.accept_rate_theta_s,
            accept_rate_theta_w: chain.accept_rate_theta_w,
            posterior,
            warps: keep_warps.then(|| chain.samples.iter().map(|s| s.w.clone()).collect()),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path, POSTERIOR_SCHEMA)
    }
}

/// Basis over the posterior means of a set of fitted cosmologies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisArtifact {
    pub schema: String,
    pub k: Vec<f64>,
    pub cosmology_ids: Vec<String>,
    pub basis: PCBasis,
}

impl BasisArtifact {
    pub fn new(k: Vec<f64>, cosmology_ids: Vec<String>, basis: PCBasis) -> Self {
        Self {
            schema: BASIS_SCHEMA.to_string(),
            k,
            cosmology_ids,
            basis,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path, BASIS_SCHEMA)
    }
}
