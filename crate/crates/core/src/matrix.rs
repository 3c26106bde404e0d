//! Policy-by-environment cost matrix and its on-disk format.
//!
//! Binary layout (little endian): magic `PBCM`, format version `u32`, row
//! count `m` `u32`, column count `N` `u32`, then `m * N` `f64` values row by
//! row. Policy ids and environment seeds live in a JSON sidecar next to it.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::FORMAT_VERSION;

const MAGIC: &[u8; 4] = b"PBCM";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    m: usize,
    n: usize,
    values: Vec<f64>,
    pub policy_ids: Vec<u64>,
    pub env_seeds: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    spec_version: String,
    m: usize,
    n: usize,
    policy_ids: Vec<u64>,
    env_seeds: Vec<u64>,
}

impl CostMatrix {
    /// `values` is row-major, one row per policy.
    pub fn new(values: Vec<f64>, policy_ids: Vec<u64>, env_seeds: Vec<u64>) -> Result<Self> {
        let (m, n) = (policy_ids.len(), env_seeds.len());
        if m == 0 || n == 0 {
            return Err(Error::domain("cost matrix needs at least one policy and one environment"));
        }
        check_len(m * n, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("cost {v} lies outside [0, 1]")));
        }
        Ok(Self { m, n, values, policy_ids, env_seeds })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, policy: usize, env: usize) -> f64 {
        self.values[policy * self.n + env]
    }

    pub fn row(&self, policy: usize) -> &[f64] {
        &self.values[policy * self.n..(policy + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n)
    }

    /// Mean cost of each policy over the environments.
    pub fn policy_means(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().sum::<f64>() / self.n as f64).collect()
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Writes the binary file and its sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.m > u32::MAX as usize || self.n > u32::MAX as usize {
            return Err(Error::domain("cost matrix is too large for the binary format"));
        }
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        let sidecar = Sidecar {
            spec_version: FORMAT_VERSION.to_owned(),
            m: self.m,
            n: self.n,
            policy_ids: self.policy_ids.clone(),
            env_seeds: self.env_seeds.clone(),
        };
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a cost-matrix file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != BINARY_VERSION {
            return Err(bad(format!("unsupported format version {}", word(4))));
        }
        let (m, n) = (word(8) as usize, word(12) as usize);
        if bytes.len() != 16 + 8 * m * n {
            return Err(bad(format!("expected {} values for a {m}x{n} matrix", m * n)));
        }
        let values = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

        let sidecar_path = Self::sidecar_path(path);
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
            .map_err(|e| Error::Format { path: sidecar_path.clone(), reason: e.to_string() })?;
        if sidecar.m != m || sidecar.n != n || sidecar.policy_ids.len() != m || sidecar.env_seeds.len() != n {
            return Err(Error::Format { path: sidecar_path, reason: "sidecar does not match matrix shape".into() });
        }
        Self::new(values, sidecar.policy_ids, sidecar.env_seeds).map_err(|e| bad(e.to_string()))
    }
}
