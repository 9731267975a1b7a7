//! Comparison mechanisms, each one switch away from the full pipeline.
//!
//! * 3DPIM drops the PLS and adaptive budget and releases through the
//!   exponential mechanism at a flat `ε_w / w`.
//! * P3DLPPM plans every timestamp with the initial prior, ignoring the
//!   temporal correlation the attacker exploits.
//! * 2DPTPPM plans with planar distances and keeps the true height layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{simulate, AttackTrace, MechanismParams, Perturbation, Pipeline, PriorSource, Scenario, SimError};
use crate::grid::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "3DSTPM")]
    Stpm3d,
    #[serde(rename = "3DPIM")]
    Pim3d,
    #[serde(rename = "P3DLPPM")]
    P3dlppm,
    #[serde(rename = "2DPTPPM")]
    Ptppm2d,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Stpm3d, Strategy::Pim3d, Strategy::P3dlppm, Strategy::Ptppm2d];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Stpm3d => "3DSTPM",
            Strategy::Pim3d => "3DPIM",
            Strategy::P3dlppm => "P3DLPPM",
            Strategy::Ptppm2d => "2DPTPPM",
        }
    }

    pub fn pipeline(self) -> Pipeline {
        let full = Pipeline::STPM;
        match self {
            Strategy::Stpm3d => full,
            Strategy::Pim3d => Pipeline { perturbation: Perturbation::Exponential, ..full },
            Strategy::P3dlppm => Pipeline { prior: PriorSource::Static, ..full },
            Strategy::Ptppm2d => Pipeline { metric: Metric::Planar, keep_layer: true, ..full },
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unknown strategy `{0}` (expected 3DSTPM, 3DPIM, P3DLPPM or 2DPTPPM)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownStrategy(s.to_owned()))
    }
}

/// A strategy together with the parameters it runs under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismStrategy {
    pub strategy: Strategy,
    pub params: MechanismParams,
}

impl MechanismStrategy {
    pub fn run<R: Rng + ?Sized>(&self, sc: &Scenario, rng: &mut R) -> Result<AttackTrace, SimError> {
        simulate(sc, &self.params, &self.strategy.pipeline(), rng)
    }
}

pub fn run_3dstpm<R: Rng + ?Sized>(sc: &Scenario, params: &MechanismParams, rng: &mut R) -> Result<AttackTrace, SimError> {
    simulate(sc, params, &Strategy::Stpm3d.pipeline(), rng)
}

pub fn run_3dpim<R: Rng + ?Sized>(sc: &Scenario, params: &MechanismParams, rng: &mut R) -> Result<AttackTrace, SimError> {
    simulate(sc, params, &Strategy::Pim3d.pipeline(), rng)
}

pub fn run_p3dlppm<R: Rng + ?Sized>(sc: &Scenario, params: &MechanismParams, rng: &mut R) -> Result<AttackTrace, SimError> {
    simulate(sc, params, &Strategy::P3dlppm.pipeline(), rng)
}

pub fn run_2dptppm<R: Rng + ?Sized>(sc: &Scenario, params: &MechanismParams, rng: &mut R) -> Result<AttackTrace, SimError> {
    simulate(sc, params, &Strategy::Ptppm2d.pipeline(), rng)
}
