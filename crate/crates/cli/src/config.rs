//! Experiment configuration: versioned JSON, unknown keys rejected.

use std::path::{Path, PathBuf};

use frglab::flow::Representation;
use frglab::{
    BareActionParams, CorrelatorRequest, FlowSettings, LatticeSpec, MomentumVector, RegulatorFamily,
    SamplerSettings,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub regulator: RegulatorConfig,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    #[serde(default)]
    pub correlators: Option<CorrelatorConfig>,
    #[serde(default)]
    pub lsz: Option<LszConfig>,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default = "unit")]
    pub a: f64,
    pub mass_sq: f64,
    #[serde(default)]
    pub quartic: f64,
    #[serde(default = "yes")]
    pub kinetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegulatorConfig {
    pub family: RegulatorFamily,
    /// Defaults to 100 times the mass scale.
    pub uv_scale: Option<f64>,
    pub k_min: Option<f64>,
    pub steps: Option<usize>,
    pub tolerance: Option<f64>,
    pub grid_nodes: Option<usize>,
    pub grid_half_width: Option<f64>,
    pub representation: Representation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default)]
    pub thinning: Option<usize>,
    #[serde(default)]
    pub chains: Option<usize>,
    #[serde(default)]
    pub proposal_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelatorConfig {
    pub requests: Vec<RequestConfig>,
    /// Also emit estimates on the first 2^j draws.
    #[serde(default = "yes")]
    pub convergence_series: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestConfig {
    pub momenta: Vec<Vec<usize>>,
    #[serde(default)]
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LszConfig {
    pub processes: Vec<ProcessConfig>,
    #[serde(default)]
    pub source: ElementSource,
    #[serde(default = "yes")]
    pub kinematic_factors: bool,
    /// Occupancy cutoff of the gate basis; defaults to the largest particle
    /// number among the processes.
    #[serde(default)]
    pub fock_cutoff: Option<usize>,
    /// Basis modes; defaults to the distinct momenta of the processes.
    #[serde(default)]
    pub modes: Option<Vec<Vec<usize>>>,
    #[serde(default = "unitarity_tol")]
    pub unitarity_tolerance: f64,
}

/// Where correlator values for amputation come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementSource {
    #[default]
    Mc,
    /// Quadrature; limited to the oracle scale.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessConfig {
    #[serde(rename = "in")]
    pub in_momenta: Vec<Vec<usize>>,
    #[serde(rename = "out")]
    pub out_momenta: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Uniform conditioning fields for the telescoping check.
    pub phi_a: Vec<f64>,
    /// Half-width and point count of the field grid for the input
    /// distribution check.
    pub phi_range: f64,
    pub phi_points: usize,
    pub flow_tolerance: f64,
    pub identity_tolerance: f64,
    pub telescope_tolerance: f64,
    pub unitarity_tolerance: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            phi_a: vec![0.0, 1.0, -1.0],
            phi_range: 3.0,
            phi_points: 61,
            flow_tolerance: 1e-3,
            identity_tolerance: 1e-6,
            telescope_tolerance: 1e-5,
            unitarity_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![Format::Csv],
        }
    }
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn unitarity_tol() -> f64 {
    1e-10
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_positive(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(invalid(format!("{name} must be positive, got {x}"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(format!("config parse error: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.params()?;
        cfg.flow_settings()?;
        check_positive("regulator.tolerance", cfg.regulator.tolerance)?;
        check_positive("regulator.grid_half_width", cfg.regulator.grid_half_width)?;
        for (name, v) in [
            ("audit.phi_range", cfg.audit.phi_range),
            ("audit.flow_tolerance", cfg.audit.flow_tolerance),
            ("audit.identity_tolerance", cfg.audit.identity_tolerance),
            ("audit.telescope_tolerance", cfg.audit.telescope_tolerance),
            ("audit.unitarity_tolerance", cfg.audit.unitarity_tolerance),
        ] {
            check_positive(name, Some(v))?;
        }
        if cfg.audit.phi_points < 2 {
            return Err(invalid("audit.phi_points must be at least 2"));
        }
        if let Some(s) = &cfg.sampler {
            if s.n_samples == 0 {
                return Err(invalid("sampler.n_samples must be positive"));
            }
            check_positive("sampler.proposal_width", s.proposal_width)?;
            if s.chains == Some(0) || s.thinning == Some(0) {
                return Err(invalid("sampler.chains and sampler.thinning must be positive"));
            }
        }
        cfg.requests()?;
        if let Some(l) = &cfg.lsz {
            check_positive("lsz.unitarity_tolerance", Some(l.unitarity_tolerance))?;
            cfg.processes()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn lattice(&self) -> Result<LatticeSpec, CliError> {
        let m = &self.model;
        LatticeSpec::new(m.dim, m.n, m.a).map_err(|e| invalid(e.to_string()))
    }

    pub fn params(&self) -> Result<BareActionParams, CliError> {
        let m = &self.model;
        BareActionParams::new(self.lattice()?, m.mass_sq, m.quartic, m.kinetic).map_err(|e| invalid(e.to_string()))
    }

    pub fn flow_settings(&self) -> Result<FlowSettings, CliError> {
        let params = self.params()?;
        let r = &self.regulator;
        let mut s = FlowSettings::for_params(&params);
        s.family = r.family;
        s.representation = r.representation;
        if let Some(v) = r.uv_scale {
            s.uv_scale = v;
        }
        if let Some(v) = r.k_min {
            s.k_min = v;
        }
        if let Some(v) = r.steps {
            s.steps = v;
        }
        if let Some(v) = r.tolerance {
            s.tolerance = v;
        }
        if let Some(v) = r.grid_nodes {
            s.grid_nodes = v;
        }
        if r.grid_half_width.is_some() {
            s.grid_half_width = r.grid_half_width;
        }
        check_positive("regulator.uv_scale", Some(s.uv_scale))?;
        check_positive("regulator.k_min", Some(s.k_min))?;
        if s.k_min > s.uv_scale {
            return Err(invalid("regulator.k_min must not exceed uv_scale"));
        }
        if s.steps == 0 {
            return Err(invalid("regulator.steps must be positive"));
        }
        if s.grid_nodes < 5 || s.grid_nodes % 2 == 0 {
            return Err(invalid("regulator.grid_nodes must be odd and at least 5"));
        }
        Ok(s)
    }

    /// Sampler section with the seed resolved; `seed_override` wins.
    pub fn sampler(&self, seed_override: Option<u64>) -> Result<(usize, u64, SamplerSettings), CliError> {
        let s = self
            .sampler
            .as_ref()
            .ok_or_else(|| invalid("this command needs a sampler section"))?;
        let seed = seed_override
            .or(s.seed)
            .ok_or_else(|| invalid("sampling requested without a seed"))?;
        let mut settings = SamplerSettings::default();
        let f = s;
        if let Some(v) = f.burn_in {
            settings.burn_in = v;
        }
        if let Some(v) = f.thinning {
            settings.thinning = v;
        }
        if let Some(v) = f.chains {
            settings.chains = v;
        }
        settings.proposal_width = f.proposal_width;
        Ok((s.n_samples, seed, settings))
    }

    fn momenta(&self, lists: &[Vec<usize>]) -> Result<Vec<MomentumVector>, CliError> {
        let l = self.lattice()?;
        lists
            .iter()
            .map(|m| {
                let p = MomentumVector::new(m.clone());
                l.check_momentum(&p).map_err(|e| invalid(e.to_string()))?;
                Ok(p)
            })
            .collect()
    }

    pub fn requests(&self) -> Result<Vec<CorrelatorRequest>, CliError> {
        let Some(c) = &self.correlators else {
            return Ok(Vec::new());
        };
        if c.requests.is_empty() {
            return Err(invalid("correlators.requests is empty"));
        }
        let l = self.lattice()?;
        c.requests
            .iter()
            .map(|r| {
                if r.momenta.is_empty() {
                    return Err(invalid("correlator request with an empty momenta list"));
                }
                CorrelatorRequest::new(&l, self.momenta(&r.momenta)?, r.connected).map_err(|e| invalid(e.to_string()))
            })
            .collect()
    }

    /// In/out momentum lists of each LSZ process.
    pub fn processes(&self) -> Result<Vec<(Vec<MomentumVector>, Vec<MomentumVector>)>, CliError> {
        let Some(c) = &self.lsz else {
            return Ok(Vec::new());
        };
        if c.processes.is_empty() {
            return Err(invalid("lsz.processes is empty"));
        }
        c.processes
            .iter()
            .map(|p| {
                if p.in_momenta.is_empty() || p.out_momenta.is_empty() {
                    return Err(invalid("lsz process needs nonempty in and out lists"));
                }
                if p.in_momenta.len() + p.out_momenta.len() > frglab::correlators::MAX_CONNECTED_POINTS {
                    return Err(invalid("lsz processes are limited to four external legs"));
                }
                Ok((self.momenta(&p.in_momenta)?, self.momenta(&p.out_momenta)?))
            })
            .collect()
    }

    pub fn lsz_modes(&self) -> Result<Vec<MomentumVector>, CliError> {
        let c = self.lsz.as_ref().ok_or_else(|| invalid("this command needs an lsz section"))?;
        if let Some(m) = &c.modes {
            return self.momenta(m);
        }
        let mut modes: Vec<MomentumVector> = Vec::new();
        for (i, o) in self.processes()? {
            for p in i.into_iter().chain(o) {
                if !modes.contains(&p) {
                    modes.push(p);
                }
            }
        }
        Ok(modes)
    }
}
