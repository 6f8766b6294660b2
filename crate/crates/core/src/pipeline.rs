//! Stage wiring: moments → structure → loadings, with persisted artifacts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::io::{self, AnchorSpec, Artifact};
use crate::loadings::{learn_loadings, loadings_recovery_config, FailureEstimator, LeakMethod, LoadingsConfig, RecoveredSource};
use crate::model::{AdfaModel, AnchorMap, LatentNetwork, VariableSpace};
use crate::moments::{
    anchor_moments_empirical, recover_all_simplex, recover_polytope, Constraint, MomentSet, RecoveryConfig,
};
use crate::structure::{bic_score, chow_liu, exact_search, fit_cpts, ScoredStructure};

pub const MOMENTS_KIND: &str = "moments";
pub const STRUCTURE_KIND: &str = "structure";
pub const MODEL_KIND: &str = "model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureMode {
    Independent,
    Tree,
    InDegree(usize),
}

impl StructureMode {
    /// Smallest moment order that can score this mode.
    pub fn required_order(self) -> usize {
        match self {
            StructureMode::Independent => 1,
            StructureMode::Tree => 2,
            StructureMode::InDegree(k) => k + 1,
        }
    }
}

impl std::str::FromStr for StructureMode {
    type Err = AdfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(StructureMode::Independent),
            "tree" => Ok(StructureMode::Tree),
            _ => s
                .strip_prefix("indegree-")
                .and_then(|k| k.parse().ok())
                .map(StructureMode::InDegree)
                .ok_or_else(|| AdfaError::invalid(format!("unknown structure mode `{s}`"))),
        }
    }
}

/// Everything that affects the learned output. Paths live in
/// [`PipelinePaths`] so relocating files leaves the fingerprint unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub order: usize,
    pub constraint: Constraint,
    pub lambda_structure: f64,
    pub lambda_loadings: f64,
    pub gap_tol: f64,
    pub max_iters: usize,
    pub structure: StructureMode,
    pub estimator: FailureEstimator,
    pub leak_method: Option<LeakMethod>,
    pub seed: u64,
    /// Declared latent names; when set, the anchor file must cover each one
    /// and latents are ordered as listed.
    pub latents: Option<Vec<String>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            order: 2,
            constraint: Constraint::Marginal,
            lambda_structure: 0.01,
            lambda_loadings: 0.1,
            gap_tol: 0.005,
            max_iters: 1000,
            structure: StructureMode::Tree,
            estimator: FailureEstimator::Auto,
            leak_method: None,
            seed: 0,
            latents: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let need = self.structure.required_order();
        if self.order < need {
            return Err(AdfaError::invalid(format!(
                "moment order {} too small for structure mode {:?} (needs {need})",
                self.order, self.structure
            )));
        }
        if !(self.lambda_loadings >= 0.0) {
            return Err(AdfaError::invalid("loadings λ must be non-negative"));
        }
        self.recovery().validate()
    }

    pub fn recovery(&self) -> RecoveryConfig {
        RecoveryConfig {
            constraint: self.constraint,
            lambda: self.lambda_structure,
            gap_tol: self.gap_tol,
            max_iters: self.max_iters,
            ..RecoveryConfig::default()
        }
    }

    pub fn loadings(&self) -> LoadingsConfig {
        LoadingsConfig {
            estimator: self.estimator,
            leak_method: self.leak_method,
            seed: io::stage_seed(self.seed, "loadings"),
            ..LoadingsConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelinePaths {
    pub data: PathBuf,
    pub labels: Option<PathBuf>,
    pub anchors: PathBuf,
    /// Artifacts are written here when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentsStage {
    pub rows: usize,
    pub constraint: Constraint,
    pub converged: bool,
    pub moments: MomentSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureStage {
    pub structure: ScoredStructure,
    pub network: LatentNetwork,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub fingerprint: String,
    pub moments: MomentsStage,
    pub structure: StructureStage,
    pub model: AdfaModel,
}

/// Orders the anchor spec by the declared latents, if any.
pub fn resolve_anchors(spec: &AnchorSpec, declared: Option<&[String]>) -> Result<AnchorSpec> {
    let Some(names) = declared else {
        return Ok(spec.clone());
    };
    let mut out = AnchorSpec {
        names: Vec::new(),
        anchor_of: Vec::new(),
        rates: Vec::new(),
    };
    for name in names {
        let i = spec
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| AdfaError::invalid(format!("latent `{name}` has no anchor")))?;
        out.names.push(name.clone());
        out.anchor_of.push(spec.anchor_of[i]);
        out.rates.push(spec.rates[i]);
    }
    if let Some(extra) = spec.names.iter().find(|n| !names.contains(n)) {
        return Err(AdfaError::invalid(format!("anchor for undeclared latent `{extra}`")));
    }
    Ok(out)
}

/// Recovers latent moments up to `config.order` from anchor moments.
pub fn moments_stage(data: &BinaryDataset, anchors: &AnchorMap, config: &PipelineConfig) -> Result<MomentsStage> {
    let run = || -> Result<MomentsStage> {
        config.validate()?;
        let observed = anchor_moments_empirical(data, anchors, config.order)?;
        let recovery = config.recovery();
        let (moments, converged) = match config.constraint {
            Constraint::Simplex => recover_all_simplex(&observed, anchors, &recovery)?,
            _ => {
                let r = recover_polytope(&observed, anchors, &recovery)?;
                (r.moments, r.converged)
            }
        };
        Ok(MomentsStage {
            rows: data.len(),
            constraint: config.constraint,
            converged,
            moments,
        })
    };
    run().map_err(|e| e.in_stage("moments"))
}

/// Scores a structure and fits its CPTs.
pub fn structure_stage(moments: &MomentsStage, mode: StructureMode) -> Result<StructureStage> {
    let run = || -> Result<StructureStage> {
        let (mm, n) = (&moments.moments, moments.rows);
        if mm.order < mode.required_order() {
            return Err(AdfaError::invalid(format!(
                "moments of order {} cannot score structure mode {mode:?}",
                mm.order
            )));
        }
        let structure = match mode {
            StructureMode::Independent => bic_score(mm, &vec![Vec::new(); mm.latents.len()], n)?,
            StructureMode::Tree => chow_liu(mm, n)?,
            StructureMode::InDegree(k) => exact_search(mm, n, k)?,
        };
        let network = fit_cpts(mm, &structure.parents)?;
        Ok(StructureStage { structure, network })
    };
    run().map_err(|e| e.in_stage("structure"))
}

/// Learns the noisy-or loadings and assembles the model.
pub fn loadings_stage(
    data: &BinaryDataset,
    anchors: &AnchorSpec,
    network: &LatentNetwork,
    config: &PipelineConfig,
) -> Result<AdfaModel> {
    let run = || -> Result<AdfaModel> {
        let map = anchors.to_map()?;
        let recovery = RecoveryConfig {
            lambda: config.lambda_loadings,
            gap_tol: config.gap_tol,
            max_iters: config.max_iters,
            ..loadings_recovery_config()
        };
        let source = RecoveredSource::new(data, &map, recovery, None)?;
        let loadings = learn_loadings(&source, network, &map, data.n_observed, &config.loadings())?;
        let observed: Vec<String> = (0..data.n_observed).map(|j| format!("x{j}")).collect();
        let space = VariableSpace::new(observed, anchors.names.clone())?;
        AdfaModel::new(space, network.clone(), loadings, map)
    };
    run().map_err(|e| e.in_stage("loadings"))
}

/// Fingerprint of a configuration together with digests of its inputs.
pub fn pipeline_fingerprint(config: &PipelineConfig, data: &BinaryDataset, anchors: &AnchorSpec) -> Result<String> {
    let mut h = Sha256::new();
    h.update(io::format_sparse_rows(&data.observed_rows).as_bytes());
    h.update(data.n_observed.to_le_bytes());
    h.update(io::format_anchors(anchors).as_bytes());
    let inputs: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    io::fingerprint(&(config, inputs))
}

/// Runs all three stages on in-memory inputs.
pub fn run_pipeline_on(data: &BinaryDataset, anchors: &AnchorSpec, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let anchors = resolve_anchors(anchors, config.latents.as_deref())?;
    anchors.check_width(data.n_observed)?;
    let map = anchors.to_map()?;
    let fingerprint = pipeline_fingerprint(config, data, &anchors)?;
    let moments = moments_stage(data, &map, config)?;
    let structure = structure_stage(&moments, config.structure)?;
    let model = loadings_stage(data, &anchors, &structure.network, config)?;
    Ok(PipelineOutput {
        fingerprint,
        moments,
        structure,
        model,
    })
}

/// Reads the inputs, runs all stages and writes `moments.json`,
/// `structure.json` and `model.json` when an output directory is given.
pub fn run_pipeline(config: &PipelineConfig, paths: &PipelinePaths) -> Result<PipelineOutput> {
    let spec = io::parse_anchors(&paths.anchors)?;
    let m = config.latents.as_ref().map_or(spec.len(), Vec::len);
    let data = io::parse_dataset(&paths.data, None, paths.labels.as_deref().map(|p| (p, m)))?;
    let out = run_pipeline_on(&data, &spec, config)?;
    if let Some(dir) = &paths.out_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let fp = &out.fingerprint;
    Artifact::new(MOMENTS_KIND, fp.clone(), out.moments.clone()).write(&dir.join("moments.json"))?;
    Artifact::new(STRUCTURE_KIND, fp.clone(), out.structure.clone()).write(&dir.join("structure.json"))?;
    Artifact::new(MODEL_KIND, fp.clone(), out.model.clone()).write(&dir.join("model.json"))?;
    Ok(())
}
