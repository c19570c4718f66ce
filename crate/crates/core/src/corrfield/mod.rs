//! Multi-stage keypoint-correspondence registration.
//!
//! Each stage resamples both scans to the stage resolution, restricts work to the
//! effective mask (voxels valid in the reference and in the currently warped moving
//! scan), and solves a discrete correspondence problem on a sparse keypoint grid:
//! self-similarity descriptors, patch-wise unary costs over a quantized displacement
//! lattice, exact min-sum optimisation on a minimum spanning tree, a forward/backward
//! consistency check, and Gaussian densification. A stage runs twice, first with the
//! full search radius and then with half of it.

mod cost;
mod densify;
mod keypoints;
pub(crate) mod knn;
mod mst;
mod ssc;

use std::borrow::Cow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{compose, DisplacementField};
use crate::volume::{presmoothed, resample_to_spacing, trilinear_sample, Geometry, Mask, Volume};

pub use cost::{unary_costs, CandidateSet, CostTable, PatchSampling};
pub use densify::{densify, densify_at, symmetry_filter};
pub use keypoints::sample_keypoints;
pub use mst::{minimum_spanning_tree, mst_objective, mst_regularize, solve_labels, Tree};
pub use ssc::{ssc_descriptor, SscDescriptor};

/// Parameters of one major stage. Pairs are (in-plane, through-plane) in voxels of the
/// stage grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(rename = "resolution_mm")]
    pub resolution: [f64; 3],
    pub search_radius: [usize; 2],
    pub dispersion: [usize; 2],
    pub patch_radius: [usize; 2],
    pub regularization: f64,
    /// Candidate displacement step; `None` means `max(1, floor(radius / 8))`.
    pub quantization: Option<[usize; 2]>,
}

impl StageConfig {
    /// The four tuned stages.
    pub fn defaults() -> Vec<StageConfig> {
        let s = |res: f64, sr: [usize; 2], disp: [usize; 2], patch: [usize; 2], reg: f64| StageConfig {
            resolution: [res; 3],
            search_radius: sr,
            dispersion: disp,
            patch_radius: patch,
            regularization: reg,
            quantization: None,
        };
        vec![
            s(2.0, [60, 30], [8, 4], [6, 4], 1.0),
            s(2.0, [32, 16], [7, 3], [6, 4], 0.7),
            s(2.0, [10, 6], [6, 3], [3, 2], 0.5),
            s(1.0, [20, 10], [10, 5], [6, 4], 0.1),
        ]
    }

    /// Default for a stage index; indices past the last tuned stage reuse it.
    pub fn default_for(stage: usize) -> StageConfig {
        let d = StageConfig::defaults();
        d[stage.min(d.len() - 1)].clone()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.resolution.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad(format!("resolution must be positive, got {:?}", self.resolution));
        }
        if self.dispersion.iter().any(|&d| d == 0) {
            return bad("dispersion must be at least 1".into());
        }
        if (0..2).any(|a| self.search_radius[a] < self.dispersion[a]) {
            return bad(format!(
                "search radius {:?} smaller than dispersion {:?}",
                self.search_radius, self.dispersion
            ));
        }
        if !(self.regularization >= 0.0) || !self.regularization.is_finite() {
            return bad(format!("regularization must be nonnegative, got {}", self.regularization));
        }
        if self.quantization.is_some_and(|q| q.contains(&0)) {
            return bad("quantization must be at least 1".into());
        }
        Ok(())
    }

    pub fn quantization_steps(&self) -> [usize; 2] {
        self.quantization
            .unwrap_or_else(|| self.search_radius.map(|r| (r / 8).max(1)))
    }

    /// The second sub-stage: same parameters with the search radius halved (rounded up).
    pub fn halved(&self) -> StageConfig {
        StageConfig {
            search_radius: self.search_radius.map(|r| r.div_ceil(2)),
            ..self.clone()
        }
    }

    pub fn candidates(&self) -> CandidateSet {
        CandidateSet::new(xyz(self.search_radius), xyz(self.quantization_steps()), self.resolution)
    }
}

/// Expands an (in-plane, through-plane) pair to x, y, z.
pub(crate) fn xyz(p: [usize; 2]) -> [usize; 3] {
    [p[0], p[0], p[1]]
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Resolution {
    Iso(f64),
    Axes([f64; 3]),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOverride {
    resolution_mm: Option<Resolution>,
    search_radius: Option<[usize; 2]>,
    dispersion: Option<[usize; 2]>,
    patch_radius: Option<[usize; 2]>,
    regularization: Option<f64>,
    quantization: Option<[usize; 2]>,
}

/// Parses a JSON array of stage objects; absent keys take the default of that stage
/// index. `resolution_mm` may be a number or a triple.
pub fn parse_stage_configs(json: &str) -> Result<Vec<StageConfig>> {
    let raw: Vec<StageOverride> =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("stage config: {e}")))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, o)| {
            let d = StageConfig::default_for(i);
            let cfg = StageConfig {
                resolution: match o.resolution_mm {
                    Some(Resolution::Iso(r)) => [r; 3],
                    Some(Resolution::Axes(r)) => r,
                    None => d.resolution,
                },
                search_radius: o.search_radius.unwrap_or(d.search_radius),
                dispersion: o.dispersion.unwrap_or(d.dispersion),
                patch_radius: o.patch_radius.unwrap_or(d.patch_radius),
                regularization: o.regularization.unwrap_or(d.regularization),
                quantization: o.quantization.or(d.quantization),
            };
            cfg.validate().map_err(|e| Error::Config(format!("stage {i}: {e}")))?;
            Ok(cfg)
        })
        .collect()
}

pub fn read_stage_configs(path: impl AsRef<Path>) -> Result<Vec<StageConfig>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stage_configs(&text)
}

/// Sparse keypoints on a stage grid with their solved displacements (mm).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    /// Voxel spacing of the grid the positions index into.
    pub spacing: [f64; 3],
    pub positions: Vec<[usize; 3]>,
    pub displacements: Vec<[f64; 3]>,
    pub consistency_error: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position in mm relative to voxel (0, 0, 0).
    pub fn position_mm(&self, k: usize) -> [f64; 3] {
        let p = self.positions[k];
        [0, 1, 2].map(|a| p[a] as f64 * self.spacing[a])
    }
}

/// Diagnostics for one sub-stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubStageRecord {
    pub stage: usize,
    pub sub_stage: char,
    pub keypoints: usize,
    pub survivors: usize,
    pub candidates: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RegistrationOutput {
    /// Total field on the reference grid.
    pub field: DisplacementField,
    pub records: Vec<SubStageRecord>,
}

/// The moving scan prepared for sampling at one stage resolution.
struct StageBase<'a> {
    vol: Cow<'a, Volume>,
}

impl<'a> StageBase<'a> {
    fn new(moving: &'a Volume, resolution: [f64; 3]) -> StageBase<'a> {
        StageBase {
            vol: presmoothed(moving, resolution),
        }
    }

    /// The moving scan on `grid`, pulled back through `total` (identity when `None`).
    fn warped(&self, grid: &Geometry, total: Option<&DisplacementField>) -> Volume {
        let mut data = vec![0f32; grid.len()];
        let mut valid = vec![false; grid.len()];
        for idx in 0..grid.len() {
            let mut p = grid.world(grid.coords(idx));
            if let Some(t) = total {
                let u = t.sample(p);
                p = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
            }
            let (v, ok) = trilinear_sample(&self.vol, p);
            data[idx] = v;
            valid[idx] = ok;
        }
        Volume { geom: *grid, data, valid }
    }
}

/// Result of one sub-stage solve on the stage grid.
struct Increment {
    field: DisplacementField,
    keypoints: usize,
    survivors: usize,
    candidates: usize,
}

/// One forward/backward solve. Returns the increment on `out_grid`.
fn solve_sub_stage(
    ref_desc: &SscDescriptor,
    mov: &Volume,
    reference_valid: &[bool],
    cfg: &StageConfig,
    out_grid: &Geometry,
) -> Result<Increment> {
    let grid = mov.geom;
    let effective = Mask {
        geom: grid,
        bits: reference_valid.iter().zip(&mov.valid).map(|(&a, &b)| a && b).collect(),
    };
    let kps = sample_keypoints(&effective, cfg.dispersion);
    if kps.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    let mov_desc = ssc_descriptor(&mov.imputed());
    let candidates = cfg.candidates();
    let patch = PatchSampling::sparse(xyz(cfg.patch_radius));
    let fwd_costs = unary_costs(ref_desc, &mov_desc, &effective, &kps, &candidates, &patch)?;
    let fwd = mst_regularize(&kps, fwd_costs, cfg.regularization)?;
    let bwd_costs = unary_costs(&mov_desc, ref_desc, &effective, &kps, &candidates, &patch)?;
    let bwd = mst_regularize(&kps, bwd_costs, cfg.regularization)?;
    let sigma = [0, 1, 2].map(|a| xyz(cfg.dispersion)[a] as f64 * grid.spacing[a]);
    let threshold = 0.5 * cfg.dispersion[0] as f64 * grid.spacing[0];
    let kept = symmetry_filter(&fwd, &bwd, sigma, threshold)?;
    let field = densify(&kept, &grid, sigma, out_grid)?;
    Ok(Increment {
        field,
        keypoints: kps.len(),
        survivors: kept.len(),
        candidates: candidates.len(),
    })
}

/// Runs one major stage starting from `prior` (the total field so far on the reference
/// grid) and returns the new total field.
pub fn run_stage_from(
    moving: &Volume,
    reference: &Volume,
    prior: Option<&DisplacementField>,
    cfg: &StageConfig,
    stage: usize,
) -> Result<RegistrationOutput> {
    cfg.validate()?;
    if let Some(p) = prior {
        p.geom.ensure_matches(&reference.geom, "prior field")?;
    }
    let ref_s = resample_to_spacing(reference, cfg.resolution)?;
    let grid = ref_s.geom;
    let ref_desc = ssc_descriptor(&ref_s.imputed());
    let base = StageBase::new(moving, cfg.resolution);
    // Densify straight onto the reference grid unless the stage grid is coarser.
    let out_grid = if grid.len() < reference.geom.len() { grid } else { reference.geom };

    let mut total: Option<DisplacementField> = prior.cloned();
    let mut records = Vec::new();
    for (sub, sub_cfg) in [('a', cfg.clone()), ('b', cfg.halved())] {
        let mov_s = base.warped(&grid, total.as_ref());
        let mut record = SubStageRecord {
            stage,
            sub_stage: sub,
            keypoints: 0,
            survivors: 0,
            candidates: sub_cfg.candidates().len(),
            warning: None,
        };
        match solve_sub_stage(&ref_desc, &mov_s, &ref_s.valid, &sub_cfg, &out_grid) {
            Ok(inc) => {
                record.keypoints = inc.keypoints;
                record.survivors = inc.survivors;
                record.candidates = inc.candidates;
                let f = inc.field.resample_onto(&reference.geom);
                total = Some(match &total {
                    Some(t) => compose(&f, t),
                    None => f,
                });
            }
            Err(e @ (Error::StageFailure(_) | Error::EmptyKeypoints)) => {
                log::warn!("stage {stage}{sub}: {e}; using a zero increment");
                record.warning = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        records.push(record);
    }
    Ok(RegistrationOutput {
        field: total.unwrap_or_else(|| DisplacementField::zeros(reference.geom)),
        records,
    })
}

/// One major stage from the identity: the composition of both sub-stage fields.
pub fn run_stage(moving: &Volume, reference: &Volume, cfg: &StageConfig) -> Result<RegistrationOutput> {
    run_stage_from(moving, reference, None, cfg, 0)
}

/// Runs the stages in order, each starting from the composed field of the previous ones.
pub fn run_pipeline(moving: &Volume, reference: &Volume, stages: &[StageConfig]) -> Result<RegistrationOutput> {
    run_pipeline_from(moving, reference, None, stages)
}

/// As [`run_pipeline`], starting from `prior` (for example an affine expressed as a
/// field) so the moving scan is interpolated only once per sub-stage.
pub fn run_pipeline_from(
    moving: &Volume,
    reference: &Volume,
    prior: Option<&DisplacementField>,
    stages: &[StageConfig],
) -> Result<RegistrationOutput> {
    let mut total = prior.cloned();
    let mut records = Vec::new();
    for (i, cfg) in stages.iter().enumerate() {
        let out = run_stage_from(moving, reference, total.as_ref(), cfg, i)?;
        records.extend(out.records);
        total = Some(out.field);
    }
    Ok(RegistrationOutput {
        field: total.unwrap_or_else(|| DisplacementField::zeros(reference.geom)),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table() {
        let d = StageConfig::defaults();
        assert_eq!(d.len(), 4);
        assert_eq!(d[0].search_radius, [60, 30]);
        assert_eq!(d[3].resolution, [1.0; 3]);
        assert_eq!(d[2].patch_radius, [3, 2]);
        assert_eq!(d[1].regularization, 0.7);
        assert_eq!(d[0].quantization_steps(), [7, 3]);
        assert_eq!(d[0].halved().search_radius, [30, 15]);
        assert_eq!(d[0].halved().quantization_steps(), [3, 1]);
        for c in &d {
            c.validate().unwrap();
        }
    }

    #[test]
    fn json_overrides_fill_defaults() {
        let cfgs = parse_stage_configs(r#"[{"regularization": 2.5}, {"resolution_mm": 3}, {"resolution_mm": [1, 1, 2], "quantization": [2, 1]}]"#).unwrap();
        assert_eq!(cfgs[0].regularization, 2.5);
        assert_eq!(cfgs[0].search_radius, [60, 30]);
        assert_eq!(cfgs[1].resolution, [3.0; 3]);
        assert_eq!(cfgs[1].dispersion, [7, 3]);
        assert_eq!(cfgs[2].resolution, [1.0, 1.0, 2.0]);
        assert_eq!(cfgs[2].quantization, Some([2, 1]));
        assert!(matches!(parse_stage_configs("{"), Err(Error::Parse(_))));
        assert!(matches!(parse_stage_configs(r#"[{"bogus": 1}]"#), Err(Error::Parse(_))));
        assert!(matches!(parse_stage_configs(r#"[{"search_radius": [2, 1]}]"#), Err(Error::Config(_))));
        assert!(matches!(parse_stage_configs(r#"[{"regularization": -1}]"#), Err(Error::Config(_))));
    }
}
