//! End-to-end registration of one scan to a prepared reference: preprocessing, affine
//! alignment, multi-stage correspondence registration, warping and QA, with an
//! on-disk cache keyed by scan and configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affinereg::{register_affine_masked, AffineConfig};
use crate::atlas::standard_roi;
use crate::corrfield::{parse_stage_configs, run_pipeline_from, StageConfig, SubStageRecord};
use crate::error::{Error, Result};
use crate::field::{affine_to_field, log_jacobian, warp, warp_mask, DisplacementField};
use crate::nifti::{read_volume, write_volume};
use crate::preprocess::{preprocess, PreprocessConfig, SegmentationPair};
use crate::qa::{evaluate_registration, QaReport};
use crate::transform::AffineTransform;
use crate::volume::{Geometry, Mask, Volume};

/// Everything that determines a registration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub affine: AffineConfig,
    pub stages: Vec<StageConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preprocess: PreprocessConfig::default(),
            affine: AffineConfig::default(),
            stages: StageConfig::defaults(),
        }
    }
}

impl PipelineConfig {
    /// Default preprocessing and affine settings with the given stages.
    pub fn with_stages(stages: Vec<StageConfig>) -> PipelineConfig {
        PipelineConfig {
            stages,
            ..PipelineConfig::default()
        }
    }

    /// Parses either a full configuration object or a bare JSON array of stage
    /// overrides (other settings default).
    pub fn parse(json: &str) -> Result<PipelineConfig> {
        let cfg = if json.trim_start().starts_with('[') {
            PipelineConfig::with_stages(parse_stage_configs(json)?)
        } else {
            serde_json::from_str(json).map_err(|e| Error::Parse(format!("pipeline config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        PipelineConfig::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.affine.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("at least one registration stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate().map_err(|e| Error::Config(format!("stage {i}: {e}")))?;
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A preprocessed reference scan with its standard ROI.
#[derive(Debug, Clone)]
pub struct PreparedReference {
    pub volume: Volume,
    pub masks: SegmentationPair,
    pub roi: Mask,
}

impl PreparedReference {
    pub fn new(raw: &Volume, cfg: &PreprocessConfig) -> Result<PreparedReference> {
        let pre = preprocess(raw, cfg)?;
        let roi = standard_roi(&pre.volume, &pre.masks.body)?;
        Ok(PreparedReference {
            volume: pre.volume,
            masks: pre.masks,
            roi,
        })
    }
}

/// Outputs of registering one scan, all on the reference grid.
#[derive(Debug, Clone)]
pub struct Registration {
    pub affine: AffineTransform,
    /// Full reference-to-native map (affine included), rounded to f32 precision so a
    /// cached copy is identical.
    pub field: DisplacementField,
    /// Residual map: the preprocessed scan pulled back onto the reference grid.
    pub warped: Volume,
    pub warped_masks: SegmentationPair,
    /// Deformed field of view of the scan, before intersecting with the ROI.
    pub warped_fov: Mask,
    pub qa: QaReport,
    pub records: Vec<SubStageRecord>,
}

impl Registration {
    /// ROI voxels inside the deformed field of view where the residual map is defined,
    /// so the HU and log-Jacobian maps cover the same voxels.
    pub fn effective_region(&self, roi: &Mask) -> Result<Mask> {
        self.warped_fov.and(roi)?.and(&self.warped.valid_mask())
    }

    pub fn log_jacobian(&self) -> Volume {
        log_jacobian(&self.field).0
    }
}

fn round_to_f32(field: &mut DisplacementField) {
    for v in &mut field.vectors {
        *v = v.map(|c| c as f32 as f64);
    }
}

/// Registers a raw scan to the reference.
pub fn register_scan(
    scan_id: &str,
    raw: &Volume,
    reference: &PreparedReference,
    cfg: &PipelineConfig,
) -> Result<Registration> {
    let pre = preprocess(raw, &cfg.preprocess)?;
    let affine = register_affine_masked(&pre.volume, &reference.volume, &reference.masks.body, &cfg.affine)?;
    let prior = affine_to_field(&affine, &reference.volume.geom);
    let out = run_pipeline_from(&pre.volume, &reference.volume, Some(&prior), &cfg.stages)?;
    let mut field = out.field;
    round_to_f32(&mut field);
    finish(scan_id, &pre.volume, &pre.masks, reference, affine, field, out.records)
}

/// Warps and scores a scan through a known field.
pub fn finish(
    scan_id: &str,
    moving: &Volume,
    masks: &SegmentationPair,
    reference: &PreparedReference,
    affine: AffineTransform,
    field: DisplacementField,
    records: Vec<SubStageRecord>,
) -> Result<Registration> {
    let warped = warp(moving, &field);
    let warped_masks = SegmentationPair {
        body: warp_mask(&masks.body, &field),
        lung: warp_mask(&masks.lung, &field),
    };
    let warped_fov = warp_mask(&moving.valid_mask(), &field);
    let overlap = warped_fov.and(&reference.volume.valid_mask())?;
    let qa = evaluate_registration(
        scan_id,
        &warped_masks.lung,
        &warped_masks.body,
        &reference.masks.lung,
        &reference.masks.body,
        &overlap,
        &field,
    )?;
    Ok(Registration {
        affine,
        field,
        warped,
        warped_masks,
        warped_fov,
        qa,
        records,
    })
}

/// Per-scan registration outputs stored under `root/<scan_id>-<config hash>/`.
#[derive(Debug, Clone)]
pub struct RegistrationCache {
    root: PathBuf,
}

const CACHE_FILES: [&str; 7] = [
    "affine.txt",
    "field.nii",
    "warped.nii",
    "warped_lung.nii",
    "warped_body.nii",
    "warped_fov.nii",
    "qa.json",
];

impl RegistrationCache {
    pub fn new(root: impl Into<PathBuf>) -> RegistrationCache {
        RegistrationCache { root: root.into() }
    }

    pub fn entry_dir(&self, scan_id: &str, cfg: &PipelineConfig) -> PathBuf {
        self.root.join(format!("{scan_id}-{}", cfg.hash()))
    }

    /// Cached outputs for the scan, placed on `geom` (the reference grid).
    pub fn load(&self, scan_id: &str, cfg: &PipelineConfig, geom: &Geometry) -> Result<Option<Registration>> {
        let dir = self.entry_dir(scan_id, cfg);
        if !CACHE_FILES.iter().all(|f| dir.join(f).is_file()) {
            return Ok(None);
        }
        let qa_path = dir.join("qa.json");
        let qa_text = fs::read_to_string(&qa_path).map_err(|e| Error::io(&qa_path, e))?;
        let stored: CachedMeta =
            serde_json::from_str(&qa_text).map_err(|e| Error::Parse(format!("{}: {e}", qa_path.display())))?;
        let on_grid = |mut v: Volume| -> Result<Volume> {
            v.geom.ensure_matches(geom, "cached volume")?;
            v.geom = *geom;
            Ok(v)
        };
        let mask = |name: &str| -> Result<Mask> { Ok(Mask::from_volume(&on_grid(read_volume(dir.join(name))?)?)) };
        let mut field = DisplacementField::read(dir.join("field.nii"))?;
        field.geom.ensure_matches(geom, "cached field")?;
        field.geom = *geom;
        Ok(Some(Registration {
            affine: AffineTransform::read(dir.join("affine.txt"))?,
            field,
            warped: on_grid(read_volume(dir.join("warped.nii"))?)?,
            warped_masks: SegmentationPair {
                body: mask("warped_body.nii")?,
                lung: mask("warped_lung.nii")?,
            },
            warped_fov: mask("warped_fov.nii")?,
            qa: stored.qa,
            records: Vec::new(),
        }))
    }

    pub fn store(&self, scan_id: &str, cfg: &PipelineConfig, reg: &Registration) -> Result<PathBuf> {
        let dir = self.entry_dir(scan_id, cfg);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        reg.affine.write(dir.join("affine.txt"))?;
        reg.field.write(dir.join("field.nii"))?;
        write_volume(&reg.warped, dir.join("warped.nii"))?;
        write_volume(&reg.warped_masks.lung.to_volume(), dir.join("warped_lung.nii"))?;
        write_volume(&reg.warped_masks.body.to_volume(), dir.join("warped_body.nii"))?;
        write_volume(&reg.warped_fov.to_volume(), dir.join("warped_fov.nii"))?;
        let meta = CachedMeta { qa: reg.qa.clone() };
        let qa_path = dir.join("qa.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&qa_path, text + "\n").map_err(|e| Error::io(&qa_path, e))?;
        Ok(dir)
    }

    /// Cached result, or a fresh registration of the scan at `path` that is then stored.
    pub fn get_or_register(
        &self,
        scan_id: &str,
        path: &Path,
        reference: &PreparedReference,
        cfg: &PipelineConfig,
    ) -> Result<Registration> {
        if let Some(hit) = self.load(scan_id, cfg, &reference.volume.geom)? {
            return Ok(hit);
        }
        let raw = read_volume(path)?;
        let reg = register_scan(scan_id, &raw, reference, cfg)?;
        self.store(scan_id, cfg, &reg)?;
        Ok(reg)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedMeta {
    qa: QaReport,
}
