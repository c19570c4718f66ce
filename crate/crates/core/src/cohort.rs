//! Cohort atlas construction over a manifest, bundle I/O and display exports.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::atlas::{atlas_diff, AtlasAccumulator, AtlasMaps, AtlasSidecar, FailureRecord};
use crate::error::{Error, Result};
use crate::manifest::{Filter, Manifest};
use crate::nifti::{read_volume, write_volume};
use crate::pipeline::{PipelineConfig, PreparedReference, RegistrationCache};
use crate::qa::QaReport;
use crate::volume::{Mask, Volume};

/// HU and log-Jacobian atlases of one subgroup.
#[derive(Debug, Clone)]
pub struct AtlasBundle {
    pub hu: AtlasMaps,
    pub logjac: AtlasMaps,
    pub sidecar: AtlasSidecar,
    pub qa: Vec<QaReport>,
}

/// Contribution of one registered scan.
struct Projected {
    hu: Volume,
    logjac: Volume,
    region: Mask,
}

/// Runs a closure on a pool of `workers` threads (0 = rayon's default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Registers every selected row (reusing cached results) and averages the residual HU
/// and log-Jacobian maps over each voxel's covering scans. Rows that fail to load or
/// register, or fail QA, are listed in the sidecar and excluded.
pub fn build_cohort_atlas(
    manifest: &Manifest,
    reference: &PreparedReference,
    filter: &Filter,
    cfg: &PipelineConfig,
    cache: &RegistrationCache,
) -> Result<AtlasBundle> {
    let rows = manifest.select(filter);
    if rows.is_empty() {
        return Err(Error::EmptySelection(format!("filter {:?} matches no manifest rows", filter.to_string())));
    }
    let outcomes: Vec<std::result::Result<(Projected, QaReport), (Option<QaReport>, String)>> = rows
        .par_iter()
        .map(|row| {
            let reg = cache
                .get_or_register(&row.scan_id, &row.path, reference, cfg)
                .map_err(|e| (None, e.to_string()))?;
            if !reg.qa.success {
                let reason = format!(
                    "QA failure (lung DSC {:.4}, body DSC {:.4})",
                    reg.qa.lung_dsc, reg.qa.body_dsc
                );
                return Err((Some(reg.qa), reason));
            }
            let region = reg.effective_region(&reference.roi).map_err(|e| (None, e.to_string()))?;
            let logjac = reg.log_jacobian();
            Ok((
                Projected {
                    hu: reg.warped,
                    logjac,
                    region,
                },
                reg.qa,
            ))
        })
        .collect();

    let geom = reference.volume.geom;
    let mut hu = AtlasAccumulator::new(geom);
    let mut lj = AtlasAccumulator::new(geom);
    let mut scans = Vec::new();
    let mut failures = Vec::new();
    let mut qa = Vec::new();
    for (row, outcome) in rows.iter().zip(outcomes) {
        match outcome {
            Ok((p, report)) => {
                hu.accumulate(&p.hu, &p.region)?;
                lj.accumulate(&p.logjac, &p.region)?;
                scans.push(row.scan_id.clone());
                qa.push(report);
            }
            Err((report, reason)) => {
                log::warn!("{}: {reason}", row.scan_id);
                qa.extend(report);
                failures.push(FailureRecord {
                    scan_id: row.scan_id.clone(),
                    reason,
                });
            }
        }
    }
    if scans.is_empty() {
        return Err(Error::EmptySelection(format!(
            "none of the {} selected scans registered successfully",
            rows.len()
        )));
    }
    Ok(AtlasBundle {
        hu: hu.finalize(),
        logjac: lj.finalize(),
        sidecar: AtlasSidecar {
            cohort_size: scans.len(),
            filter: filter.to_string(),
            scans,
            failures,
            config_hash: cfg.hash(),
        },
        qa,
    })
}

pub const BUNDLE_FILES: [&str; 6] = [
    "hu_mean.nii",
    "hu_variance.nii",
    "hu_count.nii",
    "logjac_mean.nii",
    "logjac_variance.nii",
    "logjac_count.nii",
];
pub const SIDECAR_FILE: &str = "atlas.json";

impl AtlasBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let maps = [
            &self.hu.mean,
            &self.hu.variance,
            &self.hu.count,
            &self.logjac.mean,
            &self.logjac.variance,
            &self.logjac.count,
        ];
        for (name, v) in BUNDLE_FILES.iter().zip(maps) {
            write_volume(v, dir.join(name))?;
        }
        let path = dir.join(SIDECAR_FILE);
        let text = serde_json::to_string_pretty(&self.sidecar).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// The two mean maps of a bundle directory: (HU, log-Jacobian).
pub fn read_bundle_means(dir: &Path) -> Result<(Volume, Volume)> {
    Ok((read_volume(dir.join("hu_mean.nii"))?, read_volume(dir.join("logjac_mean.nii"))?))
}

/// Signed differences `a - b` of the HU and log-Jacobian mean maps.
pub fn diff_bundles(a: &Path, b: &Path) -> Result<(Volume, Volume)> {
    let (ha, la) = read_bundle_means(a)?;
    let (hb, lb) = read_bundle_means(b)?;
    Ok((atlas_diff(&ha, &hb)?, atlas_diff(&la, &lb)?))
}

/// Binary PGM of three axial slices (at 1/4, 1/2 and 3/4 of z) side by side, values
/// mapped linearly from `window` to 0..255. Invalid voxels are black.
pub fn axial_montage(vol: &Volume, window: (f32, f32)) -> Vec<u8> {
    let [nx, ny, nz] = vol.geom.dims;
    let slices = [nz / 4, nz / 2, (3 * nz) / 4];
    let width = nx * slices.len();
    let mut out = format!("P5\n{width} {ny}\n255\n").into_bytes();
    let span = (window.1 - window.0).max(f32::MIN_POSITIVE);
    // Rows from the top (largest y) down.
    for y in (0..ny).rev() {
        for &z in &slices {
            for x in 0..nx {
                let i = vol.geom.index(x, y, z);
                let v = if vol.valid[i] {
                    (((vol.data[i] - window.0) / span).clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    0
                };
                out.push(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn montage_header_and_window() {
        let g = Geometry::centered([2, 3, 4], [1.0; 3]).unwrap();
        let mut v = Volume::from_world_fn(g, |p| if p[0] < 0.0 { -1000.0 } else { -600.0 });
        v.valid[g.index(1, 2, 2)] = false;
        let pgm = axial_montage(&v, (-900.0, -700.0));
        let header = b"P5\n6 3\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let body = &pgm[header.len()..];
        assert_eq!(body.len(), 18);
        // Top row, middle slice (z = 2): x = 0 clamps low, x = 1 is invalid.
        assert_eq!(&body[2..4], &[0, 0]);
        assert_eq!(&body[0..2], &[0, 255]);
    }
}
