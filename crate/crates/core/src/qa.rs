//! Registration quality control by Dice overlap, cohort success summaries and
//! exhaustive grid search over one stage's parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrfield::StageConfig;
use crate::error::{Error, Result};
use crate::field::{log_jacobian_values, DisplacementField};
use crate::volume::Mask;

/// Minimum lung Dice for a successful registration (inclusive).
pub const LUNG_DSC_THRESHOLD: f64 = 0.92;
/// Minimum body Dice for a successful registration (inclusive).
pub const BODY_DSC_THRESHOLD: f64 = 0.975;

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks agree perfectly (1.0).
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.geom.ensure_matches(&b.geom, "dice operands")?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        both += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub scan_id: String,
    pub lung_dsc: f64,
    pub body_dsc: f64,
    pub success: bool,
    pub folding_fraction: f64,
}

impl QaReport {
    /// Applies the inclusive thresholds to the given scores.
    pub fn from_scores(scan_id: impl Into<String>, lung_dsc: f64, body_dsc: f64, folding_fraction: f64) -> QaReport {
        QaReport {
            scan_id: scan_id.into(),
            lung_dsc,
            body_dsc,
            success: lung_dsc >= LUNG_DSC_THRESHOLD && body_dsc >= BODY_DSC_THRESHOLD,
            folding_fraction,
        }
    }
}

/// Scores warped masks against the reference masks inside `overlap`, the reference
/// voxels observed by both scans (a scan with a cropped field of view is not penalised
/// for anatomy it never imaged). The folding fraction is taken over the reference body.
pub fn evaluate_registration(
    scan_id: &str,
    warped_lung: &Mask,
    warped_body: &Mask,
    ref_lung: &Mask,
    ref_body: &Mask,
    overlap: &Mask,
    field: &DisplacementField,
) -> Result<QaReport> {
    field.geom.ensure_matches(&ref_body.geom, "displacement field")?;
    let within = |m: &Mask| m.and(overlap);
    let lung = dice(&within(warped_lung)?, &within(ref_lung)?)?;
    let body = dice(&within(warped_body)?, &within(ref_body)?)?;
    let (logdet, _) = log_jacobian_values(field);
    let floor = crate::field::FOLDING_FLOOR.ln();
    let (mut folded, mut roi) = (0usize, 0usize);
    for (&v, &inside) in logdet.iter().zip(&ref_body.bits) {
        if inside {
            roi += 1;
            folded += (v <= floor) as usize;
        }
    }
    let folding = if roi == 0 { 0.0 } else { folded as f64 / roi as f64 };
    Ok(QaReport::from_scores(scan_id, lung, body, folding))
}

pub const QA_CSV_HEADER: &str = "scan_id,lung_dsc,body_dsc,success,folding_fraction";

pub fn write_qa_csv<W: Write>(reports: &[QaReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let wr = |e: csv::Error| Error::Parse(format!("writing QA CSV: {e}"));
    w.write_record(QA_CSV_HEADER.split(',')).map_err(wr)?;
    for r in reports {
        w.write_record([
            r.scan_id.clone(),
            format!("{:.4}", r.lung_dsc),
            format!("{:.4}", r.body_dsc),
            (r.success as u8).to_string(),
            format!("{:.4}", r.folding_fraction),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(|e| Error::io("<qa csv>", e))
}

/// Success counts with a percentage to one decimal (half-up).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuccessRate {
    pub total: usize,
    pub successes: usize,
    /// Percentage in tenths of a percent.
    pub permille: u64,
}

impl SuccessRate {
    fn new(total: usize, successes: usize) -> SuccessRate {
        let (t, s) = (total as u64, successes as u64);
        SuccessRate {
            total,
            successes,
            permille: (2000 * s + t) / (2 * t),
        }
    }

    /// e.g. `91.7%`.
    pub fn percent_string(&self) -> String {
        format!("{}.{}%", self.permille / 10, self.permille % 10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CohortSummary {
    pub overall: SuccessRate,
    pub subgroups: BTreeMap<String, SuccessRate>,
}

/// Overall and per-subgroup success. `subgroup` assigns each report to a group (or
/// none).
pub fn cohort_report(reports: &[QaReport], subgroup: impl Fn(&QaReport) -> Option<String>) -> Result<CohortSummary> {
    if reports.is_empty() {
        return Err(Error::EmptySelection("no QA reports to summarise".into()));
    }
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in reports {
        if let Some(g) = subgroup(r) {
            let e = groups.entry(g).or_default();
            e.0 += 1;
            e.1 += r.success as usize;
        }
    }
    Ok(CohortSummary {
        overall: SuccessRate::new(reports.len(), reports.iter().filter(|r| r.success).count()),
        subgroups: groups.into_iter().map(|(k, (t, s))| (k, SuccessRate::new(t, s))).collect(),
    })
}

pub fn write_summary_csv<W: Write>(summary: &CohortSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wr = |e: csv::Error| Error::Parse(format!("writing summary CSV: {e}"));
    w.write_record(["group", "total", "successes", "success_rate"]).map_err(wr)?;
    let rows = std::iter::once(("all".to_string(), &summary.overall)).chain(summary.subgroups.iter().map(|(k, v)| (k.clone(), v)));
    for (name, r) in rows {
        w.write_record([name, r.total.to_string(), r.successes.to_string(), r.percent_string()])
            .map_err(wr)?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))
}

/// Candidate values per tuned parameter for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid {
    pub stage: usize,
    pub search_radius: Vec<[usize; 2]>,
    pub dispersion: Vec<[usize; 2]>,
    pub patch_radius: Vec<[usize; 2]>,
    pub regularization: Vec<f64>,
}

/// One grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub search_radius: [usize; 2],
    pub dispersion: [usize; 2],
    pub patch_radius: [usize; 2],
    pub regularization: f64,
}

impl GridPoint {
    fn cmp_params(&self, other: &GridPoint) -> std::cmp::Ordering {
        self.search_radius
            .cmp(&other.search_radius)
            .then(self.dispersion.cmp(&other.dispersion))
            .then(self.patch_radius.cmp(&other.patch_radius))
            .then(self.regularization.total_cmp(&other.regularization))
    }

    /// `base` with this point's parameters on stage `stage`.
    pub fn apply(&self, base: &[StageConfig], stage: usize) -> Vec<StageConfig> {
        let mut cfgs = base.to_vec();
        while cfgs.len() <= stage {
            cfgs.push(StageConfig::default_for(cfgs.len()));
        }
        let s = &mut cfgs[stage];
        s.search_radius = self.search_radius;
        s.dispersion = self.dispersion;
        s.patch_radius = self.patch_radius;
        s.regularization = self.regularization;
        cfgs
    }
}

impl SearchGrid {
    pub fn parse(json: &str) -> Result<SearchGrid> {
        let g: SearchGrid = serde_json::from_str(json).map_err(|e| Error::Parse(format!("grid spec: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<SearchGrid> {
        let path = path.as_ref();
        SearchGrid::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.search_radius.is_empty()
            || self.dispersion.is_empty()
            || self.patch_radius.is_empty()
            || self.regularization.is_empty()
        {
            return Err(Error::Config("every grid parameter needs at least one value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.search_radius.len() * self.dispersion.len() * self.patch_radius.len() * self.regularization.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The Cartesian product, first parameter slowest.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &search_radius in &self.search_radius {
            for &dispersion in &self.dispersion {
                for &patch_radius in &self.patch_radius {
                    for &regularization in &self.regularization {
                        out.push(GridPoint {
                            search_radius,
                            dispersion,
                            patch_radius,
                            regularization,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Score of one configuration over the tuning scans.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub failures: usize,
    pub mean_lung_dsc: f64,
    pub reports: Vec<QaReport>,
}

/// Evaluates every grid point with `evaluate` (which runs the tuning scans under the
/// given stage list) and ranks by failures, then mean lung Dice (descending), then
/// parameter order. Configurations that are invalid for the stage count as failing on
/// every scan.
pub fn grid_search<F>(grid: &SearchGrid, base: &[StageConfig], scans: usize, evaluate: F) -> Result<Vec<GridResult>>
where
    F: Fn(&[StageConfig]) -> Result<Vec<QaReport>> + Sync,
{
    grid.validate()?;
    if scans == 0 {
        return Err(Error::EmptySelection("no tuning scans".into()));
    }
    let mut results: Vec<GridResult> = grid
        .points()
        .into_par_iter()
        .map(|point| {
            let cfgs = point.apply(base, grid.stage);
            let reports = match cfgs[grid.stage].validate() {
                Ok(()) => evaluate(&cfgs)?,
                Err(e) => {
                    log::warn!("grid point {point:?} skipped: {e}");
                    Vec::new()
                }
            };
            let failures = scans - reports.iter().filter(|r| r.success).count().min(scans);
            let mean_lung_dsc = if reports.is_empty() {
                0.0
            } else {
                reports.iter().map(|r| r.lung_dsc).sum::<f64>() / reports.len() as f64
            };
            Ok(GridResult {
                point,
                failures,
                mean_lung_dsc,
                reports,
            })
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| {
        a.failures
            .cmp(&b.failures)
            .then(b.mean_lung_dsc.total_cmp(&a.mean_lung_dsc))
            .then(a.point.cmp_params(&b.point))
    });
    Ok(results)
}

/// Ranked grid results as CSV, preceded by a comment line with the configuration count.
pub fn write_grid_csv<W: Write>(results: &[GridResult], mut out: W) -> Result<()> {
    writeln!(out, "# configurations={}", results.len()).map_err(|e| Error::io("<grid csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    let wr = |e: csv::Error| Error::Parse(format!("writing grid CSV: {e}"));
    w.write_record([
        "rank",
        "search_radius",
        "dispersion",
        "patch_radius",
        "regularization",
        "failures",
        "mean_lung_dsc",
    ])
    .map_err(wr)?;
    let pair = |p: [usize; 2]| format!("{}x{}", p[0], p[1]);
    for (i, r) in results.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            pair(r.point.search_radius),
            pair(r.point.dispersion),
            pair(r.point.patch_radius),
            r.point.regularization.to_string(),
            r.failures.to_string(),
            format!("{:.4}", r.mean_lung_dsc),
        ])
        .map_err(wr)?;
    }
    w.flush().map_err(|e| Error::io("<grid csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mask(bits: &[u8]) -> Mask {
        let g = Geometry::centered([bits.len(), 1, 1], [1.0; 3]).unwrap();
        Mask::new(g, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(matches!(dice(&a, &mask(&[1])), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn thresholds_are_inclusive() {
        assert!(QaReport::from_scores("a", 0.95, 0.98, 0.0).success);
        assert!(!QaReport::from_scores("a", 0.91, 0.99, 0.0).success);
        assert!(QaReport::from_scores("a", 0.92, 0.975, 0.0).success);
        assert!(!QaReport::from_scores("a", 0.92, 0.9749, 0.0).success);
    }

    #[test]
    fn percentages_round_half_up() {
        let r = |n: usize, s: usize| SuccessRate::new(n, s).percent_string();
        assert_eq!(r(12, 11), "91.7%");
        assert_eq!(r(4, 4), "100.0%");
        assert_eq!(r(8, 1), "12.5%");
        assert_eq!(r(2000, 1), "0.1%");
        assert_eq!(r(3, 0), "0.0%");
        assert!(cohort_report(&[], |_| None).is_err());
    }

    #[test]
    fn qa_csv_format() {
        let mut buf = Vec::new();
        write_qa_csv(&[QaReport::from_scores("s1", 0.95, 0.98, 0.00012)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scan_id,lung_dsc,body_dsc,success,folding_fraction\ns1,0.9500,0.9800,1,0.0001\n"
        );
    }

    #[test]
    fn grid_parse_and_product() {
        let g = SearchGrid::parse(
            r#"{"stage": 0, "search_radius": [[60, 30], [40, 20]], "dispersion": [[8, 4]],
                "patch_radius": [[6, 4], [3, 2], [2, 1]], "regularization": [1.0, 0.5]}"#,
        )
        .unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g.points().len(), 12);
        assert!(SearchGrid::parse(r#"{"stage": 0, "search_radius": [], "dispersion": [[8, 4]], "patch_radius": [[6, 4]], "regularization": [1.0]}"#).is_err());
        assert!(matches!(SearchGrid::parse("{"), Err(Error::Parse(_))));
    }
}
