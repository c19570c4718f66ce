//! Batch driver: preprocessing, registration, cohort atlases, atlas differences,
//! hyperparameter tuning and phantom generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chestatlas::atlas::atlas_diff;
use chestatlas::cohort::{axial_montage, build_cohort_atlas, read_bundle_means, with_workers};
use chestatlas::manifest::{Filter, Manifest, ManifestRow};
use chestatlas::nifti::{read_volume, write_volume};
use chestatlas::phantom::CohortSpec;
use chestatlas::pipeline::{register_scan, PipelineConfig, PreparedReference, RegistrationCache};
use chestatlas::preprocess::preprocess;
use chestatlas::qa::{grid_search, write_grid_csv, write_qa_csv, QaReport, SearchGrid};
use chestatlas::{Error, Result};

#[derive(Parser)]
#[command(name = "chestatlas", version, about = "Chest CT registration and missing-data atlas construction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment body and lungs and remove ambient content.
    Preprocess {
        input: PathBuf,
        out_dir: PathBuf,
        /// Pipeline configuration JSON (only the preprocessing section is used).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register a moving scan to a reference scan.
    Register {
        moving: PathBuf,
        reference: PathBuf,
        out_dir: PathBuf,
        /// Pipeline configuration JSON, or a JSON array of stage settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build mean/variance atlases of a manifest subgroup.
    Atlas {
        manifest: PathBuf,
        reference: PathBuf,
        out_dir: PathBuf,
        /// Row filter, e.g. "bmi>=18.5 and bmi<=24.9" or "cac in (moderate,severe)".
        #[arg(long, default_value = "")]
        filter: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Registration cache directory (default: <out_dir>/cache).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Difference of two atlas bundles (a - b).
    Diff {
        atlas_a: PathBuf,
        atlas_b: PathBuf,
        out_dir: PathBuf,
        /// Display window for the HU montages.
        #[arg(long, value_parser = parse_window, default_value = "-900,-700", allow_hyphen_values = true)]
        window: (f32, f32),
    },
    /// Grid search over one stage's parameters; writes a ranked CSV.
    Tune {
        manifest: PathBuf,
        reference: PathBuf,
        grid: PathBuf,
        out: PathBuf,
        #[arg(long, default_value = "")]
        filter: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Generate a phantom cohort with ground truth and a manifest.
    Phantom {
        spec: PathBuf,
        out_dir: PathBuf,
        /// Overrides the cohort seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_window(s: &str) -> std::result::Result<(f32, f32), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LOW,HIGH")?;
    let lo: f32 = lo.trim().parse().map_err(|e| format!("window low: {e}"))?;
    let hi: f32 = hi.trim().parse().map_err(|e| format!("window high: {e}"))?;
    if !(lo < hi) {
        return Err(format!("window low {lo} must be below high {hi}"));
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess { input, out_dir, config } => cmd_preprocess(&input, &out_dir, &load_config(config)?),
        Command::Register {
            moving,
            reference,
            out_dir,
            config,
        } => cmd_register(&moving, &reference, &out_dir, &load_config(config)?),
        Command::Atlas {
            manifest,
            reference,
            out_dir,
            filter,
            config,
            cache,
            workers,
        } => {
            let cache = cache.unwrap_or_else(|| out_dir.join("cache"));
            cmd_atlas(&manifest, &reference, &filter, &out_dir, &cache, &load_config(config)?, workers)
        }
        Command::Diff {
            atlas_a,
            atlas_b,
            out_dir,
            window,
        } => cmd_diff(&atlas_a, &atlas_b, &out_dir, window),
        Command::Tune {
            manifest,
            reference,
            grid,
            out,
            filter,
            config,
            workers,
        } => cmd_tune(&manifest, &reference, &grid, &out, &filter, &load_config(config)?, workers),
        Command::Phantom { spec, out_dir, seed } => cmd_phantom(&spec, &out_dir, seed),
    }
}

fn load_config(path: Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::read(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_qa(path: &Path, reports: &[QaReport]) -> Result<()> {
    let mut buf = Vec::new();
    write_qa_csv(reports, &mut buf)?;
    write_file(path, &buf)
}

fn cmd_preprocess(input: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let vol = read_volume(input)?;
    let pre = preprocess(&vol, &cfg.preprocess)?;
    create_dir(out_dir)?;
    write_volume(&pre.volume, out_dir.join("hu.nii"))?;
    write_volume(&pre.masks.lung.to_volume(), out_dir.join("lung.nii"))?;
    write_volume(&pre.masks.body.to_volume(), out_dir.join("body.nii"))
}

fn cmd_register(moving: &Path, reference: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let reference = PreparedReference::new(&read_volume(reference)?, &cfg.preprocess)?;
    let raw = read_volume(moving)?;
    let scan_id = moving
        .file_stem()
        .map(|s| s.to_string_lossy().trim_end_matches(".nii").to_string())
        .unwrap_or_else(|| "moving".into());
    let reg = register_scan(&scan_id, &raw, &reference, cfg)?;
    create_dir(out_dir)?;
    reg.affine.write(out_dir.join("affine.txt"))?;
    reg.field.write(out_dir.join("field.nii"))?;
    write_volume(&reg.warped, out_dir.join("warped.nii"))?;
    write_volume(&reg.warped_masks.lung.to_volume(), out_dir.join("warped_lung.nii"))?;
    write_volume(&reg.warped_masks.body.to_volume(), out_dir.join("warped_body.nii"))?;
    write_qa(&out_dir.join("qa.csv"), &[reg.qa])
}

fn cmd_atlas(
    manifest: &Path,
    reference: &Path,
    filter: &str,
    out_dir: &Path,
    cache: &Path,
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<()> {
    let filter = Filter::parse(filter)?;
    let manifest = Manifest::read(manifest)?;
    let reference = PreparedReference::new(&read_volume(reference)?, &cfg.preprocess)?;
    let cache = RegistrationCache::new(cache);
    let bundle = with_workers(workers, || build_cohort_atlas(&manifest, &reference, &filter, cfg, &cache))??;
    bundle.write(out_dir)?;
    write_qa(&out_dir.join("qa.csv"), &bundle.qa)
}

fn cmd_diff(a: &Path, b: &Path, out_dir: &Path, window: (f32, f32)) -> Result<()> {
    let (hu_a, lj_a) = read_bundle_means(a)?;
    let (hu_b, lj_b) = read_bundle_means(b)?;
    let hu = atlas_diff(&hu_a, &hu_b)?;
    let lj = atlas_diff(&lj_a, &lj_b)?;
    create_dir(out_dir)?;
    write_volume(&hu, out_dir.join("hu_mean_diff.nii"))?;
    write_volume(&lj, out_dir.join("logjac_mean_diff.nii"))?;
    write_file(&out_dir.join("hu_mean_a.pgm"), &axial_montage(&hu_a, window))?;
    write_file(&out_dir.join("hu_mean_b.pgm"), &axial_montage(&hu_b, window))
}

fn cmd_tune(
    manifest: &Path,
    reference: &Path,
    grid: &Path,
    out: &Path,
    filter: &str,
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<()> {
    let grid = SearchGrid::read(grid)?;
    let filter = Filter::parse(filter)?;
    let manifest = Manifest::read(manifest)?;
    let rows: Vec<&ManifestRow> = manifest.select(&filter);
    if rows.is_empty() {
        return Err(Error::EmptySelection(format!("filter {:?} matches no manifest rows", filter.to_string())));
    }
    let reference = PreparedReference::new(&read_volume(reference)?, &cfg.preprocess)?;
    let scans = rows
        .iter()
        .map(|r| Ok((r.scan_id.clone(), read_volume(&r.path)?)))
        .collect::<Result<Vec<_>>>()?;
    let results = with_workers(workers, || {
        grid_search(&grid, &cfg.stages, scans.len(), |stages| {
            let cfg = PipelineConfig {
                stages: stages.to_vec(),
                ..cfg.clone()
            };
            // A scan that cannot be registered counts as a failure, not an abort.
            Ok(scans
                .iter()
                .filter_map(|(id, vol)| match register_scan(id, vol, &reference, &cfg) {
                    Ok(reg) => Some(reg.qa),
                    Err(e) => {
                        log::warn!("{id}: {e}");
                        None
                    }
                })
                .collect())
        })
    })??;
    let mut buf = Vec::new();
    write_grid_csv(&results, &mut buf)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(out, &buf)
}

fn cmd_phantom(spec: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let mut cohort = CohortSpec::parse(&text)?;
    if let Some(s) = seed {
        cohort.seed = s;
        cohort.validate()?;
    }
    create_dir(out_dir)?;
    let members = cohort.members();
    let mut rows = Vec::with_capacity(members.len());
    for m in &members {
        let r = m.render()?;
        let file = format!("{}.nii", m.scan_id);
        write_volume(&r.volume, out_dir.join(&file))?;
        write_volume(&r.masks.lung.to_volume(), out_dir.join(format!("{}_lung.nii", m.scan_id)))?;
        write_volume(&r.masks.body.to_volume(), out_dir.join(format!("{}_body.nii", m.scan_id)))?;
        if let Some((field, _)) = &r.deformation {
            field.write(out_dir.join(format!("{}_field.nii", m.scan_id)))?;
        }
        let g = &cohort.groups[m.group];
        rows.push(ManifestRow {
            scan_id: m.scan_id.clone(),
            path: PathBuf::from(file),
            sex: g.sex.clone(),
            bmi: g.bmi,
            copd: g.copd,
            cac: g.cac.as_deref().map(str::parse).transpose()?,
        });
    }
    write_file(&out_dir.join("manifest.csv"), Manifest { rows }.to_csv().as_bytes())
}
