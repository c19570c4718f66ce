use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SPEC: &str = r#"{"seed": 3, "phantom": {"dims": [48, 48, 48], "spacing": [4, 4, 4]},
 "groups": [{"name": "a", "count": 2, "max_displacement": 6, "fov_crops": [null, 0.2], "copd": true},
            {"name": "b", "count": 2, "lung_hu_offset": 50, "copd": false}]}"#;

const STAGES: &str = r#"[{"resolution_mm": 4, "search_radius": [16, 8], "dispersion": [4, 2], "patch_radius": [2, 1]},
 {"resolution_mm": 4, "search_radius": [6, 4], "dispersion": [3, 2], "patch_radius": [2, 1], "regularization": 0.5}]"#;

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chestatlas"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Phantom cohort, reference scan and stage config shared by the tests.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn get() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let root = tempfile::tempdir().unwrap().keep();
            fs::write(root.join("spec.json"), SPEC).unwrap();
            fs::write(root.join("stages.json"), STAGES).unwrap();
            ok(run(&[&"phantom", &root.join("spec.json"), &root.join("cohort")]));
            let reference = r#"{"seed": 1, "phantom": {"dims": [48, 48, 48], "spacing": [4, 4, 4]},
                "groups": [{"name": "ref", "count": 1}]}"#;
            fs::write(root.join("ref.json"), reference).unwrap();
            ok(run(&[&"phantom", &root.join("ref.json"), &root.join("ref")]));
            Fixture { root }
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn reference(&self) -> PathBuf {
        self.path("ref/ref_000.nii")
    }
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn phantom_outputs_are_seed_deterministic() {
    let f = Fixture::get();
    let again = tmp();
    ok(run(&[&"phantom", &f.path("spec.json"), &again.path()]));
    assert_eq!(read_dir_bytes(&f.path("cohort")), read_dir_bytes(again.path()));

    let manifest = fs::read_to_string(f.path("cohort/manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "scan_id,path,sex,bmi,copd,cac");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("a_000,a_000.nii,"));
    assert!(f.path("cohort/a_000_field.nii").is_file());
    assert!(!f.path("cohort/b_000_field.nii").exists());

    let reseeded = tmp();
    ok(run(&[&"phantom", &f.path("spec.json"), &reseeded.path(), &"--seed", &"99"]));
    assert_ne!(fs::read(f.path("cohort/b_000.nii")).unwrap(), fs::read(reseeded.path().join("b_000.nii")).unwrap());
}

#[test]
fn preprocess_and_register_write_their_outputs() {
    let f = Fixture::get();
    let out = tmp();
    ok(run(&[&"preprocess", &f.path("cohort/a_001.nii"), &out.path()]));
    for name in ["hu.nii", "lung.nii", "body.nii"] {
        assert!(out.path().join(name).is_file(), "{name}");
    }

    let reg = tmp();
    ok(run(&[
        &"register",
        &f.path("cohort/a_000.nii"),
        &f.reference(),
        &reg.path(),
        &"--config",
        &f.path("stages.json"),
    ]));
    for name in ["affine.txt", "field.nii", "warped.nii", "warped_lung.nii", "warped_body.nii", "qa.csv"] {
        assert!(reg.path().join(name).is_file(), "{name}");
    }
    let qa = fs::read_to_string(reg.path().join("qa.csv")).unwrap();
    assert!(qa.starts_with("scan_id,lung_dsc,body_dsc,success,folding_fraction\n"));
    assert_eq!(qa.lines().count(), 2);
}

#[test]
fn atlas_is_idempotent_and_diff_window_only_changes_montages() {
    let f = Fixture::get();
    let manifest = f.path("cohort/manifest.csv");
    let (a, b, a2) = (tmp(), tmp(), tmp());
    let atlas = |out: &Path, filter: &str| {
        ok(run(&[
            &"atlas",
            &manifest,
            &f.reference(),
            &out,
            &"--filter",
            &filter,
            &"--config",
            &f.path("stages.json"),
        ]))
    };
    atlas(a.path(), "copd==true");
    atlas(b.path(), "copd==false");
    for name in ["hu_mean.nii", "hu_variance.nii", "hu_count.nii", "logjac_mean.nii", "logjac_variance.nii", "logjac_count.nii", "atlas.json", "qa.csv"] {
        assert!(a.path().join(name).is_file(), "{name}");
    }
    // Fresh cache and a warm one give byte-identical bundles.
    atlas(a2.path(), "copd==true");
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(a2.path()));
    atlas(a2.path(), "copd==true");
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(a2.path()));

    let (d1, d2) = (tmp(), tmp());
    ok(run(&[&"diff", &a.path(), &b.path(), &d1.path()]));
    ok(run(&[&"diff", &a.path(), &b.path(), &d2.path(), &"--window", &"-1000,0"]));
    for name in ["hu_mean_diff.nii", "logjac_mean_diff.nii"] {
        assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap(), "{name}");
    }
    let pgm = fs::read(d1.path().join("hu_mean_a.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n144 48\n255\n"));
    assert_ne!(pgm, fs::read(d2.path().join("hu_mean_a.pgm")).unwrap());
}

#[test]
fn tune_with_a_single_configuration_writes_one_row() {
    let f = Fixture::get();
    let out = tmp();
    let grid = out.path().join("grid.json");
    fs::write(
        &grid,
        r#"{"stage": 1, "search_radius": [[6, 4]], "dispersion": [[3, 2]], "patch_radius": [[2, 1]], "regularization": [0.5]}"#,
    )
    .unwrap();
    let csv = out.path().join("ranked.csv");
    ok(run(&[
        &"tune",
        &f.path("cohort/manifest.csv"),
        &f.reference(),
        &grid,
        &csv,
        &"--filter",
        &"copd==false",
        &"--config",
        &f.path("stages.json"),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# configurations=1");
    assert_eq!(lines.len(), 3, "{text}");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let f = Fixture::get();
    let out = tmp();
    let code = |o: Output| o.status.code().unwrap();

    let missing = out.path().join("missing.nii");
    assert_eq!(code(run(&[&"preprocess", &missing, &out.path()])), 2);

    let bad = out.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(run(&[&"preprocess", &f.path("cohort/a_000.nii"), &out.path(), &"--config", &bad])), 3);
    assert_eq!(code(run(&[&"phantom", &bad, &out.path()])), 3);

    let spec = out.path().join("spec.json");
    fs::write(&spec, r#"{"groups": [{"name": "a", "count": 1, "lung_volume_factor": -1}]}"#).unwrap();
    assert_eq!(code(run(&[&"phantom", &spec, &out.path()])), 3);

    assert_eq!(code(run(&[&"bogus"])), 3);
    assert_eq!(code(run(&[&"diff", &out.path(), &out.path(), &out.path(), &"--window", &"5"])), 3);
    assert_eq!(code(run(&[&"--help"])), 0);

    let empty = run(&[
        &"atlas",
        &f.path("cohort/manifest.csv"),
        &f.reference(),
        &out.path().join("atlas"),
        &"--filter",
        &"bmi>100",
    ]);
    assert_eq!(code(empty), 4);
}
