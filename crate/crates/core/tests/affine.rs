use chestatlas::affinereg::{apply_affine, apply_affine_mask, register_affine, AffineConfig};
use chestatlas::phantom::{generate_phantom, PhantomSpec};
use chestatlas::transform::AffineTransform;
use chestatlas::{Geometry, Mask, Volume};
use nalgebra::{Matrix3, Vector3};

fn phantom(seed: u64) -> Volume {
    generate_phantom(&PhantomSpec::for_grid([64, 64, 64], [3.0; 3], seed)).unwrap().0
}

/// Moving scan whose content is `reference` mapped through `truth`, so the expected
/// reference-to-moving pull-back is `truth` itself.
fn synthesize(reference: &Volume, truth: &AffineTransform) -> Volume {
    apply_affine(reference, &truth.inverse().unwrap(), &reference.geom).unwrap()
}

fn max_point_error(a: &AffineTransform, b: &AffineTransform, geom: &Geometry) -> f64 {
    let c = geom.center();
    let mut worst: f64 = 0.0;
    for d in [[0.0; 3], [40.0, 0.0, 0.0], [0.0, 40.0, 0.0], [0.0, 0.0, 40.0], [-30.0, -30.0, -30.0]] {
        let p = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
        let (x, y) = (a.apply(p), b.apply(p));
        worst = worst.max(((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt());
    }
    worst
}

#[test]
fn isotropic_scale_is_recovered() {
    let reference = phantom(11);
    let c = reference.geom.center();
    let s = 1.05;
    let truth = AffineTransform::from_linear_translation(
        Matrix3::identity() * s,
        Vector3::new(c[0] * (1.0 - s), c[1] * (1.0 - s), c[2] * (1.0 - s)),
    )
    .unwrap();
    let moving = synthesize(&reference, &truth);
    let t = register_affine(&moving, &reference, &AffineConfig::default()).unwrap();
    let l = t.linear();
    for a in 0..3 {
        assert!((l[(a, a)] / s - 1.0).abs() < 0.01, "{l}");
    }
}

#[test]
fn hu_offset_barely_moves_the_result() {
    let reference = phantom(12);
    let truth = AffineTransform::translation([4.0, 3.0, -5.0]);
    let moving = synthesize(&reference, &truth);
    let cfg = AffineConfig::default();
    let base = register_affine(&moving, &reference, &cfg).unwrap();
    let shift = |v: &Volume, c: f32| Volume {
        data: v.data.iter().zip(&v.valid).map(|(&d, &ok)| if ok && d > -1000.0 { d + c } else { d }).collect(),
        ..v.clone()
    };
    for c in [50.0, 200.0] {
        let t = register_affine(&shift(&moving, c), &shift(&reference, c), &cfg).unwrap();
        let (a, b) = (t.translation_part(), base.translation_part());
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        assert!(d < 0.5, "offset {c}: {a:?} vs {b:?}");
    }
}

#[test]
fn registration_is_deterministic() {
    let reference = phantom(13);
    let moving = synthesize(&reference, &AffineTransform::translation([-3.0, 2.0, 1.0]));
    let cfg = AffineConfig::default();
    let a = register_affine(&moving, &reference, &cfg).unwrap();
    let b = register_affine(&moving, &reference, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(max_point_error(&a, &AffineTransform::translation([-3.0, 2.0, 1.0]), &reference.geom) < 1.0);
}

#[test]
fn composed_resampling_matches_single_resample() {
    let g = Geometry::centered([32, 32, 32], [2.0; 3]).unwrap();
    let v = Volume::from_world_fn(g, |p| (40.0 * (p[0] / 15.0).sin() * (p[1] / 19.0).cos() + p[2]) as f32);
    let a = AffineTransform::from_linear_translation(
        Matrix3::new(1.0, 0.02, 0.0, 0.0, 0.99, 0.01, 0.01, 0.0, 1.02),
        Vector3::new(1.0, -0.5, 0.7),
    )
    .unwrap();
    let b = AffineTransform::translation([0.6, 0.3, -0.8]);
    let twice = apply_affine(&apply_affine(&v, &a, &g).unwrap(), &b, &g).unwrap();
    let once = apply_affine(&v, &a.then_after(&b), &g).unwrap();
    let mut checked = 0;
    for i in 0..g.len() {
        if twice.valid[i] && once.valid[i] {
            assert!((twice.data[i] - once.data[i]).abs() < 1.0, "{} vs {}", twice.data[i], once.data[i]);
            checked += 1;
        }
        // Never fabricates valid data.
        if once.valid[i] {
            let p = a.then_after(&b).apply(g.world(g.coords(i)));
            let c = g.to_index(p);
            assert!((0..3).all(|k| c[k] >= -0.5 - 1e-6 && c[k] <= g.dims[k] as f64 - 0.5 + 1e-6));
        }
    }
    assert!(checked > g.len() / 2);
}

#[test]
fn masks_use_nearest_neighbour() {
    let g = Geometry::centered([10, 10, 10], [1.0; 3]).unwrap();
    let m = Mask::from_world_fn(g, |p| p[0] > 0.0);
    let out = apply_affine_mask(&m, &AffineTransform::translation([1.0, 0.0, 0.0]), &g).unwrap();
    for i in 0..g.len() {
        let c = g.coords(i);
        let expect = c[0] + 1 < 10 && m.get([c[0] + 1, c[1], c[2]]);
        assert_eq!(out.bits[i], expect);
    }
}
