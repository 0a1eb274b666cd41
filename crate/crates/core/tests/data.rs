use equishape::data::{
    generate_dataset, generate_pair, generate_pairs, load_pair, read_gt, Manifest, ShapeSpec,
};
use equishape::geometry::{PointCloud, Se3Transform};
use equishape::Error;
use nalgebra::{Matrix3, Point3, Vector3};
use proptest::prelude::*;

fn segment_points(cloud: &PointCloud, segs: &[usize], s: usize) -> Vec<Point3<f64>> {
    cloud
        .points()
        .iter()
        .zip(segs)
        .filter(|(_, &t)| t == s)
        .map(|(p, _)| *p)
        .collect()
}

/// Residual of the best rigid fit b ~ R a + t (Kabsch via SVD).
fn procrustes_residual(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    let n = a.len() as f64;
    let ca = a.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / n;
    let cb = b.iter().fold(Vector3::zeros(), |s, p| s + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (p.coords - ca) * (q.coords - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    a.iter()
        .zip(b)
        .map(|(p, q)| (r * (p.coords - ca) + cb - q.coords).norm())
        .fold(0.0, f64::max)
}

#[test]
fn segments_move_rigidly() {
    let spec = ShapeSpec::default();
    for seed in 0..10 {
        let pair = generate_pair(&spec, seed).unwrap();
        let meta = pair.meta.as_ref().unwrap();
        assert!(meta.deformation > 0.0 && meta.deformation <= spec.joint_angle_range);
        for s in 0..spec.segment_count {
            let a = segment_points(&pair.source, &meta.segments, s);
            let b = segment_points(&pair.target, &meta.segments, s);
            if a.len() < 3 {
                continue;
            }
            assert!(procrustes_residual(&a, &b) <= 1e-8, "seed {seed} segment {s}");
            for i in 0..a.len() {
                for j in 0..a.len() {
                    let da = (a[i] - a[j]).norm();
                    let db = (b[i] - b[j]).norm();
                    assert!((da - db).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn whole_shape_is_not_rigid() {
    let pair = generate_pair(&ShapeSpec::default(), 4).unwrap();
    let a = pair.source.points();
    let b = pair.target.points();
    assert!(procrustes_residual(a, b) > 1e-3);
}

#[test]
fn zero_deformation_without_motion_is_identity() {
    let spec = ShapeSpec {
        joint_angle_range: 0.0,
        global_transform: false,
        ..ShapeSpec::default()
    };
    let pair = generate_pair(&spec, 11).unwrap();
    assert_eq!(pair.meta.unwrap().global, Se3Transform::identity());
    for (a, b) in pair.source.points().iter().zip(pair.target.points()) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn ood_range_is_strictly_larger() {
    let s = ShapeSpec::default();
    assert!(s.ood().joint_angle_range > s.joint_angle_range);
    assert_eq!(s.ood().joint_angle_range, 1.2);
}

#[test]
fn invalid_specs_rejected() {
    let bad = [
        ShapeSpec { points: 31, ..ShapeSpec::default() },
        ShapeSpec { radius_range: (0.0, 0.1), ..ShapeSpec::default() },
        ShapeSpec { segment_count: 0, ..ShapeSpec::default() },
    ];
    for s in bad {
        assert!(matches!(generate_pair(&s, 0), Err(Error::Config(_))));
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ShapeSpec { points: 64, ..ShapeSpec::default() };
    let manifest = generate_dataset(&spec, 3, 7, dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 10);

    let m = Manifest::read(&manifest).unwrap();
    assert_eq!(m.entries.len(), 3);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 3 && !l.contains('/')));

    let loaded = m.load_pairs().unwrap();
    let fresh = generate_pairs(&spec, 3, 7).unwrap();
    for (l, f) in loaded.iter().zip(&fresh) {
        assert_eq!(l.gt, f.gt);
        for (a, b) in l.source.points().iter().zip(f.source.points()) {
            assert!((a - b).norm() < 1e-6);
        }
        for (a, b) in l.target.points().iter().zip(f.target.points()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    // same seed, same bytes
    let dir2 = tempfile::tempdir().unwrap();
    generate_dataset(&spec, 3, 7, dir2.path()).unwrap();
    for name in ["pair_00001_src.xyz", "pair_00002_gt.txt", "manifest.tsv"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(dir2.path().join(name)).unwrap()
        );
    }
}

#[test]
fn unwritable_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    let r = generate_dataset(&ShapeSpec::default(), 1, 0, &file.join("sub"));
    assert!(matches!(r, Err(Error::Io { .. })));
}

#[test]
fn load_pair_cases() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("a.xyz"), "0 0 0\n1 0 0\n").unwrap();
    std::fs::write(p("b.xyz"), "0 1 0\n1 1 0\n").unwrap();
    std::fs::write(p("c.xyz"), "0 1 0\n").unwrap();
    std::fs::write(p("bad.xyz"), "0 0 0\n1 x 0\n").unwrap();
    std::fs::write(p("gt.txt"), "1\n0\n").unwrap();
    std::fs::write(p("gt_bad.txt"), "0\n2\n").unwrap();

    let pair = load_pair(&p("a.xyz"), &p("b.xyz"), None).unwrap();
    assert_eq!(pair.source.len(), 2);
    assert!(pair.gt.is_none());
    let pair = load_pair(&p("a.xyz"), &p("b.xyz"), Some(&p("gt.txt"))).unwrap();
    assert_eq!(pair.gt, Some(vec![1, 0]));

    let err = load_pair(&p("bad.xyz"), &p("b.xyz"), None).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
    assert!(matches!(load_pair(&p("a.xyz"), &p("c.xyz"), None), Err(Error::Data(_))));
    let err = load_pair(&p("a.xyz"), &p("b.xyz"), Some(&p("gt_bad.txt"))).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");
    assert!(read_gt(&p("gt.txt"), 2).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_pairs_are_valid(seed in any::<u64>(), n in 32usize..96) {
        let spec = ShapeSpec { points: n, ..ShapeSpec::default() };
        let pair = generate_pair(&spec, seed).unwrap();
        prop_assert_eq!(pair.source.len(), n);
        prop_assert_eq!(pair.target.len(), n);
        let mut gt = pair.gt.unwrap();
        gt.sort_unstable();
        prop_assert_eq!(gt, (0..n).collect::<Vec<_>>());
    }
}
