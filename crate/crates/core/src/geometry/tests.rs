use super::*;
use proptest::prelude::*;
use rand::Rng;

fn rot_z(a: f64) -> Matrix3<f64> {
    Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
}

fn rot_x(a: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos())
}

/// Projected-gradient minimization of |x − y| over the closed ellipsoid,
/// independent of the secular-equation solver.
fn ellipsoid_distance_oracle(x: &Vector3<f64>, c: &Vector3<f64>, a: &Vector3<f64>, r: &Matrix3<f64>) -> f64 {
    let q = r.transpose() * (x - c);
    let inside = (0..3).map(|i| (q[i] / a[i]).powi(2)).sum::<f64>() < 1.0;
    if inside {
        return 0.0;
    }
    // Minimize over the surface parametrized by angles with dense start.
    let param = |t: f64, p: f64| Vector3::new(a.x * t.sin() * p.cos(), a.y * t.sin() * p.sin(), a.z * t.cos());
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=90 {
        for j in 0..180 {
            let t = std::f64::consts::PI * i as f64 / 90.0;
            let p = 2.0 * std::f64::consts::PI * j as f64 / 180.0;
            let d = (param(t, p) - q).norm();
            if d < best.0 {
                best = (d, t, p);
            }
        }
    }
    let (mut d, mut t, mut p) = best;
    let mut step = 0.05;
    for _ in 0..20000 {
        let gt = ((param(t + 1e-7, p) - q).norm() - (param(t - 1e-7, p) - q).norm()) / 2e-7;
        let gp = ((param(t, p + 1e-7) - q).norm() - (param(t, p - 1e-7) - q).norm()) / 2e-7;
        let (nt, np) = (t - step * gt, p - step * gp);
        let nd = (param(nt, np) - q).norm();
        if nd < d {
            d = nd;
            t = nt;
            p = np;
        } else {
            step *= 0.5;
            if step < 1e-14 {
                break;
            }
        }
    }
    d
}

#[test]
fn hausdorff_identical_is_zero() {
    let s = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.3).sample_surface(512);
    assert_eq!(hausdorff_distance(&s, &s).unwrap(), 0.0);
}

#[test]
fn hausdorff_concentric_spheres() {
    let a = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.3).sample_surface(DEFAULT_SURFACE_SAMPLES);
    let b = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.5).sample_surface(DEFAULT_SURFACE_SAMPLES);
    let d = hausdorff_distance(&a, &b).unwrap();
    assert!((d - 0.2).abs() <= b.spacing, "d = {d}, spacing = {}", b.spacing);
}

#[test]
fn hausdorff_offset_spheres_matches_brute_force() {
    let g = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.3);
    let t = Vector3::new(0.1, 0.0, 0.0);
    let a = g.sample_surface(DEFAULT_SURFACE_SAMPLES);
    let b = g.translated(&t).sample_surface(DEFAULT_SURFACE_SAMPLES);
    let d = hausdorff_distance(&a, &b).unwrap();
    // Brute force on the exact surface: max over samples of the exact
    // distance to the other sphere.
    let exact = a
        .points
        .iter()
        .map(|p| ((p - t).norm() - 0.3).abs())
        .fold(0.0, f64::max);
    assert!((d - 0.1).abs() <= 2.0 * a.spacing);
    assert!((exact - 0.1).abs() < 1e-3);
}

#[test]
fn hausdorff_empty_sample_is_input_error() {
    let a = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.3).sample_surface(16);
    let empty = SurfaceSample::<f64>::new(vec![], vec![]);
    assert!(matches!(hausdorff_distance(&a, &empty), Err(Error::Input(_))));
}

#[test]
fn dist_point_set_examples() {
    let unit = InclusionGeometry::<f64>::ball(Vector3::new(0.1, 0.2, 0.3), 1.0);
    assert_eq!(unit.dist_point_set(&Vector3::new(0.1, 0.2, 0.3)), 0.0);
    let dir = Vector3::new(1.0, 2.0, -2.0) / 3.0;
    let x = Vector3::new(0.1, 0.2, 0.3) + dir * 1.7;
    assert!((unit.dist_point_set(&x) - 0.7).abs() < 1e-14);
}

#[test]
fn ellipsoid_distance_matches_minimization_oracle() {
    let c = Vector3::new(0.05, -0.02, 0.1);
    let a = Vector3::new(0.3, 0.2, 0.12);
    let r = rot_z(0.4) * rot_x(-0.3);
    let e = InclusionGeometry::<f64>::ellipsoid(c, a, r);
    for x in [
        Vector3::new(0.6, 0.1, 0.2),
        Vector3::new(-0.1, 0.35, -0.3),
        Vector3::new(0.05, -0.02, 0.5),
        Vector3::new(-0.4, -0.4, 0.1),
    ] {
        let want = ellipsoid_distance_oracle(&x, &c, &a, &r);
        let got = e.dist_point_set(&x);
        assert!((got - want).abs() < 1e-8, "x={x:?} got={got} want={want}");
    }
}

#[test]
fn ellipsoid_signed_distance_inside_is_negative() {
    let e = InclusionGeometry::<f64>::ellipsoid(Vector3::zeros(), Vector3::new(0.3, 0.2, 0.1), Matrix3::identity());
    assert!((e.signed_distance(&Vector3::zeros()) + 0.1).abs() < 1e-14);
    // Oracle: dense sampling of the surface parametrization.
    let x = Vector3::new(0.25, 0.0, 0.0);
    let mut best = f64::INFINITY;
    for i in 0..=400 {
        for j in 0..400 {
            let t = std::f64::consts::PI * i as f64 / 400.0;
            let p = 2.0 * std::f64::consts::PI * j as f64 / 400.0;
            let s = Vector3::new(0.3 * t.sin() * p.cos(), 0.2 * t.sin() * p.sin(), 0.1 * t.cos());
            best = best.min((s - x).norm());
        }
    }
    let got = e.signed_distance(&x);
    assert!(got < 0.0 && (-got - best).abs() < 1e-4, "got {got}, oracle {best}");
}

#[test]
fn probe_points_example() {
    let frame = ProbeFrame {
        p: Vector3::zeros(),
        nu: Vector3::new(0.0, 0.0, -1.0),
        lambda_w: 2.0 / 3.0,
        h: 0.3,
    };
    let d1 = InclusionGeometry::<f64>::ball(Vector3::new(0.0, 0.0, 0.5), 0.5);
    let (y, w) = frame.probe_points(&d1).unwrap();
    assert!((y - Vector3::new(0.0, 0.0, -0.3)).norm() < 1e-15);
    assert!((w - Vector3::new(0.0, 0.0, -0.2)).norm() < 1e-15);
    assert!(((y - w).norm() - 0.1).abs() < 1e-15);
    let tiny = frame.with_h(1e-12).probe_points(&d1).unwrap();
    assert!(tiny.0.norm() < 1e-11 && tiny.1.norm() < 1e-11);
    let flipped = ProbeFrame {
        nu: Vector3::new(0.0, 0.0, 1.0),
        ..frame
    };
    assert!(matches!(flipped.probe_points(&d1), Err(Error::Invariant(_))));
    assert!(matches!(frame.with_h(0.0).probe_points(&d1), Err(Error::Input(_))));
}

#[test]
fn select_probe_offset_balls() {
    let d1 = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.2);
    let d2 = InclusionGeometry::<f64>::ball(Vector3::new(0.07, 0.0, 0.0), 0.2);
    let sel = select_probe_p(&d1, &d2, 2048).unwrap();
    assert!((sel.dist_p_d2 - 0.07).abs() < 1e-9);
    assert!((sel.cbar - 1.0).abs() < 1e-6, "cbar = {}", sel.cbar);
    // Brute-force oracle over samples: the best point is antipodal to the
    // offset (on ∂D₁ unless the roles were swapped).
    let antipode = if sel.swapped {
        Vector3::new(0.27, 0.0, 0.0)
    } else {
        Vector3::new(-0.2, 0.0, 0.0)
    };
    assert!((sel.p - antipode).norm() < 1e-4);
}

#[test]
fn select_probe_concentric_balls() {
    let d1 = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.5);
    let d2 = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.3);
    let sel = select_probe_p(&d1, &d2, 1024).unwrap();
    assert!(!sel.swapped);
    assert!((sel.dist_p_d2 - 0.2).abs() < 1e-12);
    assert!((sel.hausdorff - 0.2).abs() < 1e-9);
    assert!((sel.cbar - 1.0).abs() < 1e-9);
    // Swapping the inputs exchanges the roles back.
    let sel2 = select_probe_p(&d2, &d1, 1024).unwrap();
    assert!(sel2.swapped);
}

#[test]
fn select_probe_identical_is_degenerate() {
    let d1 = InclusionGeometry::<f64>::ball(Vector3::new(0.1, 0.0, 0.0), 0.2);
    assert!(matches!(select_probe_p(&d1, &d1.clone(), 256), Err(Error::Degenerate(_))));
}

#[test]
fn select_probe_ellipsoid_vs_ball() {
    let d1 = InclusionGeometry::<f64>::ellipsoid(Vector3::zeros(), Vector3::new(0.3, 0.15, 0.1), rot_z(0.3));
    let d2 = InclusionGeometry::<f64>::ball(Vector3::new(0.05, 0.02, 0.0), 0.15);
    let sel = select_probe_p(&d1, &d2, 2048).unwrap();
    assert!(sel.cbar >= 1.0);
    let owner = if sel.swapped { &d2 } else { &d1 };
    let other = if sel.swapped { &d1 } else { &d2 };
    assert!(owner.signed_distance(&sel.p).abs() < 1e-9);
    // Exhaustive sampled search cannot beat the refined point.
    let s = owner.sample_surface(8192);
    let best = s.points.iter().map(|q| other.dist_point_set(q)).fold(0.0, f64::max);
    assert!(sel.dist_p_d2 >= best - 1e-12);
}

#[test]
fn tube_cone_membership() {
    let vertex = Vector3::zeros();
    let axis = Vector3::new(0.0, 0.0, 1.0);
    let v = TubeCone::new(
        vec![Vector3::new(0.0, 0.0, 0.3), Vector3::new(0.5, 0.0, 0.6)],
        vertex,
        axis,
        0.3,
        0.1,
    )
    .unwrap();
    assert!(v.contains(&vertex));
    assert!(!v.contains(&Vector3::new(0.0, 0.5, -0.2)));
    assert!(matches!(
        TubeCone::new(vec![vertex], vertex, axis, 0.1, 0.1),
        Err(Error::Construction(_))
    ));
}

#[test]
fn tube_cone_matches_primitive_oracle() {
    let path = vec![Vector3::new(0.0, 0.0, 0.3), Vector3::new(0.2, 0.1, 0.5), Vector3::new(0.4, -0.1, 0.6)];
    let v = TubeCone::new(path.clone(), Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0), 0.3, 0.12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = (0.09 - 0.0144) / 0.3;
    let sin_t: f64 = 0.12 / 0.3;
    for _ in 0..20000 {
        let x = Vector3::new(
            rng.random_range(-0.3..0.7),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.2..0.8),
        );
        // Oracle: dense sampling of the path for the tube, closed-form
        // angle test for the cone.
        let mut in_tube = false;
        for s in path.windows(2) {
            for k in 0..=2000 {
                let q = s[0] + (s[1] - s[0]) * (k as f64 / 2000.0);
                if (x - q).norm() <= 0.12 - 1e-4 {
                    in_tube = true;
                }
            }
        }
        let a = x.z;
        let in_cone = a >= 0.0 && a <= h && (x.x * x.x + x.y * x.y).sqrt() <= sin_t * x.norm();
        let want = in_tube || in_cone;
        if want != v.contains(&x) {
            // Disagreement only allowed inside the oracle's thin sampling band.
            let band = path
                .windows(2)
                .map(|s| dist_to_segment(&x, &s[0], &s[1]))
                .fold(f64::INFINITY, f64::min);
            assert!((band - 0.12).abs() < 2e-4, "x = {x:?}");
        }
    }
}

#[test]
fn tube_exterior_check() {
    let d1 = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.2);
    let p = Vector3::new(0.2, 0.0, 0.0);
    let nu = Vector3::new(1.0, 0.0, 0.0);
    let v = TubeCone::new(vec![p + nu * 0.1, Vector3::new(0.6, 0.3, 0.0)], p, nu, 0.1, 0.04).unwrap();
    let rep = v.check_exterior(&[d1.clone()], 2000, 9);
    assert_eq!(rep.tested, 2000);
    assert_eq!(rep.violations, 0);
    let bad = TubeCone::new(vec![Vector3::new(0.1, 0.0, 0.0)], p, nu, 0.1, 0.04).unwrap();
    assert!(bad.check_exterior(&[d1], 2000, 9).violations > 0);
}

#[test]
fn shell_and_domain() {
    let d = DomainSpec::cube(1.0, 1.0);
    assert!(d.check_volume().is_ok());
    assert!((d.diameter() - 3f64.sqrt()).abs() < 1e-15);
    assert!(d.in_shell(&Vector3::new(2.0, 0.0, 0.0)));
    assert!(!d.in_shell(&Vector3::new(1.0, 0.0, 0.0)));
    for x in d.sample_shell(50, 1) {
        let dd = d.dist(&x);
        assert!(dd > 1.0 && dd < 2.0);
    }
    let big = DomainSpec {
        m1: 0.5,
        ..d.clone()
    };
    assert!(big.check_volume().is_err());
}

#[test]
fn geometry_config_round_trip() {
    let json = r#"{"omega": {"box": [1, 1, 1], "rho0": 1},
                   "inclusions": [{"kind": "ball", "center": [0, 0, 0], "radius": 0.2},
                                  {"kind": "ellipsoid", "center": [0.1, 0, 0], "semiaxes": [0.2, 0.1, 0.1]}]}"#;
    let cfg: GeometryConfig = serde_json::from_str(json).unwrap();
    let inc = cfg.inclusions().unwrap();
    assert_eq!(inc.len(), 2);
    assert_eq!(cfg.domain().unwrap().hi, Vector3::repeat(0.5));
    let back: GeometryConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<GeometryConfig>(&json.replace("rho0", "rho")).is_err());
}

#[test]
fn surface_csv_export() {
    let s = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.2).sample_surface(8);
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("x,y,z,nx,ny,nz\n"));
    assert_eq!(text.lines().count(), 9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hausdorff_metric_properties(
        c1 in proptest::array::uniform3(-0.1f64..0.1),
        c2 in proptest::array::uniform3(-0.1f64..0.1),
        c3 in proptest::array::uniform3(-0.1f64..0.1),
        r1 in 0.1f64..0.3, r2 in 0.1f64..0.3, r3 in 0.1f64..0.3)
    {
        let s = |c: [f64; 3], r: f64| InclusionGeometry::<f64>::ball(Vector3::from(c), r).sample_surface(256);
        let (a, b, c) = (s(c1, r1), s(c2, r2), s(c3, r3));
        let ab = hausdorff_distance(&a, &b).unwrap();
        let ba = hausdorff_distance(&b, &a).unwrap();
        let ac = hausdorff_distance(&a, &c).unwrap();
        let bc = hausdorff_distance(&b, &c).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn hausdorff_translate_bounded_by_shift(t in proptest::array::uniform3(-0.1f64..0.1)) {
        let g = InclusionGeometry::<f64>::ball(Vector3::zeros(), 0.2);
        let tv = Vector3::from(t);
        let a = g.sample_surface(1024);
        let b = g.translated(&tv).sample_surface(1024);
        let d = hausdorff_distance(&a, &b).unwrap();
        prop_assert!(d <= tv.norm() + 1e-12);
        prop_assert!(d >= tv.norm() - 2.0 * a.spacing);
    }

    #[test]
    fn probe_w_distance_triangle(h in 0.001f64..0.1, k in 0usize..3) {
        let d1 = InclusionGeometry::<f64>::ball(Vector3::new(0.15, 0.0, 0.0), 0.2);
        let d2 = InclusionGeometry::<f64>::ball(Vector3::new(-0.2, 0.0, 0.0), 0.15);
        let sel = select_probe_p(&d1, &d2, 512).unwrap();
        let frame = sel.frame(LAMBDA_W[k], h);
        let (_, w) = frame.probe_points(&d1).unwrap();
        prop_assert!(d2.dist_point_set(&w) >= sel.dist_p_d2 - LAMBDA_W[k] * h - 1e-12);
    }
}

#[test]
fn generic_f32_geometry() {
    let g = InclusionGeometry::<f32>::ball(Vector3::zeros(), 0.5);
    assert!((g.dist_point_set(&Vector3::new(1.0f32, 0.0, 0.0)) - 0.5).abs() < 1e-6);
    let s = g.sample_surface(64);
    assert_eq!(hausdorff_distance(&s, &s).unwrap(), 0.0f32);
}
