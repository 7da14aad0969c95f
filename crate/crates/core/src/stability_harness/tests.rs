use super::*;
use proptest::prelude::*;

fn record(t: f64, eps: f64, dh: f64) -> StabilityRecord {
    StabilityRecord {
        t,
        epsilon_raw: eps,
        epsilon_scaled: eps,
        d_hausdorff: dh,
        n: 0,
        flags: String::new(),
    }
}

fn planted(c: f64, eta: f64, rho0: f64) -> Vec<StabilityRecord> {
    [1e-2, 3e-3, 1e-3, 1e-4, 1e-6, 1e-9]
        .iter()
        .enumerate()
        .map(|(k, &e)| record(k as f64, e, c * rho0 * e.ln().abs().powf(-eta)))
        .collect()
}

fn unit_fields() -> (LameField, LameField) {
    (LameField::constant(1.0, 1.0), LameField::constant(4.0, 4.0))
}

#[test]
fn planted_half_exponent_is_recovered() {
    let fit = fit_log_stability(&planted(1.0, 0.5, 1.0), 1.0).unwrap();
    assert!((fit.eta_fit - 0.5).abs() < 1e-6);
    assert!((fit.c_fit - 1.0).abs() < 1e-6);
    assert!((fit.r2 - 1.0).abs() < 1e-12);
    assert!((fit.c_envelope - 1.0).abs() < 1e-6);
}

#[test]
fn planted_unit_exponent_is_recovered() {
    let fit = fit_log_stability(&planted(0.3, 1.0, 2.0), 2.0).unwrap();
    assert!((fit.eta_fit - 1.0).abs() < 1e-6);
    assert!((fit.c_fit - 0.3).abs() < 1e-6);
}

#[test]
fn fit_needs_four_valid_records() {
    let mut r = planted(1.0, 0.5, 1.0);
    r.truncate(3);
    assert!(matches!(fit_log_stability(&r, 1.0), Err(Error::Fit(_))));
    let mut r = planted(1.0, 0.5, 1.0);
    r[0].epsilon_scaled = 1.5;
    r[1].flags = "epsilon_ge_1".into();
    r[2].epsilon_scaled = 0.0;
    assert!(matches!(fit_log_stability(&r, 1.0), Err(Error::Fit(_))));
    let mut r = planted(1.0, 0.5, 1.0);
    r[0].epsilon_scaled = 2.0;
    let fit = fit_log_stability(&r, 1.0).unwrap();
    assert_eq!(fit.excluded, vec![0]);
    assert_eq!(fit.n_records, 5);
}

#[test]
fn monotone_records() {
    let r = vec![record(0.02, 0.01, 0.02), record(0.04, 0.02, 0.04), record(0.06, 0.03, 0.06)];
    assert!(monotone(&r));
    let mut bad = r.clone();
    bad[2].epsilon_scaled = 0.015;
    assert!(!monotone(&bad));
    assert!(!monotone(&r[..1]));
}

#[test]
fn offset_family_geometry() {
    let domain = DomainSpec::cube(1.0, 1.0);
    let fam = PairFamily::default_offset(&domain).unwrap();
    assert_eq!(fam.members.len(), 6);
    let d = fam.check(&domain, 0.2, 2048).unwrap();
    for (t, dh) in fam.t.iter().zip(&d) {
        assert!((dh - t).abs() < 0.01, "t {t} d_H {dh}");
    }
}

#[test]
fn radius_family_geometry() {
    let domain = DomainSpec::cube(1.0, 1.0);
    let base = InclusionGeometry::ball(Vector3::zeros(), 0.15);
    let fam = PairFamily::new(base, Perturbation::RadiusGrowth, vec![0.01, 0.03, 0.05]).unwrap();
    let d = fam.check(&domain, 0.2, 1024).unwrap();
    for (t, dh) in fam.t.iter().zip(&d) {
        assert!((dh - t).abs() < 1e-9);
    }
    // Not increasing in t.
    let base = InclusionGeometry::ball(Vector3::zeros(), 0.15);
    let fam = PairFamily::new(base, Perturbation::RadiusGrowth, vec![0.03, 0.01]).unwrap();
    assert!(fam.check(&domain, 0.0, 256).is_ok());
    let base = InclusionGeometry::ball(Vector3::zeros(), 0.15);
    let fam = PairFamily::new(base, Perturbation::RadiusGrowth, vec![0.03, 0.03]).unwrap();
    assert!(matches!(fam.check(&domain, 0.0, 256), Err(Error::Invariant(_))));
}

#[test]
fn small_family_run() {
    let domain = DomainSpec::cube(1.0, 1.0);
    let base = InclusionGeometry::ball(Vector3::new(-0.06, 0.0, 0.0), 0.2);
    let fam = PairFamily::new(
        base,
        Perturbation::Offset {
            direction: [1.0, 0.0, 0.0],
        },
        vec![0.0, 0.04, 0.08],
    )
    .unwrap();
    let cfg = StabilityConfig {
        n: 6,
        surface_samples: 1024,
        ..Default::default()
    };
    let (bg, inc) = unit_fields();
    let recs = run_family(&domain, &bg, &inc, &fam, &cfg).unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0].epsilon_scaled, 0.0);
    assert_eq!(recs[0].d_hausdorff, 0.0);
    assert!(recs[1].epsilon_scaled > 0.0 && recs[2].epsilon_scaled > recs[1].epsilon_scaled);
    assert!(recs.iter().all(|r| r.flags.is_empty() && r.n == 6));
    let mut buf = Vec::new();
    write_stability_csv(&recs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,epsilon_raw,epsilon_scaled,d_hausdorff,n,flags\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn pair_epsilon_is_symmetric() {
    let domain = DomainSpec::cube(1.0, 1.0);
    let cfg = StabilityConfig {
        n: 4,
        ..Default::default()
    };
    let (bg, inc) = unit_fields();
    let a = InclusionGeometry::ball(Vector3::new(0.05, 0.0, 0.0), 0.2);
    let b = InclusionGeometry::ball(Vector3::new(-0.05, 0.02, 0.0), 0.18);
    let e1 = pair_epsilon(&domain, &bg, &inc, &a, &b, &cfg).unwrap();
    let e2 = pair_epsilon(&domain, &bg, &inc, &b, &a, &cfg).unwrap();
    assert!((e1.raw - e2.raw).abs() <= 1e-12 * e1.raw);
    assert_eq!(pair_epsilon(&domain, &bg, &inc, &a, &a, &cfg).unwrap().raw, 0.0);
}

fn radius_setup(n: usize) -> (DomainSpec<f64>, HexMesh, BoundarySpace, DtnMatrix) {
    let domain = DomainSpec::cube(1.0, 1.0);
    let mesh = HexMesh::uniform(&domain, n).unwrap();
    let space = BoundarySpace::new(&mesh, 1.0, NormScaling::Normalized).unwrap();
    let (bg, inc) = unit_fields();
    let truth = InclusionGeometry::ball(Vector3::zeros(), 0.2);
    let obs = dtn_for(&mesh, &space, &bg, &inc, &truth, Tagging::VolumeFraction { subcells: 4 }).unwrap();
    (domain, mesh, space, obs)
}

#[test]
fn noiseless_reconstruction_hits_truth() {
    let (domain, mesh, space, obs) = radius_setup(4);
    let (bg, inc) = unit_fields();
    let search = SearchSpace {
        lo: vec![0.1],
        hi: vec![0.3],
        grid: 5,
        golden_iters: 4,
        passes: 1,
    };
    let rec = reconstruct_inclusion(
        &obs,
        &mesh,
        &space,
        &domain,
        &bg,
        &inc,
        Tagging::VolumeFraction { subcells: 4 },
        &search,
        |th| Ok(InclusionGeometry::ball(Vector3::zeros(), th[0])),
    )
    .unwrap();
    assert!((rec.theta[0] - 0.2).abs() <= 0.05);
    assert_eq!(rec.misfit, 0.0);
    assert!(rec.landscape.iter().all(|p| p.misfit >= rec.misfit));
    assert!(rec.level_set_width(0.0)[0] == 0.0);
}

#[test]
fn noisy_reconstruction_stays_in_level_set() {
    let (domain, mesh, space, obs) = radius_setup(4);
    let noisy = perturb_dtn(&obs, 1e-3, 7);
    let (bg, inc) = unit_fields();
    let search = SearchSpace {
        lo: vec![0.1],
        hi: vec![0.3],
        grid: 9,
        golden_iters: 6,
        passes: 1,
    };
    let rec = reconstruct_inclusion(
        &noisy,
        &mesh,
        &space,
        &domain,
        &bg,
        &inc,
        Tagging::VolumeFraction { subcells: 4 },
        &search,
        |th| Ok(InclusionGeometry::ball(Vector3::zeros(), th[0])),
    )
    .unwrap();
    // Misfit of the truth against the noisy data bounds the optimum, and the
    // truth lies in the level set at twice that value.
    let truth_misfit = operator_norm_h12(&space, obs.difference(&noisy).unwrap().as_ref()).unwrap().scaled;
    assert!(rec.misfit <= truth_misfit * (1.0 + 1e-12));
    let level = 2.0 * truth_misfit;
    let inside: Vec<f64> = rec
        .landscape
        .iter()
        .filter(|p| p.misfit <= level)
        .map(|p| p.theta[0])
        .collect();
    let lo = inside.iter().cloned().fold(f64::MAX, f64::min);
    let hi = inside.iter().cloned().fold(f64::MIN, f64::max);
    assert!(lo <= rec.theta[0] && rec.theta[0] <= hi);
    assert!((rec.theta[0] - 0.2).abs() <= (hi - lo).max(0.025));
}

#[test]
fn unmeshable_candidates_are_skipped() {
    let (domain, mesh, space, obs) = radius_setup(4);
    let (bg, inc) = unit_fields();
    let search = SearchSpace {
        lo: vec![0.1],
        hi: vec![0.7],
        grid: 4,
        golden_iters: 0,
        passes: 1,
    };
    let rec = reconstruct_inclusion(
        &obs,
        &mesh,
        &space,
        &domain,
        &bg,
        &inc,
        Tagging::VolumeFraction { subcells: 4 },
        &search,
        |th| Ok(InclusionGeometry::ball(Vector3::zeros(), th[0])),
    )
    .unwrap();
    assert!(rec.landscape.iter().any(|p| p.flag.starts_with("skipped") && p.misfit.is_infinite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn planted_fits_are_exact(c in 0.05f64..5.0, eta in 0.1f64..2.0, rho0 in 0.2f64..5.0) {
        let fit = fit_log_stability(&planted(c, eta, rho0), rho0).unwrap();
        prop_assert!((fit.eta_fit - eta).abs() < 1e-6);
        prop_assert!((fit.c_fit - c).abs() < 1e-6 * c.max(1.0));
    }

    #[test]
    fn perturbation_keeps_symmetry(delta in 0.0f64..0.1, seed in 0u64..100) {
        let m = Mat::from_fn(6, 6, |r, c| 1.0 + (r + c) as f64);
        let d = DtnMatrix { matrix: m, mesh_id: "m".into(), tensor_id: "t".into() };
        let p = perturb_dtn(&d, delta, seed);
        for r in 0..6 {
            for c in 0..6 {
                prop_assert_eq!(p.matrix[(r, c)], p.matrix[(c, r)]);
                prop_assert!((p.matrix[(r, c)] / d.matrix[(r, c)] - 1.0).abs() <= delta + 1e-15);
            }
        }
    }
}
