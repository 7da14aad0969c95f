use super::*;
use crate::geometry::{DomainSpec, InclusionGeometry, Region};
use crate::mesh_fem::Tagging;
use crate::tensor_field::{LameField, PiecewiseTensor};
use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mesh(n: usize) -> HexMesh {
    HexMesh::uniform(&DomainSpec::cube(1.0, 1.0), n).unwrap()
}

fn ball_system(m: &HexMesh, center: [f64; 3], r: f64, inc: f64) -> FemSystem {
    let comp = PiecewiseTensor::new(
        LameField::constant(1.0, 1.0),
        LameField::constant(inc, inc),
        Region::Body(InclusionGeometry::ball(Vector3::from(center), r)),
    );
    FemSystem::assemble(m.clone(), comp, Tagging::Centroid).unwrap()
}

fn to_dmatrix(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

#[test]
fn boundary_space_matrices() {
    let m = mesh(4);
    let s = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    assert_eq!(s.n_nodes(), 125 - 27);
    let nb = s.n_nodes();
    // Total mass is the surface area of the unit cube.
    let total: f64 = (0..nb).flat_map(|r| (0..nb).map(move |c| (r, c))).map(|(r, c)| s.mass()[(r, c)]).sum();
    assert!((total - 6.0).abs() < 1e-12);
    // Constants span the kernel of the surface stiffness.
    for r in 0..nb {
        let row: f64 = (0..nb).map(|c| s.stiffness()[(r, c)]).sum();
        assert!(row.abs() < 1e-12);
    }
    let raw = s.spectral().raw_eigenvalues();
    assert!(raw[0].abs() < 1e-10 && raw[1] > 1e-3);
    assert!(s.spectral().eigenvalues().windows(2).all(|w| w[0] <= w[1]));
    assert!((s.spectral().eigenvalues()[0] - 1.0 / 3.0).abs() < 1e-12);
    let k = s.kappa();
    assert!((k[0] - 1.0).abs() < 1e-12);
    // Mass is SPD: its eigenvalues are positive.
    let me = to_dmatrix(s.mass()).symmetric_eigenvalues();
    assert!(me.iter().all(|&v| v > 0.0));
}

#[test]
fn dtn_entries_match_energy_oracle() {
    let m = mesh(3);
    let sys = ball_system(&m, [0.05, 0.0, 0.0], 0.25, 4.0);
    let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    let dtn = build_dtn(&sys, &space).unwrap();
    let nb = sys.dofs().n_boundary_dofs();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..6 {
        let (i, j) = (rng.random_range(0..nb), rng.random_range(0..nb));
        let mut ej = vec![0.0; nb];
        ej[j] = 1.0;
        let uj = sys.solve_dirichlet(&ej).unwrap();
        let mut ei = vec![0.0; nb];
        ei[i] = 1.0;
        let phi = sys.join(&vec![0.0; sys.dofs().n_interior_dofs()], &ei);
        let a = sys.energy_inner_product(&uj, &phi, None).unwrap();
        assert!((dtn.matrix[(i, j)] - a).abs() < 1e-10 * (1.0 + a.abs()), "({i},{j}) {} vs {a}", dtn.matrix[(i, j)]);
    }
}

#[test]
fn dtn_symmetry_and_rigid_kernel() {
    let m = mesh(6);
    let sys = ball_system(&m, [0.05, -0.02, 0.0], 0.22, 4.0);
    let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    let dtn = build_dtn(&sys, &space).unwrap();
    assert!(dtn.symmetry_defect() < 1e-10);
    let norm = to_dmatrix(dtn.matrix.as_ref()).norm();
    for r in boundary_rigid_motions(&sys) {
        let lr = dtn.apply(&r).unwrap();
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nl = lr.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(nl <= 1e-8 * norm * nr, "{nl}");
    }
}

#[test]
fn zero_jump_equals_empty_inclusion() {
    let m = mesh(4);
    let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    let empty = FemSystem::assemble(m.clone(), PiecewiseTensor::homogeneous(LameField::constant(1.0, 1.0)), Tagging::Centroid).unwrap();
    let same = ball_system(&m, [0.0; 3], 0.3, 1.0);
    let a = build_dtn(&empty, &space).unwrap();
    let b = build_dtn(&same, &space).unwrap();
    let d = a.difference(&b).unwrap();
    let max = (0..d.nrows()).flat_map(|r| (0..d.ncols()).map(move |c| (r, c))).map(|(r, c)| d[(r, c)].abs()).fold(0.0, f64::max);
    assert!(max <= 1e-12);
    assert_eq!(operator_norm_h12(&space, d.as_ref()).unwrap().raw, 0.0);
    let other = ball_system(&m, [0.0; 3], 0.3, 4.0);
    let c = build_dtn(&other, &space).unwrap();
    assert!(operator_norm_h12(&space, a.difference(&c).unwrap().as_ref()).unwrap().raw > 0.0);
}

/// `σ_max(H^{-1/2} Δ H^{-1/2})` with `H` the Gram matrix of the discrete
/// `H^{1/2}` norm, through nalgebra.
fn norm_oracle(space: &BoundarySpace, delta: MatRef<'_, f64>) -> f64 {
    let nb = space.n_nodes();
    let mv = to_dmatrix(space.mass()) * to_dmatrix(space.spectral().vectors());
    let k = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(nb, space.kappa().iter().map(|v| v.sqrt())));
    let hs = &mv * k * mv.transpose();
    let mut h = DMatrix::zeros(3 * nb, 3 * nb);
    for r in 0..nb {
        for c in 0..nb {
            for i in 0..3 {
                h[(3 * r + i, 3 * c + i)] = hs[(r, c)];
            }
        }
    }
    let eig = h.symmetric_eigen();
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    let b = &inv_sqrt * to_dmatrix(delta) * &inv_sqrt;
    b.singular_values().max()
}

fn random_symmetric(n: usize, seed: u64) -> Mat<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Mat::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    Mat::from_fn(n, n, |r, c| a[(r, c)] + a[(c, r)])
}

#[test]
fn operator_norm_matches_svd_oracle() {
    let m = mesh(2);
    let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    let n = 3 * space.n_nodes();
    let id = Mat::<f64>::identity(n, n);
    let got = operator_norm_h12(&space, id.as_ref()).unwrap().raw;
    let want = norm_oracle(&space, id.as_ref());
    assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
    let r = random_symmetric(n, 5);
    let got = operator_norm_h12(&space, r.as_ref()).unwrap().raw;
    let want = norm_oracle(&space, r.as_ref());
    assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
    let zero = Mat::<f64>::zeros(n, n);
    assert_eq!(operator_norm_h12(&space, zero.as_ref()).unwrap().raw, 0.0);
}

#[test]
fn operator_norm_rejects_bad_input() {
    let m = mesh(2);
    let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    let n = 3 * space.n_nodes();
    let mut skew = Mat::<f64>::zeros(n, n);
    skew[(0, 1)] = 1.0;
    assert!(matches!(operator_norm_h12(&space, skew.as_ref()), Err(Error::Input(_))));
    let small = Mat::<f64>::zeros(3, 3);
    assert!(matches!(operator_norm_h12(&space, small.as_ref()), Err(Error::MeshMismatch(_))));
}

#[test]
fn rho0_scaling_is_exact() {
    let m = mesh(2);
    let space = BoundarySpace::new(&m, 0.7, NormScaling::Normalized).unwrap();
    let r = random_symmetric(3 * space.n_nodes(), 9);
    let a = operator_norm_h12(&space, r.as_ref()).unwrap();
    let b = operator_norm_h12(&space.with_rho0(1.4).unwrap(), r.as_ref()).unwrap();
    assert_eq!(a.raw, b.raw);
    assert_eq!(2.0 * a.scaled, b.scaled);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn operator_norm_is_a_norm(s1 in 0u64..1000, s2 in 0u64..1000, c in -3.0f64..3.0) {
        let m = mesh(2);
        let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
        let n = 3 * space.n_nodes();
        let a = random_symmetric(n, s1);
        let b = random_symmetric(n, s2);
        let na = operator_norm_h12(&space, a.as_ref()).unwrap().raw;
        let nb = operator_norm_h12(&space, b.as_ref()).unwrap().raw;
        let ca = Mat::from_fn(n, n, |r, k| c * a[(r, k)]);
        let nca = operator_norm_h12(&space, ca.as_ref()).unwrap().raw;
        prop_assert!((nca - c.abs() * na).abs() <= 1e-10 * na);
        let sum = &a + &b;
        let ns = operator_norm_h12(&space, sum.as_ref()).unwrap().raw;
        prop_assert!(ns <= (na + nb) * (1.0 + 1e-12));
    }
}

#[test]
fn alessandrini_identity_is_exact() {
    let m = mesh(6);
    let s1 = ball_system(&m, [0.05, 0.0, 0.0], 0.22, 4.0);
    let s2 = ball_system(&m, [-0.1, 0.05, 0.0], 0.18, 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..3 {
        let (a, b): (Vector3<f64>, Vector3<f64>) = (
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        );
        let f1 = s1.boundary_data(|x| Vector3::new((3.0 * x.y).sin(), x.x * x.z, 1.0) + a * x.norm_squared());
        let f2 = s1.boundary_data(|x| Vector3::new(x.z, (2.0 * x.x).cos(), x.y * x.y) + b * x.x);
        let t = alessandrini_residual(&s1, &s2, &f1, &f2).unwrap();
        assert!(t.residual < 1e-9, "{t:?}");
        assert!((t.energy1 - t.energy2).abs() > 1e-6);
    }
    let f = s1.boundary_data(|x| Vector3::new(x.y, x.x * x.x, 0.3));
    let same = alessandrini_residual(&s1, &s1, &f, &f).unwrap();
    assert!(same.residual < 1e-11 && same.boundary.abs() < 1e-11);
}

#[test]
fn alessandrini_on_two_element_mesh() {
    // 2×2×2 elements: a single interior node, so every quantity is a small
    // dense computation.
    let m = HexMesh::uniform(&DomainSpec::cube(1.0, 1.0), 2).unwrap();
    let s1 = ball_system(&m, [0.25, 0.25, 0.25], 0.2, 3.0);
    let s2 = ball_system(&m, [-0.25, 0.25, 0.25], 0.2, 5.0);
    let f1 = s1.boundary_data(|x| Vector3::new(x.y * x.z, x.x, -x.z * x.z));
    let f2 = s1.boundary_data(|x| Vector3::new(1.0 + x.x, x.y * x.x, x.z));
    let t = alessandrini_residual(&s1, &s2, &f1, &f2).unwrap();
    assert!(t.residual < 1e-12, "{t:?}");
}

#[test]
fn mismatched_meshes_are_rejected() {
    let a = mesh(3);
    let b = mesh(4);
    let s1 = ball_system(&a, [0.0; 3], 0.2, 4.0);
    let s2 = ball_system(&b, [0.0; 3], 0.2, 4.0);
    let space_b = BoundarySpace::new(&b, 1.0, NormScaling::Normalized).unwrap();
    assert!(matches!(build_dtn(&s1, &space_b), Err(Error::MeshMismatch(_))));
    let f = vec![0.0; s1.dofs().n_boundary_dofs()];
    assert!(matches!(alessandrini_residual(&s1, &s2, &f, &f), Err(Error::MeshMismatch(_))));
}

#[test]
fn binary_round_trip() {
    let m = mesh(2);
    let sys = ball_system(&m, [0.0; 3], 0.2, 4.0);
    let space = BoundarySpace::new(&m, 1.0, NormScaling::Normalized).unwrap();
    let d = build_dtn(&sys, &space).unwrap();
    let mut buf = Vec::new();
    d.write_binary(&mut buf).unwrap();
    let header_len = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
    assert_eq!(buf.len(), 8 + header_len + 8 * d.dim() * d.dim());
    let back = DtnMatrix::read_binary(buf.as_slice()).unwrap();
    assert_eq!(back.mesh_id, d.mesh_id);
    assert_eq!(back.tensor_id, d.tensor_id);
    assert_eq!(back.matrix, d.matrix);
    // Row-major: second stored value is entry (0, 1).
    let p = 8 + header_len + 8;
    assert_eq!(f64::from_le_bytes(buf[p..p + 8].try_into().unwrap()), d.matrix[(0, 1)]);
}
