use corrfactor::linalg;
use corrfactor::simgen::{build_tissue_basis, build_twin_basis, tissue_tau};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Covariance between sample (twin `t`, age `a`) and (twin `u`, age `b`) of
/// one mother, from the twin variance components.
fn twin_entry(tau: &[f64], t: usize, a: usize, u: usize, b: usize) -> f64 {
    let (v_alpha, v_eta, v_phi, v_res) = (tau[0], tau[1], [tau[2], tau[3]], [tau[4], tau[5]]);
    let mut c = v_alpha;
    if t == u {
        c += v_eta;
    }
    if a == b {
        c += v_phi[a];
    }
    if t == u && a == b {
        c += v_res[a];
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn twin_basis_matches_the_component_model(
        mothers in 1usize..6,
        tau in prop::collection::vec(0.0f64..2.0, 6),
    ) {
        let (basis, poly) = build_twin_basis(mothers).unwrap();
        let t = DVector::from_vec(tau.clone());
        prop_assert!(poly.is_feasible(&t, 0.0));
        let v = basis.build_covariance(&t).unwrap();
        prop_assert_eq!(v.nrows(), 4 * mothers);
        for i in 0..4 * mothers {
            for j in 0..4 * mothers {
                let expect = if i / 4 == j / 4 {
                    twin_entry(&tau, (i % 4) / 2, i % 2, (j % 4) / 2, j % 2)
                } else {
                    0.0
                };
                prop_assert!((v[(i, j)] - expect).abs() < 1e-12, "({}, {}): {} vs {}", i, j, v[(i, j)], expect);
            }
        }
        if tau[4] > 1e-3 && tau[5] > 1e-3 {
            prop_assert!(linalg::sym_eigenvalues_desc(&v).min() > 0.0);
        }
    }

    #[test]
    fn twin_residuals_may_dip_below_zero_within_the_polytope(
        base in prop::collection::vec(0.1f64..2.0, 4),
        f0 in 0.0f64..1.0,
        f18 in 0.0f64..1.0,
    ) {
        let (_, poly) = build_twin_basis(2).unwrap();
        let lim0 = base[1].min(base[2]);
        let lim18 = base[1].min(base[3]);
        let tau = DVector::from_vec(vec![base[0], base[1], base[2], base[3], -f0 * lim0, -f18 * lim18]);
        prop_assert!(poly.is_feasible(&tau, 1e-12));
        let mut bad = tau.clone();
        bad[4] = -1.01 * lim0 - 1e-3;
        prop_assert!(!poly.is_feasible(&bad, 0.0));
    }

    #[test]
    fn tissue_basis_reproduces_feasible_tissue_covariances(
        individuals in 1usize..5,
        off in prop::collection::vec(0.0f64..1.0, 3),
        extra in prop::collection::vec(0.05f64..1.0, 3),
    ) {
        let mut m = DMatrix::zeros(3, 3);
        for (k, &(r, s)) in [(0, 1), (0, 2), (1, 2)].iter().enumerate() {
            m[(r, s)] = off[k];
            m[(s, r)] = off[k];
        }
        for r in 0..3 {
            m[(r, r)] = (0..3).filter(|&s| s != r).map(|s| m[(r, s)]).sum::<f64>() + extra[r];
        }
        let (basis, poly) = build_tissue_basis(individuals, 3).unwrap();
        let tau = tissue_tau(&m);
        prop_assert!(poly.is_feasible(&tau, 1e-12));
        let v = basis.build_covariance(&tau).unwrap();
        for i in 0..individuals {
            let block = v.view((3 * i, 3 * i), (3, 3)).into_owned();
            prop_assert!(linalg::max_abs_diff(&block, &m) < 1e-12);
        }
        prop_assert!(linalg::sym_eigenvalues_desc(&v).min() > 0.0);
    }
}
