use kmsuq_core::collision::{q_bilinear, q_total, CollisionWorkspace, KernelTable};
use kmsuq_core::gpc::{build_basis, GpcField, Measure, SgOperator};
use kmsuq_core::grid::{maxwellian, moments, weighted_norm, NormKind, SpeciesField, SpeciesSet, VelocityGrid};
use kmsuq_core::kernel::{AngularCoeffs, AngularKind, KernelModel};
use kmsuq_core::linop::{assemble_l_sqrt_m, split_ab, TruncationParams};
use proptest::prelude::*;
use std::sync::OnceLock;

struct Setup {
    ws: CollisionWorkspace,
    model: KernelModel,
    species: SpeciesSet,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let grid = VelocityGrid::new(2, 6, 3.0, 8).unwrap();
        let model = KernelModel::uniform(
            0.5,
            2,
            1.0,
            AngularKind::LinearInZ,
            AngularCoeffs { a: 0.2, c: 0.1 },
            AngularCoeffs::constant(0.02),
        )
        .unwrap();
        Setup {
            ws: CollisionWorkspace::new(&grid),
            model,
            species: SpeciesSet::new(vec![1.0, 0.8]).unwrap(),
        }
    })
}

fn field_strategy() -> impl Strategy<Value = SpeciesField> {
    let np = setup().ws.grid().len();
    prop::collection::vec(-1.0f64..1.0, 2 * np).prop_map(move |v| SpeciesField::from_values(2, np, v).unwrap())
}

fn l1k(f: &SpeciesField, k: f64) -> f64 {
    weighted_norm(setup().ws.grid(), f, k, NormKind::L1Poly).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn norm_triangle_and_homogeneity(f in field_strategy(), g in field_strategy(), a in -5.0f64..5.0, k in 0.0f64..6.0) {
        let s = f.add(&g);
        prop_assert!(l1k(&s, k) <= (l1k(&f, k) + l1k(&g, k)) * (1.0 + 1e-14));
        let lhs = l1k(&f.scaled(a), k);
        prop_assert!((lhs - a.abs() * l1k(&f, k)).abs() <= 1e-13 * lhs.max(1.0));
    }

    #[test]
    fn collision_conserves_invariants(f in field_strategy(), z in -1.0f64..1.0) {
        let s = setup();
        let grid = s.ws.grid();
        let m = maxwellian(grid, &s.species);
        let q = q_total(&s.ws, &s.model, &m.add(&f.scaled(0.1)), z).unwrap();
        let scale = weighted_norm(grid, &q, 2.0, NormKind::L1Poly).unwrap().max(1e-300);
        for x in moments(grid, &q).flatten() {
            prop_assert!(x.abs() <= 1e-13 * scale, "moment {x} against {scale}");
        }
    }

    #[test]
    fn bilinear_form_is_bilinear(f in field_strategy(), g in field_strategy(), h in field_strategy(), a in -2.0f64..2.0) {
        let s = setup();
        let t = KernelTable::at(&s.ws, &s.model, 0.3, 0).unwrap();
        let lhs = q_bilinear(&s.ws, &t, &f.add(&h.scaled(a)), &g).unwrap();
        let mut rhs = q_bilinear(&s.ws, &t, &f, &g).unwrap();
        rhs.axpy(a, &q_bilinear(&s.ws, &t, &h, &g).unwrap());
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * lhs.max_abs().max(1.0));
    }

    #[test]
    fn linearized_operator_is_dissipative(f in field_strategy(), z in -1.0f64..1.0) {
        let s = setup();
        let op = assemble_l_sqrt_m(&s.ws, &s.model, &s.species, z).unwrap();
        let x = f.as_slice();
        let lx = op.apply(x);
        let quad: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        let scale: f64 = x.iter().map(|a| a * a).sum::<f64>() * op.frobenius();
        prop_assert!(quad <= 1e-12 * scale);
    }

    #[test]
    fn splitting_recombines(f in field_strategy(), delta in 0.1f64..0.9) {
        let s = setup();
        let params = TruncationParams::new(delta).unwrap();
        let split = split_ab(&s.ws, &s.model, &s.species, &params, 0.0, 0).unwrap();
        let full = kmsuq_core::linop::assemble_l_plain(&s.ws, &s.model, &s.species, 0.0).unwrap();
        let a = split.recombine().apply_field(&f).unwrap();
        let b = full.apply_field(&f).unwrap();
        prop_assert!(a.sub(&b).max_abs() <= 1e-12 * b.max_abs().max(1.0));
    }

    #[test]
    fn gpc_basis_is_orthonormal(alpha in -0.5f64..3.0, beta in -0.5f64..3.0, c_z in 0.2f64..2.0, k in 1usize..9) {
        let basis = build_basis(Measure::Beta { alpha, beta, c_z }, k).unwrap();
        prop_assert!(basis.orthonormality_defect() < 1e-11);
        let mut mean = vec![0.0; k];
        mean[0] = 1.0;
        prop_assert!((basis.reconstruct(&mean, 0.37 * c_z) - 1.0).abs() < 1e-13);
    }
}

#[test]
fn maxwellian_is_an_equilibrium() {
    let s = setup();
    let grid = s.ws.grid();
    let m = maxwellian(grid, &s.species);
    for z in [-1.0, 0.0, 0.7] {
        let q = q_total(&s.ws, &s.model, &m, z).unwrap();
        assert!(q.max_abs() < 1e-15, "Q(M) = {:e} at z = {z}", q.max_abs());
    }
}

#[test]
fn sg_operator_matches_its_dense_form() {
    let s = setup();
    let basis = build_basis(Measure::Uniform { c_z: 1.0 }, 3).unwrap();
    let sg = SgOperator::new(&s.ws, &s.model, &basis, &s.species).unwrap();
    let dense = sg.to_dense().unwrap();
    let np = s.ws.grid().len();
    let values: Vec<f64> = (0..2 * 3 * np).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let f = GpcField::from_values(2, 3, np, values).unwrap();
    let a = sg.apply(&f).unwrap();
    let b = dense.apply(f.as_slice());
    let err = a.as_slice().iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(err < 1e-12 * a.max_abs().max(1.0), "{err:e}");
}
