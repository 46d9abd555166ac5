use mgshield::attack::*;
use mgshield::dg::{idx, nonlinear_f, DgModel, DgParams, MEASURED, NX, NY};
use mgshield::numerics::{rk4_step, SubspaceBasis};
use mgshield::observer::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const XB: [f64; 2] = [21.0, 10.0];

fn state(scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, NX)
}

/// A state whose output currents respect the observer's bounds.
fn bounded_state() -> impl Strategy<Value = Vec<f64>> {
    (state(100.0), -XB[0]..XB[0], -XB[1]..XB[1]).prop_map(|(mut x, d, q)| {
        x[idx::IO_D] = d;
        x[idx::IO_Q] = q;
        x
    })
}

fn dg1() -> DgModel {
    DgModel::new(DgParams::benchmark_a(), &[0.0, 0.0, 0.0, 1.0], 1.0).unwrap()
}

fn toy_spec(starts: Vec<f64>, tau: f64) -> StealthyAttackSpec {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let (b_a, d) = channel_matrices(&b, 1, &[0], &[0]).unwrap();
    let v = DMatrix::from_column_slice(2, 1, &[-1.0, 2.0]);
    let q = DMatrix::from_row_slice(2, 2, &[0.8, -1.6, 0.4, -0.8]);
    let n = starts.len();
    let sched = Schedule::new(starts, vec![tau; n]).unwrap();
    let norms: Vec<f64> = (0..n).map(|k| 0.5 / 2f64.powi(k as i32)).collect();
    from_subspace(&a, &b_a, &d, SubspaceBasis::span_of(&v), Some(q), sched, &norms, 0.2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn output_selector_is_one_hot(x in state(1e3)) {
        let m = dg1();
        let y = m.measure(&x);
        for (k, &s) in MEASURED.iter().enumerate() {
            prop_assert_eq!(y[k], x[s]);
            prop_assert_eq!(m.c.row(k).iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn derivative_splits_into_linear_input_and_nonlinear_parts(x in state(100.0), u in prop::collection::vec(-100.0..100.0f64, 9)) {
        let m = dg1();
        let mut full = [0.0; NX];
        m.derivative(&x, &u, &mut full);
        let mut parts = [0.0; NX];
        m.add_ax(&x, &mut parts);
        m.add_bu(&u, &mut parts);
        let mut f = [0.0; NX];
        nonlinear_f(&x, &m.params, &mut f);
        for i in 0..NX {
            let want = parts[i] + f[i];
            prop_assert!((full[i] - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn young_bound_dominates_the_error_product(x in bounded_state(), xh in state(100.0)) {
        let p = DgParams::benchmark_b();
        let c = dg1().c;
        let xi = DVector::from_iterator(NX, x.iter().zip(&xh).map(|(a, b)| a - b));
        let mut f = [0.0; NX];
        let mut fh = [0.0; NX];
        nonlinear_f(&x, &p, &mut f);
        nonlinear_f(&xh, &p, &mut fh);
        let df = DVector::from_iterator(NX, f.iter().zip(&fh).map(|(a, b)| a - b));
        let lhs = xi.dot(&df) - xi.dot(&(nonlinear_gain_l2(&xh, &p) * &c * &xi));
        let d = bound_matrix(&p, XB[0], XB[1]);
        let rhs: f64 = (0..NX).map(|i| d[i] * xi[i] * xi[i]).sum();
        prop_assert!(lhs <= rhs + 1e-9 * rhs.abs().max(1.0), "{lhs} > {rhs}");
    }

    #[test]
    fn l2_pattern_is_fixed(xh in prop::collection::vec(prop_oneof![-50.0..-0.1f64, 0.1..50.0f64], NX)) {
        let p = DgParams::benchmark_a();
        let l = nonlinear_gain_l2(&xh, &p);
        prop_assert_eq!(l.shape(), (NX, NY));
        let nz: Vec<(usize, usize)> = (0..NX).flat_map(|i| (0..NY).map(move |j| (i, j))).filter(|&(i, j)| l[(i, j)] != 0.0).collect();
        prop_assert_eq!(nz.len(), 16);
        let mut want: Vec<(usize, usize)> = l2_entries(&xh, &p).iter().map(|&(i, j, _)| (i, j)).collect();
        want.sort();
        prop_assert_eq!(nz, want);
    }

    #[test]
    fn lyapunov_decrease_within_bounds(x in bounded_state(), off in state(1.0), u in prop::collection::vec(-100.0..100.0f64, 9)) {
        let m = dg1();
        let g = design_gain(&m.a, &m.c, &m.params, XB[0], XB[1], &default_poles()).unwrap();
        let xh: Vec<f64> = x.iter().zip(&off).map(|(a, b)| a + b).collect();
        prop_assert!(lyapunov_slack(&m, &g, &x, &xh, &u) <= 1e-6);
    }

    #[test]
    fn schedule_valid_iff_durations_fit_the_gaps(
        gaps in prop::collection::vec(0.01..1.0f64, 1..5), fill in prop::collection::vec(0.05..1.5f64, 5),
    ) {
        let mut starts = vec![0.0];
        for g in &gaps {
            starts.push(starts.last().unwrap() + g);
        }
        let durations: Vec<f64> = (0..starts.len()).map(|k| fill[k] * gaps.get(k).copied().unwrap_or(1.0)).collect();
        let fits = (0..gaps.len()).all(|k| durations[k] <= gaps[k] + 1e-12);
        prop_assert_eq!(Schedule::new(starts, durations).is_ok(), fits);
    }

    #[test]
    fn envelope_starts_at_zero_and_rises(b in 0.01..5.0f64, s in 0.0..4.0f64, ds in 1e-3..1.0f64) {
        prop_assert_eq!(envelope(b, 0.0), 0.0);
        let (e0, e1) = (envelope(b, s), envelope(b, s + ds));
        prop_assert!((0.0..1.0).contains(&e0) && e1 > e0);
    }

    #[test]
    fn generator_state_stays_in_the_attack_subspace(t in 0.0..0.8f64, k in 0usize..3) {
        let s = toy_spec(vec![0.0, 1.0, 2.0], 0.9);
        let z0 = s.initial_state(k);
        let start = s.schedule.starts[k];
        let mut z: Vec<f64> = z0.iter().copied().collect();
        let h = 1e-3;
        let steps = (t / h).round() as usize;
        for i in 0..steps {
            let tt = start + i as f64 * h;
            z = rk4_step(|tau, z| s.signal(tau, &DVector::from_column_slice(z), None).1.iter().copied().collect(), &z, tt, h).unwrap();
        }
        let zv = DVector::from_vec(z);
        prop_assert!(s.v_a.distance(&zv) < 1e-9);
        let decay = (-2.0 * steps as f64 * h).exp();
        prop_assert!((zv.norm() - z0.norm() * decay).abs() < 1e-9);
        let (a, zdot) = s.signal(start + s.schedule.durations[k] + 0.05, &zv, None);
        prop_assert!(a.amax() == 0.0 && zdot.amax() == 0.0);
    }
}
