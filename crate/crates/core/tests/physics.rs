use mechbench_core::integrators::{euler_integrate, integrate_with_contact, leapfrog_integrate, rk45_integrate, IntegratorConfig};
use mechbench_core::systems::{
    apply_contact, hamiltonian, hamiltonian_eom, lagrangian_accel, three_body_accelerations, to_hamiltonian, to_lagrangian, Convention, HamiltonianField,
    LagrangianField, PhaseState, SystemKind, SystemSpec,
};
use proptest::prelude::*;

fn spec(kind: SystemKind) -> SystemSpec {
    SystemSpec::default_for(kind)
}

// Energies written out independently of the library's graph expressions.
fn h_plain(kind: SystemKind, y: &[f64]) -> f64 {
    let g = 9.8;
    match kind {
        SystemKind::MassSpring => 0.5 * y[1] * y[1] + 0.5 * y[0] * y[0],
        SystemKind::Pendulum => 0.5 * y[1] * y[1] + g * (1.0 - y[0].cos()),
        SystemKind::BouncingBall => 0.5 * y[1] * y[1] + g * y[0],
        SystemKind::SpringPendulum => {
            let (r, th, pr, pth) = (y[0], y[1], y[2], y[3]);
            pr * pr / 2.0 + pth * pth / (2.0 * r * r) + g * r * th.cos() + 0.5 * (r - 1.0).powi(2)
        }
        SystemKind::DoublePendulum => {
            let (q1, q2, p1, p2) = (y[0], y[1], y[2], y[3]);
            let d = q1 - q2;
            let t = (p1 * p1 + 2.0 * p2 * p2 - 2.0 * p1 * p2 * d.cos()) / (2.0 * (1.0 + d.sin().powi(2)));
            t - 2.0 * g * q1.cos() - g * q2.cos()
        }
        SystemKind::ThreeBody => {
            let d = y.len() / 6;
            let q = &y[..3 * d];
            let p = &y[3 * d..];
            let k: f64 = p.iter().map(|v| v * v).sum::<f64>() / 2.0;
            let dist = |i: usize, j: usize| -> f64 { (0..d).map(|a| (q[i * d + a] - q[j * d + a]).powi(2)).sum::<f64>().sqrt() };
            k - 1.0 / dist(0, 1) - 1.0 / dist(0, 2) - 1.0 / dist(1, 2)
        }
    }
}

fn l_plain(kind: SystemKind, y: &[f64]) -> f64 {
    let g = 9.8;
    match kind {
        SystemKind::MassSpring => 0.5 * y[1] * y[1] - 0.5 * y[0] * y[0],
        SystemKind::Pendulum => 0.5 * y[1] * y[1] - g * (1.0 - y[0].cos()),
        SystemKind::BouncingBall => 0.5 * y[1] * y[1] - g * y[0],
        SystemKind::SpringPendulum => {
            let (r, th, rd, thd) = (y[0], y[1], y[2], y[3]);
            0.5 * rd * rd + 0.5 * r * r * thd * thd - 0.5 * (r - 1.0).powi(2) - g * r * th.cos()
        }
        SystemKind::DoublePendulum => {
            let (t1, t2, w1, w2) = (y[0], y[1], y[2], y[3]);
            let t = 0.5 * w1 * w1 + 0.5 * (w1 * w1 + w2 * w2 + 2.0 * w1 * w2 * (t1 - t2).cos());
            let v = -t1.cos() * g + g * (-t1.cos() - t2.cos());
            t - v
        }
        SystemKind::ThreeBody => unreachable!(),
    }
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, y: &[f64], h: f64) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let mut a = y.to_vec();
            let mut b = y.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

// q̈ from finite-difference Hessians of L and a direct 2x2 / 1x1 solve
fn fd_accel(kind: SystemKind, y: &[f64]) -> Vec<f64> {
    let n = y.len() / 2;
    let h = 1e-4;
    let grad = |z: &[f64]| fd_grad(|w| l_plain(kind, w), z, 1e-5);
    let gq = grad(y);
    let mut mvv = vec![vec![0.0; n]; n];
    let mut mvq = vec![vec![0.0; n]; n];
    for j in 0..2 * n {
        let mut a = y.to_vec();
        let mut b = y.to_vec();
        a[j] += h;
        b[j] -= h;
        let (ga, gb) = (grad(&a), grad(&b));
        for i in 0..n {
            let d = (ga[n + i] - gb[n + i]) / (2.0 * h);
            if j < n {
                mvq[i][j] = d;
            } else {
                mvv[i][j - n] = d;
            }
        }
    }
    let rhs: Vec<f64> = (0..n).map(|i| gq[i] - (0..n).map(|j| mvq[i][j] * y[n + j]).sum::<f64>()).collect();
    if n == 1 {
        vec![rhs[0] / mvv[0][0]]
    } else {
        let det = mvv[0][0] * mvv[1][1] - mvv[0][1] * mvv[1][0];
        vec![
            (mvv[1][1] * rhs[0] - mvv[0][1] * rhs[1]) / det,
            (-mvv[1][0] * rhs[0] + mvv[0][0] * rhs[1]) / det,
        ]
    }
}

fn state_strategy(kind: SystemKind) -> BoxedStrategy<Vec<f64>> {
    match kind {
        SystemKind::SpringPendulum => (0.5..2.0f64, -3.0..3.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_map(|(a, b, c, d)| vec![a, b, c, d])
            .boxed(),
        SystemKind::DoublePendulum => prop::collection::vec(-2.0..2.0f64, 4).boxed(),
        SystemKind::ThreeBody => (prop::collection::vec(-2.0..2.0f64, 12))
            .prop_filter("separated bodies", |y| {
                [(0, 1), (0, 2), (1, 2)]
                    .iter()
                    .all(|&(i, j)| ((y[2 * i] - y[2 * j]).powi(2) + (y[2 * i + 1] - y[2 * j + 1]).powi(2)).sqrt() > 0.3)
            })
            .boxed(),
        _ => prop::collection::vec(-2.0..2.0f64, 2).boxed(),
    }
}

fn kind_and_state(kinds: Vec<SystemKind>) -> impl Strategy<Value = (SystemKind, Vec<f64>)> {
    prop::sample::select(kinds).prop_flat_map(|k| state_strategy(k).prop_map(move |y| (k, y)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn hamiltonian_matches_independent_formula((kind, y) in kind_and_state(SystemKind::ALL.to_vec())) {
        let n = y.len() / 2;
        let s = PhaseState::hamiltonian(&y[..n], &y[n..]).unwrap();
        let e = hamiltonian(&spec(kind), &s).unwrap();
        prop_assert!((e - h_plain(kind, &y)).abs() < 1e-12 * e.abs().max(1.0));

        // dual route: autodiff symplectic gradient vs finite differences of the plain energy
        let f = hamiltonian_eom(&spec(kind), &s).unwrap();
        let fd = fd_grad(|z| h_plain(kind, z), &y, 1e-6);
        for i in 0..n {
            prop_assert!((f[i] - fd[n + i]).abs() < 1e-6 * fd[n + i].abs().max(1.0), "{:?} dq {}", kind, i);
            prop_assert!((f[n + i] + fd[i]).abs() < 1e-6 * fd[i].abs().max(1.0), "{:?} dp {}", kind, i);
        }
    }

    #[test]
    fn lagrangian_accel_matches_finite_difference_oracle((kind, y) in kind_and_state(vec![
        SystemKind::MassSpring, SystemKind::Pendulum, SystemKind::SpringPendulum,
        SystemKind::DoublePendulum, SystemKind::BouncingBall,
    ])) {
        let n = y.len() / 2;
        let s = PhaseState::lagrangian(&y[..n], &y[n..]).unwrap();
        let a = lagrangian_accel(&spec(kind), &s).unwrap();
        let oracle = fd_accel(kind, &y);
        for i in 0..n {
            prop_assert!((a[i] - oracle[i]).abs() < 1e-4 * oracle[i].abs().max(1.0), "{:?}: {:?} vs {:?}", kind, a, oracle);
        }
    }

    #[test]
    fn three_body_momentum_balance(
        q in prop::collection::vec(-3.0..3.0f64, 9),
        m in prop::collection::vec(0.1..5.0f64, 3),
        big_g in 0.1..3.0f64,
    ) {
        let sys = SystemSpec::ThreeBody { gravitational_constant: big_g, mass1: m[0], mass2: m[1], mass3: m[2] };
        prop_assume!(sys.check_values(&[q.clone(), vec![0.0; 9]].concat()).is_ok());
        let a = three_body_accelerations(&q, &sys).unwrap();
        let scale: f64 = a.iter().zip([m[0], m[0], m[0], m[1], m[1], m[1], m[2], m[2], m[2]]).map(|(x, mi)| (x * mi).abs()).sum::<f64>().max(1.0);
        for k in 0..3 {
            let total = m[0] * a[k] + m[1] * a[3 + k] + m[2] * a[6 + k];
            prop_assert!(total.abs() < 1e-10 * scale, "component {} sums to {}", k, total);
        }
    }

    #[test]
    fn contact_scales_kinetic_energy_by_restitution_squared(p in -10.0..-1e-3f64, q in -0.5..=0.0f64, rho in 0.05..=1.0f64) {
        let before = PhaseState::hamiltonian(&[q], &[p]).unwrap();
        let after = apply_contact(&before, rho);
        prop_assert_eq!(after.q()[0], 0.0);
        let ke = |s: &PhaseState| 0.5 * s.second()[0].powi(2);
        prop_assert!((ke(&after) - rho * rho * ke(&before)).abs() <= 1e-12 * ke(&before));
    }

    #[test]
    fn leapfrog_is_time_reversible(q0 in -2.0..2.0f64, p0 in -2.0..2.0f64, n in 1usize..400) {
        let tr = leapfrog_integrate(|q| Ok(vec![q[0].sin() * 9.8]), |p| Ok(p.to_vec()), &[q0, p0], 0.0, 0.05, n).unwrap();
        let back = leapfrog_integrate(|q| Ok(vec![q[0].sin() * 9.8]), |p| Ok(p.to_vec()), tr.last(), 0.0, -0.05, n).unwrap();
        prop_assert!((back.last()[0] - q0).abs() < 1e-9 && (back.last()[1] - p0).abs() < 1e-9);
    }
}

fn grid(t_end: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| t_end * i as f64 / n as f64).collect()
}

fn fixture(kind: SystemKind) -> (Vec<f64>, f64) {
    match kind {
        SystemKind::MassSpring => (vec![0.8, -0.3], 10.0),
        SystemKind::Pendulum => (vec![2.0, 0.5], 10.0),
        SystemKind::SpringPendulum => (vec![1.1, 0.5, 0.0, 0.0], 10.0),
        SystemKind::DoublePendulum => (vec![1.2, -0.7, 0.3, 0.4], 30.0),
        // figure-eight choreography
        SystemKind::ThreeBody => {
            let (x, y) = (0.97000436, -0.24308753);
            let (vx, vy) = (-0.93240737, -0.86473146);
            (vec![x, y, -x, -y, 0.0, 0.0, -vx / 2.0, -vy / 2.0, -vx / 2.0, -vy / 2.0, vx, vy], 20.0)
        }
        SystemKind::BouncingBall => unreachable!(),
    }
}

#[test]
fn ground_truth_energy_is_conserved() {
    let cfg = IntegratorConfig::rk45(1e-9, 1e-12);
    for kind in SystemKind::ALL.into_iter().filter(|k| k.is_conservative()) {
        let sys = spec(kind);
        let (y0, t_end) = fixture(kind);
        let field = HamiltonianField::new(&sys, y0.len() / 2).unwrap();
        let tr = rk45_integrate(|_t, y| field.eval(y), &y0, &grid(t_end, 1000), &cfg).unwrap();
        let h0 = h_plain(kind, &y0);
        let drift = (0..tr.len()).map(|i| (h_plain(kind, tr.state(i)) - h0).abs()).fold(0.0, f64::max) / h0.abs().max(1.0);
        assert!(drift < 1e-6, "{kind}: relative energy drift {drift:e}");
    }
}

#[test]
fn hamiltonian_and_lagrangian_trajectories_agree() {
    // tight tolerances: the spring pendulum passes close to r = 0 over its span
    let cfg = IntegratorConfig::rk45(1e-11, 1e-13);
    for kind in [
        SystemKind::MassSpring,
        SystemKind::Pendulum,
        SystemKind::SpringPendulum,
        SystemKind::DoublePendulum,
    ] {
        let sys = spec(kind);
        let (y0, t_end) = fixture(kind);
        let n = y0.len() / 2;
        let times = grid(t_end, 300);
        let hf = HamiltonianField::new(&sys, n).unwrap();
        let lf = LagrangianField::new(&sys, n).unwrap();
        let th = rk45_integrate(|_t, y| hf.eval(y), &y0, &times, &cfg).unwrap();
        let l0 = to_lagrangian(&sys, &PhaseState::from_vec(y0.clone(), Convention::Hamiltonian).unwrap()).unwrap();
        let tl = rk45_integrate(|_t, y| lf.derivative(y), l0.as_slice(), &times, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..times.len() {
            let s = PhaseState::from_vec(tl.state(i).to_vec(), Convention::Lagrangian).unwrap();
            let back = to_hamiltonian(&sys, &s).unwrap();
            for (a, b) in back.as_slice().iter().zip(th.state(i)) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-6, "{kind}: max state error {worst:e}");
    }
}

#[test]
fn rk45_is_at_least_fourth_order() {
    let f = |_t: f64, y: &[f64]| Ok(vec![y[1], -y[0]]);
    let t_end = 10.0;
    let errors: Vec<f64> = [0.4, 0.2, 0.1, 0.05]
        .iter()
        .map(|&h| {
            let cfg = IntegratorConfig {
                max_step: h,
                ..IntegratorConfig::rk45(1e3, 1e3)
            };
            let tr = rk45_integrate(f, &[1.0, 0.0], &[0.0, t_end], &cfg).unwrap();
            ((tr.last()[0] - t_end.cos()).powi(2) + (tr.last()[1] + t_end.sin()).powi(2)).sqrt()
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[0] / w[1] >= 16.0, "errors {errors:?}");
    }
}

#[test]
fn leapfrog_step_is_symplectic() {
    let step = |z: [f64; 2]| -> [f64; 2] {
        let tr = leapfrog_integrate(|q| Ok(q.to_vec()), |p| Ok(p.to_vec()), &z, 0.0, 0.1, 1).unwrap();
        [tr.last()[0], tr.last()[1]]
    };
    let z = [0.7, -0.4];
    let h = 1e-6;
    let mut jac = [[0.0; 2]; 2];
    for j in 0..2 {
        let mut a = z;
        let mut b = z;
        a[j] += h;
        b[j] -= h;
        let (fa, fb) = (step(a), step(b));
        for i in 0..2 {
            jac[i][j] = (fa[i] - fb[i]) / (2.0 * h);
        }
    }
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    assert!((det - 1.0).abs() < 1e-8, "det {det}");
}

#[test]
fn leapfrog_energy_error_is_bounded_without_trend() {
    let n = 100_000;
    let dt = 0.1;
    let tr = leapfrog_integrate(|q| Ok(q.to_vec()), |p| Ok(p.to_vec()), &[1.0, 0.0], 0.0, dt, n).unwrap();
    let e: Vec<f64> = (0..tr.len()).map(|i| 0.5 * (tr.state(i)[0].powi(2) + tr.state(i)[1].powi(2)) - 0.5).collect();
    let max_drift = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_drift < 1e-2, "max drift {max_drift}");
    // least-squares slope of energy error against step index
    let k = e.len() as f64;
    let mx = (k - 1.0) / 2.0;
    let my = e.iter().sum::<f64>() / k;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in e.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    assert!((sxy / sxx).abs() < 1e-8, "slope {}", sxy / sxx);
}

#[test]
fn elastic_bounces_keep_their_height() {
    let ball = |_t: f64, y: &[f64]| Ok(vec![y[1], -9.8]);
    let tr = integrate_with_contact(ball, &[1.0, 0.0], 0.0, 1e-4, 60_000, 1.0).unwrap();
    let q: Vec<f64> = tr.states().column(0).to_vec();
    // apexes: local maxima away from the start
    let peaks: Vec<f64> = (1..q.len() - 1).filter(|&i| q[i] > q[i - 1] && q[i] >= q[i + 1]).map(|i| q[i]).collect();
    assert!(peaks.len() >= 4, "{} peaks", peaks.len());
    for p in peaks {
        assert!((p - 1.0).abs() < 5e-3, "apex {p}");
    }
}

#[test]
fn euler_matches_closed_form_for_linear_growth() {
    let tr = euler_integrate(|_t, y| Ok(vec![0.5 * y[0]]), &[1.0], 0.0, 0.01, 100).unwrap();
    let expect = 1.005f64.powi(100);
    assert!((tr.last()[0] - expect).abs() < 1e-12);
}
