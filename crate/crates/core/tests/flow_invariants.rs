use l1flow::io;
use l1flow::problem::{builtin, Problem};
use l1flow::smoothing::{self, AugmentedState, SmoothingParams};
use l1flow::solver::{self, SolveConfig};

fn problems() -> Vec<Problem> {
    vec![
        builtin("problem1").unwrap(),
        builtin("rastrigin_l1").unwrap(),
        Problem::new(
            &["x1 + x2 - 1", "x1 - x2", "0.5*x1^2 - x3", "exp(x3) - 1"],
            3,
        )
        .unwrap(),
    ]
}

fn start_for(p: &Problem) -> Vec<f64> {
    [0.7, -0.4, 0.25][..p.n_vars()].to_vec()
}

#[test]
fn samples_descend_and_mu_shrinks() {
    for p in &problems()[..2] {
        for (theta, mu0) in [(0.02, 40.0), (0.5, 3.0), (0.1, -10.0)] {
            let mut cfg = SolveConfig::for_dimension(p.n_vars());
            cfg.theta = theta;
            cfg.mu0 = mu0;
            cfg.sample_every = 1;
            let res = solver::solve(p, &start_for(p), &cfg).unwrap();
            let samples = &res.trajectory.as_ref().unwrap().samples;
            let mu = |z: &[f64]| z[z.len() - 1].abs();
            for w in samples.windows(2) {
                let slack = 1e-9 * (1.0 + w[0].energy.abs());
                assert!(w[1].energy <= w[0].energy + slack, "{theta} {mu0} {:?}", w);
                assert!(mu(&w[1].z) <= mu(&w[0].z) + slack, "{theta} {mu0} {:?}", w);
                assert!(w[1].t > w[0].t);
            }
        }
    }
}

#[test]
fn end_state_matches_recomputation() {
    for p in problems() {
        let cfg = SolveConfig::for_dimension(p.n_vars());
        let res = solver::solve(&p, &start_for(&p), &cfg).unwrap();
        assert_eq!(res.f_value, p.objective(&res.x_star).unwrap());
        assert_eq!(
            res.kkt_residual,
            p.stationarity(&res.x_star).unwrap().kkt_residual
        );
        let rep = smoothing::energy(
            &AugmentedState::new(res.x_star.clone(), res.mu_star),
            &p,
            &cfg.smoothing().unwrap(),
        )
        .unwrap();
        assert_eq!(res.e1, rep.e1);
        assert_eq!(res.grad_norm, rep.grad_norm());
        assert_eq!(res.t_end, cfg.t_final);
    }
}

#[test]
fn time_rescaling_leaves_end_state_unchanged() {
    for p in problems() {
        let cfg = SolveConfig::for_dimension(p.n_vars());
        let base = solver::solve(&p, &start_for(&p), &cfg).unwrap();
        for c in [0.5, 4.0] {
            let mut scaled = cfg.clone();
            scaled.m_diag.iter_mut().for_each(|m| *m *= c);
            scaled.t_final /= c;
            let res = solver::solve(&p, &start_for(&p), &scaled).unwrap();
            let mut z0 = base.x_star.clone();
            z0.push(base.mu_star);
            let mut z1 = res.x_star.clone();
            z1.push(res.mu_star);
            for (a, b) in z0.iter().zip(&z1) {
                assert!(
                    (a - b).abs() <= 10.0 * cfg.rtol * (1.0 + a.abs()),
                    "c={c}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn small_mu_limit_recovers_objective_and_a_subgradient() {
    let params = SmoothingParams::default();
    for p in problems() {
        let x = start_for(&p);
        let (r, jac) = p.residuals_and_jacobian(&x).unwrap();
        let f = p.objective(&x).unwrap();
        let mut sub = vec![0.0; p.n_vars()];
        for (i, ri) in r.iter().enumerate() {
            for (j, s) in sub.iter_mut().enumerate() {
                *s += ri.signum() * jac[(i, j)];
            }
        }
        let mut prev_gap = f64::INFINITY;
        for mu in [1.0, 0.3, 0.1, 0.03, 0.01, 0.001] {
            let rep = smoothing::energy(&AugmentedState::new(x.clone(), mu), &p, &params).unwrap();
            let gap = (rep.e - f).abs()
                + rep
                    .grad_x()
                    .iter()
                    .zip(&sub)
                    .map(|(g, s)| (g - s).abs())
                    .sum::<f64>();
            assert!(gap <= prev_gap + 1e-15, "mu={mu}: {gap} > {prev_gap}");
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-5, "{prev_gap}");
    }
}

#[test]
fn objective_is_surrogate_at_zero_mu() {
    let params = SmoothingParams::default();
    for p in problems() {
        for x in [vec![0.1; p.n_vars()], vec![-1.3; p.n_vars()], start_for(&p)] {
            let sum: f64 = p
                .residuals(&x)
                .unwrap()
                .iter()
                .map(|r| smoothing::smooth_abs(*r, 0.0, &params))
                .sum();
            assert_eq!(sum, p.objective(&x).unwrap());
        }
    }
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let p = builtin("rastrigin_l1").unwrap();
    let cfg = SolveConfig::for_dimension(2);
    let a = solver::solve(&p, &[0.8709, 0.8338], &cfg).unwrap();
    let b = solver::solve(&p, &[0.8709, 0.8338], &cfg).unwrap();
    let bits = |r: &solver::SolveResult| -> Vec<u64> {
        r.trajectory
            .as_ref()
            .unwrap()
            .samples
            .iter()
            .flat_map(|s| {
                s.z.iter()
                    .chain([&s.t, &s.energy, &s.grad_norm])
                    .map(|v| v.to_bits())
            })
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn csv_has_one_row_per_sample() {
    let p = builtin("problem1").unwrap();
    let cfg = SolveConfig::for_dimension(2);
    let res = solver::solve(&p, &[1.0, 1.0], &cfg).unwrap();
    let traj = res.trajectory.unwrap();
    let mut buf = Vec::new();
    io::write_trajectory_csv(&mut buf, &traj).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), traj.samples.len() + 1);
    let last: Vec<f64> = text
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let end = traj.last();
    assert_eq!(last[0], end.t);
    assert_eq!(&last[1..4], &end.z[..]);
}

#[test]
fn multi_start_keeps_start_order_under_parallelism() {
    let p = builtin("problem1").unwrap();
    let cfg = SolveConfig::for_dimension(2);
    let report = solver::multi_start(&p, &cfg, 16, 99, 1e-4).unwrap();
    let starts = solver::sample_starts(&p, 16, 99).unwrap();
    let got: Vec<Vec<f64>> = report.runs.iter().map(|r| r.start.clone()).collect();
    assert_eq!(got, starts);
    assert_eq!(report.success_count, 16);
}
