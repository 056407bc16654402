use perfrisk::env::{analytic_gamma, CreditEnv, CreditEnvConfig, Environment};
use perfrisk::prc::{
    joint_solve, joint_solve_with, quantile_plan_width, run_planned, run_prc, run_prc_quantile,
    SolvePlan,
};
use perfrisk::quantile::WeightFn;
use perfrisk::risk::{RiskSpec, StopReason, ThresholdWindow};
use perfrisk::{Error, WidthMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn expected_spec(tau: f64) -> RiskSpec {
    RiskSpec {
        alpha: 0.3,
        delta_alpha: 0.082,
        delta: 0.1,
        tau,
        n: 2000,
    }
}

fn credit() -> (CreditEnv, ThresholdWindow) {
    let cfg = CreditEnvConfig::expected_risk();
    (
        CreditEnv::new(cfg).unwrap(),
        ThresholdWindow::credit(cfg.epsilon),
    )
}

#[test]
fn credit_run_descends_then_stops() {
    let (env, window) = credit();
    let spec = expected_spec(1.5 * analytic_gamma(env.config()).unwrap());
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        run_prc(&env, &spec, &window, WidthMethod::Clt, 4096, &mut rng).unwrap()
    };
    let t = run(3);
    t.check_invariants(&window).unwrap();
    assert_eq!(t.stop_reason, StopReason::Converged);
    let plan = t.plan.unwrap();
    let steps: Vec<f64> = t.iterates.windows(2).map(|w| w[0] - w[1]).collect();
    let (last, moving) = steps.split_last().unwrap();
    assert!(moving.iter().all(|&d| d > plan.delta_lambda));
    assert!(*last <= plan.delta_lambda);
    assert!(t.iterations() >= 2);
    assert_eq!(t, run(3));
    assert_ne!(t.iterates, run(4).iterates);

    for it in &t.per_iteration {
        if it.lambda_next < it.lambda_deploy {
            assert!(it.empirical_risk + it.width + it.guard <= spec.alpha + 1e-12);
        }
    }
}

#[test]
fn zero_loss_population_reaches_the_floor() {
    let cfg = CreditEnvConfig {
        p_pos: 0.0,
        ..CreditEnvConfig::expected_risk()
    };
    let env = CreditEnv::new(cfg).unwrap();
    let window = ThresholdWindow::credit(cfg.epsilon);
    let spec = RiskSpec {
        delta_alpha: 0.2,
        ..expected_spec(0.2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = run_prc(&env, &spec, &window, WidthMethod::Hoeffding, 1024, &mut rng).unwrap();
    let plan = t.plan.unwrap();
    assert_eq!(t.final_lambda(), window.lambda_min);
    assert!(t.iterations() <= (window.length() / plan.delta_lambda).ceil() as usize + 1);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cvar_plan = SolvePlan {
        width: quantile_plan_width(
            WidthMethod::DkwBand,
            &WeightFn::Cvar(0.9),
            spec.n,
            0.01,
            spec.alpha,
        )
        .unwrap()
            / 10.0,
        ..plan
    };
    let q = run_planned(
        &env,
        &spec,
        &window,
        Some(cvar_plan),
        Some(&WeightFn::Cvar(0.9)),
        1024,
        &mut rng,
    )
    .unwrap();
    assert_eq!(q.final_lambda(), window.lambda_min);
}

#[test]
fn no_plan_returns_the_safe_threshold() {
    let (env, window) = credit();
    let spec = RiskSpec {
        delta_alpha: 0.05,
        ..expected_spec(1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = run_prc(&env, &spec, &window, WidthMethod::Hoeffding, 4096, &mut rng).unwrap();
    assert_eq!(t.iterates, vec![window.lambda_safe]);
    assert_eq!(t.stop_reason, StopReason::NoSolvePlan);
    assert!(t.plan.is_none());

    // a dominant guard leaves no feasible budget
    let t = run_prc(
        &env,
        &expected_spec(1e3),
        &window,
        WidthMethod::Clt,
        4096,
        &mut rng,
    )
    .unwrap();
    assert_eq!(t.stop_reason, StopReason::NoSolvePlan);
}

#[test]
fn uniform_weight_reproduces_expected_run() {
    let cfg = CreditEnvConfig::quantile_risk();
    let env = CreditEnv::new(cfg).unwrap();
    let window = ThresholdWindow::credit(cfg.epsilon);
    let spec = RiskSpec {
        alpha: 0.05,
        delta_alpha: 0.03,
        delta: 0.1,
        tau: 0.2,
        n: 5000,
    };
    let method = WidthMethod::QuantileClt {
        beta: 0.0,
        p_rate: cfg.p_pos,
    };
    let grid = 2048;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let quantile = run_prc_quantile(
        &env,
        &spec,
        &window,
        &WeightFn::Uniform,
        method,
        grid,
        &mut rng,
    )
    .unwrap();
    let plan = quantile.plan.expect("plan exists");
    assert_eq!(Some(plan), joint_solve(&spec, &window, method).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let expected = run_planned(&env, &spec, &window, Some(plan), None, grid, &mut rng).unwrap();
    let step = window.length() / (grid - 1) as f64;
    assert!(quantile.iterations() >= 2);
    assert_eq!(quantile.iterations(), expected.iterations());
    for (a, b) in quantile.iterates.iter().zip(&expected.iterates) {
        assert!((a - b).abs() <= step + 1e-12);
    }
}

#[test]
fn var_cannot_be_controlled() {
    let (env, window) = credit();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = run_prc_quantile(
        &env,
        &expected_spec(1.0),
        &window,
        &WeightFn::Var(0.9),
        WidthMethod::DkwBand,
        64,
        &mut rng,
    )
    .unwrap_err();
    assert!(matches!(err, Error::GuaranteeMode(_)));
}

#[test]
fn plan_satisfies_its_constraints() {
    let (_, window) = credit();
    for method in [
        WidthMethod::Hoeffding,
        WidthMethod::EmpiricalBernstein,
        WidthMethod::Clt,
        WidthMethod::HoeffdingBentkus,
    ] {
        for (da, tau) in [(0.1, 0.5), (0.2, 1.0), (0.3, 2.0)] {
            let spec = RiskSpec {
                delta_alpha: da,
                ..expected_spec(tau)
            };
            let Some(plan) = joint_solve(&spec, &window, method).unwrap() else {
                continue;
            };
            assert!((2.0 * tau * plan.delta_lambda - (da - 2.0 * plan.width)).abs() < 1e-9);
            assert!(plan.delta_lambda >= window.length() / plan.t_tilde as f64);
            if plan.t_tilde > 1 {
                let earlier = joint_solve_with(&spec, &window, plan.t_tilde - 1, |dp| {
                    perfrisk::precomputed_width(method, spec.n, dp, spec.alpha)
                })
                .unwrap();
                assert!(earlier.is_none(), "{method}: a smaller budget was feasible");
            }
        }
    }
}

/// Wasserstein-1 distance between two equal-size samples.
fn w1(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn induced_losses_move_at_most_gamma() {
    let (env, _) = credit();
    let gamma = analytic_gamma(env.config()).unwrap();
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let lambdas = [0.1, 0.3, 0.5, 0.7, 0.9];
    let batches: Vec<_> = lambdas
        .iter()
        .map(|&l| env.sample_batch(l, n, &mut rng).unwrap())
        .collect();
    for &eval in &[0.2, 0.5, 0.8] {
        for i in 0..lambdas.len() {
            for j in i + 1..lambdas.len() {
                let a = batches[i].losses(eval, env.epsilon()).unwrap();
                let b = batches[j].losses(eval, env.epsilon()).unwrap();
                let d = w1(a, b);
                let bound = gamma * (lambdas[j] - lambdas[i]) + 3.0 / (n as f64).sqrt();
                assert!(
                    d <= bound,
                    "eval {eval}, lambdas {} {}: {d} > {bound}",
                    lambdas[i],
                    lambdas[j]
                );
            }
        }
    }
}
