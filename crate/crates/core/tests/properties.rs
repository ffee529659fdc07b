use proptest::prelude::*;
use qlag::bayes::{update, BayesConfig, PosteriorState};
use qlag::conditions::{check_exponential, check_general, Verdict};
use qlag::distributions::DistributionSpec;
use qlag::gridsearch::{optimize, GridPoint, GridResult, LagGrid, Objective};
use qlag::reward::RewardSpec;
use qlag::simulator::{run_fixed_lag, ParamSchedule, ServerState};

fn state(b: bool) -> ServerState {
    if b {
        ServerState::Busy
    } else {
        ServerState::Idle
    }
}

proptest! {
    #[test]
    fn posterior_never_decreases(steps in prop::collection::vec((0.001f64..10.0, any::<bool>(), any::<bool>()), 1..60)) {
        let cfg = BayesConfig::default();
        let mut p = PosteriorState::prior(&cfg);
        let mut prev = None;
        for (i, (lag, now, before)) in steps.into_iter().enumerate() {
            let prev_state = if i == 0 { None } else { Some(state(before)) };
            let q = update(&p, lag, state(now), prev_state.or(prev), &cfg);
            prop_assert!(q.alpha >= p.alpha && q.beta >= p.beta);
            prop_assert!(q.updates_applied == p.updates_applied || q.updates_applied == p.updates_applied + 1);
            prop_assert_eq!(q != p, q.updates_applied == p.updates_applied + 1);
            prev = Some(state(now));
            p = q;
        }
    }

    #[test]
    fn grid_best_is_first_maximum(rewards in prop::collection::vec(0u8..5, 1..30)) {
        let pts: Vec<GridPoint<f64>> = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| GridPoint { lag: i as f64 * 0.1, reward: r as f64, std_error: 0.0 })
            .collect();
        let r = GridResult::from_points(pts.clone()).unwrap();
        let max = pts.iter().map(|p| p.reward).fold(f64::MIN, f64::max);
        prop_assert_eq!(r.best_reward, max);
        let first = pts.iter().find(|p| p.reward == max).unwrap().lag;
        prop_assert_eq!(r.best_lag, first);
    }

    #[test]
    fn surrogate_dominates_exact(ts in 0.2f64..2.0, td in 0.05f64..1.0, kappa in 0.05f64..0.9) {
        prop_assume!(kappa * td < 0.95);
        let s = DistributionSpec::exponential(ts).unwrap();
        let d = DistributionSpec::exponential(td).unwrap();
        let f = RewardSpec::exponential(kappa).unwrap();
        let grid = LagGrid::new(0.0, 2.0, 0.25).unwrap();
        let ex = optimize(&s, &d, &f, &grid, 0, 0, Objective::Exact).unwrap();
        let sur = optimize(&s, &d, &f, &grid, 0, 0, Objective::Surrogate).unwrap();
        for (a, b) in ex.points.iter().zip(&sur.points) {
            prop_assert!(b.reward >= a.reward - 1e-12, "lag {}: {} < {}", a.lag, b.reward, a.reward);
        }
    }

    #[test]
    fn exponential_check_matches_general(ts in 0.1f64..3.0, td in 0.1f64..3.0, kappa in 0.01f64..2.0) {
        let s = DistributionSpec::uniform_with_mean(ts).unwrap();
        let d = DistributionSpec::exponential(td).unwrap();
        let g = check_general(&s, &d, &RewardSpec::exponential(kappa).unwrap());
        let c = check_exponential(&s, &d, kappa);
        prop_assert!((g.lhs - c.lhs).abs() <= 1e-9 * g.lhs.max(1.0));
        prop_assert_eq!(g.verdict, c.verdict);
        prop_assert!(g.verdict != Verdict::Indeterminate);
    }
}

#[test]
fn f32_pipeline() {
    let s = DistributionSpec::exponential(1.0f32).unwrap();
    let d = DistributionSpec::exponential(0.33f32).unwrap();
    let t = run_fixed_lag(&s, &d, 0.0, 50_000, &ParamSchedule::stationary_of(&s, &d), 1).unwrap();
    let mean_w = t.jobs.iter().map(|j| j.wait as f64).sum::<f64>() / 50_000.0;
    assert!((mean_w - 0.7519).abs() < 0.03, "{mean_w}");
    let r = check_exponential(&s, &d, 1.0f32);
    assert!((r.lhs - 5.381).abs() < 1e-3);
    assert_eq!(r.verdict, Verdict::Fails);
    let f = RewardSpec::exponential(1.0f32).unwrap();
    let g = optimize(&s, &d, &f, &LagGrid::new(0.0f32, 1.0, 0.1).unwrap(), 0, 0, Objective::Exact).unwrap();
    assert!((g.best_lag - 0.3).abs() < 1e-6);
}
