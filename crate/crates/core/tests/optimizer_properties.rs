use breglearn::analysis::{check_iterate_invariants, check_step_identity, record_trajectory, seed_rng, ConvexRun};
use breglearn::init::{init_group_masked, Activation, InitSpec};
use breglearn::nn::{default_layout, loss_and_grad, Batch, HiddenActivation, LossKind, MlpSpec, RegularizeMode, Targets};
use breglearn::optim::{Hyperparams, Method, OptimizerState, StepSchedule};
use breglearn::problems::{make_quadratic, noisy_grad, ConvexProblem, NoiseChannel};
use breglearn::regularizers::shrink;
use breglearn::{GroupLayout, ParamVector, Regularizer};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Runs `method` for `steps` noisy steps and returns every iterate.
fn run(
    p: &ConvexProblem,
    reg: &Regularizer,
    method: Method,
    hyper: Hyperparams,
    schedule: StepSchedule,
    steps: usize,
) -> Vec<ParamVector> {
    let mut theta = ParamVector::from_elem(p.dim(), 0.3);
    let mut st = OptimizerState::new(method, hyper, schedule, reg, &theta).unwrap();
    let mut rng = seed_rng(99);
    let mut out = vec![theta.clone()];
    for _ in 0..steps {
        let g = noisy_grad(p, &NoiseChannel { sigma: 0.5 }, &theta, &mut rng);
        st.step(&mut theta, &g, reg).unwrap();
        out.push(theta.clone());
    }
    out
}

fn max_gap(a: &[ParamVector], b: &[ParamVector]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn reduction_chain() {
    let p = make_quadratic(20, 10.0, 0.25, 1).unwrap();
    let zero = Regularizer::zero(GroupLayout::entrywise(20));
    let l1 = Regularizer::l1(0.2, GroupLayout::entrywise(20)).unwrap();
    let h = Hyperparams::default();
    let sched = StepSchedule::PowerDecay { c: 0.05, p: 0.6 };

    let sgd = run(&p, &zero, Method::Sgd, h, sched, 100);
    let lb = run(&p, &zero, Method::LinBreg, h, sched, 100);
    assert!(max_gap(&sgd, &lb) <= 1e-12);

    let h0 = Hyperparams { beta: 0.0, delta: 1.7, ..h };
    let lb = run(&p, &l1, Method::LinBreg, h0, sched, 100);
    let mom = run(&p, &l1, Method::LinBregMomentum, h0, sched, 100);
    assert!(max_gap(&lb, &mom) <= 1e-12);

    let adam = run(&p, &zero, Method::Adam, h, sched, 100);
    let ada = run(&p, &zero, Method::AdaBreg, h, sched, 100);
    assert!(max_gap(&adam, &ada) <= 1e-12);
}

#[test]
fn every_optimizer_keeps_invariants_on_a_network() {
    let spec = MlpSpec::new(vec![6, 8, 5, 3], HiddenActivation::Relu).unwrap();
    let mut rng = seed_rng(5);
    let batch = Batch {
        inputs: Array2::from_shape_fn((16, 6), |_| rng.random_range(0.0..1.0)),
        targets: Targets::Labels((0..16).map(|i| i % 3).collect()),
    };
    for mode in [RegularizeMode::Entrywise, RegularizeMode::Rows] {
        let layout = default_layout(&spec, mode);
        let reg = match mode {
            RegularizeMode::Entrywise => Regularizer::l1(0.05, layout.clone()).unwrap(),
            RegularizeMode::Rows => Regularizer::group_l12(0.02, layout.clone()).unwrap(),
        };
        let init = InitSpec::new(0.3, Activation::Relu, 1).unwrap();
        for method in Method::ALL {
            let mut theta = init_group_masked(&layout, &init, &mut init.rng()).unwrap();
            let hyper = Hyperparams { delta: 1.5, ..Default::default() };
            let mut st = OptimizerState::new(method, hyper, StepSchedule::Constant(0.05), &reg, &theta).unwrap();
            for _ in 0..50 {
                let (_, g) = loss_and_grad(&spec, &theta, &batch, LossKind::CrossEntropy).unwrap();
                st.step(&mut theta, &g, &reg).unwrap();
                if method.is_bregman() {
                    let v = st.subgradient_var().unwrap();
                    assert_eq!(reg.check_feasibility(1.5, &theta, v, 1e-9).unwrap(), None, "{method}");
                    let recovered = reg.prox(1.5, &(v * 1.5)).unwrap();
                    let gap = max_gap(&[recovered], &[theta.clone()]);
                    assert!(gap <= 1e-12, "{method}: {gap}");
                }
            }
            assert!(theta.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn momentum_and_adabreg_trajectories_satisfy_split_identity() {
    let p = make_quadratic(10, 5.0, 0.3, 2).unwrap();
    let reg = Regularizer::l1(0.2, GroupLayout::entrywise(10)).unwrap();
    for method in [Method::LinBreg, Method::LinBregMomentum, Method::AdaBreg] {
        let r = ConvexRun {
            method,
            hyper: Hyperparams { delta: 0.8, ..Default::default() },
            schedule: StepSchedule::Constant(0.05),
            sigma: 0.3,
            steps: 200,
        };
        let tr = record_trajectory(&p, &reg, &r, &ParamVector::zeros(10), 1).unwrap();
        let rep = check_iterate_invariants(&tr, &reg, 0.8, &p.theta_star, 1e-9).unwrap();
        assert!(rep.passed(), "{method}: {}", rep.summary());
        if method == Method::LinBreg {
            let rep = check_step_identity(&tr, &reg, 0.8, &p.theta_star, 1e-9).unwrap();
            assert!(rep.passed(), "{}", rep.summary());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn deterministic_linbreg_loss_is_nonincreasing(
        seed in 0u64..1000,
        cond in 1.0f64..50.0,
        lambda in 0.0f64..2.0,
        delta in 0.2f64..5.0,
        frac in 0.05f64..1.0,
    ) {
        let p = make_quadratic(8, cond, 0.5, seed).unwrap();
        let reg = Regularizer::l1(lambda, GroupLayout::entrywise(8)).unwrap();
        let tau = frac * 2.0 / (delta * p.l_lip);
        let mut theta = ParamVector::zeros(8);
        let h = Hyperparams { delta, ..Default::default() };
        let mut st = OptimizerState::new(Method::LinBreg, h, StepSchedule::Constant(tau), &reg, &theta).unwrap();
        let mut prev = p.loss(&theta);
        for _ in 0..300 {
            let g = p.grad(&theta);
            st.step(&mut theta, &g, &reg).unwrap();
            let l = p.loss(&theta);
            prop_assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn linbreg_support_is_independent_of_delta(
        v0 in prop::collection::vec(-2.0f64..2.0, 12),
        g in prop::collection::vec(-2.0f64..2.0, 12),
        lambda in 0.01f64..1.5,
        delta in 0.05f64..20.0,
        tau in 0.01f64..1.0,
    ) {
        let reg = Regularizer::l1(lambda, GroupLayout::entrywise(12)).unwrap();
        // start from the iterate whose subgradient variable is v0
        let theta0 = reg.prox(delta, &(ParamVector::from(v0.clone()) * delta)).unwrap();
        let h = Hyperparams { delta, ..Default::default() };
        let mut st = OptimizerState::new(Method::LinBreg, h, StepSchedule::Constant(tau), &reg, &theta0).unwrap();
        st.v = ParamVector::from(v0);
        let mut theta = theta0;
        st.step(&mut theta, &ParamVector::from(g), &reg).unwrap();
        for (t, v) in theta.iter().zip(st.v.iter()) {
            let s = shrink(*v, lambda);
            prop_assert_eq!(t.signum() * f64::from(u8::from(*t != 0.0)), s.signum() * f64::from(u8::from(s != 0.0)));
        }
    }
}
