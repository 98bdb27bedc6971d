use ndarray::{array, Array1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn l1(lambda: f64, d: usize) -> Regularizer {
    Regularizer::l1(lambda, GroupLayout::entrywise(d)).unwrap()
}

/// Rows block (2x3), bias (2), entrywise block (4): dimension 12.
fn mixed_layout() -> GroupLayout {
    GroupLayout::new(
        12,
        vec![
            Block::new("w", 0, 2, 3, BlockKind::Rows),
            Block::new("b", 6, 2, 1, BlockKind::Bias),
            Block::new("e", 8, 1, 4, BlockKind::Entrywise),
        ],
    )
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, zero_prob: f64) -> ParamVector {
    Array1::from_shape_fn(d, |_| {
        if rng.random::<f64>() < zero_prob {
            0.0
        } else {
            rng.random_range(-2.0..2.0)
        }
    })
}

/// Independent re-implementation of `J` used as an oracle.
fn j_direct(penalty: Penalty, layout: &GroupLayout, theta: &ParamVector) -> f64 {
    let mut s = 0.0;
    for g in layout.groups() {
        let seg: Vec<f64> = theta.as_slice().unwrap()[g.range.clone()].to_vec();
        s += match penalty {
            Penalty::Zero => 0.0,
            Penalty::L1 { lambda } => lambda * seg.iter().map(|x| x.abs()).sum::<f64>(),
            Penalty::GroupL12 { lambda } => {
                lambda * (seg.len() as f64).sqrt() * seg.iter().map(|x| x * x).sum::<f64>().sqrt()
            }
        };
    }
    s
}

/// Minimizes a convex function of one variable by repeated grid refinement.
fn grid_min_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, resolution: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    loop {
        let n = 200;
        let h = (hi - lo) / n as f64;
        let best = (0..=n)
            .map(|i| lo + i as f64 * h)
            .min_by(|a, b| f(*a).partial_cmp(&f(*b)).unwrap())
            .unwrap();
        if h < resolution {
            return best;
        }
        lo = best - h;
        hi = best + h;
    }
}

fn grid_min_2d(f: impl Fn(f64, f64) -> f64, center: (f64, f64), radius: f64, resolution: f64) -> (f64, f64) {
    let (mut c, mut r) = (center, radius);
    loop {
        let n = 40;
        let h = 2.0 * r / n as f64;
        let mut best = (c, f64::INFINITY);
        for i in 0..=n {
            for j in 0..=n {
                let p = (c.0 - r + i as f64 * h, c.1 - r + j as f64 * h);
                let v = f(p.0, p.1);
                if v < best.1 {
                    best = (p, v);
                }
            }
        }
        if h < resolution {
            return best.0;
        }
        c = best.0;
        r = h;
    }
}

#[test]
fn eval_examples() {
    assert_eq!(l1(1.0, 3).eval(&array![1.0, -2.0, 0.0]).unwrap(), 3.0);
    let zero = Regularizer::zero(GroupLayout::entrywise(3));
    assert_eq!(zero.eval(&array![5.0, -1.0, 2.0]).unwrap(), 0.0);
    let g = Regularizer::group_l12(1.0, GroupLayout::single_group(4)).unwrap();
    assert!((g.eval(&array![0.5, 0.5, 0.5, 0.5]).unwrap() - 2.0).abs() < 1e-15);
}

#[test]
fn eval_ignores_bias_entries() {
    let reg = Regularizer::l1(1.0, mixed_layout()).unwrap();
    let mut theta = ParamVector::zeros(12);
    theta[6] = 5.0;
    theta[7] = -3.0;
    assert_eq!(reg.eval(&theta).unwrap(), 0.0);
}

#[test]
fn dimension_mismatch_is_a_layout_error() {
    let reg = l1(1.0, 3);
    assert!(matches!(
        reg.eval(&array![1.0, 2.0]),
        Err(Error::DimensionMismatch { expected: 3, actual: 2, .. })
    ));
    assert!(reg.prox(1.0, &array![1.0]).is_err());
}

#[test]
fn negative_lambda_rejected() {
    assert!(Regularizer::l1(-0.1, GroupLayout::entrywise(2)).is_err());
    assert!(l1(1.0, 1).prox(0.0, &array![1.0]).is_err());
}

#[test]
fn prox_examples() {
    assert_eq!(l1(1.0, 1).prox(1.0, &array![2.0]).unwrap()[0], 1.0);
    assert_eq!(l1(1.0, 1).prox(1.0, &array![0.5]).unwrap()[0], 0.0);

    let got = l1(0.7, 1).prox(0.5, &array![-1.0]).unwrap()[0];
    let oracle = grid_min_1d(|t| 0.5 * (t + 1.0) * (t + 1.0) + 0.5 * 0.7 * t.abs(), -3.0, 3.0, 1e-6);
    assert!((oracle - (-0.65)).abs() < 1e-5);
    assert!((got - (-0.65)).abs() < 1e-12);

    let g = Regularizer::group_l12(1.0, GroupLayout::single_group(2)).unwrap();
    let got = g.prox(1.0, &array![3.0, 4.0]).unwrap();
    let s2 = 2f64.sqrt();
    let oracle = grid_min_2d(
        |a, b| 0.5 * ((a - 3.0).powi(2) + (b - 4.0).powi(2)) + s2 * (a * a + b * b).sqrt(),
        (0.0, 0.0),
        6.0,
        1e-6,
    );
    assert!((got[0] - 2.15147).abs() < 1e-5 && (got[1] - 2.86863).abs() < 1e-5, "{got}");
    assert!((got[0] - oracle.0).abs() < 1e-5 && (got[1] - oracle.1).abs() < 1e-5);
}

#[test]
fn group_prox_of_zero_block_is_zero() {
    let g = Regularizer::group_l12(1.0, GroupLayout::single_group(3)).unwrap();
    let out = g.prox(2.0, &ParamVector::zeros(3)).unwrap();
    assert!(out.iter().all(|x| *x == 0.0 && !x.is_nan()));
}

#[test]
fn prox_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (lambda, delta, w) = (rng.random_range(0.0..2.0), rng.random_range(0.1..3.0), rng.random_range(-4.0..4.0));
        let got = l1(lambda, 1).prox(delta, &array![w]).unwrap()[0];
        let oracle = grid_min_1d(|t| 0.5 * (t - w) * (t - w) + delta * lambda * t.abs(), -5.0, 5.0, 1e-6);
        assert!((got - oracle).abs() < 1e-5, "lambda={lambda} delta={delta} w={w}");
    }
}

#[test]
fn prox_passes_bias_entries_through() {
    let reg = Regularizer::group_l12(10.0, mixed_layout()).unwrap();
    let w = Array1::from_shape_fn(12, |i| i as f64 * 0.1 + 0.05);
    let out = reg.prox(1.0, &w).unwrap();
    assert_eq!(out[6], w[6]);
    assert_eq!(out[7], w[7]);
    assert!(out.iter().enumerate().all(|(i, x)| i == 6 || i == 7 || *x == 0.0));
}

#[test]
fn subgradient_examples() {
    let p = l1(2.0, 3).subgradient(&array![3.0, 0.0, -1.0]).unwrap();
    assert_eq!(p, array![2.0, 0.0, -2.0]);
    let zero = Regularizer::zero(GroupLayout::entrywise(2));
    assert_eq!(zero.subgradient(&array![1.0, -1.0]).unwrap(), array![0.0, 0.0]);
}

#[test]
fn subgradient_inequality_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for penalty in [Penalty::L1 { lambda: 0.7 }, Penalty::GroupL12 { lambda: 0.4 }] {
        let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
        let theta = random_vec(&mut rng, 12, 0.3);
        let p = reg.subgradient(&theta).unwrap();
        let jt = j_direct(penalty, reg.layout(), &theta);
        for _ in 0..100 {
            let bar = random_vec(&mut rng, 12, 0.2);
            let rhs = jt + p.dot(&(&bar - &theta));
            assert!(j_direct(penalty, reg.layout(), &bar) >= rhs - 1e-12);
        }
    }
}

#[test]
fn elastic_subgradient_examples() {
    assert_eq!(l1(1.0, 1).elastic_subgradient(1.0, &array![2.0]).unwrap(), array![3.0]);
    assert_eq!(l1(1.0, 2).elastic_subgradient(1.0, &array![0.0, 0.0]).unwrap(), array![0.0, 0.0]);
}

#[test]
fn prox_inverts_elastic_subgradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for penalty in [Penalty::Zero, Penalty::L1 { lambda: 0.3 }, Penalty::GroupL12 { lambda: 0.2 }] {
        let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
        for _ in 0..50 {
            let delta = rng.random_range(0.2..3.0);
            let theta = random_vec(&mut rng, 12, 0.3);
            let v = reg.elastic_subgradient(delta, &theta).unwrap();
            let back = reg.prox(delta, &(&v * delta)).unwrap();
            for (a, b) in back.iter().zip(theta.iter()) {
                assert!((a - b).abs() < 1e-12, "{penalty:?}");
            }
        }
    }
}

#[test]
fn bregman_distance_examples() {
    let reg = l1(1.0, 1);
    let d = reg.bregman_distance(&array![-1.0], &array![1.0], &array![1.0]).unwrap();
    assert_eq!(d, 2.0);
    let theta = array![0.3];
    let p = reg.subgradient(&theta).unwrap();
    assert_eq!(reg.bregman_distance(&theta, &theta, &p).unwrap(), 0.0);
}

#[test]
fn bregman_distance_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let penalty = Penalty::GroupL12 { lambda: 0.9 };
    let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
    for _ in 0..100 {
        let theta = random_vec(&mut rng, 12, 0.3);
        let bar = random_vec(&mut rng, 12, 0.3);
        let p = reg.subgradient(&theta).unwrap();
        let oracle = j_direct(penalty, reg.layout(), &bar)
            - j_direct(penalty, reg.layout(), &theta)
            - p.dot(&(&bar - &theta));
        let got = reg.bregman_distance(&bar, &theta, &p).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!(got >= -1e-12);
    }
}

#[test]
fn elastic_bregman_distance_examples() {
    let zero = Regularizer::zero(GroupLayout::entrywise(2));
    let (bar, theta) = (array![1.0, 2.0], array![-1.0, 0.5]);
    let v = zero.elastic_subgradient(1.0, &theta).unwrap();
    let d = zero.elastic_bregman_distance(1.0, &bar, &theta, &v).unwrap();
    assert!((d - 0.5 * (4.0 + 2.25)).abs() < 1e-15);
    let reg = l1(1.0, 2);
    let v = reg.elastic_subgradient(0.5, &theta).unwrap();
    assert_eq!(reg.elastic_bregman_distance(0.5, &theta, &theta, &v).unwrap(), 0.0);
}

#[test]
fn elastic_bregman_split_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for penalty in [Penalty::L1 { lambda: 0.5 }, Penalty::GroupL12 { lambda: 0.5 }] {
        let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
        for _ in 0..100 {
            let delta = rng.random_range(0.1..4.0);
            let theta = random_vec(&mut rng, 12, 0.3);
            let bar = random_vec(&mut rng, 12, 0.3);
            let v = reg.elastic_subgradient(delta, &theta).unwrap();
            let jd = |x: &ParamVector| j_direct(penalty, reg.layout(), x) + x.dot(x) / (2.0 * delta);
            let direct = jd(&bar) - jd(&theta) - v.dot(&(&bar - &theta));
            let split = reg.elastic_bregman_distance(delta, &bar, &theta, &v).unwrap();
            assert!((direct - split).abs() < 1e-10, "{direct} vs {split}");
        }
    }
}

#[test]
fn sym_bregman_distance_examples() {
    let reg = l1(1.0, 1);
    let (t, tb) = (array![1.0], array![-1.0]);
    let (p, pb) = (array![1.0], array![-1.0]);
    assert_eq!(reg.sym_bregman_distance(&tb, &t, &pb, &p).unwrap(), 4.0);
    assert_eq!(reg.sym_bregman_distance(&t, &t, &p, &p).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let reg = Regularizer::l1(0.8, mixed_layout()).unwrap();
    for _ in 0..100 {
        let theta = random_vec(&mut rng, 12, 0.3);
        let bar = random_vec(&mut rng, 12, 0.3);
        let (p, pb) = (reg.subgradient(&theta).unwrap(), reg.subgradient(&bar).unwrap());
        let sum = reg.bregman_distance(&bar, &theta, &p).unwrap() + reg.bregman_distance(&theta, &bar, &pb).unwrap();
        let sym = reg.sym_bregman_distance(&bar, &theta, &pb, &p).unwrap();
        assert!((sum - sym).abs() < 1e-12);
        assert!(sym >= -1e-12);
    }
}

#[test]
fn feasibility_detects_inconsistent_pair() {
    let reg = l1(1.0, 2);
    let v = array![2.0, 0.5];
    let mut theta = ParamVector::zeros(2);
    reg.prox_scaled_into(1.0, &v, &mut theta).unwrap();
    assert!(reg.check_feasibility(1.0, &theta, &v, 1e-12).unwrap().is_none());
    let bad = array![0.0, 0.5];
    let viol = reg.check_feasibility(1.0, &bad, &v, 1e-12).unwrap().unwrap();
    assert_eq!(viol.index, 0);
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), -3.0..3.0f64], d)
}

fn penalty_strategy() -> impl Strategy<Value = Penalty> {
    prop_oneof![
        Just(Penalty::Zero),
        (0.0..2.0f64).prop_map(|lambda| Penalty::L1 { lambda }),
        (0.0..2.0f64).prop_map(|lambda| Penalty::GroupL12 { lambda }),
    ]
}

proptest! {
    #[test]
    fn prox_optimality_condition(v in vec_strategy(12), lambda in 0.0..2.0f64, delta in 0.05..5.0f64) {
        let reg = Regularizer::l1(lambda, mixed_layout()).unwrap();
        let v = Array1::from(v);
        let mut theta = ParamVector::zeros(12);
        reg.prox_scaled_into(delta, &v, &mut theta).unwrap();
        for b in reg.layout().regularized_blocks() {
            for i in b.range() {
                if theta[i] != 0.0 {
                    prop_assert!((v[i] - theta[i] / delta - lambda * theta[i].signum()).abs() <= 1e-9);
                } else {
                    prop_assert!(v[i].abs() <= lambda + 1e-9);
                }
            }
        }
        prop_assert!(reg.check_feasibility(delta, &theta, &v, 1e-9).unwrap().is_none());
    }

    #[test]
    fn group_prox_optimality_condition(v in vec_strategy(12), lambda in 0.0..2.0f64, delta in 0.05..5.0f64) {
        let reg = Regularizer::group_l12(lambda, mixed_layout()).unwrap();
        let v = Array1::from(v);
        let mut theta = ParamVector::zeros(12);
        reg.prox_scaled_into(delta, &v, &mut theta).unwrap();
        prop_assert!(reg.check_feasibility(delta, &theta, &v, 1e-9).unwrap().is_none());
    }

    #[test]
    fn prox_is_nonexpansive(a in vec_strategy(12), b in vec_strategy(12), penalty in penalty_strategy(), scale in 0.05..3.0f64) {
        let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
        let (a, b) = (Array1::from(a), Array1::from(b));
        let (pa, pb) = (reg.prox(scale, &a).unwrap(), reg.prox(scale, &b).unwrap());
        let d_out = (&pa - &pb).mapv(|x| x * x).sum().sqrt();
        let d_in = (&a - &b).mapv(|x| x * x).sum().sqrt();
        prop_assert!(d_out <= d_in + 1e-12);
    }

    #[test]
    fn prox_scale_identity(v in vec_strategy(6), lambda in 0.0..2.0f64, delta in 0.05..5.0f64) {
        let reg = Regularizer::l1(lambda, GroupLayout::entrywise(6)).unwrap();
        let v = Array1::from(v);
        let direct = reg.prox(delta, &(&v * delta)).unwrap();
        for i in 0..6 {
            prop_assert!((direct[i] - delta * shrink(v[i], lambda)).abs() <= 1e-12 * (1.0 + delta * v[i].abs()));
            // support does not depend on delta
            prop_assert_eq!(direct[i] != 0.0, shrink(v[i], lambda) != 0.0);
        }
    }

    #[test]
    fn bregman_distances_nonnegative(t in vec_strategy(12), b in vec_strategy(12), penalty in penalty_strategy(), delta in 0.1..3.0f64) {
        let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
        let (t, b) = (Array1::from(t), Array1::from(b));
        let p = reg.subgradient(&t).unwrap();
        prop_assert!(reg.bregman_distance(&b, &t, &p).unwrap() >= -1e-12);
        prop_assert!(reg.bregman_distance(&t, &t, &p).unwrap().abs() <= 1e-12);
        let v = reg.elastic_subgradient(delta, &t).unwrap();
        prop_assert!(reg.elastic_bregman_distance(delta, &b, &t, &v).unwrap() >= -1e-12);
    }

    #[test]
    fn eval_is_a_seminorm(a in vec_strategy(12), b in vec_strategy(12), penalty in penalty_strategy(), s in -3.0..3.0f64) {
        let reg = Regularizer::new(penalty, mixed_layout()).unwrap();
        let (a, b) = (Array1::from(a), Array1::from(b));
        let (ja, jb) = (reg.eval(&a).unwrap(), reg.eval(&b).unwrap());
        prop_assert!(ja >= 0.0);
        prop_assert!(reg.eval(&(&a + &b)).unwrap() <= ja + jb + 1e-12);
        prop_assert!((reg.eval(&(&a * s)).unwrap() - s.abs() * ja).abs() <= 1e-10 * (1.0 + ja));
    }
}
