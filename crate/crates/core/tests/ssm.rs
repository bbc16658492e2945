mod common;

use common::{max_abs_diff, naive_scan, random_seq, random_ssm};
use groupmamba::numerics::{grad_check_store, GradCheckOptions, ParamStore, Rng, Tensor};
use groupmamba::ssm::{
    integrate_rk4, materialize_inputs, ode_oracle, s6_forward, scan_kernel, selective_scan,
    Discretization, ScanInputs, ScanSequence,
};
use proptest::prelude::*;

#[test]
fn scan_matches_naive_recurrence() {
    let mut rng = Rng::new(5);
    for case in 0..40 {
        let (b, l, d, n) = (1 + rng.below(2), 1 + rng.below(9), 1 + rng.below(5), 1 + rng.below(6));
        let disc = if case % 2 == 0 { Discretization::Zoh } else { Discretization::EulerInput };
        let mut store = ParamStore::new();
        let p = random_ssm(&mut store, case, d, n, case % 3 != 0, disc);
        let seq = random_seq(&mut rng, b, l, d);
        let y = selective_scan(&store, &p, &seq).unwrap();
        let err = max_abs_diff(&y.data, &naive_scan(&store, &p, &seq));
        assert!(err < 1e-10, "case {case}: {err:e}");
    }
}

#[test]
fn reference_case_l7_d3_n4() {
    let mut store = ParamStore::new();
    let p = random_ssm(&mut store, 77, 3, 4, true, Discretization::Zoh);
    let seq = random_seq(&mut Rng::new(77), 1, 7, 3);
    let y = selective_scan(&store, &p, &seq).unwrap();
    assert!(max_abs_diff(&y.data, &naive_scan(&store, &p, &seq)) < 1e-10);
}

#[test]
fn empty_sequence_maps_to_empty() {
    let mut store = ParamStore::new();
    let p = random_ssm(&mut store, 1, 3, 4, true, Discretization::Zoh);
    let seq = ScanSequence::new(2, 0, 3, vec![]).unwrap();
    let y = selective_scan(&store, &p, &seq).unwrap();
    assert!(y.is_empty());
    assert_eq!((y.batch, y.len, y.channels), (2, 0, 3));
}

#[test]
fn single_token_unrolls_to_one_step() {
    let mut store = ParamStore::new();
    let p = random_ssm(&mut store, 3, 2, 3, true, Discretization::Zoh);
    let seq = random_seq(&mut Rng::new(3), 1, 1, 2);
    let inp = materialize_inputs(&store, &p, &seq.to_tensor().unwrap()).unwrap();
    let y = selective_scan(&store, &p, &seq).unwrap();
    for c in 0..2 {
        let x = seq.get(0, 0, c);
        let dt = inp.delta.data()[c];
        let mut want = store.get(p.d_skip.unwrap()).data()[c] * x;
        for k in 0..3 {
            let (_, bbar) = groupmamba::ssm::zoh_discretize(
                -store.get(p.a_log).data()[c * 3 + k].exp(),
                inp.b.data()[k],
                dt,
            )
            .unwrap();
            want += inp.c.data()[k] * bbar * x;
        }
        assert!((y.data[c] - want).abs() < 1e-14);
    }
}

#[test]
fn memoryless_limit() {
    let mut store = ParamStore::new();
    let p = random_ssm(&mut store, 4, 2, 3, true, Discretization::Zoh);
    for v in store.get_mut(p.a_log).data_mut() {
        *v = 40.0;
    }
    let seq = random_seq(&mut Rng::new(4), 1, 5, 2);
    let inp = materialize_inputs(&store, &p, &seq.to_tensor().unwrap()).unwrap();
    let y = selective_scan(&store, &p, &seq).unwrap();
    for t in 0..5 {
        for c in 0..2 {
            let x = seq.get(0, t, c);
            let mut want = store.get(p.d_skip.unwrap()).data()[c] * x;
            for k in 0..3 {
                let a = -(40.0f64).exp();
                let bbar = -1.0 / a * inp.b.data()[t * 3 + k];
                want += inp.c.data()[t * 3 + k] * bbar * x;
            }
            assert!((y.data[t * 2 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zoh_agrees_with_ode_and_converges() {
    let mut rng = Rng::new(11);
    for case in 0..20 {
        let (l, d, n) = (1 + rng.below(8), 1 + rng.below(4), 1 + rng.below(5));
        let mut store = ParamStore::new();
        let p = random_ssm(&mut store, 100 + case, d, n, false, Discretization::Zoh);
        let seq = random_seq(&mut rng, 1, l, d);
        let y = selective_scan(&store, &p, &seq).unwrap();
        let e64 = max_abs_diff(&y.data, &ode_oracle(&store, &p, &seq, 64).unwrap().data);
        let e128 = max_abs_diff(&y.data, &ode_oracle(&store, &p, &seq, 128).unwrap().data);
        assert!(e64 < 1e-6, "case {case}: {e64:e}");
        assert!(e128 <= e64 || e128 < 1e-6);
    }
}

#[test]
fn ode_oracle_rejects_few_substeps() {
    let mut store = ParamStore::new();
    let p = random_ssm(&mut store, 1, 2, 2, false, Discretization::Zoh);
    let seq = random_seq(&mut Rng::new(1), 1, 2, 2);
    assert!(ode_oracle(&store, &p, &seq, 8).is_err());
}

#[test]
fn pure_integrator_accumulates() {
    let l = 6;
    let delta = Tensor::from_fn(&[1, l, 1], |t| 0.1 + 0.05 * t as f64);
    let inp = ScanInputs {
        u: Tensor::full(&[1, l, 1], 2.0),
        delta: delta.clone(),
        a_log: Tensor::full(&[1, 1], f64::NEG_INFINITY),
        b: Tensor::ones(&[1, l, 1]),
        c: Tensor::ones(&[1, l, 1]),
        d_skip: None,
        discretization: Discretization::Zoh,
    };
    let y = integrate_rk4(&inp, 16);
    let mut sum = 0.0;
    for t in 0..l {
        sum += delta.data()[t] * 2.0;
        assert!((y.data()[t] - sum).abs() < 1e-12);
    }
}

fn scan_inputs(seed: u64, l: usize) -> (ParamStore<f64>, groupmamba::ssm::SsmParams, ScanSequence<f64>) {
    let mut store = ParamStore::new();
    let p = random_ssm(&mut store, seed, 3, 4, true, Discretization::Zoh);
    let seq = random_seq(&mut Rng::new(seed ^ 0xabc), 2, l, 3);
    (store, p, seq)
}

#[test]
fn state_bounded_by_geometric_series() {
    for seed in 0..10 {
        let (store, p, seq) = scan_inputs(seed, 12);
        let inp = materialize_inputs(&store, &p, &seq.to_tensor().unwrap()).unwrap();
        let states = scan_kernel(&inp, true).unwrap().states.unwrap();
        let (d, n) = (3, 4);
        for c in 0..d {
            for k in 0..n {
                let a = -inp.a_log.data()[c * n + k].exp();
                let mut sup_a: f64 = 0.0;
                let mut sup_in: f64 = 0.0;
                for tok in 0..2 * 12 {
                    let dt = inp.delta.data()[tok * d + c];
                    let abar = (dt * a).exp();
                    sup_a = sup_a.max(abar);
                    let bbar = (abar - 1.0) / a * inp.b.data()[tok * n + k];
                    sup_in = sup_in.max((bbar * inp.u.data()[tok * d + c]).abs());
                }
                assert!(sup_a < 1.0);
                let bound = sup_in / (1.0 - sup_a);
                for tok in 0..2 * 12 {
                    let h = states[(tok * d + c) * n + k];
                    assert!(h.abs() <= bound * (1.0 + 1e-12), "{h} > {bound}");
                }
            }
        }
    }
}

#[test]
fn scan_gradients_pass_grad_check() {
    for (seed, disc) in [(1, Discretization::Zoh), (2, Discretization::EulerInput)] {
        let mut store = ParamStore::new();
        let p = random_ssm(&mut store, seed, 3, 4, true, disc);
        let mut rng = Rng::new(seed);
        let x = store.add("x", common::random_tensor(&mut rng, &[2, 5, 3], 3.0), false);
        let w = common::random_tensor(&mut rng, &[2, 5, 3], 1.0);
        let report = grad_check_store(
            |g, s| {
                let xv = g.param(s, x);
                let y = s6_forward(g, s, &p, xv)?;
                let wv = g.constant(w.clone());
                let yw = g.mul(y, wv)?;
                g.sum(yw)
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passes(1e-4), "{disc:?}: {worst:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbing_a_token_leaves_the_past_unchanged(seed in 0u64..1000, l in 2usize..10, t_frac in 0.0f64..1.0) {
        let (store, p, seq) = scan_inputs(seed, l);
        let t = 1 + ((l - 1) as f64 * t_frac) as usize % (l - 1);
        let mut bumped = seq.clone();
        for b in 0..2 {
            for c in 0..3 {
                bumped.data[(b * l + t) * 3 + c] += 0.7;
            }
        }
        let y0 = selective_scan(&store, &p, &seq).unwrap();
        let y1 = selective_scan(&store, &p, &bumped).unwrap();
        for b in 0..2 {
            for s in 0..t {
                for c in 0..3 {
                    prop_assert_eq!(y0.get(b, s, c).to_bits(), y1.get(b, s, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn zoh_exactness_any_params(seed in 0u64..10_000, l in 1usize..6, d in 1usize..4, n in 1usize..5) {
        let mut store = ParamStore::new();
        let p = random_ssm(&mut store, seed, d, n, false, Discretization::Zoh);
        let seq = random_seq(&mut Rng::new(seed), 1, l, d);
        let y = selective_scan(&store, &p, &seq).unwrap();
        let ode = ode_oracle(&store, &p, &seq, 64).unwrap();
        prop_assert!(max_abs_diff(&y.data, &ode.data) < 1e-6);
    }

    #[test]
    fn zoh_gain_is_between_euler_and_zero(a in -50.0f64..-1e-3, dt in 1e-4f64..2.0, b in -3.0f64..3.0) {
        let (abar, bbar) = groupmamba::ssm::zoh_discretize(a, b, dt).unwrap();
        prop_assert!(abar > 0.0 && abar < 1.0);
        prop_assert!(bbar.abs() <= (dt * b).abs() * (1.0 + 1e-12));
        prop_assert!(bbar * b >= 0.0);
    }
}
