use std::collections::BTreeSet;

use docre_core::diffmath::{grad_check, prng, Tape, Tensor, Var, DEFAULT_STEP};
use docre_core::rel_head::{
    atl_loss, atl_loss_tape, logits_tape, pair_repr, predict, relation_logits, PairScores, RelHeadParams,
};
use proptest::prelude::*;
use rand::Rng;

fn random_params(d: usize, n_rel: usize, seed: u64) -> RelHeadParams {
    let mut rng = prng(seed);
    let mut p = RelHeadParams::init(d, n_rel, &mut rng);
    p.b_r = Tensor::vector((0..=n_rel).map(|_| rng.gen_range(-0.5..0.5)).collect());
    p
}

fn random_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn set(items: &[usize]) -> BTreeSet<usize> {
    items.iter().copied().collect()
}

fn zero_params(d: usize, n_rel: usize) -> RelHeadParams {
    RelHeadParams {
        w_h: Tensor::zeros(&[d, d]),
        w_t: Tensor::zeros(&[d, d]),
        w_ch: Tensor::zeros(&[d, d]),
        w_ct: Tensor::zeros(&[d, d]),
        w_r: Tensor::zeros(&[n_rel + 1, d, d]),
        b_r: Tensor::zeros(&[n_rel + 1]),
    }
}

#[test]
fn zero_params_give_zero_representations() {
    let p = zero_params(3, 2);
    let (zh, zt) = pair_repr(&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0], &[0.3, 0.3, 0.3], &p);
    assert_eq!(zh, vec![0.0; 3]);
    assert_eq!(zt, vec![0.0; 3]);
}

#[test]
fn identity_head_map_is_linear_for_small_inputs() {
    let mut p = zero_params(3, 1);
    p.w_h = Tensor::identity(3);
    let e = [1e-4, -2e-4, 3e-5];
    let (zh, _) = pair_repr(&e, &[0.0; 3], &[5.0; 3], &p);
    for (z, x) in zh.iter().zip(e) {
        assert!((z - x).abs() < 1e-11);
    }
}

#[test]
fn pair_repr_matches_direct_formula() {
    let p = random_params(4, 3, 1);
    let mut rng = prng(2);
    let (eh, et, c) = (random_vec(&mut rng, 4), random_vec(&mut rng, 4), random_vec(&mut rng, 4));
    let (zh, zt) = pair_repr(&eh, &et, &c, &p);
    for i in 0..4 {
        let mut a = 0.0;
        let mut b = 0.0;
        for j in 0..4 {
            a += p.w_h.get2(i, j) * eh[j] + p.w_ch.get2(i, j) * c[j];
            b += p.w_t.get2(i, j) * et[j] + p.w_ct.get2(i, j) * c[j];
        }
        assert!((zh[i] - a.tanh()).abs() < 1e-12);
        assert!((zt[i] - b.tanh()).abs() < 1e-12);
    }
}

#[test]
fn logits_at_zero_are_biases() {
    let p = random_params(4, 3, 3);
    let s = relation_logits(&[0.0; 4], &[0.3, -0.2, 0.9, 0.1], &p);
    assert_eq!(s.logits, p.b_r.data().to_vec());
    for r in 0..3 {
        assert_eq!(s.scores[r], p.b_r.data()[r] - p.b_r.data()[3]);
    }
}

#[test]
fn identity_forms_tie_every_class() {
    let mut p = zero_params(3, 2);
    let eye = Tensor::identity(3);
    let mut w = Vec::new();
    for _ in 0..3 {
        w.extend_from_slice(eye.data());
    }
    p.w_r = Tensor::new(vec![3, 3, 3], w).unwrap();
    let s = relation_logits(&[0.2, -0.4, 0.6], &[0.5, 0.5, -0.1], &p);
    assert!(s.logits.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(s.scores, vec![0.0, 0.0]);
}

#[test]
fn relation_logits_match_direct_bilinear() {
    let p = random_params(4, 3, 4);
    let mut rng = prng(5);
    let (zh, zt) = (random_vec(&mut rng, 4), random_vec(&mut rng, 4));
    let s = relation_logits(&zh, &zt, &p);
    for c in 0..4 {
        let mut y = p.b_r.data()[c];
        for i in 0..4 {
            for j in 0..4 {
                y += zh[i] * p.w_r.data()[c * 16 + i * 4 + j] * zt[j];
            }
        }
        assert!((s.logits[c] - y).abs() < 1e-12);
    }
    for r in 0..3 {
        assert_eq!(s.scores[r], s.logits[r] - s.logits[3]);
    }
}

#[test]
fn atl_single_relation_tie_is_ln2() {
    assert!((atl_loss(&[0.7, 0.7], &set(&[0])) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn atl_fixed_instance_matches_direct_evaluation() {
    let y = [1.0, -0.5, 0.2, 0.0];
    // term1: -log(e^1 / (e^1 + e^0)); term2: -log(e^0 / (e^0 + e^-0.5 + e^0.2)).
    let term1 = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let term2 = -(1.0 / (1.0 + (-0.5f64).exp() + 0.2f64.exp())).ln();
    assert!((atl_loss(&y, &set(&[0])) - (term1 + term2)).abs() < 1e-12);
}

#[test]
fn atl_vanishes_in_the_separation_limit() {
    let y = [-60.0, 60.0, -60.0, 0.0];
    let loss = atl_loss(&y, &set(&[1]));
    assert!((0.0..1e-20).contains(&loss), "{loss}");
}

#[test]
fn tied_positives_share_their_softmax() {
    // Each positive competes with the others in P ∪ {TH}, so two tied
    // positives far above the threshold cost ln 2 each.
    let y = [60.0, -60.0, 60.0, 0.0];
    assert!((atl_loss(&y, &set(&[0, 2])) - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn pure_na_pair_uses_only_the_threshold_term() {
    let y = [0.3, -1.0, 0.0];
    let direct = -(1.0 / (0.3f64.exp() + (-1.0f64).exp() + 1.0)).ln();
    assert!((atl_loss(&y, &BTreeSet::new()) - direct).abs() < 1e-12);
}

#[test]
fn predict_uses_strict_threshold() {
    assert!(predict(&[-0.1, -2.0]).is_empty());
    assert_eq!(predict(&[0.3, -0.1]), vec![0]);
    assert!(predict(&[0.0]).is_empty());
}

#[test]
fn tape_loss_equals_summed_pair_losses() {
    let logits = vec![vec![1.0, -0.5, 0.2, 0.0], vec![0.1, 0.4, -0.3, 0.2], vec![-1.0, 2.0, 0.5, 0.3]];
    let positives = vec![set(&[0]), BTreeSet::new(), set(&[1, 2])];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&logits).unwrap());
    let loss = atl_loss_tape(&mut tape, x, &positives).unwrap();
    let direct: f64 = logits.iter().zip(&positives).map(|(y, p)| atl_loss(y, p)).sum();
    assert!((tape.value(loss).item() - direct).abs() < 1e-12);
}

#[test]
fn atl_gradient_covers_every_head_parameter() {
    let (d, n_rel) = (3, 3);
    let p = random_params(d, n_rel, 6);
    let mut rng = prng(7);
    let rows = |rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::from_rows(&(0..3).map(|_| random_vec(rng, d)).collect::<Vec<_>>()).unwrap()
    };
    let (eh, et, c) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
    let positives = vec![set(&[1]), BTreeSet::new(), set(&[0, 2])];
    let inputs = vec![p.w_h.clone(), p.w_t.clone(), p.w_ch.clone(), p.w_ct.clone(), p.w_r.clone(), p.b_r.clone()];
    let report = grad_check(
        |tape: &mut Tape, v: &[Var]| {
            let params = RelHeadParams { w_h: v[0], w_t: v[1], w_ch: v[2], w_ct: v[3], w_r: v[4], b_r: v[5] };
            let (a, b, cc) = (tape.constant(eh.clone()), tape.constant(et.clone()), tape.constant(c.clone()));
            let y = logits_tape(tape, &params, a, b, cc)?;
            atl_loss_tape(tape, y, &positives)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn tape_logits_match_scalar_path() {
    let p = random_params(4, 2, 8);
    let mut rng = prng(9);
    let (eh, et, c) = (random_vec(&mut rng, 4), random_vec(&mut rng, 4), random_vec(&mut rng, 4));
    let (zh, zt) = pair_repr(&eh, &et, &c, &p);
    let direct = relation_logits(&zh, &zt, &p);
    let mut tape = Tape::new();
    let vars = RelHeadParams {
        w_h: tape.constant(p.w_h.clone()),
        w_t: tape.constant(p.w_t.clone()),
        w_ch: tape.constant(p.w_ch.clone()),
        w_ct: tape.constant(p.w_ct.clone()),
        w_r: tape.constant(p.w_r.clone()),
        b_r: tape.constant(p.b_r.clone()),
    };
    let row = |tape: &mut Tape, v: &[f64]| tape.constant(Tensor::matrix(1, 4, v.to_vec()).unwrap());
    let (a, b, cc) = (row(&mut tape, &eh), row(&mut tape, &et), row(&mut tape, &c));
    let y = logits_tape(&mut tape, &vars, a, b, cc).unwrap();
    for (g, w) in tape.value(y).data().iter().zip(&direct.logits) {
        assert!((g - w).abs() < 1e-12);
    }
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, BTreeSet<usize>)> {
    (1usize..6).prop_flat_map(|n| {
        (prop::collection::vec(-8.0f64..8.0, n + 1), prop::collection::btree_set(0..n, 0..=n))
    })
}

proptest! {
    #[test]
    fn shifting_every_logit_changes_nothing((y, pos) in logits_strategy(), k in -50.0f64..50.0) {
        let shifted: Vec<f64> = y.iter().map(|v| v + k).collect();
        let (a, b) = (PairScores::from_logits(y.clone()), PairScores::from_logits(shifted.clone()));
        for (x, z) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - z).abs() < 1e-9);
        }
        prop_assert!((atl_loss(&y, &pos) - atl_loss(&shifted, &pos)).abs() < 1e-9);
    }

    #[test]
    fn atl_is_nonnegative((y, pos) in logits_strategy()) {
        prop_assert!(atl_loss(&y, &pos) >= 0.0);
    }

    #[test]
    fn raising_a_logit_never_drops_it((y, _) in logits_strategy(), bump in 0.0f64..5.0, pick in 0usize..5) {
        let r = pick % (y.len() - 1);
        let before = predict(&PairScores::from_logits(y.clone()).scores);
        let mut raised = y.clone();
        raised[r] += bump;
        let after = predict(&PairScores::from_logits(raised).scores);
        prop_assert!(!before.contains(&r) || after.contains(&r));
    }
}
