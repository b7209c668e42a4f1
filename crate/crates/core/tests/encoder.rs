use docre_core::corpus::MarkedSequence;
use docre_core::diffmath::{grad_check, prng, Tape, Tensor, Var, DEFAULT_STEP};
use docre_core::encoder::{
    context_embedding, context_tape, context_weights, encode, encode_tape, entity_attention, entity_embedding,
    entity_tape, EncoderOutput, EncoderParams,
};
use docre_core::{EncoderConfig, Error};
use proptest::prelude::*;
use rand::Rng;

fn tiny_cfg(use_positions: bool) -> EncoderConfig {
    EncoderConfig { n_layers: 2, n_heads: 2, d_model: 4, d_ff: 6, vocab_size: 7, max_len: 10, seed: 0, use_positions }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn stochastic(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn seq(tokens: Vec<usize>, starts: Vec<Vec<usize>>) -> MarkedSequence {
    let n = tokens.len();
    MarkedSequence { tokens, mention_start_pos: starts, sent_spans: vec![0..n] }
}

/// `c_j = Σ_i H_ij a_h,i a_t,i / Σ_k a_h,k a_t,k`, evaluated column by column.
fn context_oracle(a_h: &[f64], a_t: &[f64], h: &Tensor) -> Vec<f64> {
    let (l, d) = h.dims2();
    let denom: f64 = (0..l).map(|k| a_h[k] * a_t[k]).sum();
    (0..d).map(|j| (0..l).map(|i| h.get2(i, j) * a_h[i] * a_t[i]).sum::<f64>() / denom).collect()
}

#[test]
fn context_matches_dense_oracle() {
    let mut rng = prng(5);
    let h = random_matrix(&mut rng, 5, 4);
    let a_h = stochastic(&mut rng, 5);
    let a_t = stochastic(&mut rng, 5);
    let got = context_embedding(&a_h, &a_t, &h);
    for (g, w) in got.iter().zip(context_oracle(&a_h, &a_t, &h)) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn uniform_attention_gives_column_mean() {
    let mut rng = prng(6);
    let h = random_matrix(&mut rng, 4, 3);
    let u = vec![0.25; 4];
    let c = context_embedding(&u, &u, &h);
    for j in 0..3 {
        let mean = (0..4).map(|i| h.get2(i, j)).sum::<f64>() / 4.0;
        assert!((c[j] - mean).abs() < 1e-12);
    }
}

#[test]
fn one_hot_head_attention_picks_a_row() {
    let mut rng = prng(7);
    let h = random_matrix(&mut rng, 5, 3);
    let a_h = vec![0.0, 0.0, 1.0, 0.0, 0.0];
    let a_t = stochastic(&mut rng, 5);
    let c = context_embedding(&a_h, &a_t, &h);
    for j in 0..3 {
        assert!((c[j] - h.get2(2, j)).abs() < 1e-12);
    }
}

#[test]
fn zero_overlap_falls_back_to_uniform() {
    let w = context_weights(&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.5]);
    assert_eq!(w, vec![1.0 / 3.0; 3]);
}

fn output_with_rows(rows: &[Vec<f64>]) -> EncoderOutput {
    let l = rows.len();
    EncoderOutput { h: Tensor::from_rows(rows).unwrap(), a: Tensor::identity(l) }
}

#[test]
fn single_mention_embedding_is_its_row() {
    let out = output_with_rows(&[vec![0.1, -0.2], vec![1.5, 0.3], vec![-0.7, 2.0]]);
    let s = seq(vec![2, 3, 2], vec![vec![1]]);
    assert_eq!(entity_embedding(&s, 0, &out).unwrap(), vec![1.5, 0.3]);
}

#[test]
fn duplicated_mention_rows_add_ln2() {
    let m = vec![0.4, -1.1, 3.0];
    let out = output_with_rows(&[m.clone(), vec![0.0; 3], m.clone()]);
    let s = seq(vec![2, 3, 2], vec![vec![0, 2]]);
    let e = entity_embedding(&s, 0, &out).unwrap();
    for (ej, mj) in e.iter().zip(&m) {
        assert!((ej - (mj + 2f64.ln())).abs() < 1e-12);
    }
}

#[test]
fn three_mentions_match_direct_logsumexp() {
    let mut rng = prng(8);
    let h = random_matrix(&mut rng, 6, 4);
    let out = EncoderOutput { h: h.clone(), a: Tensor::identity(6) };
    let s = seq(vec![2; 6], vec![vec![0, 3, 5]]);
    let e = entity_embedding(&s, 0, &out).unwrap();
    for j in 0..4 {
        // Values are O(1), so the unshifted sum is exact enough.
        let direct = [0, 3, 5].iter().map(|&r| h.get2(r, j).exp()).sum::<f64>().ln();
        assert!((e[j] - direct).abs() < 1e-12);
    }
}

#[test]
fn entity_attention_averages_marker_rows() {
    let a = Tensor::from_rows(&[vec![0.2, 0.8, 0.0], vec![0.5, 0.25, 0.25], vec![0.1, 0.1, 0.8]]).unwrap();
    let out = EncoderOutput { h: Tensor::zeros(&[3, 2]), a };
    let single = seq(vec![2, 3, 4], vec![vec![1]]);
    assert_eq!(entity_attention(&single, 0, &out).unwrap(), vec![0.5, 0.25, 0.25]);
    let two = seq(vec![2, 3, 4], vec![vec![0, 2]]);
    let got = entity_attention(&two, 0, &out).unwrap();
    for (g, w) in got.iter().zip([0.15, 0.45, 0.4]) {
        assert!((g - w).abs() < 1e-12);
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn singleton_sequence_attends_to_itself() {
    let cfg = tiny_cfg(true);
    let p = EncoderParams::init(&cfg, &mut prng(1)).unwrap();
    let out = encode(&seq(vec![4], vec![]), &cfg, &p).unwrap();
    assert_eq!(out.a.data(), &[1.0]);
    assert_eq!(out.h.shape(), &[1, 4]);
}

#[test]
fn encoding_is_bitwise_deterministic() {
    let cfg = tiny_cfg(true);
    let tokens = vec![2, 3, 2, 5, 6, 4];
    let run = || {
        let p = EncoderParams::init(&cfg, &mut prng(cfg.seed)).unwrap();
        encode(&seq(tokens.clone(), vec![]), &cfg, &p).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.h), bits(&b.h));
    assert_eq!(bits(&a.a), bits(&b.a));
}

#[test]
fn unknown_token_and_overlong_input_are_rejected() {
    let cfg = tiny_cfg(true);
    let p = EncoderParams::init(&cfg, &mut prng(1)).unwrap();
    let err = encode(&seq(vec![2, 7], vec![]), &cfg, &p).unwrap_err();
    assert!(matches!(err, Error::UnknownToken { id: 7, .. }), "{err}");
    assert!(encode(&seq(vec![2; 11], vec![]), &cfg, &p).is_err());
}

#[test]
fn swapping_plain_tokens_keeps_entities_without_positions() {
    let cfg = tiny_cfg(false);
    let p = EncoderParams::init(&cfg, &mut prng(3)).unwrap();
    // Entity markers at 0 and 4; tokens 2 and 6 are ordinary words.
    let starts = vec![vec![0], vec![4]];
    let a = encode(&seq(vec![2, 3, 5, 2, 2, 4, 6, 2], starts.clone()), &cfg, &p).unwrap();
    let b = encode(&seq(vec![2, 3, 6, 2, 2, 4, 5, 2], starts.clone()), &cfg, &p).unwrap();
    let s = seq(vec![0; 8], starts);
    for e in 0..2 {
        let ea = entity_embedding(&s, e, &a).unwrap();
        let eb = entity_embedding(&s, e, &b).unwrap();
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-12, "entity {e}: {x} vs {y}");
        }
    }
}

fn flatten(p: &EncoderParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t.clone()));
    out
}

fn rebind(p: &EncoderParams, vars: &[Var]) -> EncoderParams<Var> {
    let mut next = vars.iter();
    p.try_map::<Var, std::convert::Infallible>("", &mut |_, _| Ok(*next.next().unwrap())).unwrap()
}

#[test]
fn encoder_entity_context_composite_gradient() {
    let cfg = tiny_cfg(true);
    let p = EncoderParams::init(&cfg, &mut prng(9)).unwrap();
    let s = seq(vec![2, 3, 2, 4, 5, 2, 6, 2], vec![vec![0, 5], vec![2]]);
    let weights = Tensor::matrix(1, 4, vec![0.7, -0.3, 1.1, 0.2]).unwrap();
    let report = grad_check(
        |tape: &mut Tape, v: &[Var]| {
            let params = rebind(&p, v);
            let (h, a) = encode_tape(tape, &cfg, &params, &s.tokens)?;
            let (emb, attn) = entity_tape(tape, h, a, &s)?;
            let c = context_tape(tape, h, attn, &[(0, 1), (1, 0)])?;
            let w = tape.constant(weights.clone());
            let ce = tape.mul(c, w)?;
            let ee = tape.mul(emb, w)?;
            let total = tape.concat(&[ce, ee], 0)?;
            tape.sum(total)
        },
        &flatten(&p),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn tape_entities_match_direct_pooling() {
    let cfg = tiny_cfg(true);
    let p = EncoderParams::init(&cfg, &mut prng(10)).unwrap();
    let s = seq(vec![2, 3, 2, 4, 2, 5], vec![vec![0, 2], vec![4]]);
    let out = encode(&s, &cfg, &p).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(out.h.clone());
    let a = tape.constant(out.a.clone());
    let (emb, attn) = entity_tape(&mut tape, h, a, &s).unwrap();
    let c = context_tape(&mut tape, h, attn, &[(0, 1)]).unwrap();
    let e0 = entity_embedding(&s, 0, &out).unwrap();
    let (ah, at) = (entity_attention(&s, 0, &out).unwrap(), entity_attention(&s, 1, &out).unwrap());
    let direct_c = context_embedding(&ah, &at, &out.h);
    for j in 0..4 {
        assert!((tape.value(emb).get2(0, j) - e0[j]).abs() < 1e-12);
        assert!((tape.value(c).get2(0, j) - direct_c[j]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(tokens in prop::collection::vec(0usize..7, 1..10), seed in 0u64..50) {
        let cfg = tiny_cfg(true);
        let p = EncoderParams::init(&cfg, &mut prng(seed)).unwrap();
        let out = encode(&seq(tokens.clone(), vec![]), &cfg, &p).unwrap();
        let l = tokens.len();
        prop_assert_eq!(out.a.shape(), &[l, l]);
        for i in 0..l {
            let row = out.a.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_weights_are_a_distribution(seed in 0u64..1000, l in 1usize..12) {
        let mut rng = prng(seed);
        let w = context_weights(&stochastic(&mut rng, l), &stochastic(&mut rng, l));
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
