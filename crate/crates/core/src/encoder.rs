//! Compact pre-LN transformer encoder over marked token sequences, with
//! entity pooling and attention-based pair context.

use serde::{Deserialize, Serialize};

use crate::corpus::MarkedSequence;
use crate::diffmath::{lse, xavier_uniform, Prng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::param_group;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Learned positional embeddings; off only for ablation tests.
    #[serde(default = "yes")]
    pub use_positions: bool,
}

fn yes() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 0,
            max_len: 256,
            seed: 0,
            use_positions: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

param_group! {
    /// One pre-LN transformer block.
    LayerParams {
        ln1_g => "ln1.g",
        ln1_b => "ln1.b",
        qkv_w => "qkv.w",
        qkv_b => "qkv.b",
        out_w => "out.w",
        out_b => "out.b",
        ln2_g => "ln2.g",
        ln2_b => "ln2.b",
        ff1_w => "ff1.w",
        ff1_b => "ff1.b",
        ff2_w => "ff2.w",
        ff2_b => "ff2.b",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f_g: T,
    pub ln_f_b: T,
}

impl<T> EncoderParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}tok_emb"), &self.tok_emb);
        f(format!("{prefix}pos_emb"), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
        f(format!("{prefix}ln_f.g"), &self.ln_f_g);
        f(format!("{prefix}ln_f.b"), &self.ln_f_b);
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &T) -> Result<U, E>,
    ) -> Result<EncoderParams<U>, E> {
        let tok_emb = f(format!("{prefix}tok_emb"), &self.tok_emb)?;
        let pos_emb = f(format!("{prefix}pos_emb"), &self.pos_emb)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("{prefix}layer{i}."), f))
            .collect::<Result<_, E>>()?;
        Ok(EncoderParams {
            tok_emb,
            pos_emb,
            layers,
            ln_f_g: f(format!("{prefix}ln_f.g"), &self.ln_f_g)?,
            ln_f_b: f(format!("{prefix}ln_f.b"), &self.ln_f_b)?,
        })
    }
}

/// Amplitude of the sinusoidal table that seeds the learned positions.
pub const POS_INIT_SCALE: f64 = 0.4;

/// `[len, d]` table with `sin` in even columns and `cos` in odd ones.
pub fn sinusoidal(len: usize, d: usize, scale: f64) -> Tensor {
    let mut v = vec![0.0; len * d];
    for p in 0..len {
        for c in 0..d {
            let w = p as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
            v[p * d + c] = scale * if c % 2 == 0 { w.sin() } else { w.cos() };
        }
    }
    Tensor::new(vec![len, d], v).expect("shape matches data")
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        // Embedding tables are scaled as if square so their magnitude does
        // not shrink with vocabulary size.
        let tok_emb = xavier_uniform(rng, &[cfg.vocab_size, d], d, d);
        let pos_emb = sinusoidal(cfg.max_len, d, POS_INIT_SCALE);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: xavier_uniform(rng, &[d, 3 * d], d, 3 * d),
                qkv_b: Tensor::zeros(&[3 * d]),
                out_w: xavier_uniform(rng, &[d, d], d, d),
                out_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                ff1_w: xavier_uniform(rng, &[d, f], d, f),
                ff1_b: Tensor::zeros(&[f]),
                ff2_w: xavier_uniform(rng, &[f, d], f, d),
                ff2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(EncoderParams {
            tok_emb,
            pos_emb,
            layers,
            ln_f_g: Tensor::full(&[d], 1.0),
            ln_f_b: Tensor::zeros(&[d]),
        })
    }
}

/// Token embeddings `h` (`L × d`) and last-layer head-mean attention `a` (`L × L`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Tensor,
    pub a: Tensor,
}

/// Runs the encoder on the tape, returning `(H, A)`.
pub fn encode_tape(tape: &mut Tape, cfg: &EncoderConfig, p: &EncoderParams<Var>, tokens: &[usize]) -> Result<(Var, Var)> {
    let l = tokens.len();
    if l == 0 {
        return Err(Error::Config("cannot encode an empty sequence".into()));
    }
    if l > cfg.max_len {
        return Err(Error::Config(format!("sequence of {l} tokens exceeds max_len {}", cfg.max_len)));
    }
    let mut x = tape.embedding_gather(p.tok_emb, tokens)?;
    if cfg.use_positions {
        let positions: Vec<usize> = (0..l).collect();
        let pe = tape.embedding_gather(p.pos_emb, &positions)?;
        x = tape.add(x, pe)?;
    }
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut last_attn = Vec::with_capacity(cfg.n_heads);
    for (li, layer) in p.layers.iter().enumerate() {
        let h = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, LN_EPS)?;
        let qkv = tape.matmul(h, layer.qkv_w)?;
        let qkv = tape.add(qkv, layer.qkv_b)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let q = tape.slice(qkv, 1, hi * dh, (hi + 1) * dh)?;
            let k = tape.slice(qkv, 1, d + hi * dh, d + (hi + 1) * dh)?;
            let v = tape.slice(qkv, 1, 2 * d + hi * dh, 2 * d + (hi + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, v)?);
            if li + 1 == p.layers.len() {
                last_attn.push(attn);
            }
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let proj = tape.matmul(cat, layer.out_w)?;
        let proj = tape.add(proj, layer.out_b)?;
        x = tape.add(x, proj)?;
        let h2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, LN_EPS)?;
        let f = tape.matmul(h2, layer.ff1_w)?;
        let f = tape.add(f, layer.ff1_b)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, layer.ff2_w)?;
        let f = tape.add(f, layer.ff2_b)?;
        x = tape.add(x, f)?;
    }
    let h = tape.layer_norm(x, p.ln_f_g, p.ln_f_b, LN_EPS)?;
    let mut a = last_attn[0];
    for &other in &last_attn[1..] {
        a = tape.add(a, other)?;
    }
    let a = tape.scale(a, 1.0 / cfg.n_heads as f64)?;
    Ok((h, a))
}

/// Binds frozen parameters as tape constants.
pub fn constant_params(tape: &mut Tape, p: &EncoderParams) -> EncoderParams<Var> {
    p.try_map::<Var, std::convert::Infallible>("", &mut |_, t| Ok(tape.constant(t.clone())))
        .unwrap_or_else(|e| match e {})
}

pub fn encode(seq: &MarkedSequence, cfg: &EncoderConfig, params: &EncoderParams) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let (h, a) = encode_tape(&mut tape, cfg, &vars, &seq.tokens)?;
    Ok(EncoderOutput { h: tape.value(h).clone(), a: tape.value(a).clone() })
}

fn mention_rows(seq: &MarkedSequence, entity: usize) -> Result<&[usize]> {
    match seq.mention_start_pos.get(entity) {
        Some(rows) if !rows.is_empty() => Ok(rows),
        Some(_) => Err(Error::Config(format!("entity {entity} has no mentions"))),
        None => Err(Error::Config(format!("entity {entity} out of range"))),
    }
}

/// Coordinatewise logsumexp over the entity's mention-marker rows of `H`.
pub fn entity_embedding(seq: &MarkedSequence, entity: usize, out: &EncoderOutput) -> Result<Vec<f64>> {
    let rows = mention_rows(seq, entity)?;
    let d = out.h.dims2().1;
    Ok((0..d).map(|j| lse(rows.iter().map(|&r| out.h.get2(r, j)))).collect())
}

/// Mean of the attention rows at the entity's mention markers.
pub fn entity_attention(seq: &MarkedSequence, entity: usize, out: &EncoderOutput) -> Result<Vec<f64>> {
    let rows = mention_rows(seq, entity)?;
    let l = out.a.dims2().1;
    let mut acc = vec![0.0; l];
    for &r in rows {
        for (a, v) in acc.iter_mut().zip(out.a.row(r)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    Ok(acc)
}

/// `(A_h ∘ A_t) / (A_hᵀ A_t)`, uniform when the overlap is zero.
pub fn context_weights(a_h: &[f64], a_t: &[f64]) -> Vec<f64> {
    let prod: Vec<f64> = a_h.iter().zip(a_t).map(|(x, y)| x * y).collect();
    let z: f64 = prod.iter().sum();
    if z == 0.0 {
        log::warn!("zero attention overlap; using uniform context weights");
        return vec![1.0 / prod.len() as f64; prod.len()];
    }
    prod.into_iter().map(|v| v / z).collect()
}

/// `c = Hᵀ w` with `w` from [`context_weights`].
pub fn context_embedding(a_h: &[f64], a_t: &[f64], h: &Tensor) -> Vec<f64> {
    let w = context_weights(a_h, a_t);
    let (l, d) = h.dims2();
    let mut c = vec![0.0; d];
    for (i, wi) in w.iter().enumerate().take(l) {
        for (cj, hv) in c.iter_mut().zip(h.row(i)) {
            *cj += wi * hv;
        }
    }
    c
}

/// Entity embeddings `[E, d]` and entity attentions `[E, L]` on the tape.
pub fn entity_tape(tape: &mut Tape, h: Var, a: Var, seq: &MarkedSequence) -> Result<(Var, Var)> {
    let mut embs = Vec::with_capacity(seq.mention_start_pos.len());
    let mut attns = Vec::with_capacity(seq.mention_start_pos.len());
    for e in 0..seq.mention_start_pos.len() {
        let rows = mention_rows(seq, e)?;
        let hm = tape.embedding_gather(h, rows)?;
        embs.push(tape.logsumexp(hm, 0)?);
        let am = tape.embedding_gather(a, rows)?;
        attns.push(tape.mean_axis(am, 0)?);
    }
    Ok((tape.stack(&embs)?, tape.stack(&attns)?))
}

/// Pair context embeddings `[P, d]` for `(head, tail)` pairs.
pub fn context_tape(tape: &mut Tape, h: Var, ent_attn: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ah = tape.embedding_gather(ent_attn, &heads)?;
    let at = tape.embedding_gather(ent_attn, &tails)?;
    let prod = tape.mul(ah, at)?;
    let w = tape.row_normalize(prod)?;
    tape.matmul(w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::prng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { n_layers: 1, n_heads: 2, d_model: 4, d_ff: 6, vocab_size: 5, max_len: 8, seed: 0, use_positions: true }
    }

    fn seq(tokens: Vec<usize>, starts: Vec<Vec<usize>>) -> MarkedSequence {
        let n = tokens.len();
        MarkedSequence { tokens, mention_start_pos: starts, sent_spans: vec![0..n] }
    }

    #[test]
    fn singleton_attention_is_one() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, &mut prng(1)).unwrap();
        let out = encode(&seq(vec![3], vec![]), &cfg, &p).unwrap();
        assert_eq!(out.a.data(), &[1.0]);
        assert_eq!(out.h.shape(), &[1, 4]);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig { n_heads: 3, ..tiny_cfg() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, &mut prng(1)).unwrap();
        assert!(encode(&seq(vec![3; 9], vec![]), &cfg, &p).is_err());
    }

    #[test]
    fn unknown_token_is_an_error() {
        let cfg = tiny_cfg();
        let p = EncoderParams::init(&cfg, &mut prng(1)).unwrap();
        assert!(matches!(encode(&seq(vec![3, 5], vec![]), &cfg, &p), Err(Error::UnknownToken { id: 5, .. })));
    }

    #[test]
    fn two_mention_attention_is_row_mean() {
        let out = EncoderOutput {
            h: Tensor::zeros(&[3, 2]),
            a: Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8], vec![0.6, 0.2, 0.2]]).unwrap(),
        };
        let s = seq(vec![2, 2, 2], vec![vec![0, 2]]);
        let ae = entity_attention(&s, 0, &out).unwrap();
        for (x, y) in ae.iter().zip([0.4, 0.25, 0.35]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_attention_gives_column_mean() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 6.0]]).unwrap();
        let u = vec![1.0 / 3.0; 3];
        let c = context_embedding(&u, &u, &h);
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_head_picks_row() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 6.0]]).unwrap();
        let c = context_embedding(&[0.0, 1.0, 0.0], &[0.2, 0.3, 0.5], &h);
        assert_eq!(c, vec![3.0, -2.0]);
    }

    #[test]
    fn entity_without_mentions_is_an_error() {
        let out = EncoderOutput { h: Tensor::zeros(&[1, 2]), a: Tensor::full(&[1, 1], 1.0) };
        assert!(entity_embedding(&seq(vec![2], vec![vec![]]), 0, &out).is_err());
    }
}
