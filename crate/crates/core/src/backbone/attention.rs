use rand::Rng;

use super::{dropout, ForwardCtx};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Bidirectional grouped-query self-attention with rotary positions. Each
/// key/value head serves `q_heads / kv_heads` consecutive query heads.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

impl Attention {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        q_heads: usize,
        kv_heads: usize,
        rope_base: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hd = d_model / q_heads;
        Attention {
            wq: store.add(format!("{prefix}.wq"), xavier_uniform(rng, d_model, q_heads * hd)),
            wk: store.add(format!("{prefix}.wk"), xavier_uniform(rng, d_model, kv_heads * hd)),
            wv: store.add(format!("{prefix}.wv"), xavier_uniform(rng, d_model, kv_heads * hd)),
            wo: store.add(format!("{prefix}.wo"), xavier_uniform(rng, q_heads * hd, d_model)),
            q_heads,
            kv_heads,
            head_dim: hd,
            rope_base,
        }
    }

    fn heads(&self, g: &mut Graph, x: Var, w: Var, heads: usize) -> Result<Var> {
        let (bt, m) = (g.shape(x)[0], g.shape(x)[1]);
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, &[bt, m, heads, self.head_dim])?;
        g.permute(y, &[0, 2, 1, 3])
    }

    /// `x`: `[Bt, M, d]`. `key_valid` marks real tokens; masked keys get zero
    /// weight. Returns the output `[Bt, M, d]` and the attention weights
    /// `[Bt, q_heads, M, M]` (before dropout).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        key_valid: Option<&[bool]>,
        attn_dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let (bt, m) = (g.shape(x)[0], g.shape(x)[1]);
        let positions: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let q = self.heads(g, x, p.var(self.wq), self.q_heads)?;
        let k = self.heads(g, x, p.var(self.wk), self.kv_heads)?;
        let v = self.heads(g, x, p.var(self.wv), self.kv_heads)?;
        let q = g.rope(q, &positions, self.rope_base)?;
        let mut k = g.rope(k, &positions, self.rope_base)?;
        let mut v = v;
        if self.kv_heads != self.q_heads {
            let group = self.q_heads / self.kv_heads;
            let map: Vec<usize> = (0..self.q_heads).map(|h| h / group).collect();
            k = g.index_select(k, 1, &map)?;
            v = g.index_select(v, 1, &map)?;
        }
        let kt = g.transpose(k, 2, 3)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        if let Some(valid) = key_valid {
            if valid.len() != m {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![m],
                    rhs: vec![valid.len()],
                });
            }
            if valid.iter().any(|v| !v) {
                let mask: Vec<bool> = (0..bt * self.q_heads * m * m).map(|i| !valid[i % m]).collect();
                scores = g.mask_fill(scores, &mask, f64::NEG_INFINITY)?;
            }
        }
        let weights = g.softmax(scores, 3)?;
        let dropped = dropout(g, weights, attn_dropout, ctx)?;
        let out = g.matmul(dropped, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[bt, m, self.q_heads * self.head_dim])?;
        Ok((g.matmul(out, p.var(self.wo))?, weights))
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let r = q.rank();
    if r < 2 || k.shape() != v.shape() || k.rank() != r || q.shape()[..r - 2] != k.shape()[..r - 2] || q.shape()[r - 1] != k.shape()[r - 1] {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (mq, mk, hd) = (q.shape()[r - 2], k.shape()[r - 2], q.shape()[r - 1]);
    Ok((q.numel() / (mq * hd), mq, mk, hd))
}

/// Reference scaled dot-product attention on plain tensors `[.., M, hd]`.
pub fn attention_dense(q: &Tensor, k: &Tensor, v: &Tensor, key_valid: Option<&[bool]>) -> Result<Tensor> {
    let (batch, mq, mk, hd) = check_qkv(q, k, v)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.numel()];
    let mut s = vec![0.0; mk];
    for b in 0..batch {
        let (qb, kb, vb) = (&q.data()[b * mq * hd..], &k.data()[b * mk * hd..], &v.data()[b * mk * hd..]);
        for i in 0..mq {
            let mut max = f64::NEG_INFINITY;
            for j in 0..mk {
                s[j] = if key_valid.is_some_and(|m| !m[j]) {
                    f64::NEG_INFINITY
                } else {
                    (0..hd).map(|c| qb[i * hd + c] * kb[j * hd + c]).sum::<f64>() * scale
                };
                max = max.max(s[j]);
            }
            let mut sum = 0.0;
            for sj in s.iter_mut() {
                *sj = (*sj - max).exp();
                sum += *sj;
            }
            let o = &mut out[b * mq * hd + i * hd..b * mq * hd + (i + 1) * hd];
            for j in 0..mk {
                let w = s[j] / sum;
                for c in 0..hd {
                    o[c] += w * vb[j * hd + c];
                }
            }
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}

/// Streaming-softmax attention over key tiles of width `tile`: a running
/// maximum and normalizer are carried across tiles so the full score row is
/// never materialized.
pub fn attention_tiled(q: &Tensor, k: &Tensor, v: &Tensor, key_valid: Option<&[bool]>, tile: usize) -> Result<Tensor> {
    let (batch, mq, mk, hd) = check_qkv(q, k, v)?;
    if tile == 0 {
        return Err(Error::config("tile", "must be >= 1"));
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; q.numel()];
    let mut s = vec![0.0; tile];
    for b in 0..batch {
        let (qb, kb, vb) = (&q.data()[b * mq * hd..], &k.data()[b * mk * hd..], &v.data()[b * mk * hd..]);
        for i in 0..mq {
            let o = &mut out[b * mq * hd + i * hd..b * mq * hd + (i + 1) * hd];
            let (mut run_max, mut run_sum) = (f64::NEG_INFINITY, 0.0);
            for t0 in (0..mk).step_by(tile) {
                let t1 = (t0 + tile).min(mk);
                let mut tile_max = f64::NEG_INFINITY;
                for j in t0..t1 {
                    s[j - t0] = if key_valid.is_some_and(|m| !m[j]) {
                        f64::NEG_INFINITY
                    } else {
                        (0..hd).map(|c| qb[i * hd + c] * kb[j * hd + c]).sum::<f64>() * scale
                    };
                    tile_max = tile_max.max(s[j - t0]);
                }
                let new_max = run_max.max(tile_max);
                if new_max == f64::NEG_INFINITY {
                    continue;
                }
                let correction = (run_max - new_max).exp();
                run_sum *= correction;
                o.iter_mut().for_each(|x| *x *= correction);
                for j in t0..t1 {
                    let e = (s[j - t0] - new_max).exp();
                    run_sum += e;
                    for c in 0..hd {
                        o[c] += e * vb[j * hd + c];
                    }
                }
                run_max = new_max;
            }
            o.iter_mut().for_each(|x| *x /= run_sum);
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn layer(d: usize, hq: usize, hkv: usize, seed: u64) -> (ParamStore, Attention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = Attention::init(&mut store, "attn", d, hq, hkv, 10_000.0, &mut rng);
        (store, a)
    }

    #[test]
    fn tiled_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (m, tile) in [(13, 4), (8, 8), (9, 1), (5, 16)] {
            let q = rand_t(&mut rng, vec![3, m, 4]);
            let k = rand_t(&mut rng, vec![3, m, 4]);
            let v = rand_t(&mut rng, vec![3, m, 4]);
            let mut valid = vec![true; m];
            valid[m - 1] = m % 2 == 0;
            let a = attention_dense(&q, &k, &v, Some(&valid)).unwrap();
            let b = attention_tiled(&q, &k, &v, Some(&valid), tile).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, a) = layer(4, 2, 1, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 0.1]).unwrap());
        let (y, w) = a.forward(&mut g, &p, x, None, 0.0, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0]);
        // weight 1 on the only key: output = x·Wv (each query head reads its kv head) · Wo
        let xv = g.matmul(x, p.var(a.wv)).unwrap();
        let xv = g.concat(&[xv, xv], 2).unwrap();
        let expect = g.matmul(xv, p.var(a.wo)).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn rows_sum_to_one_and_masked_keys_get_zero() {
        let (store, a) = layer(8, 4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(rand_t(&mut rng, vec![2, 6, 8]));
        let valid = [true, true, false, true, true, false];
        let (_, w) = a.forward(&mut g, &p, x, Some(&valid), 0.0, &mut ForwardCtx::eval()).unwrap();
        for row in g.value(w).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!((row[2], row[5]), (0.0, 0.0));
        }
    }

    #[test]
    fn graph_path_matches_dense_kernel() {
        let (store, a) = layer(8, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = rand_t(&mut rng, vec![1, 7, 8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(xt);
        let (y, _) = a.forward(&mut g, &p, x, None, 0.0, &mut ForwardCtx::eval()).unwrap();

        let pos: Vec<f64> = (0..7).map(f64::from).collect();
        let q = a.heads(&mut g, x, p.var(a.wq), 4).unwrap();
        let q = g.rope(q, &pos, 10_000.0).unwrap();
        let k = a.heads(&mut g, x, p.var(a.wk), 2).unwrap();
        let k = g.rope(k, &pos, 10_000.0).unwrap();
        let v = a.heads(&mut g, x, p.var(a.wv), 2).unwrap();
        let k = g.index_select(k, 1, &[0, 0, 1, 1]).unwrap();
        let v = g.index_select(v, 1, &[0, 0, 1, 1]).unwrap();
        let o = attention_tiled(g.value(q), g.value(k), g.value(v), None, 3).unwrap();
        let o = g.constant(o);
        let o = g.permute(o, &[0, 2, 1, 3]).unwrap();
        let o = g.reshape(o, &[1, 7, 8]).unwrap();
        let o = g.matmul(o, p.var(a.wo)).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(o)) < 1e-9);
    }
}
