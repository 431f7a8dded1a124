use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::rope::Rope;
use crate::quant::{quantize_kv_unsigned, QuantConfig};
use crate::tensor::Tensor;

/// Post-RoPE low-bit quantization of the attention states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvQuant {
    /// Bits for K and V rows (3, 4 or 8).
    pub kv_bits: u32,
    /// Bits for Q rows; `None` keeps queries in full precision.
    pub q_bits: Option<u32>,
    /// Keep the first token of every sequence at 8 bits.
    pub bos_first: bool,
}

#[derive(Clone, Debug)]
struct AttnSaved {
    batch: usize,
    seq_len: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[batch, heads, seq, seq]`, zero above the diagonal.
    probs: Vec<f32>,
}

/// Causal multi-head softmax attention with RoPE on Q and K. Input is the
/// fused `[tokens, 3 · hidden]` projection laid out as `[Q | K | V]`, tokens
/// ordered sequence by sequence.
#[derive(Clone, Debug)]
pub struct Attention {
    heads: usize,
    head_dim: usize,
    rope: Rope,
    saved: Option<AttnSaved>,
}

impl Attention {
    pub fn new(hidden: usize, heads: usize, max_len: usize) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 || (hidden / heads) % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {hidden} must split into {heads} heads of even size"
            )));
        }
        let head_dim = hidden / heads;
        Ok(Attention {
            heads,
            head_dim,
            rope: Rope::new(head_dim, max_len),
            saved: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    fn split(&self, qkv: &Tensor, seq_len: usize) -> Result<(usize, Vec<f32>, Vec<f32>, Vec<f32>)> {
        let h = self.hidden();
        let (tokens, width) = qkv.as_matrix();
        if width != 3 * h {
            return Err(Error::shape(format!(
                "qkv width {width}, expected {}",
                3 * h
            )));
        }
        if seq_len == 0 || tokens % seq_len != 0 || seq_len > self.rope.max_len() {
            return Err(Error::shape(format!(
                "{tokens} tokens do not split into sequences of {seq_len}"
            )));
        }
        let mut q = Vec::with_capacity(tokens * h);
        let mut k = Vec::with_capacity(tokens * h);
        let mut v = Vec::with_capacity(tokens * h);
        for row in qkv.data().chunks_exact(3 * h) {
            q.extend_from_slice(&row[..h]);
            k.extend_from_slice(&row[h..2 * h]);
            v.extend_from_slice(&row[2 * h..]);
        }
        Ok((tokens / seq_len, q, k, v))
    }

    fn apply_rope(&self, x: &mut [f32], seq_len: usize, inverse: bool) {
        let d = self.head_dim;
        for (t, row) in x.chunks_exact_mut(self.hidden()).enumerate() {
            for head in row.chunks_exact_mut(d) {
                self.rope.rotate(head, t % seq_len, inverse);
            }
        }
    }

    /// Quantize-dequantize every head row of `x` in place.
    fn fake_quant(&self, x: &mut [f32], bits: u32, seq_len: usize, bos_first: bool) -> Result<()> {
        let d = self.head_dim;
        let rows = x.len() / d;
        let mask: Vec<bool> = (0..rows)
            .map(|r| bos_first && (r / self.heads) % seq_len == 0)
            .collect();
        let t = Tensor::from_parts(vec![rows, d], x.to_vec());
        let q = quantize_kv_unsigned(&t, bits, &mask, &QuantConfig::default())?;
        x.copy_from_slice(q.dequantize().data());
        Ok(())
    }

    pub fn forward(&mut self, qkv: &Tensor, seq_len: usize, kv: Option<KvQuant>) -> Result<Tensor> {
        let (batch, mut q, mut k, mut v) = self.split(qkv, seq_len)?;
        self.apply_rope(&mut q, seq_len, false);
        self.apply_rope(&mut k, seq_len, false);
        if let Some(kv) = kv {
            self.fake_quant(&mut k, kv.kv_bits, seq_len, kv.bos_first)?;
            self.fake_quant(&mut v, kv.kv_bits, seq_len, kv.bos_first)?;
            if let Some(qb) = kv.q_bits {
                self.fake_quant(&mut q, qb, seq_len, kv.bos_first)?;
            }
        }

        let (h, d, s) = (self.hidden(), self.head_dim, seq_len);
        let scale = 1.0 / (d as f32).sqrt();
        let mut out = vec![0.0f32; batch * s * h];
        let mut probs = vec![0.0f32; batch * self.heads * s * s];
        for b in 0..batch {
            for head in 0..self.heads {
                let col = head * d;
                let r = |i: usize| {
                    let base = (b * s + i) * h + col;
                    base..base + d
                };
                let p = &mut probs
                    [((b * self.heads + head) * s) * s..((b * self.heads + head + 1) * s) * s];
                for i in 0..s {
                    let qi = &q[r(i)];
                    let row = &mut p[i * s..(i + 1) * s];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &k[r(j)];
                        let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                        row[j] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for e in row[..=i].iter_mut() {
                        *e = (*e - max).exp();
                        z += *e;
                    }
                    for e in row[..=i].iter_mut() {
                        *e /= z;
                    }
                    let o = &mut out[r(i)];
                    for j in 0..=i {
                        let pj = row[j];
                        for (oo, vv) in o.iter_mut().zip(&v[r(j)]) {
                            *oo += pj * vv;
                        }
                    }
                }
            }
        }
        self.saved = Some(AttnSaved {
            batch,
            seq_len,
            q,
            k,
            v,
            probs,
        });
        Ok(Tensor::from_parts(vec![batch * s, h], out))
    }

    /// Gradient with respect to the fused `[Q | K | V]` input (pre-RoPE).
    pub fn backward(&mut self, d_out: &Tensor) -> Result<Tensor> {
        let saved = self.saved.take().ok_or(Error::MissingContext)?;
        let (h, d, s) = (self.hidden(), self.head_dim, saved.seq_len);
        let tokens = saved.batch * s;
        if d_out.shape() != [tokens, h] {
            return Err(Error::shape(format!(
                "upstream {:?}, expected [{tokens}, {h}]",
                d_out.shape()
            )));
        }
        let scale = 1.0 / (d as f32).sqrt();
        let (q, k, v) = (&saved.q, &saved.k, &saved.v);
        let dout = d_out.data();
        let mut dq = vec![0.0f32; tokens * h];
        let mut dk = vec![0.0f32; tokens * h];
        let mut dv = vec![0.0f32; tokens * h];
        let mut dp = vec![0.0f32; s];
        for b in 0..saved.batch {
            for head in 0..self.heads {
                let col = head * d;
                let r = |i: usize| {
                    let base = (b * s + i) * h + col;
                    base..base + d
                };
                let p = &saved.probs
                    [((b * self.heads + head) * s) * s..((b * self.heads + head + 1) * s) * s];
                for i in 0..s {
                    let pi = &p[i * s..(i + 1) * s];
                    let doi = &dout[r(i)];
                    let mut dot_pdp = 0.0;
                    for j in 0..=i {
                        for (dvv, g) in dv[r(j)].iter_mut().zip(doi) {
                            *dvv += pi[j] * g;
                        }
                        dp[j] = doi.iter().zip(&v[r(j)]).map(|(a, b)| a * b).sum();
                        dot_pdp += pi[j] * dp[j];
                    }
                    for j in 0..=i {
                        let ds = pi[j] * (dp[j] - dot_pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let (ri, rj) = (r(i), r(j));
                        for c in 0..d {
                            dq[ri.start + c] += ds * k[rj.start + c];
                            dk[rj.start + c] += ds * q[ri.start + c];
                        }
                    }
                }
            }
        }
        self.apply_rope(&mut dq, s, true);
        self.apply_rope(&mut dk, s, true);
        let mut dqkv = Vec::with_capacity(tokens * 3 * h);
        for t in 0..tokens {
            dqkv.extend_from_slice(&dq[t * h..(t + 1) * h]);
            dqkv.extend_from_slice(&dk[t * h..(t + 1) * h]);
            dqkv.extend_from_slice(&dv[t * h..(t + 1) * h]);
        }
        Ok(Tensor::from_parts(vec![tokens, 3 * h], dqkv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_returns_value() {
        let mut attn = Attention::new(4, 1, 4).unwrap();
        let qkv = Tensor::from_values(
            &[1, 12],
            &[
                0.3, 0.1, -0.2, 0.5, 1.0, 2.0, 3.0, 4.0, 0.7, -0.4, 0.25, 9.0,
            ],
        )
        .unwrap();
        let out = attn.forward(&qkv, 1, None).unwrap();
        assert_eq!(out.data(), &[0.7, -0.4, 0.25, 9.0]);
    }

    #[test]
    fn rejects_ragged_sequences() {
        let mut attn = Attention::new(4, 2, 8).unwrap();
        assert!(attn.forward(&Tensor::zeros(&[5, 12]), 2, None).is_err());
        assert!(Attention::new(6, 4, 8).is_err());
    }
}
