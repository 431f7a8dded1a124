use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    rmsnorm_backward, rmsnorm_forward, Block, BlockParams, KvQuant, Precision, Rotation,
    DEFAULT_RMS_EPS,
};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::Tensor;
use crate::toytrain::config::TrainConfig;
use crate::toytrain::task::{Batch, IGNORE};

#[derive(Clone, Debug)]
struct ModelSaved {
    tokens: Vec<u32>,
    x_final: Tensor,
    normed: Tensor,
}

/// Token embedding, a stack of blocks, final RMSNorm and an untied output
/// head. Embedding and head stay in full precision.
#[derive(Clone, Debug)]
pub struct ToyModel {
    cfg: TrainConfig,
    embed: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
    head: Tensor,
    saved: Option<ModelSaved>,
}

/// Loss and scored-token accuracy of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eval {
    pub loss: f32,
    pub accuracy: f32,
}

impl ToyModel {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, h) = (cfg.vocab, cfg.hidden);
        let embed_dist = Normal::new(0.0f32, 1.0).unwrap();
        let embed = (0..v * h).map(|_| embed_dist.sample(&mut rng)).collect();
        let bcfg = cfg.block_config();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(Block::new(
                bcfg.clone(),
                BlockParams::init(&bcfg, &mut rng),
            )?);
        }
        let head_dist = Normal::new(0.0f32, 1.0 / (h as f32).sqrt()).unwrap();
        let head = (0..v * h).map(|_| head_dist.sample(&mut rng)).collect();
        Ok(ToyModel {
            cfg: cfg.clone(),
            embed: Tensor::from_parts(vec![v, h], embed),
            blocks,
            final_norm: Tensor::filled(&[h], 1.0),
            head: Tensor::from_parts(vec![v, h], head),
            saved: None,
        })
    }

    /// Rebuilds a model from tensors in [`ToyModel::param_names`] order.
    pub fn from_tensors(cfg: &TrainConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let expected = 3 + 9 * cfg.layers;
        if tensors.len() != expected {
            return Err(Error::shape(format!(
                "model needs {expected} tensors, got {}",
                tensors.len()
            )));
        }
        let (v, h) = (cfg.vocab, cfg.hidden);
        let mut it = tensors.into_iter();
        let embed = it.next().unwrap();
        let bcfg = cfg.block_config();
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let params = BlockParams::from_tensors(it.by_ref().take(9).collect())?;
            blocks.push(Block::new(bcfg.clone(), params)?);
        }
        let final_norm = it.next().unwrap();
        let head = it.next().unwrap();
        for (name, t, want) in [
            ("embed", &embed, vec![v, h]),
            ("final_norm", &final_norm, vec![h]),
            ("head", &head, vec![v, h]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(ToyModel {
            cfg: cfg.clone(),
            embed,
            blocks,
            final_norm,
            head,
            saved: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[Block] {
        &self.blocks
    }

    pub fn set_rotation(&mut self, rotation: Rotation) {
        self.cfg.rotation = rotation;
        for b in &mut self.blocks {
            b.set_rotation(rotation);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for i in 0..self.blocks.len() {
            names.extend(BlockParams::NAMES.iter().map(|n| format!("block{i}.{n}")));
        }
        names.push("final_norm".into());
        names.push("head".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Logits `[tokens, vocab]` for `tokens.len() / seq_len` sequences.
    pub fn forward(
        &mut self,
        tokens: &[u32],
        seq_len: usize,
        precision: Precision,
        kv: Option<KvQuant>,
    ) -> Result<Tensor> {
        let (v, h) = (self.cfg.vocab, self.cfg.hidden);
        if tokens.is_empty() {
            return Err(Error::EmptyTensor);
        }
        let mut x = Vec::with_capacity(tokens.len() * h);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= v {
                return Err(Error::CodeOutOfRange {
                    index: i,
                    code: t as i32,
                });
            }
            x.extend_from_slice(self.embed.row(t as usize));
        }
        let mut x = Tensor::from_parts(vec![tokens.len(), h], x);
        for b in &mut self.blocks {
            x = b.forward(&x, seq_len, precision, kv)?;
        }
        let normed = rmsnorm_forward(&x, &self.final_norm, DEFAULT_RMS_EPS)?;
        let logits = matmul_nt(normed.data(), self.head.data(), tokens.len(), h, v);
        self.saved = Some(ModelSaved {
            tokens: tokens.to_vec(),
            x_final: x,
            normed,
        });
        Ok(Tensor::from_parts(vec![tokens.len(), v], logits))
    }

    /// Mean cross-entropy over scored targets and `d loss / d logits`.
    fn cross_entropy(logits: &Tensor, targets: &[i32]) -> Result<(Eval, Tensor)> {
        let v = logits.last_dim();
        let scored = targets.iter().filter(|&&t| t != IGNORE).count();
        if scored == 0 {
            return Err(Error::EmptyTensor);
        }
        let inv = 1.0 / scored as f32;
        let mut grad = vec![0.0f32; logits.len()];
        let (mut loss, mut correct) = (0.0f64, 0usize);
        for (i, (row, &t)) in logits.data().chunks_exact(v).zip(targets).enumerate() {
            if t == IGNORE {
                continue;
            }
            if t < 0 || t as usize >= v {
                return Err(Error::CodeOutOfRange { index: i, code: t });
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&l| (l - max).exp()).sum();
            loss += (z.ln() + max - row[t as usize]) as f64;
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &l)| if l > row[best] { j } else { best });
            correct += (argmax == t as usize) as usize;
            let g = &mut grad[i * v..(i + 1) * v];
            for (gj, &l) in g.iter_mut().zip(row) {
                *gj = (l - max).exp() / z * inv;
            }
            g[t as usize] -= inv;
        }
        let eval = Eval {
            loss: (loss / scored as f64) as f32,
            accuracy: correct as f32 / scored as f32,
        };
        Ok((eval, Tensor::from_parts(logits.shape().to_vec(), grad)))
    }

    pub fn evaluate(&mut self, batch: &Batch, precision: Precision) -> Result<Eval> {
        let logits = self.forward(&batch.tokens, batch.seq_len, precision, None)?;
        Ok(Self::cross_entropy(&logits, &batch.targets)?.0)
    }

    /// Forward and backward pass; gradients come back in
    /// [`ToyModel::param_names`] order.
    pub fn loss_and_grads(
        &mut self,
        batch: &Batch,
        precision: Precision,
    ) -> Result<(Eval, Vec<Tensor>)> {
        let logits = self.forward(&batch.tokens, batch.seq_len, precision, None)?;
        let (eval, dlogits) = Self::cross_entropy(&logits, &batch.targets)?;
        let saved = self.saved.take().ok_or(Error::MissingContext)?;
        let (n, v, h) = (saved.tokens.len(), self.cfg.vocab, self.cfg.hidden);

        let d_head = matmul_tn(dlogits.data(), saved.normed.data(), n, v, h);
        let d_normed = matmul_nn(dlogits.data(), self.head.data(), n, v, h);
        let d_normed = Tensor::from_parts(vec![n, h], d_normed);
        let (mut dx, d_final) =
            rmsnorm_backward(&saved.x_final, &self.final_norm, DEFAULT_RMS_EPS, &d_normed)?;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for b in self.blocks.iter_mut().rev() {
            let (d, g) = b.backward(&dx)?;
            dx = d;
            block_grads.push(g);
        }
        block_grads.reverse();

        let mut d_embed = vec![0.0f32; v * h];
        for (&t, g) in saved.tokens.iter().zip(dx.data().chunks_exact(h)) {
            let row = &mut d_embed[t as usize * h..(t as usize + 1) * h];
            for (a, b) in row.iter_mut().zip(g) {
                *a += b;
            }
        }

        let mut grads = vec![Tensor::from_parts(vec![v, h], d_embed)];
        for g in block_grads {
            let BlockParams {
                attn_norm,
                w_qkv,
                w_o,
                o_norm,
                ffn_norm,
                w_up,
                w_gate,
                w_down,
                down_norm,
            } = g;
            grads.extend([
                attn_norm, w_qkv, w_o, o_norm, ffn_norm, w_up, w_gate, w_down, down_norm,
            ]);
        }
        grads.push(d_final);
        grads.push(Tensor::from_parts(vec![v, h], d_head));
        Ok((eval, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytrain::task::{SyntheticTask, TaskKind};

    fn tiny() -> TrainConfig {
        TrainConfig {
            layers: 1,
            hidden: 8,
            glu: 16,
            heads: 2,
            vocab: 6,
            seq_len: 4,
            batch: 2,
            steps_a8: 10,
            steps_a4: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn tensors_round_trip() {
        let m = ToyModel::init(&tiny()).unwrap();
        assert_eq!(m.param_names().len(), m.tensors().len());
        let again =
            ToyModel::from_tensors(&tiny(), m.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(m.tensors(), again.tensors());
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let cfg = tiny();
        let mut m = ToyModel::init(&cfg).unwrap();
        let task = SyntheticTask::new(TaskKind::Copy, cfg.vocab, cfg.seq_len, 0).unwrap();
        let b = task.make_batch(8, 0);
        let e = m.evaluate(&b, Precision::Full).unwrap();
        assert!((e.loss - (6f32).ln()).abs() < 1.5, "{}", e.loss);
    }

    #[test]
    fn grads_match_param_shapes() {
        let cfg = tiny();
        let mut m = ToyModel::init(&cfg).unwrap();
        let task = SyntheticTask::new(TaskKind::Copy, cfg.vocab, cfg.seq_len, 0).unwrap();
        let (_, grads) = m
            .loss_and_grads(&task.make_batch(2, 0), Precision::A8)
            .unwrap();
        for (g, p) in grads.iter().zip(m.tensors()) {
            assert_eq!(g.shape(), p.shape());
        }
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let mut m = ToyModel::init(&tiny()).unwrap();
        assert!(matches!(
            m.forward(&[0, 1, 9, 2], 4, Precision::Full, None),
            Err(Error::CodeOutOfRange { index: 2, code: 9 })
        ));
    }
}
