use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::attention::{Attention, KvQuant};
use crate::layers::linear::{BitLinear, HBitLinear};
use crate::layers::rmsnorm::{rmsnorm_backward, rmsnorm_forward, DEFAULT_RMS_EPS};
use crate::layers::{Precision, Rotation};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden: usize,
    pub glu: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// Rotation mode of the two H-BitLinear projections, `W_o` and `W_down`.
    pub rotation: Rotation,
    /// Fixed multiplier on channel 0 of the `W_o` and `W_down` inputs. `1.0`
    /// leaves the block untouched; large values inject an outlier channel.
    #[serde(default = "one")]
    pub outlier_gain: f32,
}

fn one() -> f32 {
    1.0
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("hidden", self.hidden), ("glu", self.glu)] {
            if !v.is_power_of_two() {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {v} is not a power of two"
                )));
            }
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} does not split into {} even-sized heads",
                self.hidden, self.heads
            )));
        }
        if !(self.outlier_gain.is_finite() && self.outlier_gain > 0.0) {
            return Err(Error::InvalidConfig("outlier_gain must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable tensors of one block, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attn_norm: Tensor,
    pub w_qkv: Tensor,
    pub w_o: Tensor,
    pub o_norm: Tensor,
    pub ffn_norm: Tensor,
    pub w_up: Tensor,
    pub w_gate: Tensor,
    pub w_down: Tensor,
    pub down_norm: Tensor,
}

impl BlockParams {
    pub const NAMES: [&'static str; 9] = [
        "attn_norm",
        "w_qkv",
        "w_o",
        "o_norm",
        "ffn_norm",
        "w_up",
        "w_gate",
        "w_down",
        "down_norm",
    ];

    /// Gaussian init with std `1/√fan_in` for weights; unit gains.
    pub fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let (h, g) = (cfg.hidden, cfg.glu);
        let mut w = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0f32, 1.0 / (cols as f32).sqrt()).unwrap();
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let w_qkv = w(3 * h, h);
        let w_o = w(h, h);
        let w_up = w(g, h);
        let w_gate = w(g, h);
        let w_down = w(h, g);
        BlockParams {
            attn_norm: Tensor::filled(&[h], 1.0),
            w_qkv,
            w_o,
            o_norm: Tensor::filled(&[h], 1.0),
            ffn_norm: Tensor::filled(&[h], 1.0),
            w_up,
            w_gate,
            w_down,
            down_norm: Tensor::filled(&[g], 1.0),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.w_qkv,
            &self.w_o,
            &self.o_norm,
            &self.ffn_norm,
            &self.w_up,
            &self.w_gate,
            &self.w_down,
            &self.down_norm,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.w_qkv,
            &mut self.w_o,
            &mut self.o_norm,
            &mut self.ffn_norm,
            &mut self.w_up,
            &mut self.w_gate,
            &mut self.w_down,
            &mut self.down_norm,
        ]
    }

    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 9 {
            return Err(Error::shape(format!(
                "block needs 9 tensors, got {}",
                tensors.len()
            )));
        }
        let mut next = || tensors.remove(0);
        Ok(BlockParams {
            attn_norm: next(),
            w_qkv: next(),
            w_o: next(),
            o_norm: next(),
            ffn_norm: next(),
            w_up: next(),
            w_gate: next(),
            w_down: next(),
            down_norm: next(),
        })
    }

    fn check(&self, cfg: &BlockConfig) -> Result<()> {
        let (h, g) = (cfg.hidden, cfg.glu);
        let expected: [&[usize]; 9] = [
            &[h],
            &[3 * h, h],
            &[h, h],
            &[h],
            &[h],
            &[g, h],
            &[g, h],
            &[h, g],
            &[g],
        ];
        for ((name, t), want) in Self::NAMES.iter().zip(self.tensors()).zip(expected) {
            if t.shape() != want {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Pre-quantization inputs of each projection from the last forward.
#[derive(Clone, Debug)]
pub struct BlockCaptures<'a> {
    /// Input to `W_qkv` (output of the attention pre-norm).
    pub qkv_input: &'a Tensor,
    /// Input to `W_up` and `W_gate`.
    pub up_gate_input: &'a Tensor,
    /// `W_o` input after its RMSNorm, before and after the Hadamard transform.
    pub o_normed: &'a Tensor,
    pub o_rotated: &'a Tensor,
    /// `W_down` input after its RMSNorm, before and after the Hadamard transform.
    pub down_normed: &'a Tensor,
    pub down_rotated: &'a Tensor,
}

#[derive(Clone, Debug)]
struct BlockSaved {
    x: Tensor,
    x1: Tensor,
    h1: Tensor,
    h2: Tensor,
    up: Tensor,
    gate: Tensor,
}

/// Pre-norm transformer block without biases:
///
/// ```text
/// x1 = x  + H-BitLinear_o(attention(RoPE, BitLinear_qkv(RMSNorm(x))))
/// y  = x1 + H-BitLinear_down(silu(BitLinear_gate(h)) * BitLinear_up(h)),  h = RMSNorm(x1)
/// ```
#[derive(Clone, Debug)]
pub struct Block {
    cfg: BlockConfig,
    attn_norm: Tensor,
    ffn_norm: Tensor,
    qkv: BitLinear,
    attn: Attention,
    o: HBitLinear,
    up: BitLinear,
    gate: BitLinear,
    down: HBitLinear,
    saved: Option<BlockSaved>,
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

impl Block {
    pub fn new(cfg: BlockConfig, params: BlockParams) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg)?;
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
        } = params;
        Ok(Block {
            attn: Attention::new(cfg.hidden, cfg.heads, cfg.max_seq_len)?,
            o: HBitLinear::new(w_o, o_norm, cfg.rotation)?,
            down: HBitLinear::new(w_down, down_norm, cfg.rotation)?,
            qkv: BitLinear::new(w_qkv),
            up: BitLinear::new(w_up),
            gate: BitLinear::new(w_gate),
            attn_norm,
            ffn_norm,
            cfg,
            saved: None,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn set_rotation(&mut self, rotation: Rotation) {
        self.cfg.rotation = rotation;
        self.o.rotation = rotation;
        self.down.rotation = rotation;
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.qkv.weight,
            &self.o.weight,
            &self.o.gain,
            &self.ffn_norm,
            &self.up.weight,
            &self.gate.weight,
            &self.down.weight,
            &self.down.gain,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.qkv.weight,
            &mut self.o.weight,
            &mut self.o.gain,
            &mut self.ffn_norm,
            &mut self.up.weight,
            &mut self.gate.weight,
            &mut self.down.weight,
            &mut self.down.gain,
        ]
    }

    pub fn params(&self) -> BlockParams {
        BlockParams::from_tensors(self.tensors().into_iter().cloned().collect())
            .expect("nine tensors")
    }

    fn inject(&self, x: &mut Tensor) {
        let g = self.cfg.outlier_gain;
        if g != 1.0 {
            let w = x.last_dim();
            for row in x.data_mut().chunks_exact_mut(w) {
                row[0] *= g;
            }
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor,
        seq_len: usize,
        precision: Precision,
        kv: Option<KvQuant>,
    ) -> Result<Tensor> {
        if x.last_dim() != self.cfg.hidden {
            return Err(Error::shape(format!(
                "block input width {}, expected {}",
                x.last_dim(),
                self.cfg.hidden
            )));
        }
        let h1 = rmsnorm_forward(x, &self.attn_norm, DEFAULT_RMS_EPS)?;
        let qkv = self.qkv.forward(&h1, precision)?;
        let mut att = self.attn.forward(&qkv, seq_len, kv)?;
        self.inject(&mut att);
        let o = self.o.forward(&att, precision)?;
        let x1 = add(x, &o);

        let h2 = rmsnorm_forward(&x1, &self.ffn_norm, DEFAULT_RMS_EPS)?;
        let up = self.up.forward(&h2, precision)?;
        let gate = self.gate.forward(&h2, precision)?;
        let act_data = up
            .data()
            .iter()
            .zip(gate.data())
            .map(|(&u, &g)| g * sigmoid(g) * u)
            .collect();
        let mut act = Tensor::from_parts(up.shape().to_vec(), act_data);
        self.inject(&mut act);
        let down = self.down.forward(&act, precision)?;
        let y = add(&x1, &down);

        self.saved = Some(BlockSaved {
            x: x.clone(),
            x1,
            h1,
            h2,
            up,
            gate,
        });
        Ok(y)
    }

    pub fn captures(&self) -> Option<BlockCaptures<'_>> {
        let saved = self.saved.as_ref()?;
        let (o_normed, o_rotated) = self.o.last_inputs()?;
        let (down_normed, down_rotated) = self.down.last_inputs()?;
        Some(BlockCaptures {
            qkv_input: &saved.h1,
            up_gate_input: &saved.h2,
            o_normed,
            o_rotated,
            down_normed,
            down_rotated,
        })
    }

    /// Returns `dx` and the parameter gradients in [`BlockParams::NAMES`] order.
    pub fn backward(&mut self, dy: &Tensor) -> Result<(Tensor, BlockParams)> {
        let saved = self.saved.take().ok_or(Error::MissingContext)?;
        let g = self.cfg.outlier_gain;

        // FFN half
        let d_down = self.down.backward(dy)?;
        let mut d_act = d_down.dx;
        if g != 1.0 {
            let w = d_act.last_dim();
            d_act.data_mut().chunks_exact_mut(w).for_each(|r| r[0] *= g);
        }
        let mut d_up = Vec::with_capacity(d_act.len());
        let mut d_gate = Vec::with_capacity(d_act.len());
        for ((&da, &u), &z) in d_act
            .data()
            .iter()
            .zip(saved.up.data())
            .zip(saved.gate.data())
        {
            let s = sigmoid(z);
            d_up.push(da * z * s);
            d_gate.push(da * u * s * (1.0 + z * (1.0 - s)));
        }
        let shape = saved.up.shape().to_vec();
        let g_up = self.up.backward(&Tensor::from_parts(shape.clone(), d_up))?;
        let g_gate = self.gate.backward(&Tensor::from_parts(shape, d_gate))?;
        let dh2 = add(&g_up.dx, &g_gate.dx);
        let (dx1_norm, d_ffn_norm) =
            rmsnorm_backward(&saved.x1, &self.ffn_norm, DEFAULT_RMS_EPS, &dh2)?;
        let dx1 = add(dy, &dx1_norm);

        // attention half
        let d_o = self.o.backward(&dx1)?;
        let mut d_att = d_o.dx;
        if g != 1.0 {
            let w = d_att.last_dim();
            d_att.data_mut().chunks_exact_mut(w).for_each(|r| r[0] *= g);
        }
        let d_qkv = self.attn.backward(&d_att)?;
        let g_qkv = self.qkv.backward(&d_qkv)?;
        let (dx_norm, d_attn_norm) =
            rmsnorm_backward(&saved.x, &self.attn_norm, DEFAULT_RMS_EPS, &g_qkv.dx)?;
        let dx = add(&dx1, &dx_norm);

        Ok((
            dx,
            BlockParams {
                attn_norm: d_attn_norm,
                w_qkv: g_qkv.dweight,
                w_o: d_o.dweight,
                o_norm: d_o.dgain,
                ffn_norm: d_ffn_norm,
                w_up: g_up.dweight,
                w_gate: g_gate.dweight,
                w_down: d_down.dweight,
                down_norm: d_down.dgain,
            },
        ))
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}
