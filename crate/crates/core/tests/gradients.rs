//! Central finite differences (h = 1e-3) against the analytic backward
//! passes, all at full precision. Errors are measured relative to the
//! largest analytic gradient entry.

use hbl_core::hadamard::{hadamard_backward, hadamard_forward, HadamardPlan};
use hbl_core::layers::{
    rmsnorm_backward, rmsnorm_forward, Attention, Block, BlockConfig, BlockParams, HBitLinear,
    Precision, Rotation, DEFAULT_RMS_EPS,
};
use hbl_core::toytrain::{SyntheticTask, TaskKind, ToyModel, TrainConfig};
use hbl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )
    .unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

fn with_entry(t: &Tensor, i: usize, delta: f32) -> Tensor {
    let mut v = t.data().to_vec();
    v[i] += delta;
    Tensor::from_vec(t.shape(), v).unwrap()
}

fn inf_norm(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0f64, |m, g| m.max(g.abs() as f64))
}

/// Max |fd - analytic| over every `stride`-th entry of `x`.
fn fd_abs_error(
    x: &Tensor,
    analytic: &Tensor,
    stride: usize,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in (0..x.len()).step_by(stride) {
        let fd = (loss(&with_entry(x, i, H)) - loss(&with_entry(x, i, -H))) / (2.0 * H as f64);
        worst = worst.max((fd - analytic.data()[i] as f64).abs());
    }
    worst
}

/// [`fd_abs_error`] over the largest analytic entry.
fn fd_error(x: &Tensor, analytic: &Tensor, stride: usize, loss: impl FnMut(&Tensor) -> f64) -> f64 {
    fd_abs_error(x, analytic, stride, loss) / inf_norm(analytic).max(1e-12)
}

fn assert_fd(what: &str, err: f64) {
    assert!(err <= TOL, "{what}: relative error {err:e}");
}

#[test]
fn rmsnorm_gradients() {
    for seed in SEEDS {
        let x = randn(seed, &[3, 8]);
        let gain = randn(seed + 100, &[8]);
        let r = randn(seed + 200, &[3, 8]);
        let (dx, dg) = rmsnorm_backward(&x, &gain, DEFAULT_RMS_EPS, &r).unwrap();
        let e1 = fd_error(&x, &dx, 1, |x| {
            dot(&rmsnorm_forward(x, &gain, DEFAULT_RMS_EPS).unwrap(), &r)
        });
        let e2 = fd_error(&gain, &dg, 1, |g| {
            dot(&rmsnorm_forward(&x, g, DEFAULT_RMS_EPS).unwrap(), &r)
        });
        assert_fd("rmsnorm dx", e1);
        assert_fd("rmsnorm dgain", e2);
    }
}

#[test]
fn rmsnorm_examples() {
    let y = rmsnorm_forward(
        &Tensor::filled(&[1, 4], 1.0),
        &Tensor::filled(&[4], 1.0),
        0.0,
    )
    .unwrap();
    assert_eq!(y.data(), &[1.0; 4]);
    let y = rmsnorm_forward(
        &Tensor::filled(&[1, 2], 2.0),
        &Tensor::filled(&[2], 1.0),
        0.0,
    )
    .unwrap();
    assert_eq!(y.data(), &[1.0, 1.0]);
}

#[test]
fn hadamard_segment_gradients() {
    for seed in SEEDS {
        let n = 16;
        let plan = HadamardPlan::new(n).unwrap();
        let x = randn(seed, &[2, n]);
        let r = randn(seed + 1, &[2, n]);
        let g = hadamard_backward(&r, &plan).unwrap();
        assert_fd(
            "hadamard",
            fd_error(&x, &g, 1, |x| dot(&hadamard_forward(x, &plan).unwrap(), &r)),
        );
        let (a, b) = (r.l2_norm(), g.l2_norm());
        assert!((a - b).abs() <= 1e-5 * a, "gradient norm {a} vs {b}");
    }
}

#[test]
fn hbitlinear_gradients_full_precision() {
    for rotation in [
        Rotation::Activation,
        Rotation::WeightActivation,
        Rotation::None,
    ] {
        for seed in SEEDS {
            let w = randn(seed, &[8, 16]).map(|v| v * 0.25);
            let gain = randn(seed + 10, &[16]).map(|v| 1.0 + 0.3 * v);
            let x = randn(seed + 20, &[3, 16]);
            let r = randn(seed + 30, &[3, 8]);
            let mut layer = HBitLinear::new(w.clone(), gain.clone(), rotation).unwrap();
            layer.forward(&x, Precision::Full).unwrap();
            let g = layer.backward(&r).unwrap();
            let f = |w: &Tensor, gain: &Tensor, x: &Tensor| {
                let mut l = HBitLinear::new(w.clone(), gain.clone(), rotation).unwrap();
                dot(&l.forward(x, Precision::Full).unwrap(), &r)
            };
            assert_fd("hbitlinear dx", fd_error(&x, &g.dx, 1, |x| f(&w, &gain, x)));
            assert_fd(
                "hbitlinear dw",
                fd_error(&w, &g.dweight, 1, |w| f(w, &gain, &x)),
            );
            assert_fd(
                "hbitlinear dgain",
                fd_error(&gain, &g.dgain, 1, |gn| f(&w, gn, &x)),
            );
        }
    }
}

#[test]
fn attention_gradients() {
    for seed in SEEDS {
        let (hidden, heads, seq) = (8, 2, 4);
        let qkv = randn(seed, &[2 * seq, 3 * hidden]);
        let r = randn(seed + 1, &[2 * seq, hidden]);
        let mut attn = Attention::new(hidden, heads, seq).unwrap();
        attn.forward(&qkv, seq, None).unwrap();
        let g = attn.backward(&r).unwrap();
        let err = fd_error(&qkv, &g, 1, |q| {
            let mut a = Attention::new(hidden, heads, seq).unwrap();
            dot(&a.forward(q, seq, None).unwrap(), &r)
        });
        assert_fd("attention", err);
    }
}

fn block_cfg(rotation: Rotation, outlier_gain: f32) -> BlockConfig {
    BlockConfig {
        hidden: 8,
        glu: 16,
        heads: 2,
        max_seq_len: 4,
        rotation,
        outlier_gain,
    }
}

#[test]
fn block_gradients() {
    for (rotation, gain) in [
        (Rotation::Activation, 1.0),
        (Rotation::WeightActivation, 1.0),
        (Rotation::None, 5.0),
    ] {
        for seed in SEEDS {
            let cfg = block_cfg(rotation, gain);
            let params = BlockParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let x = randn(seed + 1, &[8, 8]);
            let r = randn(seed + 2, &[8, 8]);
            let mut block = Block::new(cfg.clone(), params.clone()).unwrap();
            block.forward(&x, 4, Precision::Full, None).unwrap();
            let (dx, grads) = block.backward(&r).unwrap();
            let run = |p: &BlockParams, x: &Tensor| {
                let mut b = Block::new(cfg.clone(), p.clone()).unwrap();
                dot(&b.forward(x, 4, Precision::Full, None).unwrap(), &r)
            };
            assert_fd("block dx", fd_error(&x, &dx, 1, |x| run(&params, x)));
            for (i, name) in BlockParams::NAMES.iter().enumerate() {
                let base = params.tensors()[i].clone();
                let err = fd_error(&base, grads.tensors()[i], 3, |t| {
                    let mut p = params.clone();
                    *p.tensors_mut()[i] = t.clone();
                    run(&p, &x)
                });
                assert_fd(&format!("block {name} ({rotation:?}, seed {seed})"), err);
            }
        }
    }
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        layers: 2,
        hidden: 8,
        glu: 16,
        heads: 2,
        vocab: 8,
        seq_len: 8,
        batch: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn model_gradients() {
    for seed in SEEDS {
        let cfg = tiny_config(seed);
        let batch = SyntheticTask::new(TaskKind::Copy, cfg.vocab, cfg.seq_len, seed)
            .unwrap()
            .make_batch(cfg.batch, 0);
        let mut model = ToyModel::init(&cfg).unwrap();
        let (_, grads) = model.loss_and_grads(&batch, Precision::Full).unwrap();
        let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        // the loss is an f32 scalar, so small tensors are compared against
        // the largest gradient of the whole model
        let scale = grads.iter().map(inf_norm).fold(0.0, f64::max);
        for (i, name) in model.param_names().iter().enumerate() {
            let err = fd_abs_error(&params[i], &grads[i], 5, |t| {
                let mut p = params.clone();
                p[i] = t.clone();
                let mut m = ToyModel::from_tensors(&cfg, p).unwrap();
                m.evaluate(&batch, Precision::Full).unwrap().loss as f64
            }) / scale;
            assert_fd(&format!("model {name} (seed {seed})"), err);
        }
    }
}
