use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hbl_core::diagnostics::{dist_stats, histogram, rotate_compare, DistStats};
use hbl_core::hadamard::{hadamard_backward, hadamard_forward, HadamardPlan};
use hbl_core::kernels::{gemm_ternary_int, Traffic};
use hbl_core::quant::{quantize_kv_unsigned, quantize_weight, ActBits, QuantConfig};
use hbl_core::toytrain::{
    run_ablation, train_stage, write_loss_csv, Checkpoint, Stage, StageOptions, TrainConfig,
    VARIANTS,
};
use hbl_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::{Command, GemmBenchArgs, QuantMode, TrainArgs};

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Hadamard {
            input,
            out,
            inverse,
        } => {
            let x = Tensor::load(&input)?;
            let plan = HadamardPlan::new(x.last_dim())?;
            let y = if inverse {
                hadamard_backward(&x, &plan)?
            } else {
                hadamard_forward(&x, &plan)?
            };
            y.save(&out)?;
        }
        Command::Quantize {
            mode,
            input,
            out,
            dequant,
            bos_first,
        } => quantize(mode, &input, &out, dequant.as_deref(), bos_first)?,
        Command::GemmBench(args) => gemm_bench(&args)?,
        Command::Stats { input, json } => {
            let s = dist_stats(&Tensor::load(&input)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                print_stats(&s);
            }
        }
        Command::Hist {
            input,
            bins,
            min,
            max,
            csv,
        } => {
            let h = histogram(&Tensor::load(&input)?, bins, min, max)?;
            write(&csv, h.to_csv())?;
        }
        Command::RotateCompare { input, bits, json } => {
            let r = rotate_compare(&Tensor::load(&input)?, bits.parse().unwrap())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("bits              {}", r.bits);
                println!("mean mse direct   {:.6e}", r.mean_mse_direct);
                println!("mean mse rotated  {:.6e}", r.mean_mse_rotated);
                match r.ratio {
                    Some(q) => println!("ratio             {q:.6}"),
                    None => println!("ratio             n/a"),
                }
            }
        }
        Command::TrainToy(args) => return train_toy(&args),
        Command::Ablation { config, out, seed } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_ablation(&cfg, &VARIANTS)?;
            write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            for v in &report.variants {
                eprintln!(
                    "{:<18} a8 {:>12} a4 {:>12}{}",
                    format!("{:?}", v.rotation),
                    fmt_loss(v.final_loss_a8),
                    fmt_loss(v.final_loss_a4),
                    v.diverged
                        .map(|d| format!("  diverged at {} step {}", d.stage.name(), d.at.step))
                        .unwrap_or_default()
                );
            }
        }
    }
    Ok(0)
}

fn fmt_loss(v: Option<f32>) -> String {
    v.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into())
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_stats(s: &DistStats) {
    println!("count            {}", s.count);
    println!("mean             {:.6e}", s.mean);
    println!("std              {:.6e}", s.std);
    println!("absmax           {:.6e}", s.absmax);
    println!("absmean          {:.6e}", s.absmean);
    println!("excess_kurtosis  {:.6}", s.excess_kurtosis);
    println!("outlier_ratio_4  {:.6e}", s.outlier_ratio_4);
    println!("outlier_ratio_6  {:.6e}", s.outlier_ratio_6);
}

/// `q.bnt` -> `q.scale.bnt`.
pub(crate) fn scale_path(out: &Path) -> PathBuf {
    out.with_extension("scale.bnt")
}

fn quantize(
    mode: QuantMode,
    input: &Path,
    out: &Path,
    dequant: Option<&Path>,
    bos_first: bool,
) -> Result<()> {
    let x = Tensor::load(input)?;
    let cfg = QuantConfig::default();
    let (codes, scales, deq) = match mode {
        QuantMode::W158 => {
            let w = quantize_weight(&x, &cfg)?;
            let alpha = Tensor::from_values(&[1], &[w.alpha])?;
            (w.to_bnt(), alpha, w.dequantize())
        }
        QuantMode::A8 | QuantMode::A4 | QuantMode::Kv4 | QuantMode::Kv3 => {
            let q = match mode {
                QuantMode::A8 => ActBits::A8.quantize(&x, &cfg),
                QuantMode::A4 => ActBits::A4.quantize(&x, &cfg),
                _ => {
                    let bits = if mode == QuantMode::Kv4 { 4 } else { 3 };
                    let mut mask = vec![false; x.rows()];
                    mask[0] = bos_first;
                    quantize_kv_unsigned(&x, bits, &mask, &cfg)?
                }
            };
            (q.to_bnt(), q.scale_table(), q.dequantize())
        }
    };
    codes.save(out)?;
    scales.save(scale_path(out))?;
    if let Some(d) = dequant {
        deq.save(d)?;
    }
    Ok(())
}

fn gemm_bench(args: &GemmBenchArgs) -> Result<()> {
    let (m, n, k) = (args.m, args.n, args.k);
    if m == 0 || n == 0 || k == 0 || args.iters == 0 {
        return Err(Error::InvalidConfig(
            "m, n, k and iters must be positive".into(),
        ));
    }
    let bits: u32 = args.act_bits.parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut sample =
        |len: usize| -> Vec<f32> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let w = Tensor::from_vec(&[n, k], sample(n * k))?;
    let x = Tensor::from_vec(&[m, k], sample(m * k))?;
    let cfg = QuantConfig::default();
    let tw = quantize_weight(&w, &cfg)?;
    let act = if bits == 4 { ActBits::A4 } else { ActBits::A8 };
    let qa = act.quantize(&x, &cfg);

    let mut csv = String::from("iter,m,n,k,act_bits,wall_ns,checksum\n");
    for it in 0..args.iters {
        let t = Instant::now();
        let y = gemm_ternary_int(&tw.packed, &qa, tw.alpha)?;
        let ns = t.elapsed().as_nanos();
        csv.push_str(&format!("{it},{m},{n},{k},{bits},{ns},{:.9e}\n", y.sum()));
    }
    write(&args.csv, csv)?;
    let traffic = Traffic::new(m, n, k, bits);
    println!(
        "{}",
        serde_json::to_string(&TrafficReport {
            act_bits: bits,
            bytes_per_output: traffic,
            total: traffic.total()
        })?
    );
    Ok(())
}

#[derive(Serialize)]
struct TrafficReport {
    act_bits: u32,
    bytes_per_output: Traffic,
    total: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    stage: Stage,
    start_step: usize,
    end_step: usize,
    final_loss: Option<f32>,
    diverged: Option<hbl_core::toytrain::Divergence>,
}

fn train_toy(args: &TrainArgs) -> Result<u8> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let stage = if args.stage == "a8" {
        Stage::A8
    } else {
        Stage::A4
    };
    let resume = args.resume.as_ref().map(Checkpoint::load).transpose()?;
    let start = resume.as_ref().map_or(0, |c| c.step);
    let opts = StageOptions {
        reset_optimizer: args.reset_optimizer,
    };
    let run = train_stage(&cfg, stage, resume, opts)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_loss_csv(args.out.join("loss.csv"), &run.curve)?;
    let summary = TrainSummary {
        stage,
        start_step: start,
        end_step: run.checkpoint.step,
        final_loss: run.final_loss(),
        diverged: run.diverged,
    };
    write(
        &args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    if let Some(d) = run.diverged {
        eprintln!(
            "error: {}",
            Error::DivergedLoss {
                step: d.step,
                loss: d.loss
            }
        );
        return Ok(3);
    }
    run.checkpoint.save(&args.out)?;
    eprintln!(
        "{} steps {}..{} final loss {}",
        stage.name(),
        start,
        run.checkpoint.step,
        fmt_loss(run.final_loss())
    );
    Ok(0)
}
