//! Acceptance checks, one line per criterion. Run with `cargo test --test acceptance`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::downstream::{
    metrics_from_predictions, prepare_windows, random_split, run_finetune, FinetuneInit, MetricsReport,
};
use sensorformer::gradcheck::gradient_check;
use sensorformer::model::{count_parameters, init_model};
use sensorformer::optim::AdamWConfig;
use sensorformer::preprocess::{discretize_bins, vanilla_tokenize};
use sensorformer::pretrain::{
    build_mlm_example, build_next_token_example, build_reconstruction_example, compute_pretrain_loss, pretrain_loss,
    run_pretraining, MaskGranularity, PretrainExample,
};
use sensorformer::synth::{generate, SynthConfig};
use sensorformer::{
    Arch, Checkpoint, FinetuneConfig, Graph, Model, ModelConfig, PretrainRunConfig, SensorFrame, SequenceBatch, Task,
    Tensor,
};

use common::{bin_oracle, bits, brute_force_weighted_f1, jittered_model, random_batch, tiny_config};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn loss_bits(model: &Model<f64>, example: &PretrainExample<f64>) -> u64 {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g).unwrap();
    let l = pretrain_loss(model, &mut g, &p, example, None).unwrap();
    g.value(l).item().to_bits()
}

fn random_loss_anchor() -> Outcome {
    let mut g = Graph::<f64>::new();
    let example = build_reconstruction_example(&random_batch::<f64>(2, 10, 3, 0), 100).map_err(|e| e.to_string())?;
    let logits: Vec<_> = (0..3).map(|_| g.constant(Tensor::full(&[2, 10, 100], 0.0)).unwrap()).collect();
    let loss = compute_pretrain_loss(&mut g, &logits, &example).map_err(|e| e.to_string())?;
    let uniform = g.value(loss).item();
    ensure((uniform - 100f64.ln()).abs() < 1e-3, || format!("uniform-logit loss {uniform}"))?;

    // six windows and a batch of 25: the whole run is one batch
    let frame = generate(&SynthConfig { windows_per_class: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut firsts = Vec::new();
    for (task, arch) in [(Task::Reconstruction, Arch::Encoder), (Task::Mlm, Arch::Encoder), (Task::NextToken, Arch::Decoder)] {
        let model = ModelConfig { d_model: 32, heads: 4, arch, ..Default::default() };
        let cfg = PretrainRunConfig { task, val_fraction: 0.0, ..Default::default() };
        let (_, curve) = run_pretraining::<f32>(&frame, &cfg, &model).map_err(|e| e.to_string())?;
        let first = curve.train().next().ok_or("no batch ran")?;
        ensure((first - 4.61).abs() <= 0.15, || format!("{task} first-batch loss {first}"))?;
        firsts.push(format!("{task} {first:.4}"));
    }
    Ok(format!("uniform {uniform:.6}; first batch {}", firsts.join(", ")))
}

fn binning_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [2usize, 7, 100, 1000] {
        let values: Vec<f64> = (0..100_000).map(|_| rng.random()).collect();
        let batch = SequenceBatch::new(values.clone(), 1, values.len(), 1).map_err(|e| e.to_string())?;
        let labels = discretize_bins(&batch, k).map_err(|e| e.to_string())?;
        let wrong = values.iter().zip(&labels.labels).filter(|(x, &l)| l != bin_oracle(**x, k)).count();
        ensure(wrong == 0, || format!("k = {k}: {wrong} mismatches"))?;
    }
    Ok("1e5 values x k in {2, 7, 100, 1000}, 0 mismatches".into())
}

fn gradient_correctness() -> Outcome {
    let seq = random_batch::<f64>(2, 6, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (Arch::Encoder, build_reconstruction_example(&seq, 5)),
        (Arch::Encoder, build_mlm_example(&seq, 5, 0.25, -100.0, MaskGranularity::Cell, &mut rng)),
        (Arch::Decoder, build_next_token_example(&seq, 5, 2)),
    ];
    let mut parts = Vec::new();
    for (arch, example) in cases {
        let example = example.map_err(|e| e.to_string())?;
        let model = jittered_model(&tiny_config(arch), 4);
        let err = gradient_check(&model.params, 1e-5, |g, p| pretrain_loss(&model, g, p, &example, None))
            .map_err(|e| e.to_string())?;
        ensure(err < 1e-4, || format!("{}: max relative error {err:e}", example.task))?;
        parts.push(format!("{} {err:.1e}", example.task));
    }
    Ok(format!("max relative error {}", parts.join(", ")))
}

fn mask_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50u64 {
        let seq = random_batch::<f64>(2, 6, 3, trial);
        let model = jittered_model(&tiny_config(Arch::Encoder), trial);
        let mlm = build_mlm_example(&seq, 5, 0.25, -100.0, MaskGranularity::Cell, &mut rng).map_err(|e| e.to_string())?;
        let mut altered = mlm.clone();
        for (l, &m) in altered.targets.labels.iter_mut().zip(&mlm.loss_mask) {
            if !m {
                *l = rng.random_range(0..5);
            }
        }
        ensure(loss_bits(&model, &mlm) == loss_bits(&model, &altered), || format!("MLM trial {trial}"))?;
    }
    let seq = random_batch::<f64>(2, 300, 3, 6);
    let config = ModelConfig { max_len: 300, ..tiny_config(Arch::Decoder) };
    let model = jittered_model(&config, 6);
    let nt = build_next_token_example(&seq, 5, 70).map_err(|e| e.to_string())?;
    for trial in 0..5 {
        let mut altered = nt.clone();
        for b in 0..2 {
            for t in 0..69 {
                for d in 0..3 {
                    altered.targets.labels[(b * 299 + t) * 3 + d] = rng.random_range(0..5);
                }
            }
        }
        ensure(loss_bits(&model, &nt) == loss_bits(&model, &altered), || format!("next-token trial {trial}"))?;
    }
    Ok("50 MLM and 5 next-token (skip 70) target rewrites, losses bit-identical".into())
}

fn causality() -> Outcome {
    let config = ModelConfig { max_len: 8, ..tiny_config(Arch::Decoder) };
    let model = jittered_model(&config, 7);
    let d = config.d_model;
    let base = random_batch::<f64>(2, 8, 3, 7);
    let hidden = |batch: &SequenceBatch<f64>| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g).unwrap();
        let h = model.hidden_states(&mut g, &p, batch, None).unwrap();
        let logits = model.parallel_heads_forward(&mut g, &p, h).unwrap();
        (g.value(h).data().to_vec(), logits.iter().map(|&l| g.value(l).data().to_vec()).collect::<Vec<_>>())
    };
    let (h0, l0) = hidden(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut probes = 0;
    for p in 0..8 {
        for _ in 0..4 {
            let mut perturbed = base.clone();
            for b in 0..2 {
                for t in p + 1..8 {
                    for dim in 0..3 {
                        perturbed.data_mut()[(b * 8 + t) * 3 + dim] = rng.random_range(-10.0..10.0);
                    }
                }
            }
            let (h1, l1) = hidden(&perturbed);
            for b in 0..2 {
                for q in 0..=p {
                    let r = (b * 8 + q) * d..(b * 8 + q + 1) * d;
                    ensure(bits(&h0[r.clone()]) == bits(&h1[r]), || format!("position {q} moved, perturbing > {p}"))?;
                    for (x, y) in l0.iter().zip(&l1) {
                        let r = (b * 8 + q) * 5..(b * 8 + q + 1) * 5;
                        ensure(bits(&x[r.clone()]) == bits(&y[r]), || format!("logits at {q} moved"))?;
                    }
                }
            }
            probes += 1;
        }
    }
    Ok(format!("L = 8, {probes} perturbations, every earlier position bit-identical"))
}

fn parameter_accounting() -> Outcome {
    let config = ModelConfig { d_model: 768, layers: 6, heads: 12, max_len: 300, n_dims: 3, bins: 100, ..Default::default() };
    let model = init_model::<f32>(&config).map_err(|e| e.to_string())?;
    let n = count_parameters(&model.params);
    let rel = (n as f64 - 44_768_556.0) / 44_768_556.0;
    ensure(rel.abs() <= 0.05, || format!("{n} parameters, {:+.2}%", rel * 100.0))?;
    Ok(format!("{n} parameters, {:+.2}% against 44,768,556", rel * 100.0))
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let frame = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let model_config = ModelConfig { d_model: 32, layers: 2, heads: 4, ..Default::default() };
    let pre_cfg = PretrainRunConfig { batch_size: 4, optimizer: AdamWConfig::with_lr(3e-3), ..Default::default() };
    let (ck, curve) = run_pretraining::<f32>(&frame, &pre_cfg, &model_config).map_err(|e| e.to_string())?;
    let train: Vec<f64> = curve.train().collect();
    let first = train[0];
    let tail = &train[train.len().saturating_sub(10)..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    let ratio = last / first;

    let set = prepare_windows::<f32>(&frame, &ck.scaler, model_config.max_len, None).map_err(|e| e.to_string())?;
    let splits = random_split(&set, 0.6, 0.2, 0).map_err(|e| e.to_string())?;
    let ft = FinetuneConfig::default();
    let pretrained = run_finetune(FinetuneInit::Pretrained(&ck.model), &splits, &ft).map_err(|e| e.to_string())?;
    let scratch = run_finetune(FinetuneInit::Scratch(&model_config), &splits, &ft).map_err(|e| e.to_string())?;
    let (acc, base) = (pretrained.test_metrics.accuracy, scratch.test_metrics.accuracy);
    let detail = format!(
        "pretrain loss {first:.3} -> {last:.3} (ratio {ratio:.3}), test accuracy {acc:.4} pretrained / {base:.4} scratch \
         (delta {:+.4}), {:.0}s",
        acc - base,
        started.elapsed().as_secs_f64()
    );
    ensure(ratio < 0.5 && acc >= 0.85, || detail.clone())?;
    Ok(detail)
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let classes = rng.random_range(1..10);
        let n = rng.random_range(1..300);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let m = metrics_from_predictions(&truth, &pred, classes).map_err(|e| e.to_string())?;
        worst = worst.max((m.weighted_f1 - brute_force_weighted_f1(&truth, &pred, classes)).abs());
    }
    ensure(worst < 1e-9, || format!("weighted F1 off by {worst:e}"))?;
    let truth = [vec![0; 10], vec![1; 10]].concat();
    let pred = [vec![0; 5], vec![1; 15]].concat();
    let m = metrics_from_predictions(&truth, &pred, 2).map_err(|e| e.to_string())?;
    ensure(m.confusion == [[5, 5], [0, 10]], || format!("confusion {:?}", m.confusion))?;
    ensure(m.accuracy == 0.75 && (m.weighted_f1 - 0.7333).abs() < 5e-5, || {
        format!("accuracy {} weighted F1 {}", m.accuracy, m.weighted_f1)
    })?;
    Ok(format!("1000 random sets, max deviation {worst:.1e}; hand case accuracy 0.75, weighted F1 {:.4}", m.weighted_f1))
}

fn vanilla_tokens() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let window: Vec<f64> = (0..900).map(|_| rng.random()).collect();
    let ids = vanilla_tokenize(&window, 3, 10_000).map_err(|e| e.to_string())?;
    ensure(ids.len() == 900, || format!("length {}", ids.len()))?;
    ensure(ids.iter().all(|&i| i < 10_000), || "id out of range".into())?;
    let half = vanilla_tokenize(&[0.5f64], 1, 10_000).map_err(|e| e.to_string())?;
    ensure(half == [5000], || format!("0.5 -> {half:?}"))?;
    Ok("length 900, ids < 10000, 0.5 -> 5000".into())
}

fn pipeline_bytes(frame: &SensorFrame, dir: &std::path::Path, tag: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let model_config = ModelConfig { d_model: 16, layers: 1, heads: 2, max_len: 30, bins: 10, ..Default::default() };
    let pre_cfg = PretrainRunConfig { bins: 10, batch_size: 8, optimizer: AdamWConfig::with_lr(1e-3), ..Default::default() };
    let (ck, curve) = run_pretraining::<f32>(frame, &pre_cfg, &model_config).map_err(|e| e.to_string())?;
    let set = prepare_windows::<f32>(frame, &ck.scaler, 30, None).map_err(|e| e.to_string())?;
    let splits = random_split(&set, 0.6, 0.2, 1).map_err(|e| e.to_string())?;
    let ft = FinetuneConfig { max_epochs: 3, ..Default::default() };
    let out = run_finetune(FinetuneInit::Pretrained(&ck.model), &splits, &ft).map_err(|e| e.to_string())?;
    let loss_csv = dir.join(format!("{tag}.loss.csv"));
    curve.write_csv(&loss_csv).map_err(|e| e.to_string())?;
    let json = MetricsReport::new(&out.test_metrics, "confusion.csv".as_ref()).to_json().map_err(|e| e.to_string())?;
    Ok((std::fs::read(&loss_csv).map_err(|e| e.to_string())?, json.into_bytes()))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = {
        let pre = jittered_model(&tiny_config(Arch::Encoder), 11).cast::<f32>();
        sensorformer::model::swap_pretrain_head_for_classifier(&pre, 3, sensorformer::Pooling::Mean, 1)
            .map_err(|e| e.to_string())?
    };
    let frame = generate(&SynthConfig { windows_per_class: 20, length: 30, ..Default::default() }).map_err(|e| e.to_string())?;
    let scaler = sensorformer::preprocess::fit_minmax(&frame, 0.05).map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    Checkpoint { model: model.clone(), scaler }.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::<f32>::load(&path).map_err(|e| e.to_string())?;
    let batch = random_batch::<f32>(4, 6, 3, 12);
    let (a, b) = (model.class_logits(&batch), loaded.model.class_logits(&batch));
    let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
    ensure(bits(a.data()) == bits(b.data()), || "logits changed across save/load".into())?;

    let first = pipeline_bytes(&frame, dir.path(), "a")?;
    let second = pipeline_bytes(&frame, dir.path(), "b")?;
    ensure(first.0 == second.0, || "loss CSVs differ".into())?;
    ensure(first.1 == second.1, || "metrics JSON differs".into())?;
    Ok(format!(
        "round-trip logits bit-identical; two runs give identical loss CSV ({} bytes) and metrics JSON ({} bytes)",
        first.0.len(),
        first.1.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("random-loss anchor", random_loss_anchor),
        ("binning oracle", binning_oracle),
        ("gradient correctness", gradient_correctness),
        ("mask isolation", mask_isolation),
        ("causality", causality),
        ("parameter accounting", parameter_accounting),
        ("end-to-end pipeline", end_to_end),
        ("metrics oracle", metrics_oracle),
        ("vanilla tokenizer", vanilla_tokens),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
