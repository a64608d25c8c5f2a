//! Trains the tiny profile on synthetic splices and reports held-out scores.
//!
//! ```text
//! cargo run --release -p maskdiff --example synthetic_run -- \
//!     --train 64 --test 32 --epochs 5 --mode ciml --set train.learning_rate=1e-3
//! ```

use std::time::Instant;

use candle_core::{DType, Device};
use maskdiff::conditioner::TaskMode;
use maskdiff::config::{ExperimentConfig, TrainMode};
use maskdiff::datasets::{pairs_to_samples, procedural_bases, synth_pairs};
use maskdiff::sampler::{evaluate, Variant};
use maskdiff::seed::stream;
use maskdiff::trainer::{train_loop, TrainState};

fn main() -> maskdiff::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut n_train = 64;
    let mut n_test = 32;
    let mut n_bases = 40;
    let mut overrides = vec![];
    let mut mode = TaskMode::Ciml;
    let mut steps = vec![1usize];
    let mut save = None;
    let mut i = 0;
    while i < args.len() {
        let v = args.get(i + 1).cloned().unwrap_or_default();
        match args[i].as_str() {
            "--train" => n_train = v.parse().unwrap(),
            "--test" => n_test = v.parse().unwrap(),
            "--bases" => n_bases = v.parse().unwrap(),
            "--mode" => mode = v.parse()?,
            "--epochs" => overrides.push(format!("train.epochs={v}")),
            "--set" => overrides.push(v),
            "--steps" => steps = v.split(',').map(|s| s.parse().unwrap()).collect(),
            "--save" => save = Some(std::path::PathBuf::from(v)),
            other => panic!("unknown flag {other}"),
        }
        i += 2;
    }
    let mut cfg = ExperimentConfig::default();
    cfg.train.jpeg_aug = false;
    cfg.train.mode = match mode {
        TaskMode::Iml => TrainMode::Iml,
        TaskMode::Ciml => TrainMode::Ciml,
    };
    let cfg = cfg.with_overrides(&overrides)?;
    let size = cfg.model.image_size;

    let mut rng = stream(7, &[]);
    let train_bases = procedural_bases(n_bases, size, &mut rng);
    let test_bases = procedural_bases(n_bases.max(2) / 2, size, &mut rng);
    let train = pairs_to_samples(&synth_pairs(&train_bases, &mut rng, n_train)?)?;
    let test = pairs_to_samples(&synth_pairs(&test_bases, &mut rng, n_test)?)?;

    let mut state = TrainState::new(&cfg, DType::F32, &Device::Cpu)?;
    println!("parameters: {}", state.model.parameter_count());
    let start = Instant::now();
    let total = state.total_steps(train.len());
    let mut window = 0.0;
    train_loop(&mut state, &train, None, |r| {
        window += r.loss;
        if (r.step + 1) % 25 == 0 || r.step + 1 == total {
            let n = if (r.step + 1) % 25 == 0 { 25.0 } else { ((r.step + 1) % 25) as f64 };
            println!(
                "step {:>5} epoch {:>3} loss {:.4} |g| {:.3} {:.2}s/step",
                r.step + 1,
                r.epoch,
                window / n,
                r.grad_norm,
                start.elapsed().as_secs_f64() / (r.step + 1) as f64
            );
            window = 0.0;
        }
    })?;
    if let Some(p) = &save {
        state.checkpoint().save(p)?;
    }
    let schedule = cfg.schedule.build()?;
    for (name, set) in [("train", &train), ("test", &test)] {
        for &s in &steps {
            let rep = evaluate(&state.model, &schedule, set, mode, Variant::Steps(s), &cfg.sampler, name)?;
            println!("{name} S={s}: {}", rep.to_table().lines().nth(2).unwrap());
        }
        let rep = evaluate(&state.model, &schedule, set, mode, Variant::ZeroNoise, &cfg.sampler, name)?;
        println!("{name} zero-noise: {}", rep.to_table().lines().nth(2).unwrap());
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
