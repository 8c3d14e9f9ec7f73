//! Trains TVM-KA on the synthetic needle-key task and prints per-round
//! accuracy.
//!
//! cargo run --release --example needle_experiment -- [samples] [seed] [path=value ...]

use std::time::Instant;

use tvmka::config::apply_override;
use tvmka::data::prep::split;
use tvmka::data::synthetic::{generate_needle_task, NeedleConfig};
use tvmka::data::{label_set, Vocabulary};
use tvmka::rng::stream;
use tvmka::training::{Corpus, TrainConfig, TvmKaTrainer};

fn main() -> tvmka::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let samples: usize = args.get(1).map_or(2_000, |s| s.parse().unwrap());
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());

    let data = generate_needle_task(&NeedleConfig {
        samples,
        seed,
        ..Default::default()
    })?;
    let classes = label_set(&data.sequences);
    let n = samples as f64;
    let [train, dev, test] = split(data.sequences, [0.8 * n, 0.1 * n, 0.1 * n], &mut stream(seed, "split"))?;
    let vocab = Vocabulary::from_corpus(&train, 1)?;
    let train = Corpus::new("train", train, &classes)?;
    let dev = Corpus::new("dev", dev, &classes)?;
    let test = Corpus::new("test", test, &classes)?;

    let mut doc = serde_json::to_value(TrainConfig {
        seed,
        ..Default::default()
    })?;
    for o in args.iter().skip(3) {
        apply_override(&mut doc, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(doc)?;
    let mut trainer = TvmKaTrainer::<f32>::new(cfg, vocab, classes)?;
    let t0 = Instant::now();
    let report = trainer.run(&train, &[&dev, &test], None)?;
    for p in &report.phases {
        println!(
            "{:>8} round {} steps {:>4} loss {:?} -> {:?} ({:.1}s)",
            p.kind.to_string(), p.round, p.steps, p.first_loss, p.last_loss, p.seconds
        );
    }
    for m in &report.metrics {
        println!("round {} {:<5} accuracy {:.3} macro-F1 {:.3}", m.round, m.split, m.report.accuracy, m.report.macro_f1);
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
