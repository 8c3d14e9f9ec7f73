//! Cross-key task: the label depends on two keys agreeing at the same step.
//! Trains a record-centric baseline and TVM-KA and prints test accuracy.
//!
//! cargo run --release --example crosskey_experiment -- [aggregator] [baseline_steps] [seed] [lr] [skip-tvmka]

use tvmka::baselines::{BaselineConfig, BaselineKind, BaselineTrainer, RecordAggregatorKind};
use tvmka::data::prep::split;
use tvmka::data::synthetic::{generate_crosskey_task, CrosskeyConfig};
use tvmka::data::{label_set, Vocabulary};
use tvmka::rng::stream;
use tvmka::training::metrics::evaluate;
use tvmka::training::{Corpus, TrainConfig, TvmKaTrainer};

fn main() -> tvmka::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let agg: RecordAggregatorKind = args.get(1).map_or(Ok(RecordAggregatorKind::SelfAttnAvg), |s| s.parse())?;
    let steps: usize = args.get(2).map_or(1_000, |s| s.parse().unwrap());
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().unwrap());
    let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().unwrap());
    let skip_tvmka = args.get(5).is_some_and(|s| s == "skip-tvmka");

    let ck = CrosskeyConfig {
        seed,
        ..Default::default()
    };
    let seqs = generate_crosskey_task(&ck)?;
    let classes = label_set(&seqs);
    let n = seqs.len() as f64;
    let [train, dev, test] = split(seqs, [0.8 * n, 0.1 * n, 0.1 * n], &mut stream(seed, "split"))?;
    let vocab = Vocabulary::from_corpus(&train, 1)?;
    let train = Corpus::new("train", train, &classes)?;
    let dev = Corpus::new("dev", dev, &classes)?;
    let test = Corpus::new("test", test, &classes)?;
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };

    let bcfg = BaselineConfig {
        steps,
        lr,
        ..Default::default()
    };
    let mut b = BaselineTrainer::<f32>::new(
        BaselineKind::Record(agg),
        &cfg.encoder,
        bcfg.clone(),
        vocab.clone(),
        classes.clone(),
        ck.keys,
        seed,
    )?;
    let inputs = b.encode(&train.seqs)?;
    let test_inputs = b.encode(&test.seqs)?;
    let mut rng = stream(seed, "record");
    let chunk = (steps / 5).max(1);
    let mut done = 0;
    while done < steps {
        let s = chunk.min(steps - done);
        let losses = b.train(&inputs, &train.labels, s, &mut rng)?;
        done += s;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let acc = evaluate(&b.predict(&test_inputs)?, &test.labels, 1, 1, None)?.accuracy;
        println!("record {agg} step {done:>5} loss {mean:.4} test accuracy {acc:.3}");
    }

    if !skip_tvmka {
        let mut t = TvmKaTrainer::<f32>::new(cfg, vocab, classes)?;
        let report = t.run(&train, &[&dev, &test], None)?;
        for m in report.metrics.iter().filter(|m| m.split == "test") {
            println!("TVM-KA round {} test accuracy {:.3}", m.round, m.report.accuracy);
        }
    }
    Ok(())
}
