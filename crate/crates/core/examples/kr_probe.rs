//! Measures how much class information the needle key's representation
//! carries after value-modeler pretraining: nearest-centroid accuracy and
//! the between/within class spread.
//!
//! cargo run --release --example kr_probe -- [samples] [pretrain_steps] [path=value ...]

use tvmka::config::apply_override;
use tvmka::data::prep::split;
use tvmka::data::synthetic::{generate_needle_task, key_name, NeedleConfig};
use tvmka::data::{label_set, Vocabulary};
use tvmka::rng::stream;
use tvmka::training::{Corpus, TrainConfig, TvmKaTrainer};

fn centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> (f64, f64) {
    let d = train[0].0.len();
    let mut means = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (v, y) in train {
        counts[*y] += 1;
        for (m, x) in means[*y].iter_mut().zip(v) {
            *m += x;
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= (*c).max(1) as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let within = train.iter().map(|(v, y)| dist(v, &means[*y])).sum::<f64>() / train.len() as f64;
    let mut between = 0.0;
    for a in 0..classes {
        for b in a + 1..classes {
            between += dist(&means[a], &means[b]);
        }
    }
    between /= (classes * (classes - 1) / 2) as f64;
    let correct = test
        .iter()
        .filter(|(v, y)| {
            let best = (0..classes)
                .min_by(|&a, &b| dist(v, &means[a]).partial_cmp(&dist(v, &means[b])).unwrap())
                .unwrap();
            best == *y
        })
        .count();
    println!("between-class centroid distance² {between:.3e}, within-class spread² {within:.3e}");
    (correct as f64 / test.len() as f64, between / within)
}

fn main() -> tvmka::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let samples: usize = args.get(1).map_or(2_000, |s| s.parse().unwrap());
    let steps: usize = args.get(2).map_or(300, |s| s.parse().unwrap());
    let data = generate_needle_task(&NeedleConfig {
        samples,
        ..Default::default()
    })?;
    let classes = label_set(&data.sequences);
    let [train, _, test] = split(data.sequences, [0.8, 0.1, 0.1], &mut stream(0, "split"))?;
    let vocab = Vocabulary::from_corpus(&train, 1)?;
    let train = Corpus::new("train", train, &classes)?;
    let test = Corpus::new("test", test, &classes)?;
    let mut doc = serde_json::to_value(TrainConfig::default())?;
    for o in args.iter().skip(3) {
        apply_override(&mut doc, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(doc)?;
    let mut trainer = TvmKaTrainer::<f32>::new(cfg, vocab, classes.clone())?;
    let needle = key_name(0);
    let mut rng = stream(0, "probe");
    for round in 0..=3 {
        if round > 0 {
            trainer.mlm_phase(&train.seqs, steps, true, &mut rng)?;
        }
        let rows = |c: &Corpus| -> tvmka::Result<Vec<(Vec<f64>, usize)>> {
            c.seqs
                .iter()
                .zip(&c.labels)
                .map(|(s, &y)| {
                    let ids = trainer.encode_key(s, &needle)?.ids;
                    let kr = trainer.model.tvm.key_representation(&trainer.store, &needle, &ids)?;
                    Ok((kr.vector.data().iter().map(|&x| x as f64).collect(), y))
                })
                .collect()
        };
        let (acc, ratio) = centroid_accuracy(&rows(&train)?, &rows(&test)?, classes.len());
        println!("after {} pretraining steps: nearest-centroid test accuracy {acc:.3}, spread ratio {ratio:.4}", round * steps);
    }
    Ok(())
}
