//! Times pooled inference and one masked-LM training item for the value
//! modeler at a given sequence length.
//!
//! cargo run --release --example encoder_throughput -- [len] [reps]

use std::time::Instant;

use rand::SeedableRng;
use tvmka::data::vocab::CLS_ID;
use tvmka::encoder::{EncoderConfig, TemporalValueModeler};
use tvmka::rng::{stream, RunRng};
use tvmka::tensor::{Graph, ParamStore};

fn main() -> tvmka::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let len: usize = args.get(1).map_or(321, |s| s.parse().unwrap());
    let reps: usize = args.get(2).map_or(200, |s| s.parse().unwrap());
    let cfg = EncoderConfig {
        vocab_size: 200,
        ..Default::default()
    };
    let mut store = ParamStore::<f32>::new();
    let tvm = TemporalValueModeler::new(&mut store, "tvm", &cfg, &mut stream(0, "init"))?;
    let mut tokens: Vec<usize> = (0..len).map(|i| 8 + i % 190).collect();
    tokens[0] = CLS_ID;

    let t0 = Instant::now();
    for _ in 0..reps {
        tvm.key_representation(&store, "k", &tokens)?;
    }
    let pooled = t0.elapsed().as_secs_f64() / reps as f64;

    let mut rng = RunRng::seed_from_u64(0);
    let positions: Vec<usize> = (1..len).step_by(7).collect();
    let targets: Vec<usize> = positions.iter().map(|&p| tokens[p]).collect();
    let t0 = Instant::now();
    for _ in 0..reps / 4 {
        let mut g = Graph::with_params(&store);
        let out = tvm.encode(&mut g, &tokens, None, Some(&mut rng), false)?;
        let logits = tvm.mlm_head(&mut g, out.states.unwrap(), &positions)?;
        let loss = g.cross_entropy(logits, &targets)?;
        g.backward(loss)?;
    }
    let train = t0.elapsed().as_secs_f64() / (reps / 4) as f64;
    println!("len {len}: pooled forward {:.3} ms, training item {:.3} ms", pooled * 1e3, train * 1e3);
    Ok(())
}
