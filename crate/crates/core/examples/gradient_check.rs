//! Central finite differences against the tape on a small TVM-KA
//! composition, every coordinate of every parameter.
//!
//! cargo run --release --example gradient_check -- [seed]

use std::time::Instant;

use rand::Rng;
use tvmka::attention::DropHeadConfig;
use tvmka::data::vocab::CLS_ID;
use tvmka::encoder::{EncoderConfig, TvmKa};
use tvmka::rng::{stream, RunRng};
use tvmka::tensor::{grad_check, ParamStore};

fn main() -> tvmka::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().unwrap());
    let cfg = EncoderConfig {
        d_ff: 32,
        max_len: 8,
        vocab_size: 24,
        ..Default::default()
    };
    let mut rng = stream(seed, "gradient-check");
    let mut store = ParamStore::<f64>::new();
    let model = TvmKa::new(&mut store, &cfg, 3, DropHeadConfig::default(), &mut rng)?;
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|_| std::iter::once(CLS_ID).chain((1..8).map(|_| rng.gen_range(8..24))).collect())
        .collect();
    let mut params = model.tvm_params();
    params.extend(model.ka_params());

    let t0 = Instant::now();
    let report = grad_check(&mut store, &params, 1e-5, usize::MAX, &mut rng, |g| {
        let logits = model.forward::<f64, RunRng>(g, &seqs, None)?;
        g.cross_entropy(logits, &[1])
    })?;
    println!(
        "{} coordinates, max relative error {:.3e} at {}[{}], {:.1}s",
        report.coordinates_checked,
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
