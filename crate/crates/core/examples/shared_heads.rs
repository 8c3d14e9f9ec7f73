//! Shows which attention projections the value modeler and the aggregator
//! share, and which tensors each training phase moves.
//!
//! cargo run --release --example shared_heads

use tvmka::data::synthetic::{generate_needle_task, NeedleConfig};
use tvmka::data::{label_set, Vocabulary};
use tvmka::encoder::EncoderConfig;
use tvmka::rng::stream;
use tvmka::tensor::ParamStore;
use tvmka::training::{Corpus, TrainConfig, TvmKaTrainer};

fn main() -> tvmka::Result<()> {
    let seqs = generate_needle_task(&NeedleConfig {
        keys: 3,
        steps: 8,
        samples: 32,
        ..Default::default()
    })?
    .sequences;
    let classes = label_set(&seqs);
    let cfg = TrainConfig {
        encoder: EncoderConfig {
            max_len: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut t = TvmKaTrainer::<f64>::new(cfg, Vocabulary::from_corpus(&seqs, 1)?, classes.clone())?;
    let corpus = Corpus::new("train", seqs, &classes)?;

    for (_, p) in t.store.params().filter(|(_, p)| p.shared_handle.is_some()) {
        println!("tied   {:<28} {}", p.name, p.shared_handle.as_deref().unwrap_or(""));
    }

    let before = t.store.snapshot();
    t.mlm_phase(&corpus.seqs, 3, true, &mut stream(0, "tvm"))?;
    let mid = t.store.snapshot();
    let krs = t.build_krs(&corpus.seqs)?;
    t.ka_phase(&krs, &corpus.labels, 3, &mut stream(0, "ka"))?;
    let after = t.store.snapshot();

    let tvm_moved = ParamStore::changed_names(&before, &mid);
    let ka_moved = ParamStore::changed_names(&mid, &after);
    let count = |names: &[String], prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
    println!(
        "TVM phase moved {} tvm.* and {} ka.* tensors (the ka.* ones are tied heads)",
        count(&tvm_moved, "tvm."),
        count(&tvm_moved, "ka.")
    );
    println!(
        "KA phase moved {} ka.* and {} tvm.* tensors (the tvm.* ones are tied heads)",
        count(&ka_moved, "ka."),
        count(&ka_moved, "tvm.")
    );
    Ok(())
}
