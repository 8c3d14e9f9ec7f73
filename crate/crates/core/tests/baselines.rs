//! Record aggregators, record-centric and flattened baselines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvmka::baselines::{
    aggregate_record, flattened_input, pair_embed, record_input, BaselineConfig, BaselineInput, BaselineKind,
    BaselineTrainer, RecordAggregator, RecordAggregatorKind,
};
use tvmka::data::synthetic::{generate_needle_task, NeedleConfig};
use tvmka::data::{label_set, ObjectSequence, StructuredObject, Vocabulary};
use tvmka::encoder::EncoderConfig;
use tvmka::rng::stream;
use tvmka::tensor::{uniform, Graph, ParamStore, Tensor};
use tvmka::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        shared_heads: 1,
        d_ff: 16,
        max_len: 64,
        vocab_size: 0,
        dropout: 0.0,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn pair_embedding_is_the_mean_of_its_token_rows() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("t", uniform(&[6, 4], 1.0, &mut rng(1))).unwrap();
    let table = store.value(id).clone();
    let mut g = Graph::inference(&store);
    let t = g.param(id);
    let e = pair_embed(&mut g, t, &[1, 4, 4]).unwrap();
    let want: Vec<f64> = (0..4).map(|c| (table.row(1)[c] + 2.0 * table.row(4)[c]) / 3.0).collect();
    assert!(close(g.value(e).data(), &want, 1e-15));
    assert!(matches!(pair_embed(&mut g, t, &[]), Err(Error::Contract(_))));
}

fn pairs(n: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..n).map(|i| uniform(&[1, 4], 1.0, &mut rng(seed + i as u64))).collect()
}

fn run(store: &ParamStore<f64>, agg: &RecordAggregator, xs: &[Tensor<f64>]) -> Result<Vec<f64>, Error> {
    let mut g = Graph::inference(store);
    let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
    let out = aggregate_record(&mut g, &vars, agg)?;
    Ok(g.value(out).data().to_vec())
}

#[test]
fn sum_aggregator_adds_pairs() {
    let store = ParamStore::<f64>::new();
    let xs = pairs(3, 10);
    let want: Vec<f64> = (0..4).map(|c| xs.iter().map(|x| x.data()[c]).sum()).collect();
    assert!(close(&run(&store, &RecordAggregator::Sum, &xs).unwrap(), &want, 1e-14));
    assert!(matches!(run(&store, &RecordAggregator::Sum, &[]), Err(Error::Contract(_))));
}

#[test]
fn concat_aggregator_projects_the_joined_pairs() {
    let mut store = ParamStore::<f64>::new();
    let agg = RecordAggregator::new(&mut store, "c", RecordAggregatorKind::ConcatProject, 4, 2, 3, &mut rng(2)).unwrap();
    let RecordAggregator::ConcatProject { w, .. } = &agg else { unreachable!() };
    let w = store.value(*w).clone();
    let xs = pairs(3, 20);
    let joined: Vec<f64> = xs.iter().flat_map(|x| x.data().to_vec()).collect();
    let want: Vec<f64> = (0..4).map(|c| joined.iter().enumerate().map(|(i, v)| v * w.row(i)[c]).sum()).collect();
    assert!(close(&run(&store, &agg, &xs).unwrap(), &want, 1e-14));
    assert!(run(&store, &agg, &xs[..2]).is_err());
    let mut other = ParamStore::<f64>::new();
    let e = RecordAggregator::new(&mut other, "c", RecordAggregatorKind::ConcatProject, 4, 2, 0, &mut rng(2));
    assert!(matches!(e, Err(Error::Config(_))));
}

#[test]
fn self_attention_aggregator_ignores_pair_order() {
    let mut store = ParamStore::<f64>::new();
    let agg = RecordAggregator::new(&mut store, "s", RecordAggregatorKind::SelfAttnAvg, 4, 2, 0, &mut rng(3)).unwrap();
    let xs = pairs(3, 30);
    let a = run(&store, &agg, &xs).unwrap();
    let b = run(&store, &agg, &[xs[2].clone(), xs[0].clone(), xs[1].clone()]).unwrap();
    assert!(close(&a, &b, 1e-12));
}

#[test]
fn aggregator_names_parse() {
    for (s, k) in [
        ("sum", RecordAggregatorKind::Sum),
        ("concat", RecordAggregatorKind::ConcatProject),
        ("selfattn", RecordAggregatorKind::SelfAttnAvg),
    ] {
        assert_eq!(s.parse::<RecordAggregatorKind>().unwrap(), k);
        assert_eq!(k.to_string(), s);
    }
    assert!(matches!("max".parse::<RecordAggregatorKind>(), Err(Error::Config(_))));
}

fn seqs() -> Vec<ObjectSequence> {
    generate_needle_task(&NeedleConfig {
        keys: 3,
        steps: 6,
        words_per_value: 2,
        samples: 32,
        seed: 4,
        noise_words: 8,
        ..Default::default()
    })
    .unwrap()
    .sequences
}

fn baseline(kind: BaselineKind, data: &[ObjectSequence], cfg: BaselineConfig) -> BaselineTrainer<f64> {
    let vocab = Vocabulary::from_corpus(data, 1).unwrap();
    BaselineTrainer::new(kind, &encoder(), cfg, vocab, label_set(data), 3, 5).unwrap()
}

#[test]
fn record_model_depends_on_step_order() {
    let data = seqs();
    for agg in [RecordAggregatorKind::Sum, RecordAggregatorKind::ConcatProject, RecordAggregatorKind::SelfAttnAvg] {
        let b = baseline(BaselineKind::Record(agg), &data, BaselineConfig::default());
        let mut steps = record_input(&data[0], &b.vocab);
        let a = b.predict(&[BaselineInput::Record(steps.clone())]).unwrap();
        steps.swap(0, 3);
        let c = b.predict(&[BaselineInput::Record(steps)]).unwrap();
        assert!(!close(&a[0], &c[0], 1e-9), "{agg} is order blind");
    }
}

#[test]
fn record_model_rejects_too_many_steps() {
    let data = seqs();
    let b = baseline(
        BaselineKind::Record(RecordAggregatorKind::Sum),
        &data,
        BaselineConfig {
            record_max_steps: 4,
            ..Default::default()
        },
    );
    let input = BaselineInput::Record(record_input(&data[0], &b.vocab));
    assert!(matches!(b.predict(&[input]), Err(Error::Length { len: 6, max: 4 })));
}

#[test]
fn flattened_input_truncates_and_is_deterministic() {
    let data = seqs();
    let vocab = Vocabulary::from_corpus(&data, 1).unwrap();
    let full = flattened_input(&data[0], &vocab, 512).unwrap();
    assert!(full.len() < 512);
    let cut = flattened_input(&data[0], &vocab, 20).unwrap();
    assert!(cut.len() <= 20 && cut.len() > 1);
    assert_eq!(cut, flattened_input(&data[0], &vocab, 20).unwrap());

    let long = ObjectSequence::new(
        "long",
        (0..400).map(|i| StructuredObject::new().with("k", format!("w{}", i % 7))).collect(),
    );
    let v = Vocabulary::from_corpus(std::slice::from_ref(&long), 1).unwrap();
    assert!(flattened_input(&long, &v, 512).unwrap().len() <= 512);
}

#[test]
fn mismatched_input_kind_is_rejected() {
    let data = seqs();
    let b = baseline(BaselineKind::Flattened, &data, BaselineConfig::default());
    let wrong = BaselineInput::Record(record_input(&data[0], &b.vocab));
    assert!(matches!(b.predict(&[wrong]), Err(Error::Contract(_))));
}

#[test]
fn baselines_train_deterministically_and_reduce_loss() {
    let data = seqs();
    for kind in [BaselineKind::Flattened, BaselineKind::Record(RecordAggregatorKind::Sum)] {
        let cfg = BaselineConfig {
            batch: 8,
            lr: 3e-3,
            ..Default::default()
        };
        let mut a = baseline(kind, &data, cfg.clone());
        let mut b = baseline(kind, &data, cfg);
        let inputs = a.encode(&data).unwrap();
        let labels: Vec<usize> = data
            .iter()
            .map(|s| a.classes.iter().position(|c| Some(c) == s.label.as_ref()).unwrap())
            .collect();
        let la = a.train(&inputs, &labels, 60, &mut stream(1, "b")).unwrap();
        let lb = b.train(&inputs, &labels, 60, &mut stream(1, "b")).unwrap();
        assert_eq!(la, lb);
        let head: f64 = la[..10].iter().sum();
        let tail: f64 = la[la.len() - 10..].iter().sum();
        assert!(tail < head, "{kind}: {head} -> {tail}");
    }
}
