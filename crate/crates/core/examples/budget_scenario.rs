//! Token budget of the motivating scenario: 11 keys with 5-word values over
//! 105 steps, under each input view.
//!
//! cargo run --release --example budget_scenario -- [keys] [words] [steps]

use tvmka::data::budget::{budget_report, View};
use tvmka::data::{ObjectSequence, StructuredObject};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    let arg = |i: usize, default: usize| args.get(i).copied().unwrap_or(default);
    let (keys, words, steps) = (arg(0, 11), arg(1, 5), arg(2, 105));
    let objects: Vec<StructuredObject> = (0..steps)
        .map(|t| {
            (0..keys)
                .map(|k| (format!("key{k}"), (0..words).map(|w| format!("w{t}x{w}")).collect::<Vec<_>>().join(" ")))
                .collect()
        })
        .collect();
    let corpus = [ObjectSequence::new("scenario", objects)];
    for view in [View::Flattened, View::RecordCentric, View::KeyCentric] {
        let r = budget_report(&corpus, view, 512);
        println!(
            "{:<15} longest input {:>6}, value words {}, over 512: {}",
            view.to_string(),
            r.max,
            r.value_words,
            r.over_cap_fraction > 0.0
        );
    }
}
