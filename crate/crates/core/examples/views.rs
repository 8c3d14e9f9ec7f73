//! Prints the key-centric, flattened and record-centric views of a small
//! object sequence, with their token counts.
//!
//! cargo run --release --example views

use tvmka::data::budget::{token_count, View};
use tvmka::data::{build_flattened_view, build_record_view, build_value_sequence, ObjectSequence, StructuredObject};

fn main() -> tvmka::Result<()> {
    let seq = ObjectSequence::new(
        "orders-17",
        vec![
            StructuredObject::new().with("product", "green tea").with("aisle", "beverages"),
            StructuredObject::new().with("product", "oat milk"),
            StructuredObject::new().with("product", "green tea").with("aisle", "beverages"),
        ],
    );

    println!("key-centric (longest {} tokens)", token_count(&seq, View::KeyCentric));
    for key in seq.key_universe() {
        println!("  {}", build_value_sequence(&seq, &key)?.tokens.join(" "));
    }
    let flat = build_flattened_view(&seq, 512)?;
    println!("flattened ({} tokens)\n  {}", flat.tokens.len(), flat.tokens.join(" "));
    println!("record-centric ({} positions)", token_count(&seq, View::RecordCentric));
    for (t, step) in build_record_view(&seq).iter().enumerate() {
        let pairs: Vec<String> = step.iter().map(|p| p.join(" ")).collect();
        println!("  step {t}: {}", pairs.join(" | "));
    }
    Ok(())
}
