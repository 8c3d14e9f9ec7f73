//! Mines templates from a raw HDFS-style log and prints each line as a
//! key-value object.
//!
//! cargo run --release --example structure_logs -- [log] [key_names.json]

use std::path::PathBuf;

use tvmka::data::logs::{load_key_names, structure_log_file, DrainConfig, LogFormat};

fn main() -> tvmka::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let args: Vec<String> = std::env::args().collect();
    let log = args.get(1).map_or(fixtures.join("hdfs_sample.log"), PathBuf::from);
    let names = args.get(2).map_or(fixtures.join("hdfs_keys.json"), PathBuf::from);

    let keys = load_key_names(&names)?;
    let (templates, objects) = structure_log_file(&log, &LogFormat::hdfs(), DrainConfig::default(), &keys)?;
    for t in &templates {
        println!("{} x{:<3} {}", t.id, t.size, t.text());
    }
    for o in &objects {
        println!("{}", serde_json::to_string(&o.pairs)?);
    }
    Ok(())
}
