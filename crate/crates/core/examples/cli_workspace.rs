//! Writes a synthetic corpus and a run config that the `figcap` binary can
//! train on, then prints the commands to try.
//!
//! ```text
//! cargo run --example cli_workspace -- /tmp/figcap-run
//! ```

use std::path::PathBuf;

use figcap::dataset::{write_records, Vocabulary};
use figcap::synthetic::{overfit_corpus, small_model_config, small_optimizer};
use serde_json::json;

fn main() -> figcap::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("figcap-run"), PathBuf::from);
    std::fs::create_dir_all(&dir)?;
    let records = overfit_corpus();
    write_records(dir.join("train.jsonl"), &records)?;
    write_records(dir.join("test.jsonl"), &records[..4])?;
    let vocab = Vocabulary::build(&records, 1, 1000)?;
    let config = json!({
        "dataset": {
            "train": "train.jsonl",
            "val": "test.jsonl",
            "test": "test.jsonl",
            "features": { "mode": "toy", "seed": 0 },
            "min_text_len": 1,
            "max_caption_len": 16,
        },
        "model": small_model_config(vocab.len(), 64, 16),
        "optimizer": small_optimizer(200, 0),
        "output": { "dir": "out" },
    });
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    let d = dir.display();
    println!("figcap train --config {d}/config.json");
    println!("figcap eval --config {d}/config.json --checkpoint {d}/out/best.fck --split test");
    println!(
        "figcap caption --config {d}/config.json --checkpoint {d}/out/best.fck --record '{}'",
        serde_json::to_string(&records[0])?
    );
    Ok(())
}
