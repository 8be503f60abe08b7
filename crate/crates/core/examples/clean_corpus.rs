//! Drops records without usable figure text and prints the report.

use figcap::dataset::{clean, parse_records, Vocabulary};

const CORPUS: &str = r#"{"id":"a","figure_text":"accuracy 0.9 epochs","caption":"accuracy over epochs"}
{"id":"b","figure_text":"","caption":"a figure with no text"}
{"id":"c","figure_text":"   ","caption":"whitespace only"}
{"id":"d","figure_text":"loss 1.2","abstract":"we train a network","caption":"training loss"}
"#;

fn main() -> figcap::Result<()> {
    let records = parse_records(CORPUS.as_bytes())?;
    let (kept, report) = clean(records, 1);
    println!("{}", serde_json::to_string_pretty(&report)?);

    let vocab = Vocabulary::build(&kept, 1, 100)?;
    println!("vocabulary of {} tokens: {:?}", vocab.len(), vocab.tokens());
    let ids = vocab.encode_caption(&kept[0].caption, 16)?;
    println!(
        "{:?} -> {ids:?} -> {:?}",
        kept[0].caption,
        vocab.decode(&ids)
    );
    Ok(())
}
