//! Sentence and corpus BLEU-4, with and without smoothing.

use figcap::metrics::{
    bleu4_corpus, bleu4_sentence, brevity_penalty, modified_precision, Smoothing,
};

fn main() -> figcap::Result<()> {
    let reference: Vec<&str> = "the loss decreases over training epochs"
        .split(' ')
        .collect();
    for candidate in [
        "the loss decreases over training epochs",
        "the loss decreases over epochs",
        "loss over training",
        "the the the the",
    ] {
        let cand: Vec<&str> = candidate.split(' ').collect();
        let plain = bleu4_sentence(&cand, &reference, Smoothing::None);
        let smooth = bleu4_sentence(&cand, &reference, Smoothing::Epsilon);
        println!(
            "{candidate:42} p1 {:?}  BP {:.3}  BLEU {:.4}  smoothed {:.4}",
            modified_precision(&cand, &reference, 1),
            brevity_penalty(cand.len(), reference.len()),
            plain.bleu4,
            smooth.bleu4
        );
    }

    let pairs = vec![
        (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]),
        (vec![6, 7, 8], vec![6, 7, 9, 10]),
    ];
    let corpus = bleu4_corpus(&pairs, Smoothing::Epsilon)?;
    println!("corpus: {}", serde_json::to_string(&corpus)?);
    Ok(())
}
