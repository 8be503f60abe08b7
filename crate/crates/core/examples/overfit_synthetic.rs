//! Trains the small model until it memorizes sixteen synthetic captions,
//! then decodes them and round-trips the checkpoint.

use std::time::Instant;

use figcap::dataset::{TokenizedExample, Vocabulary};
use figcap::features::FeatureSource;
use figcap::model::{CaptionModel, Checkpoint};
use figcap::synthetic::{overfit_corpus, small_model_config, small_optimizer};
use figcap::training::{dataset_loss, decode_pairs, greedy_bleu4, train, TrainData};

fn main() -> figcap::Result<()> {
    let records = overfit_corpus();
    let vocab = Vocabulary::build(&records, 1, 1000)?;
    let examples = records
        .iter()
        .map(|r| TokenizedExample::from_record(r, &vocab, 16, 16))
        .collect::<figcap::Result<Vec<_>>>()?;
    let features = FeatureSource::Toy { dim: 64, seed: 0 };
    let model = CaptionModel::new(small_model_config(vocab.len(), 64, 16), 0)?;
    let opt = small_optimizer(200, 0);
    println!(
        "{} records, vocabulary {}, {} parameters",
        records.len(),
        vocab.len(),
        model.params.count()
    );

    let start = Instant::now();
    let initial = dataset_loss(&model, &examples, &features, 16)?;
    let data = TrainData {
        train: &examples,
        val: &[],
        features: &features,
    };
    let out = train(model, &opt, &data, None, |r| {
        if r.metrics.epoch % 25 == 0 {
            println!(
                "epoch {:3}  lr_decoder {:.4}  loss {:.4}",
                r.metrics.epoch, r.metrics.lr.decoder, r.metrics.train_loss
            );
        }
        Ok(())
    })?;
    let final_loss = dataset_loss(&out.model, &examples, &features, 16)?;
    println!(
        "loss {initial:.4} -> {final_loss:.4} in {:.1?}",
        start.elapsed()
    );

    let pairs = decode_pairs(&out.model, &examples, &features)?;
    for ((cand, reference), rec) in pairs.iter().zip(&records).take(4) {
        let mark = if cand == reference { "ok" } else { "MISS" };
        println!("{mark:4} {} -> {}", rec.id, vocab.decode(cand));
    }
    let exact = pairs.iter().filter(|(c, r)| c == r).count();
    println!(
        "exact {exact}/16, BLEU-4 {:.4}",
        greedy_bleu4(&out.model, &examples, &features)?
    );

    let path = std::env::temp_dir().join("figcap-overfit.fck");
    let ckpt = Checkpoint {
        config: out.model.config.clone(),
        params: out.model.params.clone(),
        vocab: Some(vocab),
        progress: Some(out.state.progress()),
    };
    ckpt.save(&path)?;
    let back = CaptionModel::from_checkpoint(Checkpoint::load(&path)?);
    println!(
        "checkpoint {} reloads with BLEU-4 {:.4}",
        path.display(),
        greedy_bleu4(&back, &examples, &features)?
    );
    Ok(())
}
