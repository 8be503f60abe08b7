//! Captions that need both the image and the figure text: the full model
//! against vision-only and text-only variants under the same budget.

use figcap::dataset::{TokenizedExample, Vocabulary};
use figcap::features::FeatureSource;
use figcap::model::{CaptionModel, ModelConfig};
use figcap::synthetic::{bimodal_corpus, small_model_config, small_optimizer};
use figcap::training::{dataset_loss, train, TrainData};

fn main() -> figcap::Result<()> {
    let (records, images) = bimodal_corpus(4, 32, 20.0, 0);
    let vocab = Vocabulary::build(&records, 1, 1000)?;
    let examples = records
        .iter()
        .map(|r| TokenizedExample::from_record(r, &vocab, 8, 8))
        .collect::<figcap::Result<Vec<_>>>()?;
    let features = FeatureSource::File(images);
    let base = ModelConfig {
        use_knowledge: false,
        ..small_model_config(vocab.len(), 32, 8)
    };
    let variants = [
        ("full", base.clone()),
        (
            "text only",
            ModelConfig {
                use_vision: false,
                ..base.clone()
            },
        ),
        (
            "vision only",
            ModelConfig {
                use_text: false,
                ..base.clone()
            },
        ),
        (
            "no fusion",
            ModelConfig {
                use_fusion: false,
                ..base
            },
        ),
    ];
    for (name, config) in variants {
        let model = CaptionModel::new(config, 0)?;
        let data = TrainData {
            train: &examples,
            val: &[],
            features: &features,
        };
        let out = train(model, &small_optimizer(60, 0), &data, None, |_| Ok(()))?;
        println!(
            "{name:12} final train loss {:.4}",
            dataset_loss(&out.model, &examples, &features, 16)?
        );
    }
    println!(
        "a caption missing one of two equiprobable words costs ln 2 / 3 = {:.4} per token",
        2f64.ln() / 3.0
    );
    Ok(())
}
