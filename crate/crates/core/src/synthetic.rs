//! Small generated corpora for smoke runs, overfitting checks and ablations.

use crate::dataset::ScicapRecord;
use crate::features::{toy_image_encoder, FeatureMap};
use crate::model::ModelConfig;
use crate::training::OptimizerConfig;

/// Common multiplier on the three default group rates for the small runs
/// below. Plain SGD with 0.9 decay per epoch integrates to roughly ten
/// epochs at the base rate, which at the default magnitudes barely moves a
/// freshly initialized model.
pub const SMALL_RUN_LR_SCALE: f64 = 1500.0;

/// Small dimensions for desk-scale runs: d_model 32, k 4, d_hidden 64,
/// d_attn 64, with an unsquashed output layer.
pub fn small_model_config(vocab_size: usize, d_clip: usize, max_caption_len: usize) -> ModelConfig {
    ModelConfig {
        d_clip,
        k: 4,
        d_model: 32,
        d_attn: 64,
        d_fuse: 128,
        heads: 4,
        d_ff: 64,
        d_hidden: 64,
        vocab_size,
        max_caption_len,
        output_sigmoid: false,
        ..ModelConfig::default()
    }
}

/// The default optimizer with every group rate scaled by
/// [`SMALL_RUN_LR_SCALE`], batch size 1.
pub fn small_optimizer(epochs: usize, seed: u64) -> OptimizerConfig {
    let base = OptimizerConfig::default();
    OptimizerConfig {
        lr_fusion: base.lr_fusion * SMALL_RUN_LR_SCALE,
        lr_encoders: base.lr_encoders * SMALL_RUN_LR_SCALE,
        lr_decoder: base.lr_decoder * SMALL_RUN_LR_SCALE,
        epochs,
        batch_size: 1,
        seed,
        ..base
    }
}

const METRICS: [&str; 4] = ["accuracy", "loss", "throughput", "latency"];
const AXES: [&str; 4] = ["epochs", "batch size", "model width", "sequence length"];
const METHODS: [&str; 4] = [
    "baseline",
    "pruned network",
    "distilled model",
    "our method",
];
const DATASETS: [&str; 4] = ["cifar", "imagenet", "squad", "wikitext"];

/// Sixteen distinct figures whose captions combine a metric, an axis, a
/// method and a dataset. The vocabulary is about fifty tokens.
pub fn overfit_corpus() -> Vec<ScicapRecord> {
    (0..16)
        .map(|i| {
            let metric = METRICS[i % 4];
            let axis = AXES[(i / 4 + i) % 4];
            let method = METHODS[i / 4];
            let dataset = DATASETS[(i * 3 + 1) % 4];
            ScicapRecord {
                id: format!("fig-{i:02}"),
                figure_text: format!("{metric} {axis} {dataset} {}", i * 10),
                abstract_text: format!("we study the {method} on {dataset}"),
                caption: format!("{metric} versus {axis} for the {method} on {dataset}"),
                feature_ref: format!("img-{i:02}"),
            }
        })
        .collect()
}

const COLORS: [&str; 2] = ["red", "blue"];
const SHAPES: [&str; 2] = ["bars", "lines"];

/// Records whose caption names a color carried only by the image and a
/// chart type carried only by the figure text, `per_cell` records for each
/// of the four combinations. Returns the records and their image vectors.
///
/// Image vectors are a label prototype plus a per-record perturbation, so
/// the color is recoverable from the image alone. Each vector is rescaled
/// to L2 norm `image_norm`; unnormalized image embeddings are typically
/// well above unit norm, and small inputs leave the visual path starved of
/// gradient at the default init range. The figure text names the
/// chart type among filler words that vary by record.
pub fn bimodal_corpus(
    per_cell: usize,
    dim: usize,
    image_norm: f64,
    seed: u64,
) -> (Vec<ScicapRecord>, FeatureMap) {
    const FILLER: [&str; 6] = ["axis", "grid", "legend", "scale", "tick", "label"];
    let mut records = Vec::new();
    let mut features = FeatureMap::new();
    let mut n = 0;
    for (c, color) in COLORS.iter().enumerate() {
        let prototype = toy_image_encoder(&format!("color-{c}"), dim, seed);
        for shape in SHAPES {
            for j in 0..per_cell {
                let id = format!("bi-{n:03}");
                let noise = toy_image_encoder(&id, dim, seed);
                let mut image: Vec<f64> = prototype
                    .iter()
                    .zip(&noise)
                    .map(|(p, e)| p + 0.3 * e)
                    .collect();
                let norm = image.iter().map(|x| x * x).sum::<f64>().sqrt();
                image.iter_mut().for_each(|x| *x *= image_norm / norm);
                features.insert(id.clone(), image);
                let filler = [FILLER[(n + j) % 6], FILLER[(n * 5 + 1) % 6]];
                records.push(ScicapRecord {
                    id: id.clone(),
                    figure_text: format!("{} {shape} {}", filler[0], filler[1]),
                    abstract_text: String::new(),
                    caption: format!("{color} {shape}"),
                    feature_ref: id,
                });
                n += 1;
            }
        }
    }
    (records, features)
}
