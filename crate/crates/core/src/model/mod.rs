//! Visual prefix mapping, text and knowledge encoders, co-attention fusion
//! and the attention-LSTM decoder.

pub mod checkpoint;
mod config;
mod decode;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, TrainProgress};
pub use config::{Init, ModelConfig, ParamGroup, ParamSpec};
pub use decode::{beam_search, greedy, CaptionHypothesis, ModelScorer, StepScorer};
pub use forward::{sinusoidal_positions, DecoderStep, Encoded, Forward, Fused, RecordInputs};
pub use params::Parameters;

use crate::error::Result;
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl CaptionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(CaptionModel { config, params })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        CaptionModel {
            config: ckpt.config,
            params: ckpt.params,
        }
    }

    /// Forward context on `graph`; parameters get gradients iff `track_grad`.
    pub fn forward<'g, 'm>(&'m self, graph: &'g Graph, track_grad: bool) -> Forward<'g, 'm> {
        Forward::new(graph, &self.config, &self.params, track_grad)
    }

    /// Generated caption ids by greedy decoding, at most `max_len` tokens.
    pub fn greedy_decode(
        &self,
        inputs: &RecordInputs,
        max_len: usize,
    ) -> Result<CaptionHypothesis> {
        let graph = Graph::new();
        let fwd = self.forward(&graph, false);
        let scorer = ModelScorer {
            forward: &fwd,
            encoded: fwd.encode(inputs)?,
        };
        greedy(&scorer, max_len)
    }

    /// Beam search with length-normalized final selection.
    pub fn beam_decode(
        &self,
        inputs: &RecordInputs,
        beam: usize,
        max_len: usize,
    ) -> Result<CaptionHypothesis> {
        let graph = Graph::new();
        let fwd = self.forward(&graph, false);
        let scorer = ModelScorer {
            forward: &fwd,
            encoded: fwd.encode(inputs)?,
        };
        beam_search(&scorer, beam, max_len, true)
    }

    /// Default decode budget: the caption length limit minus the BOS slot.
    pub fn max_decode_len(&self) -> usize {
        self.config.max_caption_len.saturating_sub(1)
    }
}
