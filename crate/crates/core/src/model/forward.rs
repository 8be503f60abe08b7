//! The network, one primitive at a time.
//!
//! Streams are row-major `[positions, width]` tensors and single vectors are
//! `[1, width]` rows, so every linear map reads `x · W + b`.

use std::cell::RefCell;
use std::collections::HashMap;

use super::config::{ModelConfig, FUSION_STREAMS};
use super::params::Parameters;
use crate::dataset::{CLS, UNK};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// What the encoders see for one record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordInputs {
    /// Image embedding of length `d_clip`; ignored when vision is ablated.
    pub image: Option<Vec<f64>>,
    pub figure_text_ids: Vec<usize>,
    pub abstract_ids: Vec<usize>,
}

/// Output of the fusion stage.
#[derive(Debug, Clone, Copy)]
pub struct Fused<'g> {
    /// Pooled streams concatenated, `[1, d_fuse]`.
    pub e: Var<'g>,
    /// Per-position outputs of both streams stacked, `[m, d_attn]`.
    pub memory: Var<'g>,
}

/// Everything the decoder needs for one record.
#[derive(Debug, Clone, Copy)]
pub struct Encoded<'g> {
    pub visual: Option<Var<'g>>,
    pub text: Option<Var<'g>>,
    pub prefix: Option<Var<'g>>,
    pub fused: Fused<'g>,
    /// `memory · U_a`, computed once per record.
    pub memory_keys: Var<'g>,
    pub h0: Var<'g>,
    pub c0: Var<'g>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderStep<'g> {
    pub h: Var<'g>,
    pub c: Var<'g>,
    /// Pre-softmax scores `ỹ_t`, `[1, vocab]`.
    pub scores: Var<'g>,
    /// `softmax(ỹ_t)`.
    pub dist: Var<'g>,
}

/// Binds parameters onto a graph on first use and exposes the model's
/// forward operations.
pub struct Forward<'g, 'm> {
    graph: &'g Graph,
    config: &'m ModelConfig,
    params: &'m Parameters,
    track_grad: bool,
    bound: RefCell<HashMap<&'m str, Var<'g>>>,
}

impl<'g, 'm> Forward<'g, 'm> {
    pub fn new(
        graph: &'g Graph,
        config: &'m ModelConfig,
        params: &'m Parameters,
        track_grad: bool,
    ) -> Self {
        Forward {
            graph,
            config,
            params,
            track_grad,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn config(&self) -> &'m ModelConfig {
        self.config
    }

    /// The graph handle for parameter `name`.
    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let (key, tensor) = self
            .params
            .entry(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name:?}")))?;
        let var = self
            .graph
            .leaf(tensor.clone().with_requires_grad(self.track_grad));
        self.bound.borrow_mut().insert(key, var);
        Ok(var)
    }

    /// Gradients of every parameter that took part in the graph. Call after
    /// backward.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        let bound = self.bound.borrow();
        let mut out: Vec<_> = bound
            .iter()
            .filter_map(|(name, var)| var.grad().map(|g| (name.to_string(), g.into_data())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    fn linear(&self, x: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        x.matmul(&self.param(&format!("{prefix}.w"))?)?
            .add_bias(&self.param(&format!("{prefix}.b"))?)
    }

    fn layer_norm(&self, x: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        x.layer_norm(
            &self.param(&format!("{prefix}.gain"))?,
            &self.param(&format!("{prefix}.bias"))?,
            self.config.layer_norm_eps,
        )
    }

    /// The image embedding mapped to `k` prefix rows: a tanh MLP of width
    /// `2·d_model`, reshaped to `[k, d_model]`.
    pub fn map_visual(&self, image: Var<'g>) -> Result<Var<'g>> {
        let cfg = self.config;
        let shape = image.shape();
        if shape.iter().product::<usize>() != cfg.d_clip {
            return Err(Error::shape("map_visual", &shape, &[1, cfg.d_clip]));
        }
        let x = image.reshape(&[1, cfg.d_clip])?;
        let hidden = x
            .matmul(&self.param("visual.w1")?)?
            .add_bias(&self.param("visual.b1")?)?
            .tanh();
        hidden
            .matmul(&self.param("visual.w2")?)?
            .add_bias(&self.param("visual.b2")?)?
            .reshape(&[cfg.k, cfg.d_model])
    }

    /// Word embeddings followed by layer normalization, `[n, d_model]`.
    pub fn encode_text(&self, ids: &[usize]) -> Result<Var<'g>> {
        let table = self.param("text.embedding")?;
        let emb = self.graph.embedding(table, ids)?;
        self.layer_norm(emb, "text.ln")
    }

    /// Mean-pooled abstract encoding through a relu layer, `[1, d_fuse]`.
    /// An empty abstract pools to zeros, giving `relu(b)`.
    pub fn encode_knowledge(&self, abstract_ids: &[usize]) -> Result<Var<'g>> {
        let pooled = if abstract_ids.is_empty() {
            self.constant(Tensor::zeros(&[1, self.config.d_model]))
        } else {
            self.encode_text(abstract_ids)?.mean_rows()?
        };
        Ok(self.linear(pooled, "knowledge.fc")?.relu())
    }

    /// `[cls; down(knowledge); cls; visual rows]` when knowledge is on,
    /// otherwise just the visual rows. `None` when neither is present.
    pub fn assemble_prefix(
        &self,
        visual: Option<Var<'g>>,
        knowledge: Option<Var<'g>>,
    ) -> Result<Option<Var<'g>>> {
        let mut rows = Vec::with_capacity(4);
        if self.config.use_knowledge {
            let knowledge = knowledge.ok_or_else(|| {
                Error::Contract("knowledge vector required when use_knowledge is set".into())
            })?;
            let cls = self
                .graph
                .embedding(self.param("text.embedding")?, &[CLS])?;
            let down = self.linear(knowledge, "knowledge.down")?;
            rows.extend([cls, down, cls]);
        }
        if let Some(p) = visual {
            rows.push(p);
        }
        if rows.is_empty() {
            return Ok(None);
        }
        self.graph.concat_rows(&rows).map(Some)
    }

    fn positions(&self, rows: usize, width: usize) -> Var<'g> {
        self.constant(sinusoidal_positions(rows, width))
    }

    fn project_stream(&self, x: Var<'g>, name: &str) -> Result<Var<'g>> {
        let y = self.linear(x, &format!("fusion.proj_{name}"))?;
        if self.config.positional_encoding {
            let rows = y.shape()[0];
            y.add(&self.positions(rows, self.config.d_attn))
        } else {
            Ok(y)
        }
    }

    fn attention(&self, queries: Var<'g>, context: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        let heads = self.config.heads;
        let width = self.config.d_attn / heads;
        let q = self.linear(queries, &format!("{prefix}.q"))?;
        let k = self.linear(context, &format!("{prefix}.k"))?;
        let v = self.linear(context, &format!("{prefix}.v"))?;
        let scale = 1.0 / (width as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * width, (h + 1) * width);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let weights = qh.matmul_transposed(&kh)?.scale(scale).softmax();
            outs.push(weights.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            self.graph.concat_cols(&outs)?
        };
        self.linear(merged, &format!("{prefix}.o"))
    }

    /// One fusion layer: `own` attends over `other`, then residual + norm,
    /// feed-forward, residual + norm.
    pub fn fusion_layer(&self, own: Var<'g>, other: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        let attended = self.attention(own, other, prefix)?;
        let x = self.layer_norm(own.add(&attended)?, &format!("{prefix}.ln1"))?;
        let ff = self.linear(
            self.linear(x, &format!("{prefix}.ff1"))?.relu(),
            &format!("{prefix}.ff2"),
        )?;
        self.layer_norm(x.add(&ff)?, &format!("{prefix}.ln2"))
    }

    /// Co-attention fusion of the text stream `h` and the prefix stream `c`.
    /// Both are projected to `d_attn`; with fusion enabled each layer of the
    /// text block attends over the prefix stream and vice versa. The pooled
    /// outputs are concatenated into `E`.
    pub fn co_transform(&self, h: Var<'g>, c: Var<'g>) -> Result<Fused<'g>> {
        let mut text = self.project_stream(h, "text")?;
        let mut prefix = self.project_stream(c, "prefix")?;
        if self.config.has_fusion_layers() {
            for l in 0..self.config.fusion_layers {
                let [ts, ps] = FUSION_STREAMS;
                let next_text = self.fusion_layer(text, prefix, &format!("fusion.{ts}.{l}"))?;
                let next_prefix = self.fusion_layer(prefix, text, &format!("fusion.{ps}.{l}"))?;
                text = next_text;
                prefix = next_prefix;
            }
        }
        let e = self
            .graph
            .concat_cols(&[text.mean_rows()?, prefix.mean_rows()?])?;
        let memory = self.graph.concat_rows(&[text, prefix])?;
        Ok(Fused { e, memory })
    }

    /// Fusion when a modality is ablated away: the lone stream is projected,
    /// and the missing half of `E` is zero.
    fn single_stream(&self, x: Var<'g>, name: &str) -> Result<Fused<'g>> {
        let y = self.project_stream(x, name)?;
        let zeros = self.constant(Tensor::zeros(&[1, self.config.d_attn]));
        let pooled = y.mean_rows()?;
        let parts = if name == "text" {
            [pooled, zeros]
        } else {
            [zeros, pooled]
        };
        Ok(Fused {
            e: self.graph.concat_cols(&parts)?,
            memory: y,
        })
    }

    /// `c₀ = σ([pool(P)·W_P,Ic ; pool(T)·W_T,Ic])` and likewise `h₀`. An
    /// ablated modality contributes a zero pre-activation half.
    pub fn decoder_init(
        &self,
        visual: Option<Var<'g>>,
        text: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let half = self.config.d_hidden / 2;
        let pooled_p = visual.map(|p| p.mean_rows()).transpose()?;
        let pooled_t = text.map(|t| t.mean_rows()).transpose()?;
        let zeros = || self.constant(Tensor::zeros(&[1, half]));
        let side = |pooled: Option<Var<'g>>, name: &str| -> Result<Var<'g>> {
            match pooled {
                Some(x) => x.matmul(&self.param(name)?),
                None => Ok(zeros()),
            }
        };
        let c0 = self
            .graph
            .concat_cols(&[
                side(pooled_p, "decoder.init.w_p_ic")?,
                side(pooled_t, "decoder.init.w_t_ic")?,
            ])?
            .sigmoid();
        let h0 = self
            .graph
            .concat_cols(&[
                side(pooled_p, "decoder.init.w_p_ih")?,
                side(pooled_t, "decoder.init.w_t_ih")?,
            ])?
            .sigmoid();
        Ok((h0, c0))
    }

    pub fn memory_keys(&self, memory: Var<'g>) -> Result<Var<'g>> {
        memory.matmul(&self.param("decoder.attn.u_a")?)
    }

    /// Additive attention over the fusion memory:
    /// `s_j = vᵀ tanh(W_a h_prev + U_a m_j)`, `d_t = Σ softmax(s)_j m_j`.
    /// Returns `(d_t, weights)`.
    pub fn attention_context(
        &self,
        h_prev: Var<'g>,
        memory: Var<'g>,
        memory_keys: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let rows = memory.shape()[0];
        let query = h_prev.matmul(&self.param("decoder.attn.w_a")?)?;
        let scores = memory_keys
            .add_bias(&query)?
            .tanh()
            .matmul(&self.param("decoder.attn.v")?)?
            .reshape(&[1, rows])?;
        let weights = scores.softmax();
        Ok((weights.matmul(&memory)?, weights))
    }

    fn gate_input(&self, gate: &str, e: Var<'g>, h: Var<'g>, d: Var<'g>) -> Result<Var<'g>> {
        let from_word = e.matmul(&self.param(&format!("decoder.w_{gate}y"))?)?;
        let from_state = h.matmul(&self.param(&format!("decoder.w_{gate}h"))?)?;
        let from_context = d.matmul(&self.param(&format!("decoder.w_{gate}d"))?)?;
        from_word
            .add(&from_state)?
            .add(&from_context)?
            .add_bias(&self.param(&format!("decoder.b_{gate}"))?)
    }

    /// Word vector for the previous token: `e₀ = 0` at the first step,
    /// otherwise `C[y]·E`.
    pub fn word_input(&self, prev: Option<usize>) -> Result<Var<'g>> {
        match prev {
            None => Ok(self.constant(Tensor::zeros(&[1, self.config.d_model]))),
            Some(id) => self
                .graph
                .embedding(self.param("decoder.word_vectors")?, &[id])?
                .matmul(&self.param("decoder.embed_e")?),
        }
    }

    /// One LSTM step with input, forget and output gates fed by the word
    /// vector, the previous state and the attention context, then the output
    /// scores `σ(h_t·W_h + d_t·W_d)` (or the raw sum with `output_sigmoid`
    /// off) and their softmax.
    pub fn decoder_step(
        &self,
        prev: Option<usize>,
        h_prev: Var<'g>,
        c_prev: Var<'g>,
        context: Var<'g>,
    ) -> Result<DecoderStep<'g>> {
        let e = self.word_input(prev)?;
        let i = self.gate_input("i", e, h_prev, context)?.sigmoid();
        let f = self.gate_input("f", e, h_prev, context)?.sigmoid();
        let o = self.gate_input("o", e, h_prev, context)?.sigmoid();
        let candidate = self.gate_input("c", e, h_prev, context)?.tanh();
        let c = i.mul(&candidate)?.add(&f.mul(&c_prev)?)?;
        let h = o.mul(&c.tanh())?;
        let logits = h
            .matmul(&self.param("decoder.w_h")?)?
            .add(&context.matmul(&self.param("decoder.w_d")?)?)?;
        let scores = if self.config.output_sigmoid {
            logits.sigmoid()
        } else {
            logits
        };
        Ok(DecoderStep {
            h,
            c,
            scores,
            dist: scores.softmax(),
        })
    }

    /// Runs every encoder, the fusion stage and the decoder initialization.
    pub fn encode(&self, inputs: &RecordInputs) -> Result<Encoded<'g>> {
        let cfg = self.config;
        let visual = if cfg.use_vision {
            let image = inputs.image.as_ref().ok_or_else(|| {
                Error::Contract("image features required when use_vision is set".into())
            })?;
            let x = self.constant(Tensor::row(image.clone()));
            Some(self.map_visual(x)?)
        } else {
            None
        };
        let text = if cfg.use_text {
            let ids: &[usize] = if inputs.figure_text_ids.is_empty() {
                &[UNK]
            } else {
                &inputs.figure_text_ids
            };
            Some(self.encode_text(ids)?)
        } else {
            None
        };
        let knowledge = if cfg.use_knowledge {
            Some(self.encode_knowledge(&inputs.abstract_ids)?)
        } else {
            None
        };
        let prefix = self.assemble_prefix(visual, knowledge)?;
        let fused = match (text, prefix) {
            (Some(t), Some(p)) => self.co_transform(t, p)?,
            (Some(t), None) => self.single_stream(t, "text")?,
            (None, Some(p)) => self.single_stream(p, "prefix")?,
            (None, None) => {
                return Err(Error::Contract(
                    "record has neither text nor prefix stream".into(),
                ))
            }
        };
        let memory_keys = self.memory_keys(fused.memory)?;
        let (h0, c0) = self.decoder_init(visual, text)?;
        Ok(Encoded {
            visual,
            text,
            prefix,
            fused,
            memory_keys,
            h0,
            c0,
        })
    }

    /// Teacher-forced negative log-likelihood of a padded caption row.
    /// Step `j` consumes token `j` and predicts token `j + 1`; positions with
    /// `mask[j + 1] == false` contribute nothing. Returns `(sum, count)`.
    pub fn caption_nll(
        &self,
        enc: &Encoded<'g>,
        caption_ids: &[usize],
        mask: &[bool],
    ) -> Result<(Var<'g>, usize)> {
        if caption_ids.len() < 2 || caption_ids.len() != mask.len() {
            return Err(Error::Contract(format!(
                "caption of {} ids with mask of {} cannot be scored",
                caption_ids.len(),
                mask.len()
            )));
        }
        let steps = caption_ids.len() - 1;
        let (mut h, mut c) = (enc.h0, enc.c0);
        let mut rows = Vec::with_capacity(steps);
        for (j, &tok) in caption_ids[..steps].iter().enumerate() {
            let (context, _) = self.attention_context(h, enc.fused.memory, enc.memory_keys)?;
            let prev = if j == 0 { None } else { Some(tok) };
            let step = self.decoder_step(prev, h, c, context)?;
            rows.push(step.scores);
            h = step.h;
            c = step.c;
        }
        let scores = self.graph.concat_rows(&rows)?;
        let targets = &caption_ids[1..];
        let target_mask = &mask[1..];
        let count = target_mask.iter().filter(|&&m| m).count();
        Ok((scores.masked_cross_entropy(targets, target_mask)?, count))
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/w))`, `PE[p, 2i+1] = cos(…)`.
pub fn sinusoidal_positions(rows: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * width);
    for p in 0..rows {
        for j in 0..width {
            let pair = (j / 2) as f64 * 2.0;
            let angle = p as f64 / 10000f64.powf(pair / width as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, width], data).expect("positive dims")
}
