use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions and ablation switches for [`CaptionModel`](super::CaptionModel).
///
/// Defaults follow the published sizes where they exist (1024-wide
/// attention, 2048-wide fused vector) and desk-scale choices elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the incoming image embedding.
    pub d_clip: usize,
    /// Number of visual prefix rows.
    pub k: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub d_fuse: usize,
    /// Layers per fusion block.
    pub fusion_layers: usize,
    pub heads: usize,
    /// Inner width of the fusion feed-forward sublayer.
    pub d_ff: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub use_knowledge: bool,
    pub use_fusion: bool,
    pub use_vision: bool,
    pub use_text: bool,
    /// Sinusoidal positions added after the fusion input projections.
    pub positional_encoding: bool,
    /// Squash output scores with a sigmoid before the softmax.
    pub output_sigmoid: bool,
    pub layer_norm_eps: f64,
    /// Half-width of the uniform weight initialization.
    pub init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_clip: 512,
            k: 10,
            d_model: 256,
            d_attn: 1024,
            d_fuse: 2048,
            fusion_layers: 2,
            heads: 4,
            d_ff: 512,
            d_hidden: 512,
            vocab_size: 1000,
            max_caption_len: 32,
            use_knowledge: true,
            use_fusion: true,
            use_vision: true,
            use_text: true,
            positional_encoding: true,
            output_sigmoid: true,
            layer_norm_eps: 1e-5,
            init_range: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoders,
    Fusion,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Encoders,
        ParamGroup::Fusion,
        ParamGroup::Decoder,
    ];

    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "visual" | "text" | "knowledge" => Some(ParamGroup::Encoders),
            "fusion" => Some(ParamGroup::Fusion),
            "decoder" => Some(ParamGroup::Decoder),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoders => "encoders",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) const FUSION_STREAMS: [&str; 2] = ["text", "prefix"];

impl ModelConfig {
    /// Every violated constraint, keyed by field name.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let positive = [
            ("d_clip", self.d_clip),
            ("k", self.k),
            ("d_model", self.d_model),
            ("d_attn", self.d_attn),
            ("d_fuse", self.d_fuse),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_hidden", self.d_hidden),
        ];
        for (name, value) in positive {
            if value == 0 {
                v.push((name, "must be positive".to_string()));
            }
        }
        if self.d_fuse != 2 * self.d_attn {
            v.push((
                "d_fuse",
                format!("must equal 2 * d_attn = {}", 2 * self.d_attn),
            ));
        }
        if self.heads > 0 && !self.d_attn.is_multiple_of(self.heads) {
            v.push(("heads", format!("must divide d_attn = {}", self.d_attn)));
        }
        if !self.d_hidden.is_multiple_of(2) {
            v.push(("d_hidden", "must be even".to_string()));
        }
        if self.vocab_size < 6 {
            v.push(("vocab_size", "must be at least 6".to_string()));
        }
        if self.max_caption_len < 3 {
            v.push(("max_caption_len", "must be at least 3".to_string()));
        }
        if !self.use_vision && !self.use_text {
            v.push((
                "use_vision",
                "at least one of use_vision / use_text must be true".to_string(),
            ));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            v.push(("layer_norm_eps", "must be > 0".to_string()));
        }
        if self.init_range.is_nan() || self.init_range < 0.0 {
            v.push(("init_range", "must be >= 0".to_string()));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            let msg = v
                .iter()
                .map(|(k, m)| format!("model.{k}: {m}"))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Config(msg))
        }
    }

    /// Names of fields whose values differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return vec![];
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn has_text_stream(&self) -> bool {
        self.use_text
    }

    /// The prefix stream carries the visual rows and/or the knowledge template.
    pub fn has_prefix_stream(&self) -> bool {
        self.use_vision || self.use_knowledge
    }

    pub fn has_fusion_layers(&self) -> bool {
        self.use_fusion && self.has_text_stream() && self.has_prefix_stream()
    }

    pub fn prefix_len(&self) -> usize {
        let visual = if self.use_vision { self.k } else { 0 };
        let knowledge = if self.use_knowledge { 3 } else { 0 };
        visual + knowledge
    }

    /// The full, ordered parameter inventory. A pure function of the config.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init })
        };
        let d = self.d_model;
        let a = self.d_attn;
        let h = self.d_hidden;
        let v = self.vocab_size;

        if self.use_vision {
            add("visual.w1".into(), vec![self.d_clip, 2 * d], Init::Uniform);
            add("visual.b1".into(), vec![2 * d], Init::Zeros);
            add("visual.w2".into(), vec![2 * d, self.k * d], Init::Uniform);
            add("visual.b2".into(), vec![self.k * d], Init::Zeros);
        }
        if self.use_text || self.use_knowledge {
            add("text.embedding".into(), vec![v, d], Init::Uniform);
            add("text.ln.gain".into(), vec![d], Init::Ones);
            add("text.ln.bias".into(), vec![d], Init::Zeros);
        }
        if self.use_knowledge {
            add("knowledge.fc.w".into(), vec![d, self.d_fuse], Init::Uniform);
            add("knowledge.fc.b".into(), vec![self.d_fuse], Init::Zeros);
            add(
                "knowledge.down.w".into(),
                vec![self.d_fuse, d],
                Init::Uniform,
            );
            add("knowledge.down.b".into(), vec![d], Init::Zeros);
        }

        if self.has_text_stream() {
            add("fusion.proj_text.w".into(), vec![d, a], Init::Uniform);
            add("fusion.proj_text.b".into(), vec![a], Init::Zeros);
        }
        if self.has_prefix_stream() {
            add("fusion.proj_prefix.w".into(), vec![d, a], Init::Uniform);
            add("fusion.proj_prefix.b".into(), vec![a], Init::Zeros);
        }
        if self.has_fusion_layers() {
            for stream in FUSION_STREAMS {
                for l in 0..self.fusion_layers {
                    let p = format!("fusion.{stream}.{l}");
                    for proj in ["q", "k", "v", "o"] {
                        add(format!("{p}.{proj}.w"), vec![a, a], Init::Uniform);
                        add(format!("{p}.{proj}.b"), vec![a], Init::Zeros);
                    }
                    add(format!("{p}.ln1.gain"), vec![a], Init::Ones);
                    add(format!("{p}.ln1.bias"), vec![a], Init::Zeros);
                    add(format!("{p}.ff1.w"), vec![a, self.d_ff], Init::Uniform);
                    add(format!("{p}.ff1.b"), vec![self.d_ff], Init::Zeros);
                    add(format!("{p}.ff2.w"), vec![self.d_ff, a], Init::Uniform);
                    add(format!("{p}.ff2.b"), vec![a], Init::Zeros);
                    add(format!("{p}.ln2.gain"), vec![a], Init::Ones);
                    add(format!("{p}.ln2.bias"), vec![a], Init::Zeros);
                }
            }
        }

        if self.use_vision {
            add("decoder.init.w_p_ic".into(), vec![d, h / 2], Init::Uniform);
            add("decoder.init.w_p_ih".into(), vec![d, h / 2], Init::Uniform);
        }
        if self.use_text {
            add("decoder.init.w_t_ic".into(), vec![d, h / 2], Init::Uniform);
            add("decoder.init.w_t_ih".into(), vec![d, h / 2], Init::Uniform);
        }
        add("decoder.word_vectors".into(), vec![v, d], Init::Uniform);
        add("decoder.embed_e".into(), vec![d, d], Init::Uniform);
        for gate in ["i", "f", "o", "c"] {
            add(format!("decoder.w_{gate}y"), vec![d, h], Init::Uniform);
            add(format!("decoder.w_{gate}h"), vec![h, h], Init::Uniform);
            add(format!("decoder.w_{gate}d"), vec![a, h], Init::Uniform);
            add(format!("decoder.b_{gate}"), vec![h], Init::Zeros);
        }
        add("decoder.w_h".into(), vec![h, v], Init::Uniform);
        add("decoder.w_d".into(), vec![a, v], Init::Uniform);
        add("decoder.attn.w_a".into(), vec![h, h], Init::Uniform);
        add("decoder.attn.u_a".into(), vec![a, h], Init::Uniform);
        add("decoder.attn.v".into(), vec![h, 1], Init::Uniform);
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}
