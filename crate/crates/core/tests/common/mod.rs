//! Independent oracles shared by the integration and acceptance tests:
//! central finite differences and a brute-force BLEU scorer.

#![allow(dead_code)]

use figcap::dataset::{Batch, TokenizedExample, BOS, EOS, PAD};
use figcap::features::FeatureSource;
use figcap::model::{CaptionModel, ModelConfig};
use figcap::tensor::{Graph, Tensor, Var};
use figcap::training::compute_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor: below this both gradients are treated as zero-ish.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], range: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-range..range)).collect(),
    )
    .unwrap()
}

/// A scalar function of some input tensors, built on a fresh graph.
pub type Build<'a> = dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> figcap::Result<Var<'g>> + 'a;

/// Pins a closure to the higher-ranked signature of [`Build`].
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> figcap::Result<Var<'g>>,
{
    f
}

fn eval(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    build(&g, &vars).unwrap().to_vec()[0]
}

/// Worst relative error between backward and central differences over
/// every entry of every input.
pub fn check_inputs(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars).unwrap();
    loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// `sum(y ⊙ w)` for a fixed random `w`: a generic vector-Jacobian probe.
pub fn probe<'g>(g: &'g Graph, y: Var<'g>, weights: &Tensor) -> figcap::Result<Var<'g>> {
    Ok(y.mul(&g.constant(weights.clone()))?.sum())
}

/// Values away from relu's kink so the central difference straddles no corner.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape, 2.0);
    for x in t.data_mut() {
        if x.abs() < 1e-3 {
            *x = 0.5;
        }
    }
    t
}

/// One random trial of every primitive; returns `(primitive, worst error)`.
#[allow(clippy::cloned_ref_to_slice_refs)]
pub fn primitive_trial(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let (m, k, n) = (
        r.random_range(1..4),
        r.random_range(1..5),
        r.random_range(1..4),
    );
    let a = random_tensor(&mut r, &[m, k], 1.5);
    let b = random_tensor(&mut r, &[k, n], 1.5);
    let bt = random_tensor(&mut r, &[n, k], 1.5);
    let a2 = random_tensor(&mut r, &[m, k], 1.5);
    let bias = random_tensor(&mut r, &[k], 1.5);
    let w_mk = random_tensor(&mut r, &[m, k], 1.0);
    let w_mn = random_tensor(&mut r, &[m, n], 1.0);
    let w_2mk = random_tensor(&mut r, &[2 * m, k], 1.0);
    let w_m2k = random_tensor(&mut r, &[m, 2 * k], 1.0);
    let w_1k = random_tensor(&mut r, &[1, k], 1.0);
    let gain = random_tensor(&mut r, &[k + 1], 1.5);
    let ln_bias = random_tensor(&mut r, &[k + 1], 1.5);
    let ln_x = random_tensor(&mut r, &[m, k + 1], 2.0);
    let w_ln = random_tensor(&mut r, &[m, k + 1], 1.0);
    let kinked = away_from_zero(&mut r, &[m, k]);
    let vocab = k + 2;
    let table = random_tensor(&mut r, &[vocab, 3], 1.0);
    let ids: Vec<usize> = (0..m + 1).map(|_| r.random_range(0..vocab)).collect();
    let w_emb = random_tensor(&mut r, &[m + 1, 3], 1.0);
    let logits = random_tensor(&mut r, &[m + 1, k + 1], 3.0);
    let targets: Vec<usize> = (0..m + 1).map(|_| r.random_range(0..k + 1)).collect();
    let mut mask: Vec<bool> = (0..m + 1).map(|_| r.random_bool(0.7)).collect();
    mask[0] = true;
    let lo = r.random_range(0..k);
    let hi = r.random_range(lo + 1..=k);
    let w_slice = random_tensor(&mut r, &[m, hi - lo], 1.0);
    let factor = r.random_range(-2.0..2.0);

    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {{
            let build = scalar_fn(|$g, $v| $body);
            out.push(($name, check_inputs(&build, &$inputs)));
        }};
    }
    check!("matmul", [a.clone(), b.clone()], |g, v| probe(
        g,
        v[0].matmul(&v[1])?,
        &w_mn
    ));
    check!("matmul_transposed", [a.clone(), bt.clone()], |g, v| probe(
        g,
        v[0].matmul_transposed(&v[1])?,
        &w_mn
    ));
    check!("add", [a.clone(), a2.clone()], |g, v| probe(
        g,
        v[0].add(&v[1])?,
        &w_mk
    ));
    check!("mul", [a.clone(), a2.clone()], |g, v| probe(
        g,
        v[0].mul(&v[1])?,
        &w_mk
    ));
    check!("add_bias", [a.clone(), bias.clone()], |g, v| probe(
        g,
        v[0].add_bias(&v[1])?,
        &w_mk
    ));
    check!("scale", [a.clone()], |g, v| probe(
        g,
        v[0].scale(factor),
        &w_mk
    ));
    check!("relu", [kinked.clone()], |g, v| probe(
        g,
        v[0].relu(),
        &w_mk
    ));
    check!("sigmoid", [a.clone()], |g, v| probe(
        g,
        v[0].sigmoid(),
        &w_mk
    ));
    check!("tanh", [a.clone()], |g, v| probe(g, v[0].tanh(), &w_mk));
    check!("softmax", [a.clone()], |g, v| probe(
        g,
        v[0].softmax(),
        &w_mk
    ));
    check!(
        "layer_norm",
        [ln_x.clone(), gain.clone(), ln_bias.clone()],
        |g, v| { probe(g, v[0].layer_norm(&v[1], &v[2], 1e-5)?, &w_ln) }
    );
    check!("concat_rows", [a.clone(), a2.clone()], |g, v| probe(
        g,
        g.concat_rows(&[v[0], v[1]])?,
        &w_2mk
    ));
    check!("concat_cols", [a.clone(), a2.clone()], |g, v| probe(
        g,
        g.concat_cols(&[v[0], v[1]])?,
        &w_m2k
    ));
    check!("slice_cols", [a.clone()], |g, v| probe(
        g,
        v[0].slice_cols(lo, hi)?,
        &w_slice
    ));
    check!("reshape", [a.clone()], |g, v| {
        let flat = v[0].reshape(&[1, m * k])?;
        probe(g, flat.reshape(&[m, k])?, &w_mk)
    });
    check!("embedding", [table.clone()], |g, v| probe(
        g,
        g.embedding(v[0], &ids)?,
        &w_emb
    ));
    check!("mean_rows", [a.clone()], |g, v| probe(
        g,
        v[0].mean_rows()?,
        &w_1k
    ));
    check!("sum", [a.clone()], |_g, v| Ok(v[0].sum()));
    check!("masked_cross_entropy", [logits.clone()], |_g, v| v[0]
        .masked_cross_entropy(&targets, &mask));
    // A tensor consumed on two paths must receive both contributions.
    check!("shared_use", [a.clone()], |g, v| probe(
        g,
        v[0].tanh().mul(&v[0].sigmoid())?,
        &w_mk
    ));
    out
}

/// Small model dimensions for end-to-end gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_clip: 6,
        k: 2,
        d_model: 8,
        d_attn: 16,
        d_fuse: 32,
        fusion_layers: 1,
        heads: 2,
        d_ff: 8,
        d_hidden: 8,
        vocab_size: 12,
        max_caption_len: 6,
        init_range: 0.5,
        ..ModelConfig::default()
    }
}

/// A two-example batch of random ids, with one padded caption.
pub fn tiny_batch(vocab: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let mut word = || r.random_range(5..vocab);
    let examples = vec![
        TokenizedExample {
            id: "x0".into(),
            caption_ids: vec![BOS, word(), word(), word(), EOS],
            figure_text_ids: vec![word(), word(), word()],
            abstract_ids: vec![word(), word()],
            feature_ref: "img-0".into(),
        },
        TokenizedExample {
            id: "x1".into(),
            caption_ids: vec![BOS, word(), EOS],
            figure_text_ids: vec![word()],
            abstract_ids: vec![],
            feature_ref: "img-1".into(),
        },
    ];
    Batch::from_examples(examples, PAD)
}

pub fn model_loss(model: &CaptionModel, batch: &Batch, features: &FeatureSource) -> f64 {
    let g = Graph::new();
    let fwd = model.forward(&g, false);
    compute_loss(model, &fwd, batch, features).unwrap().to_vec()[0]
}

pub struct ModelCheck {
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Checked entries whose numeric gradient exceeds the relative floor.
    pub nonzero: usize,
    pub tensors: usize,
}

/// Backward against central differences on up to `per_tensor` sampled
/// entries of every named parameter.
pub fn check_model(config: ModelConfig, seed: u64, per_tensor: usize) -> ModelCheck {
    let mut model = CaptionModel::new(config.clone(), seed).unwrap();
    // Move biases and gains off their exact init values; a zero bias sits on
    // relu's kink, where the one-sided derivative and the central difference
    // legitimately disagree.
    let mut jitter = rng(seed ^ 0x5EED);
    for (_, t) in model.params.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x += jitter.random_range(-0.2..0.2));
    }
    let batch = tiny_batch(config.vocab_size, seed);
    let features = FeatureSource::Toy {
        dim: config.d_clip,
        seed,
    };
    let (_, grads) = figcap::training::loss_and_grads(&model, &batch, &features).unwrap();
    let grads: std::collections::HashMap<_, _> = grads.into_iter().collect();
    let mut r = rng(seed ^ 0xFD);
    let mut report = ModelCheck {
        worst: 0.0,
        worst_param: String::new(),
        checked: 0,
        nonzero: 0,
        tensors: 0,
    };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let numel = model.params.get(&name).unwrap().numel();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; numel]);
        let picks: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..numel)).collect()
        };
        report.tensors += 1;
        for i in picks {
            let mut plus = model.clone();
            plus.params.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.params.get_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let numeric = (model_loss(&plus, &batch, &features)
                - model_loss(&minus, &batch, &features))
                / (2.0 * FD_STEP);
            let e = rel_err(analytic[i], numeric);
            if e > report.worst {
                report.worst = e;
                report.worst_param = format!("{name}[{i}]");
            }
            report.checked += 1;
            report.nonzero += usize::from(numeric.abs() > REL_FLOOR);
        }
    }
    report
}

fn count_in<T: PartialEq>(haystack: &[T], needle: &[T]) -> usize {
    if needle.len() > haystack.len() {
        return 0;
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| &haystack[i..i + needle.len()] == needle)
        .count()
}

/// Clipped matches and totals by direct window scanning.
pub fn brute_counts<T: PartialEq>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let total = cand.len() - n + 1;
    let mut clipped = 0;
    for i in 0..total {
        let gram = &cand[i..i + n];
        // Count each distinct n-gram once, at its first occurrence.
        if (0..i).any(|j| &cand[j..j + n] == gram) {
            continue;
        }
        clipped += count_in(cand, gram).min(count_in(reference, gram));
    }
    (clipped, total)
}

/// BLEU-4 from summed counts: product form, optional epsilon smoothing.
pub fn brute_bleu<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)], smooth: bool) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in pairs {
        for n in 1..=4 {
            let (a, b) = brute_counts(cand, reference, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
        c += cand.len();
        r += reference.len();
    }
    let mut product = 1.0;
    for n in 0..4 {
        let p = if m[n] > 0 {
            m[n] as f64 / t[n] as f64
        } else if smooth {
            0.1 / (t[n].max(1)) as f64
        } else {
            0.0
        };
        product *= p;
    }
    let bp = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * product.powf(0.25)
}

/// A random token sequence over a small alphabet so n-grams collide.
pub fn random_tokens(r: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let len = r.random_range(0..=max_len);
    (0..len).map(|_| r.random_range(0..5u8)).collect()
}
