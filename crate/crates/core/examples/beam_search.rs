//! Beam search against greedy decoding on a scorer where the locally best
//! first token leads to a worse sentence.

use figcap::model::{beam_search, greedy, StepScorer};

/// Next-token probabilities depend only on the previous token. Token 0 ends
/// the sequence.
struct Bigram {
    start: Vec<f64>,
    next: Vec<Vec<f64>>,
}

impl StepScorer for Bigram {
    type State = ();

    fn initial(&self) {}

    fn step(&self, _: &(), prev: Option<usize>) -> figcap::Result<((), Vec<f64>)> {
        let row = prev.map_or(&self.start, |p| &self.next[p]);
        Ok(((), row.iter().map(|p| p.ln()).collect()))
    }

    fn eos(&self) -> usize {
        0
    }
}

fn main() -> figcap::Result<()> {
    let scorer = Bigram {
        start: vec![0.01, 0.55, 0.44],
        next: vec![
            vec![1.0 / 3.0; 3],
            vec![0.4, 0.3, 0.3],
            vec![0.9, 0.05, 0.05],
        ],
    };
    let g = greedy(&scorer, 4)?;
    println!("greedy  {:?}  p = {:.4}", g.tokens, g.log_prob.exp());
    for beam in 1..=3 {
        let b = beam_search(&scorer, beam, 4, true)?;
        println!("beam {beam}  {:?}  p = {:.4}", b.tokens, b.log_prob.exp());
    }
    Ok(())
}
