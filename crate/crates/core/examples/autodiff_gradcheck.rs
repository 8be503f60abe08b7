//! Reverse-mode gradients of a small two-layer network, checked against
//! central differences.

use figcap::tensor::{Graph, Tensor};

fn loss(w1: &Tensor, w2: &Tensor, x: &Tensor) -> figcap::Result<f64> {
    let g = Graph::new();
    let (w1, w2, x) = (
        g.constant(w1.clone()),
        g.constant(w2.clone()),
        g.constant(x.clone()),
    );
    let y = x.matmul(&w1)?.tanh().matmul(&w2)?.softmax();
    Ok(y.mul(&y)?.sum().to_vec()[0])
}

fn main() -> figcap::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.5])?;
    let w1 = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w2 = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect())?;

    let g = Graph::new();
    let p1 = g.param(w1.clone());
    let p2 = g.param(w2.clone());
    let y = g
        .constant(x.clone())
        .matmul(&p1)?
        .tanh()
        .matmul(&p2)?
        .softmax();
    let l = y.mul(&y)?.sum();
    l.backward()?;
    let analytic = p1.grad().expect("parameter gradient");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w1.numel() {
        let (mut plus, mut minus) = (w1.clone(), w1.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&plus, &w2, &x)? - loss(&minus, &w2, &x)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        println!("dL/dW1[{i:2}]  backward {a:+.8}  numeric {numeric:+.8}  rel {rel:.1e}");
        worst = worst.max(rel);
    }
    println!(
        "loss {:.6}, worst relative error {worst:.2e}",
        l.to_vec()[0]
    );
    Ok(())
}
