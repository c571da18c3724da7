//! Record a small computation on the gradient tape, run one reverse sweep,
//! and compare an analytic gradient against the hand-derived value.
//!
//! The loss here is `sum(sigmoid(x W))` for a 2x3 input and a 3x1 weight
//! matrix, so dL/dW has the closed form `x' * (p .* (1 - p))`.

use lskt::numerics::{ParameterStore, Tape, Tensor};

fn main() -> lskt::Result<()> {
    let mut store = ParameterStore::new();
    let w = store.register("w", Tensor::matrix(&[vec![0.4], vec![-0.3], vec![0.25]])?, true)?;

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[
        vec![1.0, 2.0, -1.0],
        vec![0.5, -0.7, 0.2],
    ])?);
    let w_node = tape.param(&store, w);
    let logits = tape.matmul(x, w_node)?;
    let probs = tape.sigmoid(logits);
    let loss = tape.sum(probs);

    println!("loss = {:.6}", tape.value(loss).item()?);
    tape.backward(loss, &mut store)?;

    // Hand derivation of dL/dW for comparison.
    let xs = [[1.0, 2.0, -1.0], [0.5, -0.7, 0.2]];
    let weights = [0.4, -0.3, 0.25];
    let mut expected = [0.0; 3];
    for row in &xs {
        let z: f64 = row.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let p = 1.0 / (1.0 + (-z).exp());
        for (e, v) in expected.iter_mut().zip(row) {
            *e += v * p * (1.0 - p);
        }
    }

    println!("{:<10} {:>12} {:>12}", "entry", "tape", "by hand");
    for (i, e) in expected.iter().enumerate() {
        let got = store.grad(w).data()[i];
        println!("{:<10} {:>12.8} {:>12.8}", format!("dL/dW[{i}]"), got, e);
        assert!((got - e).abs() < 1e-12);
    }
    println!("reverse sweep matches the closed form");
    Ok(())
}
