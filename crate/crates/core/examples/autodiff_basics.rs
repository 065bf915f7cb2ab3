//! Reverse-mode gradients on the tape, checked against central differences.
//!
//! `cargo run --example autodiff_basics`

use msmix::grad::{check_gradients, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w = Tensor::new(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?;

    // f(W) = Σ tanh(x W)²
    let f = |tape: &mut Tape, v: &[msmix::grad::Var]| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, v[0])?;
        let h = tape.tanh(h);
        let sq = tape.square(h);
        Ok(tape.sum(sq))
    };

    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let root = f(&mut tape, &[wv])?;
    let grads = tape.backward(root)?;
    println!("f = {:.6}", tape.value(root).item());
    println!("df/dW = {:?}", grads.get(wv).expect("W is on the path").data());

    let err = check_gradients(f, &[w], 1e-5)?;
    println!("max relative error against finite differences: {:.2e}", err);
    Ok(())
}
