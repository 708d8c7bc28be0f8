//! The reverse-mode tape underneath every network block: build a small
//! computation, backpropagate, and cross-check one gradient against a
//! central finite difference.
//!
//! Run with: cargo run --example autodiff

use georef::tape::{Tape, Var};
use ndarray::{arr2, Array2};

/// f(w, x) = mean(leaky_relu(w x)^2), a one-layer toy loss.
fn build(tape: &mut Tape<f64>, w: Array2<f64>, x: Array2<f64>) -> (Var, Var) {
    let w = tape.leaf(w);
    let x = tape.leaf(x);
    let h = tape.matmul(w, x).unwrap();
    let a = tape.leaky_relu(h, 0.01);
    let sq = tape.mul(a, a).unwrap();
    (w, tape.mean_all(sq))
}

fn main() {
    let w0 = arr2(&[[0.4, -0.3], [0.2, 0.9]]);
    let x0 = arr2(&[[1.0, 0.5, -0.25], [-2.0, 0.75, 1.5]]);

    let mut tape = Tape::new();
    let (w, loss) = build(&mut tape, w0.clone(), x0.clone());
    println!("loss = {:.6}", tape.value(loss)[[0, 0]]);

    // One backward pass yields gradients for every tape variable.
    let grads = tape.backward(loss);
    let gw = grads[w.index()].as_ref().unwrap();
    println!("analytic dloss/dw =\n{gw:.6}");

    // Central finite difference on one coordinate agrees to ~1e-10.
    let h = 1e-6;
    let eval = |w: Array2<f64>| {
        let mut t = Tape::new();
        let (_, l) = build(&mut t, w, x0.clone());
        t.value(l)[[0, 0]]
    };
    let mut wp = w0.clone();
    wp[[0, 1]] += h;
    let mut wm = w0.clone();
    wm[[0, 1]] -= h;
    let numeric = (eval(wp) - eval(wm)) / (2.0 * h);
    println!(
        "dloss/dw[0,1]: analytic {:.10}, numeric {:.10}, diff {:.2e}",
        gw[[0, 1]],
        numeric,
        (gw[[0, 1]] - numeric).abs()
    );

    // The same graph code runs in f32 for training; the scalar type is a
    // parameter of the tape, not of the model code.
    let mut t32: Tape<f32> = Tape::new();
    let (_, l32) = {
        let w = t32.leaf(w0.mapv(|v| v as f32));
        let x = t32.leaf(x0.mapv(|v| v as f32));
        let h = t32.matmul(w, x).unwrap();
        let a = t32.leaky_relu(h, 0.01);
        let sq = t32.mul(a, a).unwrap();
        (w, t32.mean_all(sq))
    };
    println!("same loss in f32: {:.6}", t32.value(l32)[[0, 0]]);
}
