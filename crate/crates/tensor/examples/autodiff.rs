//! Fit a two-layer GELU network to a sine curve with plain gradient descent,
//! then check its gradients against central differences in f32 and f64.
//!
//! cargo run -p volflow-tensor --example autodiff

use volflow_tensor::{grad_check, Graph, Result, Scalar, ScalarFunction, Tensor, Var};

const HIDDEN: usize = 16;
const POINTS: usize = 32;

fn inputs() -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..POINTS).map(|i| -3.0 + 6.0 * i as f64 / (POINTS - 1) as f64).collect();
    let ys = xs.iter().map(|x| x.sin()).collect();
    (xs, ys)
}

/// Mean squared error of y = gelu(x w1 + b1) w2 against sin(x).
fn mlp_loss<T: Scalar>(g: &mut Graph<T>, w1: Var, b1: Var, w2: Var) -> Result<Var> {
    let (xs, ys) = inputs();
    let x = g.constant(Tensor::from_f64_slice(&[POINTS, 1], &xs)?);
    let y = g.constant(Tensor::from_f64_slice(&[POINTS, 1], &ys)?);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w2)?;
    let d = g.sub(out, y)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// The loss as a function of the flattened parameter vector, for grad checks.
struct Packed;

impl ScalarFunction for Packed {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: Var) -> Result<Var> {
        let parts = g.split(p, 0, &[HIDDEN, HIDDEN, HIDDEN])?;
        let w1 = g.reshape(parts[0], &[1, HIDDEN])?;
        let b1 = g.reshape(parts[1], &[1, HIDDEN])?;
        let w2 = g.reshape(parts[2], &[HIDDEN, 1])?;
        mlp_loss(g, w1, b1, w2)
    }
}

fn main() -> Result<()> {
    // deterministic spread of initial weights
    let mut params: Vec<f64> = (0..3 * HIDDEN)
        .map(|i| (i as f64 * 2.399).sin() * 0.8)
        .collect();
    // check at the initial point, where gradients are large
    let at = Tensor::from_f64_slice(&[3 * HIDDEN], &params)?;
    println!("grad check f64: max rel error {:.2e}", grad_check::<f64, _>(&Packed, &at, 1e-6)?);
    println!("grad check f32: max rel error {:.2e}", grad_check::<f32, _>(&Packed, &at, 1e-6)?);

    let lr = 0.05;
    for step in 0..=3000 {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_f64_slice(&[3 * HIDDEN], &params)?);
        let loss = Packed.eval(&mut g, p)?;
        let grads = g.backward(loss)?;
        if step % 500 == 0 {
            println!("step {step:>5}  mse {:.5}", g.value(loss).item().unwrap());
        }
        for (w, dw) in params.iter_mut().zip(grads.get(p).unwrap().data()) {
            *w -= lr * dw;
        }
    }
    Ok(())
}
