//! Reverse-mode gradients on a tiny graph, checked against central
//! finite differences.

use avrobust::diffengine::gradcheck::check;
use avrobust::diffengine::{Graph, Tensor};

fn main() -> avrobust::Result<()> {
    let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?;
    let w = Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 0.25, -1.5, 1.0])?;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad());
    let wv = g.leaf(w.clone().with_grad());
    let h = g.matmul(xv, wv)?;
    let s = g.sigmoid(h)?;
    let loss = g.mean_all(s)?;
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dW {:?}", grads.get(wv).unwrap().data());

    let r = check(&[x, w], 1, 1e-5, 1e-3, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let s = g.sigmoid(h)?;
        g.mean_all(s)
    })?;
    println!("max relative error vs finite differences: {:.2e}", r.max_rel_err);
    Ok(())
}
