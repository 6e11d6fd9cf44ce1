//! Builds a tiny expression on the tape, runs backward and reads the
//! gradients, then fits a line with a hand-rolled update loop.

use eri_core::autodiff::{Graph, Parameter, Tensor};
use eri_core::Result;

fn main() -> Result<()> {
    // f(x, y) = sum(tanh(x * y) + x^2)
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::from_vec([3], vec![0.5, -1.0, 2.0])?.with_requires_grad(true));
    let y = g.leaf(&Tensor::from_vec([3], vec![1.5, 0.25, -0.5])?.with_requires_grad(true));
    let xy = g.mul(x, y)?;
    let t = g.tanh(xy);
    let x2 = g.square(x);
    let s = g.add(t, x2)?;
    let f = g.sum_all(s);
    g.backward(f)?;
    println!("f      = {:.6}", g.item(f));
    println!("df/dx  = {:?}", g.grad(x).unwrap());
    println!("df/dy  = {:?}", g.grad(y).unwrap());

    // y = 3x - 1 by gradient descent on a [1×1] weight and a [1] bias
    let xs = Tensor::from_vec([8, 1], (0..8).map(|i| i as f64 / 4.0).collect())?;
    let ys = Tensor::from_vec([8, 1], xs.data().iter().map(|v| 3.0 * v - 1.0).collect())?;
    let mut w = Parameter::new("w", Tensor::zeros([1, 1]));
    let mut b = Parameter::new("b", Tensor::zeros([1]));
    for step in 0..200 {
        let mut g = Graph::new();
        let (wv, bv) = (g.param(&w), g.param(&b));
        let xv = g.constant(&xs);
        let pred = g.matmul(xv, wv)?;
        let pred = g.add(pred, bv)?;
        let target = g.constant(&ys);
        let err = g.sub(pred, target)?;
        let sq = g.square(err);
        let loss = g.mean_all(sq);
        g.backward(loss)?;
        for p in [&mut w, &mut b] {
            let grad = g.param_grad(p.id()).unwrap().to_vec();
            for (v, d) in p.tensor.data_mut().iter_mut().zip(grad) {
                *v -= 0.5 * d;
            }
        }
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.6}", g.item(loss));
        }
    }
    println!("w = {:.4}, b = {:.4}", w.tensor.data()[0], b.tensor.data()[0]);
    Ok(())
}
