//! Builds a small expression, backpropagates through it and compares the
//! result with central differences.
//!
//! cargo run --example autodiff

use propvis::numcore::{grad_check, GradCheckOptions, Graph, ParamSet, Tensor};

fn main() -> propvis::Result<()> {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 2.0, 0.1, -0.3])?);
    let x = Tensor::new(vec![1, 2], vec![1.5, -0.5])?;

    // loss = sum(sigmoid(x · w))
    let loss = |g: &mut Graph, p: &propvis::numcore::Bound| {
        let xv = g.leaf(&x);
        let h = g.matmul(xv, p.var(w))?;
        let s = g.sigmoid(h);
        Ok(g.sum(s))
    };

    let mut g = Graph::new();
    let p = ps.bind(&mut g);
    let l = loss(&mut g, &p)?;
    g.backward(l)?;
    println!("loss      {:.6}", g.scalar_value(l));
    println!("dloss/dw  {:?}", g.grad(p.var(w)).unwrap_or_default());

    let report = grad_check(&ps, loss, &GradCheckOptions::default())?;
    println!("max relative error vs finite differences: {:.2e}", report.max_error());
    Ok(())
}
