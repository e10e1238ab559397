//! Record a small graph on a tape, pull gradients back, and compare them
//! with central finite differences. Then break one backward rule on purpose.
//!
//! cargo run --example autodiff_gradcheck

use coloc::selfcheck::{self, SelfCheckOptions};
use coloc::tensor::{grad_check, grad_check_on, Tape, Tensor, Var};

fn softmax_score<'t>(tape: &'t Tape, p: &[Var<'t>]) -> coloc::Result<Var<'t>> {
    // log Σ exp(tanh(x W)) over a 2×3 score row block
    let h = tape.matmul(p[0], p[1])?.tanh();
    Ok(h.reshape(&[6])?.log_sum_exp())
}

fn main() -> coloc::Result<()> {
    let x = Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.71).cos() * 0.5).collect())?;

    let tape = Tape::new();
    let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
    let out = softmax_score(&tape, &[xv, wv])?;
    let grads = tape.backward(out)?;
    println!("value {:.6}  tape nodes {}", out.item(), tape.len());
    println!("d/dW row 0 {:?}", &grads.wrt(wv).data()[..3]);

    let err = grad_check(softmax_score, &[x.clone(), w.clone()], 1e-5)?;
    println!("max relative error vs finite differences {err:.2e}");
    let bad = grad_check_on(|| Tape::with_corrupted_backward("tanh"), softmax_score, &[x, w], 1e-5)?;
    println!("same check with a corrupted tanh rule   {bad:.2e}");

    let report = selfcheck::run(&SelfCheckOptions {
        points: 3,
        ..SelfCheckOptions::default()
    })?;
    for line in report.lines() {
        println!("{line}");
    }
    Ok(())
}
