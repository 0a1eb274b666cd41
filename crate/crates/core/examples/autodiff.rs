//! Reverse-mode differentiation on the tape, checked against central
//! differences.

use equishape::tensor::{grad_check, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // f(w) = sum(sigmoid(x w)) for a fixed 2x3 input
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7])?;
    let w = Tensor::new(vec![3, 1], vec![0.2, -0.4, 0.1])?;

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone(), true);
    let z = tape.matmul(xv, wv)?;
    let s = tape.sigmoid(z)?;
    let loss = tape.sum_all(s)?;
    println!("f(w) = {:.6}", tape.value(loss).data()[0]);
    let grads = tape.backward(loss)?;
    println!("df/dw = {:?}", grads.get(wv).unwrap().data());

    let report = grad_check(
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let z = tape.matmul(xv, vars[0])?;
            let s = tape.sigmoid(z)?;
            tape.sum_all(s)
        },
        &[w],
    )?;
    println!(
        "finite-difference check: max rel err {:.2e} over {} coordinates",
        report.max_rel_err, report.checked
    );
    assert!(report.passes(1e-4));
    Ok(())
}
