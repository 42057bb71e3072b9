//! Builds a small graph on the tape, runs backward and compares one gradient
//! against finite differences.

use fusewright::tensor::{grad_check, Conv2dSpec};
use fusewright::{Tape, Tensor};

fn main() -> fusewright::Result<()> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64 * 0.37).sin()));
    let k = tape.param(Tensor::from_fn(&[2, 1, 3, 3], |i| 0.1 * i as f64 - 0.4));
    let y = tape.conv2d(x, k, None, Conv2dSpec::same(3))?;
    let y = tape.lrelu(y, 0.1)?;
    let loss = tape.mean(y)?;
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item()?);
    println!("d loss / d kernel {:?}", &tape.grad(k).unwrap()[..3]);

    let point = Tensor::from_fn(&[6], |i| i as f64 * 0.2 - 0.5);
    let err = grad_check(
        |t, v| {
            let s = t.sigmoid(v)?;
            let p = t.mul(s, v)?;
            t.sum(p)
        },
        &point,
        1e-6,
    )?;
    println!("x * sigmoid(x): worst relative error {err:.2e}");
    Ok(())
}
