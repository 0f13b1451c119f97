//! Differentiates a small graph by hand, then finite-difference checks every op.
//!
//! ```bash
//! cargo run -p fedskew --example gradient_check
//! ```

use fedskew::numkit::gradcheck::check_op;
use fedskew::numkit::vectors::OPS;
use fedskew::numkit::{Graph, Tensor};

fn main() -> fedskew::Result<()> {
    // loss = sum(relu(x W)); d/dW = x^T [xW > 0]
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.8, -1.0])?;
    let w = Tensor::new(vec![3, 2], vec![0.2, -0.4, 0.1, 0.9, -0.3, 0.5])?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.param("w", &w, true);
    let h = g.matmul(xv, wv)?;
    let r = g.relu(h)?;
    let loss = g.sum(r)?;
    let grads = g.backward(loss)?;
    println!("loss {:.4}", g.value(loss).data()[0]);
    println!("dloss/dw {:?}", grads.get("w").expect("w is trainable").data());

    println!("\n{:<24} {:>8} {:>12}", "op", "coords", "max rel err");
    for &op in OPS {
        let mut checked = 0;
        let mut worst = 0.0f64;
        for seed in 0..5 {
            let r = check_op(op, seed)?;
            checked += r.checked;
            worst = worst.max(r.max_rel_error);
        }
        println!("{op:<24} {checked:>8} {worst:>12.2e}");
    }
    Ok(())
}
