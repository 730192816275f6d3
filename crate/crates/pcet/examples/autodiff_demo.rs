//! The tape-based autodiff engine on its own: build a small computation,
//! take gradients with one backward pass, and confirm them against
//! central finite differences.
//!
//! Run with: cargo run --example autodiff_demo

use pcet::tensor::{Graph, ParamStore, Tensor};

fn main() -> pcet::Result<()> {
    // loss(W) = mean(relu(X·W) softmaxed row-wise, squared error to T).
    let mut store = ParamStore::new();
    let w = store.register(
        "demo.w",
        Tensor::matrix(3, 2, vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.2])?,
    )?;
    let x = Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, -0.25, 1.5])?;
    let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.25, 0.75])?;

    let loss_value = |store: &ParamStore| -> pcet::Result<f64> {
        let mut g = Graph::new();
        let xs = g.input(x.clone())?;
        let wv = g.param(store, w)?;
        let h = g.matmul(xs, wv)?;
        let h = g.relu(h)?;
        let p = g.row_softmax(h)?;
        let tv = g.input(t.clone())?;
        let loss = g.mse(p, tv)?;
        g.value(loss).item()
    };

    // One backward pass gives every parameter gradient.
    let mut g = Graph::new();
    let xs = g.input(x.clone())?;
    let wv = g.param(&store, w)?;
    let h = g.matmul(xs, wv)?;
    let h = g.relu(h)?;
    let p = g.row_softmax(h)?;
    let tv = g.input(t.clone())?;
    let loss = g.mse(p, tv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.param(w).expect("w is on the tape").clone();

    println!("loss = {:.6}", g.value(loss).item()?);
    println!("analytic dL/dW vs central finite differences (h = 1e-6):");
    let h_step = 1e-6;
    for r in 0..3 {
        for c in 0..2 {
            let base = store.value(w).get(r, c);
            let mut probe = |v: f64| -> pcet::Result<f64> {
                let mut data = store.value(w).data().to_vec();
                data[r * 2 + c] = v;
                store.set_value(w, Tensor::matrix(3, 2, data)?)?;
                loss_value(&store)
            };
            let fd = (probe(base + h_step)? - probe(base - h_step)?) / (2.0 * h_step);
            probe(base)?; // restore
            println!(
                "  W[{r}][{c}]: analytic {:+.8}  fd {:+.8}  |diff| {:.2e}",
                analytic.get(r, c),
                fd,
                (analytic.get(r, c) - fd).abs()
            );
        }
    }
    Ok(())
}
