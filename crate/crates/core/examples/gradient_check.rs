//! Reverse-mode gradients of a masked attention read against central
//! finite differences.
//!
//! `cargo run --release --example gradient_check`

use bamnet::reasoning::AdditiveAttention;
use bamnet::tensor::{Graph, ParamStore, Tensor};

const H: f64 = 1e-5;

/// `Σ (softmax-attention(q, K) · V)` for query `q` over keys `K`, the last
/// key masked out.
fn objective(
    store: &ParamStore,
    att: &AdditiveAttention,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> bamnet::Result<f64> {
    let mut g = Graph::new(store, false);
    let (q, k, v) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let a = att.forward(&mut g, q, k, &[true, true, true, false])?;
    let read = g.matmul(a, v)?;
    let s = g.sum_all(read)?;
    Ok(g.value(s).data()[0])
}

fn main() -> bamnet::Result<()> {
    let mut store = ParamStore::new(7);
    let att = AdditiveAttention::new(&mut store, "att", 3)?;
    let q = Tensor::row(&[0.4, -0.3, 0.8]);
    let k = Tensor::from_rows(&[
        vec![0.1, 0.2, -0.5],
        vec![-0.7, 0.3, 0.2],
        vec![0.5, 0.5, 0.1],
        vec![9.0, 9.0, 9.0],
    ])?;
    let v = Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 2.0],
        vec![-1.0, 1.0],
        vec![5.0, 5.0],
    ])?;

    let mut g = Graph::new(&store, true);
    let (qv, kv, vv) = (
        g.leaf(q.clone(), true),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let a = att.forward(&mut g, qv, kv, &[true, true, true, false])?;
    let read = g.matmul(a, vv)?;
    let s = g.sum_all(read)?;
    println!("objective {:.6}", g.value(s).data()[0]);
    println!("attention {:?}", g.value(a).data());
    let grads = g.backward(s)?;

    for (name, id) in [("w1", att.w1), ("w2", att.w2)] {
        let analytic = grads
            .params()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .expect("parameter reached");
        let orig = store.value(id).clone();
        let mut worst = 0.0f64;
        for i in 0..orig.numel() {
            let mut t = orig.clone();
            t.data_mut()[i] += H;
            store.set_value(id, t)?;
            let up = objective(&store, &att, &q, &k, &v)?;
            let mut t = orig.clone();
            t.data_mut()[i] -= H;
            store.set_value(id, t)?;
            let down = objective(&store, &att, &q, &k, &v)?;
            store.set_value(id, orig.clone())?;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12));
        }
        println!(
            "{name}: {} entries, worst relative error {worst:.2e}",
            orig.numel()
        );
    }
    let dq = grads.get(qv).expect("query gradient");
    println!("d objective / d query {:?}", dq.data());
    Ok(())
}
