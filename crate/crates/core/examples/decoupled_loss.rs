//! Evaluates the decoupled relation loss on random features and its gradient,
//! then prints the analytical cost of the full and decoupled maps.
//!
//! cargo run --example decoupled_loss

use manifold_kd::audit::{decoupled_cost, full_map_cost};
use manifold_kd::losses::{decoupled_loss, sample_indices, LossWeights};
use manifold_kd::{Graph64, Tensor64};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> manifold_kd::Result<()> {
    let (b, n, ds, dt) = (4, 16, 32, 64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut features = |d: usize| Tensor64::from_fn([b, n, d], |_| StandardNormal.sample(&mut rng));
    let (student, teacher) = (features(ds), features(dt));

    let mut g = Graph64::new();
    let fs = g.leaf(student);
    let ft = g.constant(teacher);
    let idx = sample_indices(b, n, 16, 7)?;
    let terms = decoupled_loss(&mut g, fs, ft, &LossWeights::default(), &idx)?;
    g.backward(terms.total)?;
    let grad = g.grad(fs).expect("student features are a leaf");
    println!(
        "intra {:.4}  inter {:.4}  random {:.4}  total {:.4}",
        g.value(terms.intra).data()[0],
        g.value(terms.inter).data()[0],
        g.value(terms.random).data()[0],
        g.value(terms.total).data()[0]
    );
    println!("|dL/dF_S| = {:.4}", grad.data().iter().map(|v| v * v).sum::<f64>().sqrt());

    let full = full_map_cost(128, 196, 192, 4)?;
    let dec = decoupled_cost(128, 196, 192, 192, 4)?;
    println!(
        "B=128 N=196 D=192: full {:.1} GFLOPs / {:.2} GB, decoupled {:.2} GFLOPs / {:.1} MB",
        full.gflops(),
        full.gigabytes(),
        dec.gflops(),
        dec.megabytes()
    );
    Ok(())
}
