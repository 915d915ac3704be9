use super::*;
use crate::autodiff::{grad_check, Graph};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny(layers: usize, cls: bool) -> VitConfig {
    VitConfig {
        image_size: (4, 4),
        channels: 2,
        patch_size: 2,
        embed_dim: 4,
        num_heads: 2,
        num_layers: layers,
        num_classes: 3,
        use_class_token: cls,
        seed: 7,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
}

/// A model whose parameters are all random normals, so every path is exercised.
fn scrambled(config: &VitConfig, seed: u64) -> VitModel<f64> {
    let mut m = VitModel::<f64>::init(config).unwrap();
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        let r = randn(p.shape(), seed + i as u64);
        for (v, n) in p.data_mut().iter_mut().zip(r.data()) {
            *v += 0.3 * n;
        }
    }
    m
}

#[test]
fn zero_weight_layer_is_identity() {
    let mut g = Graph::<f64>::new();
    let d = 4;
    let x = g.constant(randn(&[2, 3, d], 1));
    let ones = |g: &mut Graph<f64>| g.constant(Tensor::full([d], 1.0));
    let zeros = |g: &mut Graph<f64>, s: &[usize]| g.constant(Tensor::zeros(s.to_vec()));
    let block = BlockVars {
        norm1: (ones(&mut g), zeros(&mut g, &[d])),
        qkv: (zeros(&mut g, &[d, 3 * d]), zeros(&mut g, &[3 * d])),
        proj: (zeros(&mut g, &[d, d]), zeros(&mut g, &[d])),
        norm2: (ones(&mut g), zeros(&mut g, &[d])),
        fc1: (zeros(&mut g, &[d, 4 * d]), zeros(&mut g, &[4 * d])),
        fc2: (zeros(&mut g, &[4 * d, d]), zeros(&mut g, &[d])),
    };
    let y = encoder_layer(&mut g, &block, x, 2, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn single_head_attention_matches_script() {
    // B=1, two tokens, D=2, one head; MLP branch zeroed.
    let xs = [0.3, -1.2, 2.0, 0.5];
    let wqkv = [0.5, -0.3, 0.8, 0.1, 1.0, 0.2, 0.4, 0.9, -0.6, 0.7, 0.3, -0.5];
    let bqkv = [0.1, 0.0, -0.1, 0.2, 0.05, 0.0];
    let wproj = [1.0, 0.5, -0.5, 2.0];
    let bproj = [0.01, -0.02];

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 2, 2], xs.to_vec()).unwrap());
    let c = |g: &mut Graph<f64>, s: &[usize], v: &[f64]| g.constant(Tensor::new(s.to_vec(), v.to_vec()).unwrap());
    let block = BlockVars {
        norm1: (c(&mut g, &[2], &[1.0, 1.0]), c(&mut g, &[2], &[0.0, 0.0])),
        qkv: (c(&mut g, &[2, 6], &wqkv), c(&mut g, &[6], &bqkv)),
        proj: (c(&mut g, &[2, 2], &wproj), c(&mut g, &[2], &bproj)),
        norm2: (c(&mut g, &[2], &[1.0, 1.0]), c(&mut g, &[2], &[0.0, 0.0])),
        fc1: (c(&mut g, &[2, 8], &[0.0; 16]), c(&mut g, &[8], &[0.0; 8])),
        fc2: (c(&mut g, &[8, 2], &[0.0; 16]), c(&mut g, &[2], &[0.0; 2])),
    };
    let y = encoder_layer(&mut g, &block, x, 1, 1).unwrap();

    // Independent scalar evaluation.
    let ln = |r: [f64; 2]| {
        let m = (r[0] + r[1]) / 2.0;
        let v = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
        let s = (v + 1e-6).sqrt();
        [(r[0] - m) / s, (r[1] - m) / s]
    };
    let rows = [[xs[0], xs[1]], [xs[2], xs[3]]];
    let h: Vec<[f64; 2]> = rows.iter().map(|&r| ln(r)).collect();
    let proj6 = |r: [f64; 2]| -> [f64; 6] {
        let mut o = [0.0; 6];
        for j in 0..6 {
            o[j] = r[0] * wqkv[j] + r[1] * wqkv[6 + j] + bqkv[j];
        }
        o
    };
    let qkv: Vec<[f64; 6]> = h.iter().map(|&r| proj6(r)).collect();
    let scale = 1.0 / 2f64.sqrt();
    let mut expect = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (qkv[i][0] * qkv[j][2] + qkv[i][1] * qkv[j][3]) * scale)
            .collect();
        let mx = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z = e[0] + e[1];
        let p = [e[0] / z, e[1] / z];
        let o = [p[0] * qkv[0][4] + p[1] * qkv[1][4], p[0] * qkv[0][5] + p[1] * qkv[1][5]];
        let a = [
            o[0] * wproj[0] + o[1] * wproj[2] + bproj[0],
            o[0] * wproj[1] + o[1] * wproj[3] + bproj[1],
        ];
        expect.push(rows[i][0] + a[0]);
        expect.push(rows[i][1] + a[1]);
    }
    for (got, want) in g.value(y).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn attention_is_permutation_equivariant_without_positions() {
    let config = tiny(1, false);
    let m = scrambled(&config, 100);
    let mut g = Graph::<f64>::new();
    let vars = m.bind(&mut g, false);
    let block = m.block_vars(&vars, 1);
    let x = randn(&[1, 4, 4], 5);
    let perm = [2, 0, 3, 1];
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(&x.data()[p * 4..(p + 1) * 4]);
    }
    let xv = g.constant(x);
    let pv = g.constant(Tensor::new([1, 4, 4], px).unwrap());
    let y = encoder_layer(&mut g, &block, xv, 2, 1).unwrap();
    let py = encoder_layer(&mut g, &block, pv, 2, 1).unwrap();
    let (y, py) = (g.value(y).data(), g.value(py).data());
    for (row, &p) in perm.iter().enumerate() {
        for k in 0..4 {
            assert!((py[row * 4 + k] - y[p * 4 + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn embed_layout_and_values() {
    let mut g = Graph::<f64>::new();
    let patches = randn(&[2, 4, 3], 8);
    let w = randn(&[3, 5], 9);
    let b = randn(&[5], 10);
    let pos = randn(&[5, 5], 11);
    let tok = randn(&[5], 12);
    let pv = g.constant(patches.clone());
    let (wv, bv, posv, tv) = (g.constant(w.clone()), g.constant(b.clone()), g.constant(pos.clone()), g.constant(tok.clone()));
    let x = embed(&mut g, pv, (wv, bv), Some(tv), posv).unwrap();
    assert_eq!(g.shape(x), &[2, 5, 5]);
    let out = g.value(x);
    for bi in 0..2 {
        for k in 0..5 {
            let want = tok.data()[k] + pos.data()[k];
            assert!((out.get(&[bi, 0, k]).unwrap() - want).abs() < 1e-14);
        }
        for n in 0..4 {
            for k in 0..5 {
                let mut want = b.data()[k] + pos.data()[(n + 1) * 5 + k];
                for i in 0..3 {
                    want += patches.get(&[bi, n, i]).unwrap() * w.get(&[i, k]).unwrap();
                }
                assert!((out.get(&[bi, n + 1, k]).unwrap() - want).abs() < 1e-12);
            }
        }
    }
    let zero = g.constant(Tensor::zeros([2, 4, 3]));
    let zw = g.constant(Tensor::zeros([3, 5]));
    let zb = g.constant(Tensor::zeros([5]));
    let zp = g.constant(Tensor::zeros([4, 5]));
    let z = embed(&mut g, zero, (zw, zb), None, zp).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    assert!(embed(&mut g, zero, (zw, zb), Some(tv), zp).is_err());
}

#[test]
fn taps_shapes_and_composition() {
    let config = tiny(3, true);
    let m = scrambled(&config, 200);
    let images = randn(&[2, 4, 4, 2], 3);

    let none = m.forward_with_taps(&images, &TapSet::empty()).unwrap();
    assert!(none.taps.is_empty());
    assert_eq!(none.logits.shape(), &[2, 3]);

    let taps = TapSet::new([1, 3], 3).unwrap();
    let out = m.forward_with_taps(&images, &taps).unwrap();
    assert_eq!(out.taps.len(), 2);
    for t in out.taps.values() {
        assert_eq!(t.shape(), &[2, 4, 4]);
    }
    assert_eq!(out.logits, none.logits);

    // Layer 3 tap equals composing layers 1..=3 by hand.
    let mut g = Graph::<f64>::new();
    let vars = m.bind(&mut g, false);
    let img = g.constant(images.clone());
    let patches = g.patchify(img, 2).unwrap();
    let mut x = embed(&mut g, patches, (vars[0], vars[1]), Some(vars[3]), vars[2]).unwrap();
    for l in 1..=3 {
        let block = m.block_vars(&vars, l);
        x = encoder_layer(&mut g, &block, x, 2, l).unwrap();
    }
    let manual = g.slice_tokens(x, 1, 4).unwrap();
    assert_eq!(g.value(manual), &out.taps[&3]);

    let err = m.forward_with_taps(&images, &TapSet::new([4], 4).unwrap());
    assert!(matches!(err, Err(crate::Error::Config(_))));

    // Without a class token the tap width is unchanged.
    let flat = scrambled(&tiny(2, false), 300);
    let out = flat.forward_with_taps(&images, &TapSet::new([2], 2).unwrap()).unwrap();
    assert_eq!(out.taps[&2].shape(), &[2, 4, 4]);
}

#[test]
fn eight_taps_on_a_twelve_layer_model() {
    let config = VitConfig { num_layers: 12, ..tiny(12, true) };
    let m = VitModel::<f64>::init(&config).unwrap();
    let taps = TapSet::new([1, 2, 3, 4, 9, 10, 11, 12], 12).unwrap();
    let out = m.forward_with_taps(&randn(&[1, 4, 4, 2], 0), &taps).unwrap();
    assert_eq!(out.taps.len(), 8);
    assert!(out.taps.values().all(|t| t.shape() == [1, 4, 4]));
}

#[test]
fn forward_is_deterministic() {
    let config = tiny(2, true);
    let a = VitModel::<f64>::init(&config).unwrap();
    let b = VitModel::<f64>::init(&config).unwrap();
    assert_eq!(a, b);
    let images = randn(&[3, 4, 4, 2], 4);
    let taps = TapSet::new([1, 2], 2).unwrap();
    let x = a.forward_with_taps(&images, &taps).unwrap();
    let y = b.forward_with_taps(&images, &taps).unwrap();
    assert_eq!(x.logits, y.logits);
    assert_eq!(x.taps, y.taps);
}

#[test]
fn gradient_reaches_the_input() {
    let config = tiny(2, true);
    let m = scrambled(&config, 400);
    let images = randn(&[1, 4, 4, 2], 6);
    let report = grad_check(
        |g, x| {
            let vars = m.bind(g, false);
            let out = m.forward_graph(g, &vars, x, &TapSet::empty())?;
            g.cross_entropy(out.logits, &[1])
        },
        &images,
        1e-5,
    )
    .unwrap();
    assert!(report.analytic.iter().any(|v| v.abs() > 1e-6));
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn checkpoint_roundtrip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let config = tiny(2, true);
    let m = scrambled(&config, 500);
    save_checkpoint(&m, &path).unwrap();
    let back: VitModel<f64> = load_checkpoint(&path, Some(&config)).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.checksum(), m.checksum());

    let other = VitConfig { num_layers: 3, ..config.clone() };
    assert!(matches!(
        load_checkpoint::<f64>(&path, Some(&other)),
        Err(crate::Error::Checkpoint(_))
    ));

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"version\":1", "\"version\":9")).unwrap();
    assert!(load_checkpoint::<f64>(&path, None).is_err());
}
