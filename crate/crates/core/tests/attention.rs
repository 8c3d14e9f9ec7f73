//! Head attention, concatenation, sharing and DropHead against hand-built oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvmka::attention::{
    attend_head, bind_shared_heads, draw_drophead, drophead_apply, DropHeadConfig, MultiHeadAttentionLayer,
};
use tvmka::tensor::{uniform, Graph, Mask, ParamStore, Sgd, Tensor};
use tvmka::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Scores, scale, masked softmax and weighted sum spelled out step by step.
fn head_oracle(x: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>], mask: Option<&Mask>) -> Vec<Vec<f64>> {
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let d = wq[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let allowed: Vec<bool> = (0..k.len()).map(|j| mask.map_or(true, |m| m.row(i)[j])).collect();
            let m = scores
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores
                .iter()
                .zip(&allowed)
                .map(|(s, &a)| if a { (s - m).exp() } else { 0.0 })
                .collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn layer(store: &mut ParamStore<f64>, prefix: &str, d: usize, h: usize, seed: u64) -> MultiHeadAttentionLayer {
    MultiHeadAttentionLayer::new(store, prefix, d, h, &mut rng(seed)).unwrap()
}

fn forward(store: &ParamStore<f64>, l: &MultiHeadAttentionLayer, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference(store);
    let xv = g.input(x.clone());
    let out = l.forward::<f64, ChaCha8Rng>(&mut g, xv, xv, None, None).unwrap();
    g.value(out).clone()
}

#[test]
fn single_token_returns_its_value_projection() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, "a", 4, 2, 1);
    let x = uniform(&[1, 4], 1.0, &mut rng(2));
    let mut g = Graph::inference(&store);
    let xv = g.input(x.clone());
    let out = attend_head(&mut g, xv, xv, &l.heads[0], None).unwrap();
    let want = matmul(&rows(&x), &rows(store.value(l.heads[0].wv)));
    for (a, b) in g.value(out).data().iter().zip(want.concat()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn duplicated_tokens_match_single_token_case() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, "a", 4, 2, 3);
    let tok = uniform::<f64, _>(&[1, 4], 1.0, &mut rng(4));
    let x = Tensor::from_rows(&[tok.row(0).to_vec(), tok.row(0).to_vec(), tok.row(0).to_vec()]).unwrap();
    let mut g = Graph::inference(&store);
    let (xv, tv) = (g.input(x), g.input(tok));
    let many = attend_head(&mut g, xv, xv, &l.heads[1], None).unwrap();
    let one = attend_head(&mut g, tv, tv, &l.heads[1], None).unwrap();
    let one = g.value(one).row(0).to_vec();
    for r in 0..3 {
        for (a, b) in g.value(many).row(r).iter().zip(&one) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn head_matches_step_by_step_oracle() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, "a", 4, 2, 5);
    let x = uniform(&[3, 4], 1.0, &mut rng(6));
    let mask = Mask::new(3, 3, vec![true, false, true, true, true, false, false, true, true]).unwrap();
    for m in [None, Some(&mask)] {
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let out = attend_head(&mut g, xv, xv, &l.heads[0], m).unwrap();
        let p = &l.heads[0];
        let want = head_oracle(
            &rows(&x),
            &rows(store.value(p.wq)),
            &rows(store.value(p.wk)),
            &rows(store.value(p.wv)),
            m,
        );
        for (a, b) in g.value(out).data().iter().zip(want.concat()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn fully_masked_row_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, "a", 4, 1, 7);
    let x = uniform(&[2, 4], 1.0, &mut rng(8));
    let mask = Mask::new(2, 2, vec![false, false, true, true]);
    let r = mask.and_then(|m| {
        let mut g = Graph::inference(&store);
        let xv = g.input(x);
        attend_head(&mut g, xv, xv, &l.heads[0], Some(&m))
    });
    assert!(matches!(r, Err(Error::Masking { row: 0 })), "{r:?}");
}

#[test]
fn one_head_with_identity_output_equals_attend_head() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, "a", 4, 1, 9);
    *store.value_mut(l.wo) = Tensor::eye(4);
    let x = uniform(&[3, 4], 1.0, &mut rng(10));
    let full = forward(&store, &l, &x);
    let mut g = Graph::inference(&store);
    let xv = g.input(x);
    let h = attend_head(&mut g, xv, xv, &l.heads[0], None).unwrap();
    assert!(full.bit_eq(g.value(h)));
}

#[test]
fn zero_value_projection_zeroes_its_columns() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, "a", 4, 2, 11);
    *store.value_mut(l.wo) = Tensor::eye(4);
    *store.value_mut(l.heads[1].wv) = Tensor::zeros(&[4, 2]);
    let out = forward(&store, &l, &uniform(&[3, 4], 1.0, &mut rng(12)));
    for r in 0..3 {
        assert_eq!(&out.row(r)[2..4], &[0.0, 0.0]);
        assert!(out.row(r)[..2].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn layer_matches_concatenation_of_four_heads() {
    let mut store = ParamStore::<f64>::new();
    let mut a = layer(&mut store, "tvm", 8, 4, 13);
    let mut b = layer(&mut store, "ka", 8, 4, 14);
    bind_shared_heads(&mut store, &mut a, &mut b, 2).unwrap();
    let x = uniform(&[5, 8], 1.0, &mut rng(15));
    let out = forward(&store, &a, &x);
    let mut concat = vec![Vec::new(); 5];
    for p in &a.heads {
        let h = head_oracle(
            &rows(&x),
            &rows(store.value(p.wq)),
            &rows(store.value(p.wk)),
            &rows(store.value(p.wv)),
            None,
        );
        for (c, r) in concat.iter_mut().zip(h) {
            c.extend(r);
        }
    }
    let want = matmul(&concat, &rows(store.value(a.wo)));
    for (x, y) in out.data().iter().zip(want.concat()) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn sharing_does_not_change_forward_math() {
    let mut store = ParamStore::<f64>::new();
    let mut a = layer(&mut store, "tvm", 8, 4, 16);
    let mut b = layer(&mut store, "ka", 8, 4, 17);
    bind_shared_heads(&mut store, &mut a, &mut b, 2).unwrap();
    let mut plain = ParamStore::<f64>::new();
    let c = layer(&mut plain, "copy", 8, 4, 18);
    for (src, dst) in b.param_ids().into_iter().zip(c.param_ids()) {
        *plain.value_mut(dst) = store.value(src).clone();
    }
    let x = uniform(&[4, 8], 1.0, &mut rng(19));
    assert!(forward(&store, &b, &x).bit_eq(&forward(&plain, &c, &x)));
}

#[test]
fn too_many_shared_heads_is_config_error() {
    let mut store = ParamStore::<f64>::new();
    let mut a = layer(&mut store, "tvm", 8, 2, 1);
    let mut b = layer(&mut store, "ka", 8, 2, 2);
    assert!(matches!(bind_shared_heads(&mut store, &mut a, &mut b, 3), Err(Error::Config(_))));
}

#[test]
fn no_sharing_keeps_networks_disjoint() {
    let mut store = ParamStore::<f64>::new();
    let mut a = layer(&mut store, "tvm", 8, 2, 1);
    let mut b = layer(&mut store, "ka", 8, 2, 2);
    bind_shared_heads(&mut store, &mut a, &mut b, 0).unwrap();
    let sa: Vec<_> = a.param_ids().iter().map(|&i| store.storage(i)).collect();
    assert!(b.param_ids().iter().all(|&i| !sa.contains(&store.storage(i))));
}

#[test]
fn full_sharing_keeps_output_projection_private() {
    let mut store = ParamStore::<f64>::new();
    let mut a = layer(&mut store, "tvm", 8, 2, 1);
    let mut b = layer(&mut store, "ka", 8, 2, 2);
    bind_shared_heads(&mut store, &mut a, &mut b, 2).unwrap();
    for (x, y) in a.heads.iter().zip(&b.heads) {
        for (i, j) in x.ids().into_iter().zip(y.ids()) {
            assert_eq!(store.storage(i), store.storage(j));
        }
    }
    assert_ne!(store.storage(a.wo), store.storage(b.wo));
}

#[test]
fn sgd_step_on_one_network_moves_shared_heads_only() {
    let mut store = ParamStore::<f64>::new();
    let mut a = layer(&mut store, "tvm", 8, 4, 20);
    let mut b = layer(&mut store, "ka", 8, 4, 21);
    bind_shared_heads(&mut store, &mut a, &mut b, 2).unwrap();
    let before = store.snapshot();
    let x = uniform(&[3, 8], 1.0, &mut rng(22));
    let grads = {
        let mut g = Graph::with_params(&store);
        let xv = g.input(x);
        let out = a.forward::<f64, ChaCha8Rng>(&mut g, xv, xv, None, None).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap().into_param_grads()
    };
    store.accumulate(&grads);
    let lr = 0.1;
    // Manual update of the values the optimizer will touch.
    let manual: Vec<Tensor<f64>> = a
        .param_ids()
        .iter()
        .map(|&id| {
            let (v, gr) = (store.value(id), store.grad(id));
            Tensor::new(
                v.shape().to_vec(),
                v.data().iter().zip(gr.data()).map(|(p, g)| p - lr * g).collect(),
            )
            .unwrap()
        })
        .collect();
    Sgd::new(lr, &store, &a.param_ids()).unwrap().step(&mut store);
    for (&id, want) in a.param_ids().iter().zip(&manual) {
        assert!(store.value(id).bit_eq(want));
    }
    for (m, (ha, hb)) in a.heads.iter().zip(&b.heads).enumerate() {
        for (i, j) in ha.ids().into_iter().zip(hb.ids()) {
            let name = &store.param(j).name;
            if m < 2 {
                assert!(store.value(j).bit_eq(store.value(i)));
                assert!(!store.value(j).bit_eq(&before[name]), "{name} did not move");
            } else {
                assert!(store.value(j).bit_eq(&before[name]), "{name} moved");
            }
        }
    }
    assert!(store.value(b.wo).bit_eq(&before["ka.Wo"]));
}

#[test]
fn drophead_zero_probability_is_identity() {
    let mut g = Graph::<f64>::new();
    let outs: Vec<_> = (0..4).map(|i| g.input(uniform(&[2, 2], 1.0, &mut rng(i)))).collect();
    let cfg = DropHeadConfig::new(0.0).unwrap();
    let after = drophead_apply(&mut g, outs.clone(), 2, &cfg, &mut rng(0)).unwrap();
    assert_eq!(after, outs);
}

#[test]
fn drophead_certain_drop_zeroes_shared_and_rescales_private() {
    let mut g = Graph::<f64>::new();
    let inputs: Vec<Tensor<f64>> = (0..4).map(|i| uniform(&[2, 2], 1.0, &mut rng(i))).collect();
    let outs: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let cfg = DropHeadConfig::new(1.0).unwrap();
    let after = drophead_apply(&mut g, outs, 2, &cfg, &mut rng(1)).unwrap();
    for (i, (v, t)) in after.iter().zip(&inputs).enumerate() {
        let scale = if i < 2 { 0.0 } else { 2.0 };
        for (a, b) in g.value(*v).data().iter().zip(t.data()) {
            assert_eq!(*a, b * scale);
        }
    }
}

#[test]
fn drophead_rate_matches_probability() {
    let cfg = DropHeadConfig::new(0.2).unwrap();
    let mut r = rng(99);
    let (h, p, n) = (8, 4, 10_000);
    let mut dropped = vec![0usize; h];
    for _ in 0..n {
        for (m, d) in draw_drophead(h, p, &cfg, &mut r).unwrap().into_iter().enumerate() {
            dropped[m] += d as usize;
        }
    }
    for (m, &c) in dropped.iter().enumerate() {
        let rate = c as f64 / n as f64;
        if m < p {
            assert!((rate - 0.2).abs() <= 0.02, "head {m}: {rate}");
        } else {
            assert_eq!(c, 0);
        }
    }
}

#[test]
fn drophead_probability_out_of_range_is_config_error() {
    assert!(matches!(DropHeadConfig::new(1.5), Err(Error::Config(_))));
    assert!(matches!(DropHeadConfig::new(-0.1), Err(Error::Config(_))));
}

#[test]
fn drophead_never_drops_a_whole_fully_shared_layer() {
    let cfg = DropHeadConfig::new(0.9).unwrap();
    let mut r = rng(5);
    for _ in 0..2_000 {
        assert!(draw_drophead(2, 2, &cfg, &mut r).unwrap().contains(&false));
    }
    assert!(draw_drophead(2, 2, &DropHeadConfig::new(1.0).unwrap(), &mut r).is_err());
}

#[test]
fn eval_forward_is_deterministic() {
    let mut store = ParamStore::<f64>::new();
    let mut l = layer(&mut store, "a", 8, 4, 30);
    l.drophead = DropHeadConfig::new(0.5).unwrap();
    l.shared = 2;
    let x = uniform(&[3, 8], 1.0, &mut rng(31));
    assert!(forward(&store, &l, &x).bit_eq(&forward(&store, &l, &x)));
}
