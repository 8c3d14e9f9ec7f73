//! Op-level checks against independent scalar oracles and finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvmka::tensor::{grad_check, uniform, Graph, Mask, ParamStore, Tensor};
use tvmka::Error;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, 1.0, rng)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_f64_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let i = g.input(Tensor::eye(2));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.input(Tensor::from_f64_rows(&[&[1.0, 1.0]]).unwrap());
    let b = g.input(Tensor::from_f64_rows(&[&[2.0], &[3.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[5.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_t(&[3, 4], &mut rng);
    let b = rand_t(&[4, 2], &mut rng);
    let mut oracle = [[0.0f64; 2]; 3];
    for (i, row) in oracle.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            for k in 0..4 {
                *o += a.at(i, k) * b.at(k, j);
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.input(a), g.input(b));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            assert!(rel(g.value(c).at(i, j), oracle[i][j]) <= 1e-6);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax_rows(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.input(Tensor::vector(vec![0.0, 3f64.ln()]));
    let y = g.softmax_rows(x).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_matches_exp_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    let mut g = Graph::<f64>::new();
    let vx = g.input(Tensor::vector(x.clone()));
    let y = g.softmax_rows(vx).unwrap();
    for (got, xi) in g.value(y).data().iter().zip(&x) {
        assert!((got - xi.exp() / z).abs() <= 1e-7);
    }
}

#[test]
fn single_precision_softmax_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-20.0..20.0)).collect();
    let mut g64 = Graph::<f64>::new();
    let v64 = g64.input(Tensor::vector(x.clone()));
    let y64 = g64.softmax_rows(v64).unwrap();
    let mut g32 = Graph::<f32>::new();
    let v32 = g32.input(Tensor::vector(x.iter().map(|&v| v as f32).collect()));
    let y32 = g32.softmax_rows(v32).unwrap();
    for (a, b) in g64.value(y64).data().iter().zip(g32.value(y32).data()) {
        assert!((a - *b as f64).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..12), 1..5)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let out = g.value(y);
        for r in 0..out.rows() {
            let s: f64 = out.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(out.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.input(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let bias = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let x = g.input(Tensor::vector(vec![4.0, 4.0, 4.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.input(Tensor::vector(vec![1.0, 1.0]));
    let bias = g.input(Tensor::vector(vec![0.0, 0.0]));
    let x = g.input(Tensor::vector(vec![1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
    assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);

    let bad_gain = g.input(Tensor::vector(vec![1.0, 1.0, 1.0]));
    assert!(matches!(g.layer_norm(x, bad_gain, bias, 1e-5), Err(Error::Dimension { .. })));
    assert!(matches!(g.layer_norm(x, gain, bias, 0.0), Err(Error::Config(_))));
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let gain: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..1.5)).collect();
    let bias: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let eps = 1e-5;
    let mean = x.iter().sum::<f64>() / 6.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
    let oracle: Vec<f64> = (0..6)
        .map(|j| (x[j] - mean) / (var + eps).sqrt() * gain[j] + bias[j])
        .collect();
    let mut g = Graph::<f64>::new();
    let vx = g.input(Tensor::vector(x));
    let vg = g.input(Tensor::vector(gain));
    let vb = g.input(Tensor::vector(bias));
    let y = g.layer_norm(vx, vg, vb, eps).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn embedding_lookup_matches_row_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = rand_t(&[10, 4], &mut rng);
    let ids: Vec<usize> = (0..7).map(|_| rng.gen_range(0..10)).collect();
    let mut g = Graph::<f64>::new();
    let t = g.input(table.clone());
    let e = g.gather_rows(t, &ids).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(g.value(e).row(r), table.row(id));
    }
    let first = g.gather_rows(t, &[0]).unwrap();
    assert_eq!(g.value(first).data(), table.row(0));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(logits, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let confident = g.input(Tensor::from_f64_rows(&[&[0.0, 20.0, 0.0]]).unwrap());
    let l = g.cross_entropy(confident, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-8);

    assert!(matches!(
        g.cross_entropy(confident, &[3]),
        Err(Error::Index { index: 3, bound: 3, .. })
    ));
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_t(&[3, 5], &mut rng);
    let targets = [4, 0, 2];
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        oracle += lse - row[t];
    }
    oracle /= 3.0;
    let mut g = Graph::<f64>::new();
    let l = g.input(logits);
    let loss = g.cross_entropy(l, &targets).unwrap();
    assert!(rel(g.value(loss).item(), oracle) <= 1e-6);
}

/// Every differentiable op against central differences.
#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", rand_t(&[3, 4], &mut rng)).unwrap();
    let b = store.add("b", rand_t(&[4, 5], &mut rng)).unwrap();
    let c = store.add("c", rand_t(&[5, 4], &mut rng)).unwrap();
    let gain = store.add("gain", rand_t(&[5], &mut rng)).unwrap();
    let bias = store.add("bias", rand_t(&[5], &mut rng)).unwrap();
    let table = store.add("table", rand_t(&[6, 5], &mut rng)).unwrap();
    let k = store.add("k", rand_t(&[4, 5], &mut rng)).unwrap();
    let params = [a, b, c, gain, bias, table, k];
    let mask = Mask::new(
        3,
        4,
        vec![
            true, true, false, true, //
            false, true, true, true, //
            true, false, false, false,
        ],
    )
    .unwrap();
    let mut check_rng = ChaCha8Rng::seed_from_u64(1);
    let report = grad_check(&mut store, &params, 1e-5, 64, &mut check_rng, |g| {
        let (va, vb, vc) = (g.param(a), g.param(b), g.param(c));
        let (vg, vbias, vt, vk) = (g.param(gain), g.param(bias), g.param(table), g.param(k));
        let ab = g.matmul(va, vb)?; // 3x5
        let h = g.layer_norm(ab, vg, vbias, 1e-5)?;
        let h = g.gelu(h);
        let h = g.add_row(h, vbias)?;
        let e = g.gather_rows(vt, &[1, 4, 1])?;
        let h = g.mul(h, e)?;
        let h2 = g.sub(h, e)?;
        let s = g.softmax_rows(h2)?;
        let kk = g.matmul_nt(vk, vk)?; // 4x4
        let kv = g.matmul(kk, vk)?; // 4x5
        let att = g.attention(h, kv, vk, Some(&mask), 0.7)?;
        let cat = g.concat_cols(&[att, s])?; // 3x10
        let stacked = g.concat_rows(&[att, s])?; // 6x5
        let m = g.mean_rows(stacked)?;
        let tr = g.transpose(cat)?;
        let trs = g.sum(tr);
        let ms = g.sum(m);
        let proj = g.matmul(s, vc)?; // 3x4
        let nt = g.matmul_nt(s, vk)?; // 3x4
        let proj = g.add(proj, nt)?;
        let ce = g.cross_entropy(proj, &[0, 3, 1])?;
        let t1 = g.add(trs, ms)?;
        let t1 = g.scale(t1, 0.3);
        g.add(t1, ce)
    });
    let report = report.unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}
