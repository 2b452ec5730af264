use super::*;
use alloc::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn buffer_length_checked() {
    assert!(matches!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]), Err(AutogradError::BadBuffer { .. })));
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(t(&[2, 2], &[3.0, -1.5, 0.25, 7.0]));
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn small_matmul() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(AutogradError::ShapeMismatch { op: "matmul", .. })));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batch_matmul_transposed_matches_loop() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 5, 4], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.batch_matmul(va, vb, true).unwrap();
    let out = tape.value(c);
    assert_eq!(out.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|p| a.data()[bi * 12 + i * 4 + p] * b.data()[bi * 20 + j * 4 + p]).sum();
                assert!((out.data()[bi * 15 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_symmetric_and_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300 + 1e-12);
    assert!(tape.value(y).is_finite());
    assert!(matches!(tape.softmax(x, 1), Err(AutogradError::InvalidAxis { axis: 1, rank: 1 })));
}

#[test]
fn softmax_matches_direct_formula_on_middle_axis() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random(&[3, 4, 2], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax(v, 1).unwrap();
        let out = tape.value(y).data().to_vec();
        for o in 0..3 {
            for i in 0..2 {
                let at = |j: usize| o * 8 + j * 2 + i;
                // direct exp/sum with no max shift; inputs are small
                let denom: f64 = (0..4).map(|j| x.data()[at(j)].exp()).sum();
                for j in 0..4 {
                    assert!((out[at(j)] - x.data()[at(j)].exp() / denom).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::filled(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

    let g4 = tape.constant(Tensor::filled(&[4], 1.0));
    let b4 = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::filled(&[1, 4], 2.5));
    let y = tape.layer_norm(c, g4, b4, LAYER_NORM_EPS).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);
}

#[test]
fn layer_norm_matches_direct_oracle() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x = random(&[5, 6], &mut rng);
        let gain = random(&[6], &mut rng);
        let bias = random(&[6], &mut rng);
        let mut tape = Tape::new();
        let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(gain.clone()), tape.constant(bias.clone()));
        let y = tape.layer_norm(vx, vg, vb, LAYER_NORM_EPS).unwrap();
        for r in 0..5 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.data()[j] + bias.data()[j];
                assert!((tape.value(y).row(r)[j] - want).abs() < 1e-9);
            }
        }
        // unit gain, zero bias: mean 0, variance 1
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let g = tape.constant(Tensor::filled(&[6], 1.0));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(vx, g, b, LAYER_NORM_EPS).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-3);
        }
    }
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 10.0]));
    let y = tape.gelu(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.0);
    assert!((tape.value(y).data()[1] - 10.0).abs() < 1e-6);
}

#[test]
fn gelu_matches_reference_on_grid() {
    let grid: Vec<f64> = (0..1000).map(|i| -8.0 + 16.0 * i as f64 / 999.0).collect();
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1000], &grid));
    let y = tape.gelu(x).unwrap();
    let out = tape.value(y).data();
    let c = (2.0 / core::f64::consts::PI).sqrt();
    let mut prev = f64::NEG_INFINITY;
    for (i, &g) in grid.iter().enumerate() {
        let want = 0.5 * g * (1.0 + (c * (g + 0.044715 * g.powi(3))).tanh());
        assert!((out[i] - want).abs() < 1e-12, "{g}");
        // monotone on the non-negative half of the grid
        if g >= 0.0 {
            assert!(out[i] >= prev);
            prev = out[i];
        }
    }
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let loss = tape.cross_entropy(l, &[0]).unwrap();
    assert!((tape.value(loss).data()[0] - core::f64::consts::LN_2).abs() < 1e-12);
    let l = tape.constant(t(&[1, 2], &[20.0, -20.0]));
    let loss = tape.cross_entropy(l, &[0]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-15);
    assert!(matches!(tape.cross_entropy(l, &[2]), Err(AutogradError::LabelOutOfRange { label: 2, classes: 2 })));
    let e = tape.constant(Tensor::zeros(&[0, 2]));
    assert!(matches!(tape.cross_entropy(e, &[]), Err(AutogradError::EmptyBatch(_))));
}

#[test]
fn cross_entropy_matches_direct_formula_and_gradient() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let logits = random(&[6, 2], &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..2)).collect();
        let mut tape = Tape::new();
        let v = tape.param(logits.clone());
        let loss = tape.cross_entropy(v, &labels).unwrap();
        let mut want = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want -= (row[lab].exp() / z).ln();
        }
        want /= 6.0;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-9);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(v).unwrap();
        for (r, &lab) in labels.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let onehot = if c == lab { 1.0 } else { 0.0 };
                assert!((g.row(r)[c] - (row[c].exp() / z - onehot) / 6.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let f = tape.sum(sq).unwrap();
    let grads = tape.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_of_sum_of_product() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a), tape.param(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let f = tape.sum(c).unwrap();
    let grads = tape.backward(f).unwrap();
    let ga = grads.get(va).unwrap();
    // dA = 1 * B^T: row i of dA is the row sums of B
    for i in 0..3 {
        for p in 0..4 {
            assert!((ga.row(i)[p] - b.row(p).iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_rejects_non_scalar_and_foreign_roots() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(AutogradError::NonScalarRoot(_))));
    let mut other = Tape::new();
    let y = other.param(Tensor::scalar(1.0));
    let tape = Tape::new();
    assert!(matches!(tape.backward(y), Err(AutogradError::ForeignVar)));
}

#[test]
fn shared_use_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.5, -0.5]));
    let y = tape.add(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let f = tape.sum(z).unwrap();
    let grads = tape.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let f = tape.sum(y).unwrap();
    let grads = tape.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn dropout_is_inverted_and_identity_when_off() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::filled(&[10_000], 1.0));
    assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.25, &mut rng).unwrap();
    let vals = tape.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.05);
    assert!(matches!(tape.dropout(x, 1.0, &mut rng), Err(AutogradError::BadDropout(_))));
}

#[test]
fn permute_round_trip() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 4, 3, 5]);
    // element [1, 2, 0, 3] of the output is element [1, 0, 2, 3] of the input
    assert_eq!(tape.value(p).data()[1 * 60 + 2 * 15 + 0 * 5 + 3], x.data()[1 * 60 + 0 * 20 + 2 * 5 + 3]);
    let back = tape.permute(p, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tape.value(back).data(), x.data());
}

#[test]
fn quadratic_bowl_grad_check() {
    let x = t(&[5], &[0.3, -1.2, 2.0, 0.0, 0.7]);
    let report = grad_check(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            tape.sum(sq)
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    use core::sync::atomic::{AtomicUsize, Ordering};
    let calls = AtomicUsize::new(0);
    let err = grad_check(
        |tape, p| {
            let k = calls.fetch_add(1, Ordering::Relaxed) as f64;
            let s = tape.scale(p[0], 1.0 + k)?;
            tape.sum(s)
        },
        &[Tensor::filled(&[2], 1.0)],
        1e-3,
    )
    .unwrap_err();
    assert!(matches!(err, AutogradError::NonDeterministic { .. }));
}

/// One attention head over a 3-token input, composed from tape primitives.
fn single_head(tape: &mut Tape, p: &[Var]) -> Result<Var, AutogradError> {
    let (x, wq, wk, wv) = (p[0], p[1], p[2], p[3]);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let q = tape.reshape(q, &[1, 3, 4])?;
    let k = tape.reshape(k, &[1, 3, 4])?;
    let v = tape.reshape(v, &[1, 3, 4])?;
    let s = tape.batch_matmul(q, k, true)?;
    let s = tape.scale(s, 0.5)?;
    let s = tape.masked_fill(s, &[false, false, true, false, false, true, false, false, true])?;
    let a = tape.softmax(s, 2)?;
    let c = tape.batch_matmul(a, v, false)?;
    let c = tape.gelu(c)?;
    let c = tape.tanh(c)?;
    let w = tape.constant(t(&[1, 3, 4], &[0.3, -0.2, 0.9, 1.1, -0.4, 0.5, 0.8, -1.0, 0.2, 0.6, -0.7, 0.1]));
    let c = tape.mul(c, w)?;
    tape.sum(c)
}

#[test]
fn single_attention_head_grad_check() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let params = [random(&[3, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4, 4], &mut rng)];
    let report = grad_check(single_head, &params, 1e-3).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn layer_norm_bias_gather_and_cross_entropy_grad_check() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let params = [random(&[6, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)];
    let report = grad_check(
        |tape, p| {
            let rows = tape.gather_rows(p[0], &[1, 3, 3, 0])?;
            let n = tape.layer_norm(rows, p[1], p[2], LAYER_NORM_EPS)?;
            let l = tape.matmul(n, p[3])?;
            let l = tape.add_bias(l, p[4])?;
            let perm = tape.permute(l, &[1, 0])?;
            let back = tape.permute(perm, &[1, 0])?;
            tape.cross_entropy(back, &[0, 1, 1, 0])
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    // rows 2, 4 and 5 of the table are never gathered
    assert_eq!(report.unread, 3 * 4);
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let params = [random(&[3, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4, 4], &mut rng)];
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = single_head(&mut tape, &vars).unwrap();
        let grads = tape.backward(root).unwrap();
        vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-500.0f64..500.0, 1..40)) {
        let n = vals.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, n], vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(tape.value(y).is_finite());
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3], &mut rng);
        let w1 = random(&[3, 3], &mut rng);
        let w2 = random(&[3, 2], &mut rng);
        let g1 = |tape: &mut Tape, x: Var| -> Var {
            let w = tape.constant(w1.clone());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h).unwrap();
            tape.sum(h).unwrap()
        };
        let g2 = |tape: &mut Tape, x: Var| -> Var {
            let w = tape.constant(w2.clone());
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h).unwrap();
            let h = tape.mul(h, h).unwrap();
            tape.sum(h).unwrap()
        };
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let root = match which {
                1 => g1(&mut tape, v),
                2 => g2(&mut tape, v),
                _ => {
                    let a = g1(&mut tape, v);
                    let b = g2(&mut tape, v);
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(root).unwrap().get(v).unwrap().data().to_vec()
        };
        let (a, b, both) = (grad_of(1), grad_of(2), grad_of(0));
        for i in 0..both.len() {
            prop_assert!((both[i] - a[i] - b[i]).abs() < 1e-9);
        }
    }
}
