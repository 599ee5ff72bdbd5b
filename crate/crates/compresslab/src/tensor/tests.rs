use super::*;
use approx::assert_relative_eq;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_rows(rows, cols, data.to_vec()).unwrap()
}

/// Deterministic pseudo-random values in [-2, 2] without pulling an RNG
/// into the low-level tests.
fn ramp(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt);
            let u = ((h >> 11) as f64) / ((1u64 << 53) as f64);
            4.0 * u - 2.0
        })
        .collect()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn matmul_hand_product() {
    let mut tape = Tape::new();
    let a = tape.leaf(t2(1, 2, &[1.0, 2.0]));
    let b = tape.leaf(t2(2, 1, &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let (m, k, n) = (3, 4, 2);
    let av = ramp(m * k, 1);
    let bv = ramp(k * n, 2);
    // independent brute-force triple loop
    let mut expect = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += av[i * k + l] * bv[l * n + j];
            }
            expect[i * n + j] = s;
        }
    }
    let mut tape = Tape::new();
    let a = tape.leaf(t2(m, k, &av));
    let b = tape.leaf(t2(k, n, &bv));
    let c = tape.matmul(a, b).unwrap();
    for (got, want) in tape.value(c).data().iter().zip(&expect) {
        assert_relative_eq!(got, want, max_relative = 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(t2(2, 3, &[0.0; 6]));
    let b = tape.leaf(t2(2, 2, &[0.0; 4]));
    assert!(matches!(tape.matmul(a, b), Err(CoreError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradients_match_formula() {
    // d/da = g * b^T, d/db = a^T * g with g = ones (loss = sum)
    let av = ramp(6, 3);
    let bv = ramp(12, 4);
    let mut tape = Tape::new();
    let a = tape.leaf(t2(2, 3, &av));
    let b = tape.leaf(t2(3, 4, &bv));
    let c = tape.matmul(a, b).unwrap();
    let loss = tape.sum(c).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ga = grads.get(a).unwrap();
    let gb = grads.get(b).unwrap();
    for i in 0..2 {
        for l in 0..3 {
            let want: f64 = (0..4).map(|j| bv[l * 4 + j]).sum();
            assert_relative_eq!(ga.data()[i * 3 + l], want, max_relative = 1e-12);
        }
    }
    for l in 0..3 {
        for j in 0..4 {
            let want: f64 = (0..2).map(|i| av[i * 3 + l]).sum();
            assert_relative_eq!(gb.data()[l * 4 + j], want, max_relative = 1e-12);
        }
    }
}

#[test]
fn silu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let y = tape.silu(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.0);
    // 1 * sigmoid(1), evaluated independently
    let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert_relative_eq!(tape.value(y).data()[1], sig1, max_relative = 1e-15);
}

#[test]
fn add_and_row_broadcast() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

    // row broadcast: [2x3] + [3]
    let m = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let r = tape.leaf(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap());
    let s = tape.add(m, r).unwrap();
    assert_eq!(tape.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let loss = tape.sum(s).unwrap();
    let grads = tape.backward(loss).unwrap();
    // broadcast operand accumulates one gradient per row
    assert_eq!(grads.get(r).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn incompatible_broadcast_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t2(2, 3, &[0.0; 6]));
    let b = tape.leaf(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
    assert!(matches!(tape.add(a, b), Err(CoreError::ShapeMismatch { .. })));
}

#[test]
fn rmsnorm_unit_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t2(1, 4, &[1.0, 1.0, 1.0, 1.0]));
    let g = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
    let y = tape.rmsnorm(x, g, 1e-12).unwrap();
    for &v in tape.value(y).data() {
        assert_relative_eq!(v, 1.0, max_relative = 1e-9);
    }

    let x2 = tape.leaf(t2(1, 2, &[2.0, 2.0]));
    let g2 = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let y2 = tape.rmsnorm(x2, g2, 1e-12).unwrap();
    for &v in tape.value(y2).data() {
        assert_relative_eq!(v, 1.0, max_relative = 1e-9);
    }
}

#[test]
fn rmsnorm_gradient_matches_finite_differences() {
    let xv = t2(2, 4, &ramp(8, 7));
    let gv = Tensor::new(vec![4], ramp(4, 8)).unwrap();
    // squared objective keeps every coordinate's gradient away from zero
    // (a plain sum has a vanishing radial component by scale invariance)
    let err = gradient_check(
        |tape, vars| {
            let y = tape.rmsnorm(vars[0], vars[1], 1e-6)?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &[xv, gv],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "rmsnorm gradient error {err}");
}

#[test]
fn attention_single_position_returns_v() {
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(Tensor::new(vec![1, 1, 4], ramp(4, 9)).unwrap());
    let k = tape.leaf(Tensor::new(vec![1, 1, 4], ramp(4, 10)).unwrap());
    let v = tape.leaf(Tensor::new(vec![1, 1, 4], ramp(4, 11)).unwrap());
    let o = tape.causal_attention(q, k, v, 10_000.0).unwrap();
    let vv = tape.value(v).data().to_vec();
    for (a, b) in tape.value(o).data().iter().zip(&vv) {
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }
}

#[test]
fn attention_uniform_scores_give_causal_running_mean() {
    // k = 0 makes every allowed score equal, so softmax is uniform over
    // positions 0..=i and the output is the running mean of v rows.
    let t = 4;
    let dh = 4;
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(Tensor::new(vec![1, t, dh], ramp(t * dh, 12)).unwrap());
    let k = tape.leaf(Tensor::zeros(vec![1, t, dh]));
    let vv = ramp(t * dh, 13);
    let v = tape.leaf(Tensor::new(vec![1, t, dh], vv.clone()).unwrap());
    let o = tape.causal_attention(q, k, v, 10_000.0).unwrap();
    for ti in 0..t {
        for j in 0..dh {
            let mean: f64 =
                (0..=ti).map(|u| vv[u * dh + j]).sum::<f64>() / (ti as f64 + 1.0);
            assert_relative_eq!(tape.value(o).data()[ti * dh + j], mean, max_relative = 1e-12);
        }
    }
}

/// Fully explicit attention oracle: dense score matrix, -inf mask,
/// softmax, weighted sum, with rotary rotation applied inline.
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, dh: usize, theta: f64) -> Vec<f64> {
    let rope = |x: &[f64]| -> Vec<f64> {
        let mut out = x.to_vec();
        for pos in 0..t {
            for j in 0..dh / 2 {
                let angle = pos as f64 * theta.powf(-2.0 * j as f64 / dh as f64);
                let (s, c) = angle.sin_cos();
                let a = x[pos * dh + 2 * j];
                let b = x[pos * dh + 2 * j + 1];
                out[pos * dh + 2 * j] = a * c - b * s;
                out[pos * dh + 2 * j + 1] = a * s + b * c;
            }
        }
        out
    };
    let (qr, kr) = (rope(q), rope(k));
    let mut scores = vec![f64::NEG_INFINITY; t * t];
    for i in 0..t {
        for j in 0..t {
            if j <= i {
                let mut s = 0.0;
                for l in 0..dh {
                    s += qr[i * dh + l] * kr[j * dh + l];
                }
                scores[i * t + j] = s / (dh as f64).sqrt();
            }
        }
    }
    let mut out = vec![0.0; t * dh];
    for i in 0..t {
        let row = &scores[i * t..(i + 1) * t];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..t {
            let p = exps[j] / z;
            for l in 0..dh {
                out[i * dh + l] += p * v[j * dh + l];
            }
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let (t, dh) = (3, 4);
    let qv = ramp(t * dh, 14);
    let kv = ramp(t * dh, 15);
    let vv = ramp(t * dh, 16);
    let expect = attention_oracle(&qv, &kv, &vv, t, dh, 10_000.0);
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(Tensor::new(vec![1, t, dh], qv).unwrap());
    let k = tape.leaf(Tensor::new(vec![1, t, dh], kv).unwrap());
    let v = tape.leaf(Tensor::new(vec![1, t, dh], vv).unwrap());
    let o = tape.causal_attention(q, k, v, 10_000.0).unwrap();
    for (a, b) in tape.value(o).data().iter().zip(&expect) {
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }
}

#[test]
fn attention_is_causal() {
    // perturbing tokens at positions > i leaves output rows 0..=i unchanged
    let (t, dh) = (5, 4);
    let qv = ramp(t * dh, 17);
    let kv = ramp(t * dh, 18);
    let vv = ramp(t * dh, 19);
    let run = |q: &[f64], k: &[f64], v: &[f64]| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let qq = tape.leaf(Tensor::new(vec![1, t, dh], q.to_vec()).unwrap());
        let kk = tape.leaf(Tensor::new(vec![1, t, dh], k.to_vec()).unwrap());
        let vv2 = tape.leaf(Tensor::new(vec![1, t, dh], v.to_vec()).unwrap());
        let o = tape.causal_attention(qq, kk, vv2, 10_000.0).unwrap();
        tape.value(o).data().to_vec()
    };
    let base = run(&qv, &kv, &vv);
    for cut in 1..t {
        let mut q2 = qv.clone();
        let mut k2 = kv.clone();
        let mut v2 = vv.clone();
        for p in cut..t {
            for j in 0..dh {
                q2[p * dh + j] += 3.0;
                k2[p * dh + j] -= 2.0;
                v2[p * dh + j] += 5.0;
            }
        }
        let pert = run(&q2, &k2, &v2);
        assert_eq!(&base[..cut * dh], &pert[..cut * dh], "rows before {cut} changed");
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let (t, dh) = (3, 4);
    let q = Tensor::new(vec![1, t, dh], ramp(t * dh, 20)).unwrap();
    let k = Tensor::new(vec![1, t, dh], ramp(t * dh, 21)).unwrap();
    let v = Tensor::new(vec![1, t, dh], ramp(t * dh, 22)).unwrap();
    let err = gradient_check(
        |tape, vars| {
            let o = tape.causal_attention(vars[0], vars[1], vars[2], 10_000.0)?;
            // square to make the objective nonlinear in the output
            let o2 = tape.mul(o, o)?;
            tape.sum(o2)
        },
        &[q, k, v],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "attention gradient error {err}");
}

#[test]
fn cross_entropy_uniform_is_log_vocab() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(t2(2, 4, &[0.7; 8]));
    let loss = tape.cross_entropy(logits, &[1, 3]).unwrap();
    assert_relative_eq!(tape.value(loss).item(), 4.0f64.ln(), max_relative = 1e-12);
}

#[test]
fn cross_entropy_huge_margin_is_zero() {
    let mut tape = Tape::<f64>::new();
    let mut row = vec![0.0; 5];
    row[2] = 1e9;
    let logits = tape.leaf(t2(1, 5, &row));
    let loss = tape.cross_entropy(logits, &[2]).unwrap();
    assert!(tape.value(loss).item().abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_high_precision_oracle() {
    // run the op in f32, compare against an f64 softmax oracle
    let vals = ramp(10, 23);
    let targets = [4u32, 0u32];
    let mut expect = 0.0f64;
    for (i, row) in vals.chunks(5).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        expect += z.ln() + mx - row[targets[i] as usize];
    }
    expect /= 2.0;

    let mut tape = Tape::<f32>::new();
    let logits =
        tape.leaf(Tensor::from_rows(2, 5, vals.iter().map(|&x| x as f32).collect()).unwrap());
    let loss = tape.cross_entropy(logits, &targets).unwrap();
    assert_relative_eq!(tape.value(loss).item() as f64, expect, max_relative = 1e-6);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(t2(1, 4, &[0.0; 4]));
    assert!(matches!(
        tape.cross_entropy(logits, &[4]),
        Err(CoreError::TokenOutOfRange { .. })
    ));
}

#[test]
fn custom_grad_forward_value_and_identity_backward() {
    let wv = ramp(6, 24);
    let quantized: Vec<f64> = wv.iter().map(|&x| x.signum()).collect();
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t2(2, 3, &wv));
    let q = tape.custom_grad(t2(2, 3, &quantized), w).unwrap();
    assert_eq!(tape.value(q).data(), &quantized[..]);
    let loss = tape.sum(q).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
}

#[test]
fn custom_grad_ste_equals_gradient_at_quantized_point() {
    // one linear layer x @ W with STE-quantized W: dL/dW must equal
    // dL/dW_q evaluated with W_q as a plain leaf (identity chain rule).
    let xv = ramp(6, 25);
    let wv = ramp(12, 26);
    let wq: Vec<f64> = wv.iter().map(|&x| (x * 2.0).round() / 2.0).collect();

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t2(2, 3, &xv));
    let w = tape.leaf(t2(3, 4, &wv));
    let w_ste = tape.custom_grad(t2(3, 4, &wq), w).unwrap();
    let y = tape.matmul(x, w_ste).unwrap();
    let y2 = tape.mul(y, y).unwrap();
    let loss = tape.sum(y2).unwrap();
    let grads = tape.backward(loss).unwrap();
    let got = grads.get(w).unwrap().data().to_vec();

    let mut oracle_tape = Tape::<f64>::new();
    let x2 = oracle_tape.leaf(t2(2, 3, &xv));
    let wq_leaf = oracle_tape.leaf(t2(3, 4, &wq));
    let y = oracle_tape.matmul(x2, wq_leaf).unwrap();
    let y2 = oracle_tape.mul(y, y).unwrap();
    let loss = oracle_tape.sum(y2).unwrap();
    let grads = oracle_tape.backward(loss).unwrap();
    let want = grads.get(wq_leaf).unwrap().data().to_vec();

    assert_eq!(got, want, "STE gradient differs from gradient at quantized point");
}

#[test]
fn custom_grad_shape_mismatch_errors() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(t2(2, 3, &[0.0; 6]));
    assert!(matches!(
        tape.custom_grad(t2(3, 2, &[0.0; 6]), w),
        Err(CoreError::ShapeMismatch { .. })
    ));
}

#[test]
fn gradient_check_square_function() {
    let x = Tensor::new(vec![1], vec![3.0]).unwrap();
    let err = gradient_check(
        |tape, vars| {
            let y = tape.mul(vars[0], vars[0])?;
            tape.sum(y)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-9, "x^2 gradient error {err}");
}

#[test]
fn gradient_check_silu_sum() {
    let x = Tensor::new(vec![8], ramp(8, 27)).unwrap();
    let err = gradient_check(
        |tape, vars| {
            let y = tape.silu(vars[0])?;
            tape.sum(y)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "silu gradient error {err}");
}

#[test]
fn embed_gathers_and_scatters() {
    let mut tape = Tape::<f64>::new();
    let table = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let e = tape.embed(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let loss = tape.sum(e).unwrap();
    let grads = tape.backward(loss).unwrap();
    // row 2 used twice, row 0 once, row 1 never
    assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

    assert!(matches!(tape.embed(table, &[3]), Err(CoreError::TokenOutOfRange { .. })));
}

#[test]
fn split_merge_heads_roundtrip() {
    let (batch, t, d, heads) = (2, 3, 4, 2);
    let xv = ramp(batch * t * d, 28);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t2(batch * t, d, &xv));
    let s = tape.split_heads(x, batch, heads).unwrap();
    assert_eq!(tape.value(s).shape(), &[batch * heads, t, d / heads]);
    let m = tape.merge_heads(s, batch, heads).unwrap();
    assert_eq!(tape.value(m).data(), &xv[..]);
    let loss = tape.sum(m).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &vec![1.0; batch * t * d][..]);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(
        tape.scale(x, f64::INFINITY),
        Err(CoreError::NonFinite { .. })
    ));
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(4, 4, &ramp(16, 29)));
        let w = tape.leaf(t2(4, 4, &ramp(16, 30)));
        let g = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let n = tape.rmsnorm(x, g, 1e-6).unwrap();
        let h = tape.matmul(n, w).unwrap();
        let s = tape.silu(h).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut out = grads.get(w).unwrap().data().to_vec();
        out.extend_from_slice(grads.get(x).unwrap().data());
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}
