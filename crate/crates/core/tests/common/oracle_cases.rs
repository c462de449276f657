//! Randomized comparisons of crate kernels against the loop oracles. Each
//! function runs its cases and returns how many it checked, or a message
//! describing the first mismatch.
#![allow(dead_code)]

use rand::Rng;
use spider::concept::{dynamic_head, masked_average_pool, mhca_block};
use spider::eval::metrics;
use spider::networks::{ModelConfig, ModelParams};
use spider::params::Forward;
use spider::synth::{dilate_mask, erode_mask};
use spider::training::ppa_loss;
use spider::{Tape, Tensor};

use super::{random_vec, rel_err, rng, BlockWeights};

pub type Outcome = Result<usize, String>;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// `A·B` and `A·Bᵀ` at relative error 1e-12.
pub fn matmul() -> Outcome {
    let mut r = rng(1);
    for trial in 0..50 {
        let (m, k, n) = if trial == 0 {
            (3, 3, 3)
        } else {
            (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..7))
        };
        let a = random_vec(&mut r, m * k);
        let b = random_vec(&mut r, k * n);
        let want = super::matmul(&a, &b, m, k, n);
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(&t(&[m, k], a.clone()));
        let vb = tape.constant(&t(&[k, n], b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let e = rel_err(tape.value(c), &want);
        check(e < 1e-12, || format!("matmul {m}x{k}x{n}: rel err {e:e}"))?;
        // a * b^T against the oracle on an explicitly transposed copy
        let bt = t(&[n, k], (0..n * k).map(|i| b[(i % k) * n + i / k]).collect());
        let vbt = tape.constant(&bt);
        let c2 = tape.matmul_nt(va, vbt).unwrap();
        let e = rel_err(tape.value(c2), &want);
        check(e < 1e-12, || format!("matmul_nt {m}x{k}x{n}: rel err {e:e}"))?;
    }
    Ok(50)
}

/// Strided, padded convolutions at relative error 1e-12.
pub fn conv2d() -> Outcome {
    let mut r = rng(2);
    let mut done = 0;
    while done < 50 {
        let (b, c, h, o, kk, stride, pad) = if done == 0 {
            (1, 2, 5, 3, 3, 1, 0)
        } else {
            let kk = [1, 3, 5][r.gen_range(0..3)];
            let pad = r.gen_range(0..=kk / 2);
            let stride = r.gen_range(1..3);
            // spatial extents compatible with the stride
            let h = r.gen_range(0..3usize) * stride + kk - 2 * pad;
            (r.gen_range(1..3), r.gen_range(1..4), h.max(1), r.gen_range(1..4), kk, stride, pad)
        };
        if h + 2 * pad < kk || (h + 2 * pad - kk) % stride != 0 {
            continue;
        }
        let x = random_vec(&mut r, b * c * h * h);
        let k = random_vec(&mut r, o * c * kk * kk);
        let mut tape = Tape::<f64>::new();
        let vx = tape.constant(&t(&[b, c, h, h], x.clone()));
        let vk = tape.constant(&t(&[o, c, kk, kk], k.clone()));
        let y = tape.conv2d(vx, vk, stride, pad).unwrap();
        let want = super::conv2d(&x, (b, c, h, h), &k, (o, kk, kk), stride, pad);
        let e = rel_err(tape.value(y), &want);
        check(e < 1e-12, || format!("conv2d case {done} (k{kk} s{stride} p{pad}): rel err {e:e}"))?;
        done += 1;
    }
    Ok(done)
}

/// Softmax over the last axis of random rows at relative error 1e-12.
pub fn softmax() -> Outcome {
    let mut r = rng(3);
    for case in 0..50 {
        let (rows, n) = (r.gen_range(1..5), r.gen_range(1..10));
        let scale = [1.0, 10.0, 300.0][case % 3];
        let x: Vec<f64> = random_vec(&mut r, rows * n).iter().map(|v| scale * v).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(&t(&[rows, n], x.clone()));
        let y = tape.softmax(v, 1).unwrap();
        let want: Vec<f64> = x.chunks(n).flat_map(super::softmax).collect();
        let e = rel_err(tape.value(y), &want);
        check(e < 1e-12, || format!("softmax case {case}: rel err {e:e}"))?;
    }
    Ok(50)
}

/// Masked average pooling at absolute error 1e-10.
pub fn masked_pool() -> Outcome {
    let model = ModelParams::<f64>::new(ModelConfig::desk(), 1).unwrap();
    for case in 0..60 {
        let mut r = rng(100 + case);
        let (tk, c) = (12, 5);
        let tokens = random_vec(&mut r, tk * c);
        let mask: Vec<f64> = random_vec(&mut r, tk).iter().map(|v| 0.5 + 0.5 * v).collect();
        let mut fw = Forward::frozen(&model.store);
        let mem = fw.tape.input(vec![tk, c], tokens.clone(), false);
        let got = masked_average_pool(&mut fw, mem, &mask, "T").unwrap();
        let want = super::masked_mean(&tokens, tk, c, &mask);
        let e = max_abs(fw.tape.value(got), &want);
        check(e < 1e-10, || format!("masked pool case {case}: abs err {e:e}"))?;
    }
    Ok(60)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Desk model with one block of the given width and head count.
pub fn small_config(channels: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        channels,
        heads,
        blocks: 1,
        context_width: 0,
        ..ModelConfig::desk()
    }
}

pub fn block_weights(model: &ModelParams<f64>) -> BlockWeights {
    let b = &model.prompt_stream.blocks[0];
    let get = |id| model.store.get(id).data().to_vec();
    BlockWeights {
        wq: get(b.wq),
        wk: get(b.wk),
        wv: get(b.wv),
        wz: get(b.wz),
        w1: get(b.ffn_w1),
        b1: get(b.ffn_b1),
        w2: get(b.ffn_w2),
        b2: get(b.ffn_b2),
    }
}

fn randomize_biases(model: &mut ModelParams<f64>, seed: u64) {
    let mut r = rng(seed);
    let b = model.prompt_stream.blocks[0].clone();
    for id in [b.ffn_b1, b.ffn_b2] {
        let n = model.store.get(id).numel();
        model.store.get_mut(id).data_mut().copy_from_slice(&random_vec(&mut r, n));
    }
}

/// Cross-attention blocks at absolute error 1e-10; every attention row
/// sums to one.
pub fn attention_block() -> Outcome {
    let configs = [(4, 1, 2, 3), (8, 2, 2, 5), (16, 4, 2, 7), (4, 2, 1, 1)];
    for (case, &(c, heads, q, tk)) in configs.iter().cycle().take(60).enumerate() {
        let mut model = ModelParams::<f64>::new(small_config(c, heads), 200 + case as u64).unwrap();
        randomize_biases(&mut model, case as u64);
        let mut r = rng(300 + case as u64);
        let x = random_vec(&mut r, q * c);
        let mem = random_vec(&mut r, tk * c);
        let mut fw = Forward::frozen(&model.store);
        let xv = fw.tape.input(vec![q, c], x.clone(), false);
        let mv = fw.tape.input(vec![tk, c], mem.clone(), false);
        let block = model.prompt_stream.blocks[0].clone();
        let mut maps = Vec::new();
        let out = mhca_block(&mut fw, &block, heads, xv, mv, Some(&mut maps)).unwrap();
        let want = super::attention_block(&x, &mem, q, tk, c, heads, 4 * c, &block_weights(&model));
        let e = max_abs(fw.tape.value(out), &want);
        check(e < 1e-10, || format!("attention case {case}: abs err {e:e}"))?;
        check(maps.len() == heads, || format!("attention case {case}: {} maps", maps.len()))?;
        for m in maps {
            for row in fw.tape.value(m).chunks(tk) {
                let s = row.iter().sum::<f64>();
                check((s - 1.0).abs() < 1e-6, || format!("attention case {case}: row sums to {s}"))?;
            }
        }
    }
    Ok(60)
}

/// Per-pixel dot product plus bias at absolute error 1e-10.
pub fn dynamic_head_dot() -> Outcome {
    let model = ModelParams::<f64>::new(ModelConfig::desk(), 1).unwrap();
    for case in 0..60 {
        let mut r = rng(400 + case);
        let (b, c, h, w) = (2, 16, 5, 4);
        let f = random_vec(&mut r, b * c * h * w);
        let wo = random_vec(&mut r, c);
        let bias = random_vec(&mut r, 1)[0];
        let mut fw = Forward::frozen(&model.store);
        let fv = fw.tape.input(vec![b, c, h, w], f.clone(), false);
        let wv = fw.tape.input(vec![1, c], wo.clone(), false);
        let bv = fw.tape.input(vec![1], vec![bias], false);
        let out = dynamic_head(&mut fw, fv, wv, bv, h, w).unwrap();
        let want: Vec<f64> = (0..b * h * w)
            .map(|i| {
                let (bi, p) = (i / (h * w), i % (h * w));
                (0..c).map(|ci| wo[ci] * f[(bi * c + ci) * h * w + p]).sum::<f64>() + bias
            })
            .collect();
        let e = max_abs(fw.tape.value(out), &want);
        check(e < 1e-10, || format!("dynamic head case {case}: abs err {e:e}"))?;
    }
    Ok(60)
}

/// Boundary-weighted loss for windows 3 and 7 at absolute error 1e-8.
pub fn ppa() -> Outcome {
    for case in 0..60 {
        let mut r = rng(case);
        let (b, h, w) = (2, 4, 4);
        let plane = h * w;
        let logits: Vec<f64> = random_vec(&mut r, b * plane).iter().map(|v| 3.0 * v).collect();
        let gt: Vec<f64> = random_vec(&mut r, b * plane).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        for k in [3, 7] {
            let mut tape = Tape::<f64>::new();
            let lv = tape.input(vec![b, 1, h, w], logits.clone(), false);
            let loss = ppa_loss(&mut tape, lv, &t(&[b, 1, h, w], gt.clone()), k).unwrap();
            let want = (0..b)
                .map(|i| super::ppa_loss(&logits[i * plane..(i + 1) * plane], &gt[i * plane..(i + 1) * plane], h, w, k))
                .sum::<f64>()
                / b as f64;
            let e = (tape.item(loss) - want).abs();
            check(e < 1e-8, || format!("ppa case {case} k{k}: abs err {e:e}"))?;
        }
    }
    Ok(60)
}

/// Dice, IoU, MAE and BER recomputed from oracle confusion counts.
pub fn metric_values(pred: &[f64], gt: &[f64]) -> [f64; 4] {
    let (tp, fp, fneg, tn) = super::confusion(pred, gt);
    let (tp, fp, fneg, tn) = (tp as f64, fp as f64, fneg as f64, tn as f64);
    let dice = if tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    let iou = if tp + fp + fneg == 0.0 { 1.0 } else { tp / (tp + fp + fneg) };
    let fnr = if tp + fneg == 0.0 { 0.0 } else { fneg / (tp + fneg) };
    let fpr = if tn + fp == 0.0 { 0.0 } else { fp / (tn + fp) };
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64;
    [dice, iou, mae, 0.5 * (fnr + fpr)]
}

/// Metrics of random 8×8 predictions: exact for the count-based scores,
/// 1e-12 for MAE.
pub fn metrics_confusion() -> Outcome {
    let mut r = rng(21);
    for case in 0..100 {
        let fg_rate = (case % 5) as f64 / 4.0;
        let pred: Vec<f64> = (0..64).map(|_| r.gen::<f64>()).collect();
        let gt: Vec<f64> = (0..64).map(|_| if r.gen::<f64>() < fg_rate { 1.0 } else { 0.0 }).collect();
        let m = metrics(&pred, &gt).unwrap();
        let o = metric_values(&pred, &gt);
        check([m.dice, m.iou, m.ber] == [o[0], o[1], o[3]], || format!("metrics case {case}: {m:?} vs {o:?}"))?;
        check((m.mae - o[2]).abs() < 1e-12, || format!("metrics case {case}: mae {} vs {}", m.mae, o[2]))?;
    }
    Ok(100)
}

/// Dilation and erosion of random rectangle unions, exact, for k in {3, 5, 7}.
pub fn morphology() -> Outcome {
    for case in 0..50 {
        let mut r = rng(case);
        let (h, w) = (r.gen_range(5..16), r.gen_range(5..16));
        let mut m = vec![0.0f64; h * w];
        for _ in 0..3 {
            let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
            let (y1, x1) = ((y0 + r.gen_range(1..6)).min(h), (x0 + r.gen_range(1..6)).min(w));
            for y in y0..y1 {
                for x in x0..x1 {
                    m[y * w + x] = 1.0;
                }
            }
        }
        let mask = Tensor::new([1, h, w], m.iter().map(|&v| v as f32).collect()).unwrap();
        for k in [3, 5, 7] {
            let d: Vec<f64> = dilate_mask(&mask, k).unwrap().data().iter().map(|&v| v as f64).collect();
            let e: Vec<f64> = erode_mask(&mask, k).unwrap().data().iter().map(|&v| v as f64).collect();
            check(d == super::morph(&m, h, w, k, true), || format!("dilate case {case} k{k}"))?;
            check(e == super::morph(&m, h, w, k, false), || format!("erode case {case} k{k}"))?;
        }
    }
    Ok(50)
}

/// Every comparison, by name.
pub fn all() -> Vec<(&'static str, fn() -> Outcome)> {
    vec![
        ("conv2d", conv2d),
        ("matmul", matmul),
        ("softmax", softmax),
        ("masked_average_pool", masked_pool),
        ("mhca_block", attention_block),
        ("dynamic_head", dynamic_head_dot),
        ("ppa_loss", ppa),
        ("metrics", metrics_confusion),
        ("dilate/erode", morphology),
    ]
}
