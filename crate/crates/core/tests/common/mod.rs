//! Brute-force reference implementations shared by the integration tests.
//! None of these call into the crate's kernels.
#![allow(dead_code)]

pub mod grad_cases;
pub mod micro;
pub mod oracle_cases;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for q in 0..k {
                c[i * n + j] += a[i * k + q] * b[q * n + j];
            }
        }
    }
    c
}

/// Direct convolution: x `[B,C,H,W]`, k `[O,C,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((oi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Training-mode batch norm with two-pass statistics.
pub fn batch_norm(x: &[f64], (b, c, plane): (usize, usize, usize), gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|bi| (0..plane).map(move |p| (bi, p)))
            .map(|(bi, p)| x[(bi * c + ci) * plane + p])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for bi in 0..b {
            for p in 0..plane {
                let i = (bi * c + ci) * plane + p;
                out[i] = gamma[ci] * (x[i] - mean) / (var + 1e-5).sqrt() + beta[ci];
            }
        }
    }
    out
}

/// Bilinear sample of one plane, half-pixel centers, border clamped.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let sy = (((y as f64) + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = (((x as f64) + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = |yy: usize, xx: usize| src[yy * w + xx];
            out[y * ow + x] = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
        }
    }
    out
}

/// Mask-weighted token mean with the 1e-6 denominator guard.
pub fn masked_mean(tokens: &[f64], t: usize, c: usize, mask: &[f64]) -> Vec<f64> {
    let mut num = vec![0.0; c];
    let mut den = 0.0;
    for ti in 0..t {
        for ci in 0..c {
            num[ci] += tokens[ti * c + ci] * mask[ti];
        }
        den += mask[ti];
    }
    num.iter().map(|v| v / (den + 1e-6)).collect()
}

/// Weights of one cross-attention block, all row-major `[in, out]`.
pub struct BlockWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wz: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Cross-attention block with explicit loops: query rows `x [q,c]`,
/// memory `mem [t,c]`, `heads` heads, FFN hidden width `hidden`.
pub fn attention_block(x: &[f64], mem: &[f64], q: usize, t: usize, c: usize, heads: usize, hidden: usize, wts: &BlockWeights) -> Vec<f64> {
    let lin = |inp: &[f64], rows: usize, w: &[f64], i: usize, o: usize| -> Vec<f64> {
        let mut out = vec![0.0; rows * o];
        for r in 0..rows {
            for j in 0..o {
                for k in 0..i {
                    out[r * o + j] += inp[r * i + k] * w[k * o + j];
                }
            }
        }
        out
    };
    let qm = lin(x, q, &wts.wq, c, c);
    let km = lin(mem, t, &wts.wk, c, c);
    let vm = lin(mem, t, &wts.wv, c, c);
    let dh = c / heads;
    let d = (dh as f64).sqrt();
    let mut att = vec![0.0; q * c];
    for r in 0..q {
        for h in 0..heads {
            let scores: Vec<f64> = (0..t)
                .map(|ti| (0..dh).map(|j| qm[r * c + h * dh + j] * km[ti * c + h * dh + j]).sum::<f64>() / d)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            for j in 0..dh {
                att[r * c + h * dh + j] = (0..t).map(|ti| e[ti] / sum * vm[ti * c + h * dh + j]).sum();
            }
        }
    }
    let proj = lin(&att, q, &wts.wz, c, c);
    let z: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let mut hid = lin(&z, q, &wts.w1, c, hidden);
    for r in 0..q {
        for j in 0..hidden {
            hid[r * hidden + j] = (hid[r * hidden + j] + wts.b1[j]).max(0.0);
        }
    }
    let ffn = lin(&hid, q, &wts.w2, hidden, c);
    (0..q * c).map(|i| z[i] + ffn[i] + wts.b2[i % c]).collect()
}

/// F3Net-style structure loss for one `h×w` image with explicit loops.
pub fn ppa_loss(logits: &[f64], gt: &[f64], h: usize, w: usize, k: usize) -> f64 {
    let r = (k / 2) as isize;
    let mut weight = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        s += gt[yy as usize * w + xx as usize];
                    }
                }
            }
            let avg = s / (k * k) as f64;
            weight[y * w + x] = 1.0 + 5.0 * (avg - gt[y * w + x]).abs();
        }
    }
    let (mut wb, mut ws, mut inter, mut uni) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h * w {
        let p = 1.0 / (1.0 + (-logits[i]).exp());
        let bce = -(gt[i] * p.ln() + (1.0 - gt[i]) * (1.0 - p).ln());
        wb += weight[i] * bce;
        ws += weight[i];
        inter += weight[i] * p * gt[i];
        uni += weight[i] * (p + gt[i]) - weight[i] * p * gt[i];
    }
    wb / ws + 1.0 - (inter + 1.0) / (uni + 1.0)
}

/// Confusion counts `(tp, fp, fn, tn)` after thresholding `pred` at 0.5.
pub fn confusion(pred: &[f64], gt: &[f64]) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= 0.5, g >= 0.5) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

/// Neighborhood max (`dilate = true`) or min over a `k×k` window,
/// treating out-of-canvas cells as zero.
pub fn morph(mask: &[f64], h: usize, w: usize, k: usize, dilate: bool) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = if dilate { 0.0 } else { 1.0 };
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    let v = if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        mask[yy as usize * w + xx as usize]
                    } else {
                        0.0
                    };
                    acc = if dilate { f64::max(acc, v) } else { f64::min(acc, v) };
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}
