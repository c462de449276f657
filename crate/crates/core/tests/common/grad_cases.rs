//! Gradient-check cases: one small scalar function per differentiable op.
#![allow(dead_code)]

use rand::Rng;
use spider::{finite_diff_check, Result, Tape, Tensor, Var};

use super::{random_vec, rng};

type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var, u64) -> Result<Var>>);

/// Weighted sum `<w, y>` with a deterministic random `w`.
fn weigh(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0xabcdef);
    let w = tape.constant(&Tensor::new(shape, random_vec(&mut r, n))?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn konst(tape: &mut Tape<f64>, shape: &[usize], seed: u64) -> Var {
    let n: usize = shape.iter().product();
    let mut r = rng(seed ^ 0x1234);
    tape.constant(&Tensor::new(shape.to_vec(), random_vec(&mut r, n)).unwrap())
}

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul_left", vec![3, 4], Box::new(|t, x, s| { let b = konst(t, &[4, 2], s); let y = t.matmul(x, b)?; weigh(t, y, s) })),
        ("matmul_right", vec![4, 2], Box::new(|t, x, s| { let a = konst(t, &[3, 4], s); let y = t.matmul(a, x)?; weigh(t, y, s) })),
        ("matmul_nt", vec![5, 4], Box::new(|t, x, s| { let a = konst(t, &[3, 4], s); let y = t.matmul_nt(a, x)?; let y2 = t.matmul_nt(x, a)?; let l = weigh(t, y, s)?; let l2 = weigh(t, y2, s + 1)?; t.add(l, l2) })),
        ("conv2d_input", vec![2, 2, 5, 5], Box::new(|t, x, s| { let k = konst(t, &[3, 2, 3, 3], s); let y = t.conv2d(x, k, 1, 1)?; weigh(t, y, s) })),
        ("conv2d_kernel", vec![3, 2, 3, 3], Box::new(|t, k, s| { let x = konst(t, &[2, 2, 5, 5], s); let y = t.conv2d(x, k, 2, 0)?; weigh(t, y, s) })),
        ("conv2d_pointwise", vec![2, 3, 1, 1], Box::new(|t, k, s| { let x = konst(t, &[2, 3, 4, 4], s); let y = t.conv2d(x, k, 1, 0)?; weigh(t, y, s) })),
        ("softmax", vec![3, 5], Box::new(|t, x, s| { let y = t.softmax(x, 1)?; weigh(t, y, s) })),
        ("softmax_axis0", vec![4, 3], Box::new(|t, x, s| { let y = t.softmax(x, 0)?; weigh(t, y, s) })),
        ("batch_norm_train", vec![3, 2, 3, 3], Box::new(|t, x, s| { let g = konst(t, &[2], s); let b = konst(t, &[2], s + 1); let y = t.batch_norm(x, g, b, (&[0.0; 2], &[1.0; 2]), true)?; weigh(t, y, s) })),
        ("batch_norm_affine", vec![2], Box::new(|t, g, s| { let x = konst(t, &[2, 2, 3, 3], s); let b = konst(t, &[2], s + 1); let y = t.batch_norm(x, g, b, (&[0.0; 2], &[1.0; 2]), true)?; let y2 = t.batch_norm(x, b, g, (&[0.1; 2], &[2.0; 2]), false)?; let l = weigh(t, y, s)?; let l2 = weigh(t, y2, s)?; t.add(l, l2) })),
        ("batch_norm_eval", vec![2, 2, 3, 3], Box::new(|t, x, s| { let g = konst(t, &[2], s); let b = konst(t, &[2], s + 1); let y = t.batch_norm(x, g, b, (&[0.3; 2], &[0.7; 2]), false)?; weigh(t, y, s) })),
        ("resize_up", vec![1, 2, 3, 3], Box::new(|t, x, s| { let y = t.resize(x, 7, 5)?; weigh(t, y, s) })),
        ("resize_down", vec![1, 1, 8, 8], Box::new(|t, x, s| { let y = t.resize(x, 3, 2)?; weigh(t, y, s) })),
        ("global_avg_pool", vec![2, 3, 2, 3], Box::new(|t, x, s| { let y = t.global_avg_pool(x)?; weigh(t, y, s) })),
        ("avg_pool2", vec![1, 2, 4, 6], Box::new(|t, x, s| { let y = t.avg_pool2(x)?; weigh(t, y, s) })),
        ("relu", vec![4, 4], Box::new(|t, x, s| { let y = t.relu(x)?; weigh(t, y, s) })),
        ("sigmoid", vec![4, 4], Box::new(|t, x, s| { let y = t.sigmoid(x)?; weigh(t, y, s) })),
        ("mul_sub_scale", vec![6], Box::new(|t, x, s| { let c = konst(t, &[6], s); let y = t.mul(x, c)?; let y = t.sub(y, x)?; let y = t.scale(y, 1.7)?; weigh(t, y, s) })),
        ("channel_bias", vec![3], Box::new(|t, b, s| { let x = konst(t, &[2, 3, 2, 2], s); let y = t.channel_bias(x, b)?; let y = t.mul(y, y)?; weigh(t, y, s) })),
        ("row_bias", vec![4], Box::new(|t, b, s| { let x = konst(t, &[3, 4], s); let y = t.row_bias(x, b)?; let y = t.mul(y, y)?; weigh(t, y, s) })),
        ("reshape_narrow_concat", vec![2, 3, 4], Box::new(|t, x, s| { let a = t.narrow(x, 2, 1, 2)?; let b = t.narrow(x, 1, 0, 1)?; let b = t.reshape(b, &[2, 4, 1])?; let b = t.narrow(b, 1, 0, 3)?; let b = t.reshape(b, &[2, 3, 1])?; let y = t.concat(&[a, b, a], 2)?; weigh(t, y, s) })),
        ("nchw_to_tokens", vec![2, 3, 2, 2], Box::new(|t, x, s| { let y = t.nchw_to_tokens(x)?; let w = konst(t, &[3, 2], s); let y = t.matmul(y, w)?; weigh(t, y, s) })),
        ("ppa_loss", vec![2, 1, 6, 6], Box::new(|t, x, s| {
            let mut r = rng(s ^ 0x77);
            let gt: Vec<f64> = (0..72).map(|i| if (i % 6) > 1 && (i / 6 % 6) > 2 { 1.0 } else { if r.gen_bool(0.1) { 0.5 } else { 0.0 } }).collect();
            let w = spider::training::boundary_weights(&gt, 2, 6, 6, 3);
            let x3 = t.scale(x, 3.0)?;
            t.ppa_loss(x3, &gt, w)
        })),
    ]
}

/// Max relative error for every case over `points` random evaluation points.
pub fn all_ops(points: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, shape, f)| {
            let n: usize = shape.iter().product();
            let mut worst = 0.0f64;
            for p in 0..points {
                let mut r = rng(1000 + p);
                let point = Tensor::new(shape.clone(), random_vec(&mut r, n)).unwrap();
                let err = finite_diff_check(|tape, x| f(tape, x, p), &point, 1e-5).unwrap();
                worst = worst.max(err);
            }
            (name, worst)
        })
        .collect()
}
