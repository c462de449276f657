mod common;

use common::{random_vec, rel_err, rng};
use proptest::prelude::*;
use rand::Rng;
use spider::{finite_diff_check, Error, Tape, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut tape = Tape::<f64>::strict();
    let i2 = tape.constant(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(&t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let z = tape.constant(&Tensor::zeros([2, 3]));
    let b = tape.constant(&t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(z, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 2]);
    assert!(tape.value(c).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&Tensor::zeros([2, 3]));
    let b = tape.constant(&Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
}

#[test]
fn matmul_matches_loop_oracle() {
    common::oracle_cases::matmul().unwrap();
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::<f64>::strict();
    let x = t(&[1, 1, 3, 3], (0..9).map(f64::from).collect());
    let vx = tape.constant(&x);
    let k1 = tape.constant(&Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(vx, k1, 1, 0).unwrap();
    assert_eq!(tape.value(y), x.data());

    let ones = tape.constant(&Tensor::ones([1, 1, 3, 3]));
    let k3 = tape.constant(&Tensor::ones([1, 1, 3, 3]));
    let y = tape.conv2d(ones, k3, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y), &[9.0]);
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::zeros([1, 1, 6, 6]));
    let k = tape.constant(&Tensor::zeros([1, 1, 3, 3]));
    // (6 - 3) is not divisible by 2
    assert!(matches!(tape.conv2d(x, k, 2, 0), Err(Error::Dimension(_))));
    let even = tape.constant(&Tensor::zeros([1, 1, 2, 2]));
    assert!(matches!(tape.conv2d(x, even, 1, 0), Err(Error::Dimension(_))));
    let wrong_c = tape.constant(&Tensor::zeros([1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, wrong_c, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    common::oracle_cases::conv2d().unwrap();
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.constant(&t(&[3], vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(tape.value(y).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

    let x = tape.constant(&t(&[2], vec![1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-12 && tape.value(y)[1] < 1e-300);

    let x = tape.constant(&t(&[3], vec![1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(rel_err(tape.value(y), &common::softmax(&[1.0, 2.0, 3.0])) < 1e-12);
}

#[test]
fn softmax_matches_row_oracle() {
    common::oracle_cases::softmax().unwrap();
}

#[test]
fn softmax_on_inner_axis() {
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = tape.constant(&t(&[2, 3, 4], data.clone()));
    let y = tape.softmax(x, 1).unwrap();
    for o in 0..2 {
        for i in 0..4 {
            let slice: Vec<f64> = (0..3).map(|j| data[o * 12 + j * 4 + i]).collect();
            let expect = common::softmax(&slice);
            for j in 0..3 {
                assert!((tape.value(y)[o * 12 + j * 4 + i] - expect[j]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(values in prop::collection::vec(-1e3f64..1e3, 1..12), rows in 1usize..4) {
        let cols = values.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v * (r as f64 + 1.0) / rows as f64)).collect();
        let mut tape = Tape::<f64>::strict();
        let x = tape.constant(&t(&[rows, cols], data));
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_f32_extremes_stay_finite(values in prop::collection::vec(-1e3f32..1e3, 1..16)) {
        let n = values.len();
        let mut tape = Tape::<f32>::strict();
        let x = tape.constant(&Tensor::new([n], values).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        prop_assert!((tape.value(y).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

fn bn_case(seed: u64, b: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    (
        random_vec(&mut r, b * c * h * w).iter().map(|v| 3.0 * v + 1.5).collect(),
        random_vec(&mut r, c),
        random_vec(&mut r, c),
    )
}

#[test]
fn batch_norm_normalizes_per_channel() {
    let (b, c, h, w) = (3, 4, 5, 5);
    let (x, _, _) = bn_case(3, b, c, h, w);
    let mut tape = Tape::<f64>::strict();
    let vx = tape.constant(&t(&[b, c, h, w], x));
    let g = tape.constant(&Tensor::ones([c]));
    let be = tape.constant(&Tensor::zeros([c]));
    let (rm, rv) = (vec![0.0; c], vec![1.0; c]);
    let y = tape.batch_norm(vx, g, be, (&rm, &rv), true).unwrap();
    let out = tape.value(y);
    let plane = h * w;
    for ci in 0..c {
        let vals: Vec<f64> = (0..b).flat_map(|bi| out[(bi * c + ci) * plane..][..plane].to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let stats = tape.batch_stats(y).unwrap();
    assert_eq!(stats.count, b * plane);
}

#[test]
fn batch_norm_zero_scale_gives_beta() {
    let (x, _, beta) = bn_case(4, 2, 3, 4, 4);
    let mut tape = Tape::<f64>::new();
    let vx = tape.constant(&t(&[2, 3, 4, 4], x));
    let g = tape.constant(&Tensor::zeros([3]));
    let be = tape.constant(&t(&[3], beta.clone()));
    let y = tape.batch_norm(vx, g, be, (&[0.0; 3], &[1.0; 3]), true).unwrap();
    for (i, chunk) in tape.value(y).chunks(16).enumerate() {
        assert!(chunk.iter().all(|&v| v == beta[i % 3]));
    }
}

#[test]
fn batch_norm_matches_two_pass_oracle() {
    for seed in 0..10 {
        let (x, gamma, beta) = bn_case(100 + seed, 2, 3, 3, 4);
        let mut tape = Tape::<f64>::new();
        let vx = tape.constant(&t(&[2, 3, 3, 4], x.clone()));
        let g = tape.constant(&t(&[3], gamma.clone()));
        let be = tape.constant(&t(&[3], beta.clone()));
        let y = tape.batch_norm(vx, g, be, (&[0.0; 3], &[1.0; 3]), true).unwrap();
        let expect = common::batch_norm(&x, (2, 3, 12), &gamma, &beta);
        assert!(rel_err(tape.value(y), &expect) < 1e-10);
    }
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut tape = Tape::<f64>::new();
    let vx = tape.constant(&t(&[1, 1, 1, 2], vec![3.0, 5.0]));
    let g = tape.constant(&t(&[1], vec![2.0]));
    let be = tape.constant(&t(&[1], vec![1.0]));
    let y = tape.batch_norm(vx, g, be, (&[1.0], &[4.0 - 1e-5]), false).unwrap();
    assert!(rel_err(tape.value(y), &[3.0, 5.0]) < 1e-12);
    assert!(tape.batch_stats(y).is_none());
}

#[test]
fn batch_norm_degenerate_batch_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let vx = tape.constant(&Tensor::zeros([1, 2, 1, 1]));
    let g = tape.constant(&Tensor::ones([2]));
    let be = tape.constant(&Tensor::zeros([2]));
    let err = tape.batch_norm(vx, g, be, (&[0.0; 2], &[1.0; 2]), true).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(tape.batch_norm(vx, g, be, (&[0.0; 2], &[1.0; 2]), false).is_ok());
}

#[test]
fn resize_examples() {
    let mut tape = Tape::<f64>::new();
    let x = t(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
    let vx = tape.constant(&x);
    let same = tape.resize(vx, 2, 2).unwrap();
    assert_eq!(tape.value(same), x.data());

    let c = tape.constant(&Tensor::full([1, 2, 3, 5], 0.7));
    for (h, w) in [(1, 1), (7, 2), (6, 10), (2, 4)] {
        let y = tape.resize(c, h, w).unwrap();
        assert!(tape.value(y).iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    let up = tape.resize(vx, 4, 4).unwrap();
    #[rustfmt::skip]
    let expect = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    assert!(rel_err(tape.value(up), &expect) < 1e-12);
    assert!(rel_err(tape.value(up), &common::bilinear(x.data(), 2, 2, 4, 4)) < 1e-12);
}

#[test]
fn resize_matches_pixel_oracle_on_random_planes() {
    let mut r = rng(5);
    for _ in 0..50 {
        let (h, w, oh, ow) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..12), r.gen_range(1..12));
        let x = random_vec(&mut r, h * w);
        let mut tape = Tape::<f64>::new();
        let vx = tape.constant(&t(&[1, 1, h, w], x.clone()));
        let y = tape.resize(vx, oh, ow).unwrap();
        assert!(rel_err(tape.value(y), &common::bilinear(&x, h, w, oh, ow)) < 1e-12);
    }
}

#[test]
fn global_avg_pool_examples() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(&Tensor::full([2, 3, 4, 5], 1.25));
    let y = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.shape(y), &[2, 3]);
    assert!(tape.value(y).iter().all(|&v| v == 1.25));
    let x = tape.constant(&t(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y), &[4.0]);

    let mut r = rng(6);
    let data = random_vec(&mut r, 2 * 3 * 4 * 4);
    let x = tape.constant(&t(&[2, 3, 4, 4], data.clone()));
    let y = tape.global_avg_pool(x).unwrap();
    let expect: Vec<f64> = data.chunks(16).map(|c| c.iter().sum::<f64>() / 16.0).collect();
    assert!(rel_err(tape.value(y), &expect) < 1e-12);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let mut p = Tensor::<f64>::ones([2]);
    p.set_requires_grad(true);
    let x = tape.leaf(&p);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_over_consumers_and_calls() {
    let mut tape = Tape::<f64>::new();
    let mut p = t(&[3], vec![1.0, 2.0, 3.0]);
    p.set_requires_grad(true);
    let x = tape.leaf(&p);
    // x consumed twice: loss = sum(x * x) + sum(x)
    let sq = tape.mul(x, x).unwrap();
    let both = tape.add(sq, x).unwrap();
    let loss = tape.sum(both).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 5.0, 7.0]);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0, 10.0, 14.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let mut p = Tensor::<f64>::ones([2, 2]);
    p.set_requires_grad(true);
    let w = tape.leaf(&p);
    let c = tape.constant(&Tensor::ones([2, 2]));
    let y = tape.matmul(c, w).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(c).is_none());
    assert!(!tape.requires_grad(c));
    assert_eq!(tape.grad(w).unwrap(), &[2.0; 4]);
}

#[test]
fn strict_tape_rejects_non_finite_outputs() {
    let mut tape = Tape::<f64>::strict();
    let x = tape.constant(&t(&[2], vec![f64::MAX, f64::MAX]));
    assert!(matches!(tape.scale(x, 10.0), Err(Error::Numeric(_))));
    let mut lax = Tape::<f64>::new();
    let x = lax.constant(&t(&[2], vec![f64::MAX, f64::MAX]));
    assert!(lax.scale(x, 10.0).is_ok());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(7);
        let mut tape = Tape::<f32>::new();
        let mut x = Tensor::<f32>::from_fn([2, 3, 8, 8], |_| r.gen_range(-1.0..1.0));
        let mut k = Tensor::<f32>::from_fn([4, 3, 3, 3], |_| r.gen_range(-1.0..1.0));
        x.set_requires_grad(true);
        k.set_requires_grad(true);
        let (vx, vk) = (tape.leaf(&x), tape.leaf(&k));
        let y = tape.conv2d(vx, vk, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let loss = tape.sum(s).unwrap();
        let loss = tape.scale(loss, 0.5).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let l2 = tape.sum(y2).unwrap();
        let total = tape.add(loss, l2).unwrap();
        tape.backward(total).unwrap();
        (tape.grad(vx).unwrap().to_vec(), tape.grad(vk).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn finite_diff_linear_and_quadratic() {
    let mut r = rng(8);
    let point = t(&[5], random_vec(&mut r, 5));
    let err = finite_diff_check(|tape, x| tape.sum(x), &point, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
    let err = finite_diff_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn finite_diff_every_operation() {
    // Each case maps a parameter leaf to a scalar through one operation,
    // weighted by a fixed random tensor so that the output gradient is
    // non-uniform.
    let errors = spider_op_gradient_errors(10);
    for (name, err) in errors {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

fn spider_op_gradient_errors(points: u64) -> Vec<(&'static str, f64)> {
    common::grad_cases::all_ops(points)
}
