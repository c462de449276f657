//! The micro configuration (2 tasks, N=4, B=1, 16×16 images, C=4, one
//! block with one head) and its full-loss gradient check.
#![allow(dead_code)]

use spider::networks::{ModelConfig, ModelParams};
use spider::params::Forward;
use spider::synth::TaskId;
use spider::training::{balanced_groups, joint_loss, IterationBatch, TaskGroup, PPA_WINDOW};
use spider::{finite_diff_check, Tensor};

use super::{random_vec, rng};

pub const SIZE: usize = 16;

/// Two tasks with four random scenes each; every mask is a disc whose
/// position depends on the task and the sample.
pub fn batch(seed: u64) -> IterationBatch<f64> {
    let (t, n) = (2, 4);
    let mut r = rng(seed);
    let plane = SIZE * SIZE;
    let images = random_vec(&mut r, t * n * 3 * plane).into_iter().map(|v| 0.5 + 0.4 * v).collect();
    let masks = (0..t * n * plane)
        .map(|i| {
            let (s, y, x) = (i / plane, (i / SIZE) % SIZE, i % SIZE);
            let (cy, cx) = (4.0 + (s % 5) as f64, 6.0 + (s / 2) as f64);
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < 12.0 { 1.0 } else { 0.0 }
        })
        .collect();
    IterationBatch {
        tasks: vec![TaskId::Bright, TaskId::Dark],
        images: Tensor::new([t, n, 3, SIZE, SIZE], images).unwrap(),
        masks: Tensor::new([t, n, 1, SIZE, SIZE], masks).unwrap(),
        indices: vec![(0..n).collect(), (0..n).collect()],
    }
}

pub fn model(seed: u64) -> ModelParams<f64> {
    ModelParams::new(ModelConfig::micro(), seed).unwrap()
}

pub fn groups(batch: &IterationBatch<f64>, i: usize) -> Vec<TaskGroup<f64>> {
    balanced_groups(batch, 1, i).unwrap()
}

/// Largest relative finite-difference error of the training loss (batch
/// norm in training mode) over every coordinate of every trainable weight.
pub fn full_loss_errors(seed: u64) -> Vec<(String, f64)> {
    let model = model(seed);
    let batch = batch(seed + 1);
    let groups = groups(&batch, 1);
    let mut out = Vec::new();
    for id in model.store.ids().filter(|&id| model.store.is_trainable(id)) {
        let point = model.store.get(id).clone();
        let err = finite_diff_check(
            |tape, x| {
                let mut fw = Forward::with_tape(&model.store, std::mem::take(tape), false);
                fw.bind_param(id, x)?;
                let (total, _) = joint_loss(&mut fw, &model, &groups, true, PPA_WINDOW)?;
                *tape = fw.tape;
                Ok(total)
            },
            &point,
            1e-5,
        )
        .unwrap();
        out.push((model.store.entry(id).name.clone(), err));
    }
    out
}
