//! Inference-time prompt selection: K-means over pooled embeddings, the
//! closest-to-center representatives, and the random baseline.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concept::GroupPrompt;
use crate::error::{dim_err, Error, Result};
use crate::networks::ModelParams;
use crate::synth::{Dataset, TaskId};
use crate::tensor::Tensor;

/// Distance used for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    /// Squared Euclidean distance on the raw embeddings.
    #[default]
    Euclidean,
    /// Squared Euclidean distance after scaling every row to unit length
    /// (a monotone function of cosine distance).
    Cosine,
}

impl Distance {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::Config(format!("unknown distance {other:?}"))),
        }
    }
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `[k × dim]`, row-major.
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Total squared distance after every assignment step.
    pub distortion: Vec<f64>,
}

impl KMeans {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    pub fn final_distortion(&self) -> f64 {
        *self.distortion.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks(dim).enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm on `n` points of width `dim` (row-major). Centers start
/// at `k` distinct points drawn by a seeded RNG; an empty cluster is moved
/// onto the point farthest from its current center; iteration stops once
/// no center moves by `tol` or more, or after `max_iters` rounds.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(dim_err!("{} values do not form rows of width {dim}", points.len()));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Data(format!("cannot form {k} clusters from {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding".into()));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = sample(&mut rng, n, k).into_iter().flat_map(|i| row(i).to_vec()).collect();
    let mut assignments = vec![0; n];
    let mut distortion = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(row(i), &centers, dim);
            assignments[i] = c;
            dists[i] = d;
        }
        distortion.push(dists.iter().sum());
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
        }
        let mut next = centers.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    next[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                // reseed on the worst-served point not already used for a reseed
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<(usize, f64)>, i| match best {
                        Some((_, d)) if d >= dists[i] => best,
                        _ => Some((i, dists[i])),
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken.push(far);
                next[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(&centers[c * dim..(c + 1) * dim], &next[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < tol {
            break;
        }
    }
    // final assignment against the final centers
    let mut total = 0.0;
    for i in 0..n {
        let (c, d) = nearest(row(i), &centers, dim);
        assignments[i] = c;
        total += d;
    }
    distortion.push(total);
    Ok(KMeans {
        k,
        dim,
        centers,
        assignments,
        distortion,
    })
}

/// Pooled prompt-encoder embeddings of one task's training split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub task: TaskId,
    /// Sample identifiers (training-split indices), one per row.
    pub ids: Vec<usize>,
    pub dim: usize,
    /// `[ids.len() × dim]`, row-major.
    pub rows: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn build(model: &ModelParams<f32>, dataset: &Dataset) -> Result<Self> {
        let mut rows = Vec::new();
        let mut dim = 0;
        for chunk in dataset.train.chunks(16) {
            let images = Dataset::stack_images(&chunk.iter().collect::<Vec<_>>())?;
            let e = model.gap_embed(&images)?;
            dim = e.shape()[1];
            rows.extend(e.data().iter().map(|&v| v as f64));
        }
        let index = Self {
            task: dataset.task,
            ids: (0..dataset.train.len()).collect(),
            dim,
            rows,
        };
        index.check()?;
        Ok(index)
    }

    pub fn check(&self) -> Result<()> {
        if self.ids.len() * self.dim != self.rows.len() {
            return Err(dim_err!("{} ids for {} values of width {}", self.ids.len(), self.rows.len(), self.dim));
        }
        if self.rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding for task {}", self.task)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn points(&self, distance: Distance) -> Vec<f64> {
        match distance {
            Distance::Euclidean => self.rows.clone(),
            Distance::Cosine => self
                .rows
                .chunks(self.dim)
                .flat_map(|r| {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    r.iter().map(move |v| v / norm)
                })
                .collect(),
        }
    }
}

/// Clusters the index into `k` groups and returns, per cluster, the member
/// closest to its center (lowest sample index on ties). Identifiers are
/// distinct and ordered by cluster.
pub fn select_representatives(index: &EmbeddingIndex, k: usize, seed: u64, distance: Distance) -> Result<Vec<usize>> {
    index.check()?;
    let points = index.points(distance);
    let km = kmeans(&points, index.dim, k, seed, 100, 1e-6)?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for c in 0..k {
        let center = km.center(c);
        let candidates = |members_only: bool| {
            (0..index.len())
                .filter(|&i| !chosen.contains(&i) && (!members_only || km.assignments[i] == c))
                .map(|i| (i, sq_dist(&points[i * index.dim..(i + 1) * index.dim], center)))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((i, d)),
                })
        };
        let pick = candidates(true).or_else(|| candidates(false)).expect("n >= k");
        chosen.push(pick.0);
    }
    Ok(chosen.into_iter().map(|i| index.ids[i]).collect())
}

/// `g` distinct indices of a dataset of size `n`, drawn uniformly.
pub fn random_prompts(n: usize, g: usize, seed: u64) -> Result<Vec<usize>> {
    if g == 0 || n < g {
        return Err(Error::Data(format!("cannot draw {g} prompts from {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, n, g).into_vec())
}

/// Assembles a prompt from training samples, optionally transforming every
/// mask (e.g. dilation) before packaging.
pub fn group_prompt(
    dataset: &Dataset,
    ids: &[usize],
    mask_transform: Option<&dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>>,
) -> Result<GroupPrompt<f32>> {
    if ids.is_empty() {
        return Err(Error::Data(format!("empty prompt list for task {}", dataset.task)));
    }
    let samples = ids
        .iter()
        .map(|&i| {
            dataset
                .train
                .get(i)
                .ok_or_else(|| Error::Data(format!("task {} has no training sample {i}", dataset.task)))
        })
        .collect::<Result<Vec<_>>>()?;
    let images = Dataset::stack_images(&samples)?;
    let mut masks = Dataset::stack_masks(&samples, dataset.task)?;
    if let Some(f) = mask_transform {
        masks = f(&masks)?;
    }
    GroupPrompt::new(
        dataset.task.name(),
        images,
        masks,
        ids.iter().map(|i| i.to_string()).collect(),
    )
}

/// One `task<TAB>sample` line per prompt.
pub fn format_prompt_list(entries: &[(TaskId, usize)]) -> String {
    let mut out = String::new();
    for (t, i) in entries {
        let _ = writeln!(out, "{t}\t{i}");
    }
    out
}

pub fn parse_prompt_list(text: &str) -> Result<Vec<(TaskId, usize)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (task, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("prompt list line {}: expected task<TAB>sample", n + 1)))?;
            let id = id
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("prompt list line {}: bad sample id {id:?}", n + 1)))?;
            Ok((TaskId::parse(task).map_err(|_| Error::Data(format!("prompt list line {}: unknown task {task:?}", n + 1)))?, id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_pairs() {
        let km = kmeans(&[0.0, 1.0, 10.0, 11.0], 1, 2, 3, 100, 1e-6).unwrap();
        let mut c = km.centers.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.5, 10.5]);
    }

    #[test]
    fn saturated_clustering_has_zero_distortion() {
        let pts = [0.0, 0.0, 1.0, 2.0, 5.0, 5.0];
        let km = kmeans(&pts, 2, 3, 9, 100, 1e-6).unwrap();
        assert_eq!(km.final_distortion(), 0.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(kmeans(&[1.0], 1, 2, 0, 10, 1e-6), Err(Error::Data(_))));
        assert!(random_prompts(3, 4, 0).is_err());
    }

    #[test]
    fn prompt_list_round_trip() {
        let entries = vec![(TaskId::Bright, 3), (TaskId::Edge, 17)];
        let text = format_prompt_list(&entries);
        assert_eq!(text, "BRIGHT\t3\nEDGE\t17\n");
        assert_eq!(parse_prompt_list(&text).unwrap(), entries);
        assert!(parse_prompt_list("BRIGHT 3").is_err());
    }
}
