//! Experiment drivers: joint versus separate training, training strategies,
//! prompt count and selection, prompt-mask robustness, concept
//! discrimination on multi-concept scenes, and continual fine-tuning.
//!
//! Reports use the metric column to name the condition, e.g.
//! `dice@random_G8` or `dice@erode_k5`; the task column holds a task name or
//! `mean` for the average over tasks.

use crate::concept::{build_filter, ConceptFilter, GroupPrompt, PROMPT_STREAM};
use crate::error::{Error, Result};
use crate::eval::{evaluate, score_samples, MetricReport};
use crate::networks::{ModelConfig, ModelParams, FINAL_FUSION};
use crate::prompts::{group_prompt, random_prompts, select_representatives, Distance, EmbeddingIndex};
use crate::synth::{dilate_mask, erode_mask, generate_scene, sample_seed, Dataset, GeneratorParams, TaskId};
use crate::tensor::Tensor;
use crate::training::{run_training, train_model, Strategy, TrainConfig};

/// Where the prompt of a task comes from at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptSource {
    /// `g` training samples drawn uniformly.
    Random { g: usize, seed: u64 },
    /// The `k` representatives of a K-means clustering of the training split.
    Clustered { k: usize, seed: u64, distance: Distance },
}

impl PromptSource {
    pub fn label(&self) -> String {
        match self {
            PromptSource::Random { g, .. } => format!("random_G{g}"),
            PromptSource::Clustered { k, .. } => format!("clustered_K{k}"),
        }
    }

    /// Training-split indices of the prompt for `dataset`.
    pub fn select(&self, model: &ModelParams<f32>, dataset: &Dataset) -> Result<Vec<usize>> {
        match *self {
            PromptSource::Random { g, seed } => random_prompts(dataset.train.len(), g, sample_seed(seed, dataset.task, 0)),
            PromptSource::Clustered { k, seed, distance } => {
                let index = EmbeddingIndex::build(model, dataset)?;
                select_representatives(&index, k, sample_seed(seed, dataset.task, 0), distance)
            }
        }
    }
}

/// Optional prompt-mask perturbation.
pub type MaskTransform<'a> = Option<&'a dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>>;

fn find<'a>(datasets: &'a [Dataset], task: TaskId) -> Result<&'a Dataset> {
    datasets
        .iter()
        .find(|d| d.task == task)
        .ok_or_else(|| Error::Config(format!("no dataset for task {task}")))
}

/// The prompt of `task` from `source`, masks optionally perturbed.
pub fn make_prompt(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    task: TaskId,
    source: PromptSource,
    transform: MaskTransform<'_>,
) -> Result<GroupPrompt<f32>> {
    let ds = find(datasets, task)?;
    let ids = source.select(model, ds)?;
    group_prompt(ds, &ids, transform)
}

/// One filter per task.
pub fn make_filters(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    tasks: &[TaskId],
    source: PromptSource,
    transform: MaskTransform<'_>,
) -> Result<Vec<ConceptFilter<f32>>> {
    tasks
        .iter()
        .map(|&t| build_filter(model, &make_prompt(model, datasets, t, source, transform)?))
        .collect()
}

/// Per-task test Dice with prompts from `source`.
pub fn dice_per_task(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    tasks: &[TaskId],
    source: PromptSource,
    transform: MaskTransform<'_>,
) -> Result<Vec<f64>> {
    let filters = make_filters(model, datasets, tasks, source, transform)?;
    let report = evaluate(model, &filters, datasets, tasks, 0, "")?;
    Ok(tasks
        .iter()
        .map(|t| report.value(t.name(), "dice").expect("evaluated"))
        .collect())
}

/// Per-task Dice averaged over several prompt sources, plus the overall mean.
fn averaged_dice(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    tasks: &[TaskId],
    sources: &[PromptSource],
    transform: MaskTransform<'_>,
) -> Result<(Vec<f64>, f64)> {
    let mut acc = vec![0.0; tasks.len()];
    for &s in sources {
        for (a, d) in acc.iter_mut().zip(dice_per_task(model, datasets, tasks, s, transform)?) {
            *a += d;
        }
    }
    acc.iter_mut().for_each(|a| *a /= sources.len() as f64);
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    Ok((acc, mean))
}

fn push_condition(report: &mut MetricReport, tasks: &[TaskId], per_task: &[f64], mean: f64, metric: &str, n: usize) {
    for (t, v) in tasks.iter().zip(per_task) {
        report.push(t.name(), metric, *v, n);
    }
    report.push("mean", metric, mean, n * tasks.len());
}

fn test_size(datasets: &[Dataset], tasks: &[TaskId]) -> Result<usize> {
    Ok(find(datasets, tasks[0])?.test.len())
}

/// Dice for every `G` in `g_list` with random prompts (one run per seed)
/// and for `K = k` clustered prompts (one clustering per seed).
pub fn experiment_prompt_count(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    tasks: &[TaskId],
    g_list: &[usize],
    k: usize,
    seeds: &[u64],
    distance: Distance,
) -> Result<MetricReport> {
    let n = test_size(datasets, tasks)?;
    let mut report = MetricReport::new(seeds.first().copied().unwrap_or(0), "");
    for &g in g_list {
        let sources: Vec<_> = seeds.iter().map(|&seed| PromptSource::Random { g, seed }).collect();
        let (per, mean) = averaged_dice(model, datasets, tasks, &sources, None)?;
        push_condition(&mut report, tasks, &per, mean, &format!("dice@random_G{g}"), n);
    }
    let sources: Vec<_> = seeds
        .iter()
        .map(|&seed| PromptSource::Clustered { k, seed, distance })
        .collect();
    let (per, mean) = averaged_dice(model, datasets, tasks, &sources, None)?;
    push_condition(&mut report, tasks, &per, mean, &format!("dice@clustered_K{k}"), n);
    Ok(report)
}

/// Dice with unperturbed prompt masks and with every dilation and erosion
/// kernel in `kernels`, plus `max_drop`, the largest decrease of the mean.
pub fn experiment_mask_robustness(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    tasks: &[TaskId],
    kernels: &[usize],
    sources: &[PromptSource],
) -> Result<MetricReport> {
    let n = test_size(datasets, tasks)?;
    let mut report = MetricReport::new(0, "");
    let (per, base) = averaged_dice(model, datasets, tasks, sources, None)?;
    push_condition(&mut report, tasks, &per, base, "dice@original", n);
    let mut max_drop: f64 = 0.0;
    for &k in kernels {
        for (op, dilate) in [("dilate", true), ("erode", false)] {
            let f = move |m: &Tensor<f32>| if dilate { dilate_mask(m, k) } else { erode_mask(m, k) };
            let (per, mean) = averaged_dice(model, datasets, tasks, sources, Some(&f))?;
            push_condition(&mut report, tasks, &per, mean, &format!("dice@{op}_k{k}"), n);
            max_drop = max_drop.max(base - mean);
        }
    }
    report.push("mean", "max_drop", max_drop, n * tasks.len());
    Ok(report)
}

/// Dice of filters for `a` and `b` on scenes containing both concepts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrimination {
    pub a_on_a: f64,
    pub a_on_b: f64,
    pub b_on_b: f64,
    pub b_on_a: f64,
    pub scenes: usize,
}

/// Applies the filters of two tasks to `n_scenes` scenes that contain both
/// concepts and scores each against both masks.
pub fn concept_discrimination(
    model: &ModelParams<f32>,
    datasets: &[Dataset],
    (a, b): (TaskId, TaskId),
    n_scenes: usize,
    seed: u64,
    source: PromptSource,
) -> Result<Discrimination> {
    let params = GeneratorParams::default();
    let scenes = (0..n_scenes as u64)
        .map(|i| generate_scene(sample_seed(seed, a, (3 << 32) + i), &[a, b], &params))
        .collect::<Result<Vec<_>>>()?;
    let fa = build_filter(model, &make_prompt(model, datasets, a, source, None)?)?;
    let fb = build_filter(model, &make_prompt(model, datasets, b, source, None)?)?;
    Ok(Discrimination {
        a_on_a: score_samples(model, &fa, &scenes, a)?.dice,
        a_on_b: score_samples(model, &fa, &scenes, b)?.dice,
        b_on_b: score_samples(model, &fb, &scenes, b)?.dice,
        b_on_a: score_samples(model, &fb, &scenes, a)?.dice,
        scenes: n_scenes,
    })
}

/// One jointly trained model versus one model per task, each trained for
/// the same number of iterations with the same configuration.
pub fn experiment_joint_vs_separate(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    sources: &[PromptSource],
) -> Result<MetricReport> {
    let tasks = &cfg.tasks;
    let n = test_size(datasets, tasks)?;
    let mut report = MetricReport::new(cfg.seed, "");
    let joint = run_training(model_cfg.clone(), cfg, datasets)?;
    let (per, mean) = averaged_dice(&joint.model, datasets, tasks, sources, None)?;
    push_condition(&mut report, tasks, &per, mean, "dice@joint", n);
    let mut separate = Vec::with_capacity(tasks.len());
    for &t in tasks {
        let single = TrainConfig {
            tasks: vec![t],
            ..cfg.clone()
        };
        let out = run_training(model_cfg.clone(), &single, datasets)?;
        separate.push(averaged_dice(&out.model, datasets, &[t], sources, None)?.1);
    }
    let mean = separate.iter().sum::<f64>() / separate.len() as f64;
    push_condition(&mut report, tasks, &separate, mean, "dice@separate", n);
    Ok(report)
}

/// One model per training strategy, otherwise identical.
pub fn experiment_strategies(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    strategies: &[Strategy],
    sources: &[PromptSource],
) -> Result<MetricReport> {
    let tasks = &cfg.tasks;
    let n = test_size(datasets, tasks)?;
    let mut report = MetricReport::new(cfg.seed, "");
    for &s in strategies {
        let c = TrainConfig {
            strategy: s,
            ..cfg.clone()
        };
        let out = run_training(model_cfg.clone(), &c, datasets)?;
        let (per, mean) = averaged_dice(&out.model, datasets, tasks, sources, None)?;
        push_condition(&mut report, tasks, &per, mean, &format!("dice@{}", s.name()), n);
    }
    Ok(report)
}

/// Restricts training to the decoder's final fusion layer and the prompt
/// stream. Returns the trainable fraction of all weights.
pub fn freeze_for_continual(model: &mut ModelParams<f32>) -> Result<f64> {
    let fusion = format!("{FINAL_FUSION}.");
    model
        .store
        .train_only(|n| n.starts_with(&fusion) || n.starts_with(PROMPT_STREAM));
    if model.config.bias_mode != crate::concept::BiasMode::Projection {
        model.store.set_trainable(model.prompt_stream.bias_proj, false);
    }
    let fraction = model.num_trainable() as f64 / model.num_weights() as f64;
    if fraction >= 0.01 {
        return Err(Error::Config(format!(
            "continual fine-tuning would train {:.2}% of the weights (limit 1%)",
            100.0 * fraction
        )));
    }
    Ok(fraction)
}

/// Result of sequential fine-tuning.
pub struct ContinualOutcome {
    /// Rows `dice@stage{i}` for every task after stage `i` (stage 0 is the
    /// pretrained model), plus `trainable_fraction`.
    pub timeline: MetricReport,
    /// Model after each fine-tuning stage.
    pub stages: Vec<ModelParams<f32>>,
    pub trainable_fraction: f64,
}

/// Fine-tunes `pretrained` on each of `new_tasks` in turn, evaluating every
/// task of `all_tasks` (seen or not) before the first and after each stage.
pub fn experiment_continual(
    pretrained: &ModelParams<f32>,
    datasets: &[Dataset],
    all_tasks: &[TaskId],
    new_tasks: &[TaskId],
    finetune: &TrainConfig,
    sources: &[PromptSource],
) -> Result<ContinualOutcome> {
    let n = test_size(datasets, all_tasks)?;
    let mut report = MetricReport::new(finetune.seed, "");
    let mut model = pretrained.clone();
    let fraction = freeze_for_continual(&mut model)?;
    report.push("all", "trainable_fraction", fraction, model.num_weights());
    let (per, mean) = averaged_dice(&model, datasets, all_tasks, sources, None)?;
    push_condition(&mut report, all_tasks, &per, mean, "dice@stage0", n);
    let mut stages = Vec::new();
    for (i, &task) in new_tasks.iter().enumerate() {
        let cfg = TrainConfig {
            tasks: vec![task],
            freeze_bn: true,
            seed: finetune.seed.wrapping_add(i as u64),
            ..finetune.clone()
        };
        train_model(&mut model, &cfg, datasets)?;
        let (per, mean) = averaged_dice(&model, datasets, all_tasks, sources, None)?;
        push_condition(&mut report, all_tasks, &per, mean, &format!("dice@stage{}", i + 1), n);
        stages.push(model.clone());
    }
    Ok(ContinualOutcome {
        timeline: report,
        stages,
        trainable_fraction: fraction,
    })
}
