//! Multi-task training: boundary-aware loss, Adam, and the balanced
//! forward / unified backward loop with its two ablation variants.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::concept::{dynamic_head, filter_vars, GroupPrompt};
use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::networks::{ModelConfig, ModelParams};
use crate::params::{Forward, PassEffects, ParamStore};
use crate::synth::{Dataset, SceneSample, TaskId};
use crate::tensor::{Scalar, Tensor};

/// Default boundary window of the loss weight map at 48×48.
pub const PPA_WINDOW: usize = 7;

/// `1 + 5·|avgpool_k(gt) − gt|` per pixel for `batch` planes of `h×w`.
/// The average pool has stride 1 and zero padding of `k/2`; padded cells
/// count towards the divisor.
pub fn boundary_weights<T: Scalar>(gt: &[T], batch: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let avg = kernels::box_filter(gt, batch, h, w, k);
    let five = T::of(5.0);
    avg.iter().zip(gt).map(|(&a, &g)| T::one() + five * (a - g).abs()).collect()
}

/// Boundary-weighted BCE plus weighted IoU of `logits [B,1,H,W]` against
/// `gt` of the same shape, averaged over the batch.
pub fn ppa_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, gt: &Tensor<T>, window: usize) -> Result<Var> {
    let s = gt.shape();
    if s.len() != 4 || s[1] != 1 || tape.shape(logits) != s {
        return Err(dim_err!("ppa_loss: logits {:?} vs gt {s:?}", tape.shape(logits)));
    }
    if gt.data().iter().any(|&g| !(g >= T::zero() && g <= T::one())) {
        return Err(Error::Contract("ppa_loss ground truth leaves [0, 1]".into()));
    }
    let weights = boundary_weights(gt.data(), s[0], s[2], s[3], window);
    tape.ppa_loss(logits, gt.data(), weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Every task contributes `B` inputs to one joint batch; one backward
    /// over the summed loss.
    BalanceUnify,
    /// The joint batch is a uniformly random task multiset of the same size;
    /// one backward.
    RandomUnify,
    /// Balanced per-task batches, each with its own backward and step.
    BalanceSeparate,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::BalanceUnify, Strategy::RandomUnify, Strategy::BalanceSeparate];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BalanceUnify => "balance_unify",
            Strategy::RandomUnify => "random_unify",
            Strategy::BalanceSeparate => "balance_separate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// When the optimizer steps in the unified strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSchedule {
    /// After every inner iteration (right after its backward).
    PerInner,
    /// Once per outer iteration, on gradients summed over its inner loops.
    PerOuter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tasks: Vec<TaskId>,
    /// Samples drawn per task per outer iteration.
    pub n: usize,
    /// Segmentation inputs per task per inner iteration.
    pub b: usize,
    pub epochs: usize,
    /// Outer iterations per epoch; `None` means `n_train / N`.
    pub iterations_per_epoch: Option<usize>,
    pub lr: f64,
    pub decay_size: usize,
    pub decay_rate: f64,
    pub strategy: Strategy,
    pub schedule: StepSchedule,
    pub seed: u64,
    /// Random horizontal flips of the sampled scenes.
    pub hflip: bool,
    pub ppa_window: usize,
    /// Run batch norm on running statistics (used when the encoder is frozen).
    pub freeze_bn: bool,
    /// Reject non-finite values anywhere in the backward pass.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: TaskId::ALL.to_vec(),
            n: 8,
            b: 2,
            epochs: 30,
            iterations_per_epoch: None,
            lr: 1e-4,
            decay_size: 30,
            decay_rate: 0.9,
            strategy: Strategy::BalanceUnify,
            schedule: StepSchedule::PerInner,
            seed: 0,
            hflip: true,
            ppa_window: PPA_WINDOW,
            freeze_bn: false,
            strict: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.b >= self.n || self.n % self.b != 0 {
            return Err(Error::Config(format!(
                "need 1 <= B < N with N divisible by B, got N={} B={}",
                self.n, self.b
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no training tasks".into()));
        }
        if (1..self.tasks.len()).any(|i| self.tasks[..i].contains(&self.tasks[i])) {
            return Err(Error::Config(format!("duplicate task in {:?}", self.tasks)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.decay_size == 0 || !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config("decay size must be >= 1 and decay rate in (0, 1]".into()));
        }
        if self.ppa_window % 2 == 0 {
            return Err(Error::Config(format!("loss window {} must be odd", self.ppa_window)));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::Config("iterations per epoch must be positive".into()));
        }
        Ok(())
    }

    /// Inner iterations per outer iteration.
    pub fn inner_loops(&self) -> usize {
        self.n / self.b
    }

    /// Size of every training-time prompt group.
    pub fn prompt_size(&self) -> usize {
        self.n - self.b
    }
}

/// Step decay: `lr · rate^floor(epoch / size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLr {
    pub base: f64,
    pub size: usize,
    pub rate: f64,
}

impl StepLr {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base * self.rate.powi((epoch / self.size) as i32)
    }
}

/// Bias-corrected Adam over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&[T]> {
        self.m.get(index)?.as_deref()
    }

    /// One update of every trainable parameter from `grads`, then clears
    /// the store's gradient buffers. Every trainable parameter must have a
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        if grads.slots.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract("optimizer and gradients belong to another store".into()));
        }
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            if grads.slots[id.index()].is_none() {
                return Err(Error::Contract(format!(
                    "trainable parameter {} received no gradient",
                    store.entry(id).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let i = id.index();
            let g = grads.slots[i].as_ref().expect("checked above");
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n || store.get(id).numel() != n {
                return Err(dim_err!("moment buffer of {} has the wrong size", store.entry(id).name));
            }
            let p = store.get_mut(id).data_mut();
            for j in 0..n {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Gradients summed over one or more passes, indexed like the store.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn from_effects(store: &ParamStore<T>, effects: &PassEffects<T>) -> Self {
        let mut g = Self::new(store);
        g.add(effects);
        g
    }

    pub fn add(&mut self, effects: &PassEffects<T>) {
        for (id, g) in effects.grads() {
            match &mut self.slots[id.index()] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g.to_vec()),
            }
        }
    }

    /// Sets one parameter's gradient directly.
    pub fn set(&mut self, index: usize, g: Vec<T>) {
        self.slots[index] = Some(g);
    }

    pub fn get(&self, index: usize) -> Option<&[T]> {
        self.slots.get(index)?.as_deref()
    }
}

/// `N` sampled scenes per task: images `[T, N, 3, H, W]` and masks
/// `[T, N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct IterationBatch<T> {
    pub tasks: Vec<TaskId>,
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
    /// Dataset index of every drawn sample, per task.
    pub indices: Vec<Vec<usize>>,
}

impl<T: Scalar> IterationBatch<T> {
    pub fn n(&self) -> usize {
        self.images.shape()[1]
    }

    /// Images and masks of task slot `t` at the listed positions.
    pub fn select(&self, t: usize, rows: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((pick(&self.images, t, rows)?, pick(&self.masks, t, rows)?))
    }
}

fn pick<T: Scalar>(x: &Tensor<T>, t: usize, rows: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    let item: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * item);
    for &r in rows {
        let start = (t * s[1] + r) * item;
        data.extend_from_slice(&x.data()[start..start + item]);
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(shape, data)
}

/// Draws `n` distinct training samples per task, optionally flipping each
/// with probability one half.
pub fn build_iteration_batch(
    datasets: &[&Dataset],
    n: usize,
    hflip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<IterationBatch<f32>> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut indices = Vec::new();
    for ds in datasets {
        if ds.train.len() < n {
            return Err(Error::Data(format!(
                "task {} has {} training samples, {n} needed per iteration",
                ds.task,
                ds.train.len()
            )));
        }
        let idx = sample(rng, ds.train.len(), n).into_vec();
        for &i in &idx {
            let s = &ds.train[i];
            let flipped;
            let s: &SceneSample = if hflip && rng.gen_bool(0.5) {
                flipped = s.hflip();
                &flipped
            } else {
                s
            };
            images.push(s.image.clone());
            masks.push(
                s.mask(ds.task)
                    .ok_or_else(|| Error::Data(format!("sample {} lacks its {} mask", s.seed, ds.task)))?
                    .clone(),
            );
        }
        indices.push(idx);
    }
    let stack5 = |items: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
        let t = Tensor::stack(&items.iter().collect::<Vec<_>>())?;
        let mut shape = vec![datasets.len(), n];
        shape.extend_from_slice(&t.shape()[1..]);
        t.reshape(shape)
    };
    Ok(IterationBatch {
        tasks: datasets.iter().map(|d| d.task).collect(),
        images: stack5(images)?,
        masks: stack5(masks)?,
        indices,
    })
}

/// One task's share of a joint forward pass.
#[derive(Debug, Clone)]
pub struct TaskGroup<T> {
    /// `[c, 3, H, W]` segmentation inputs.
    pub images: Tensor<T>,
    /// `[c, 1, H, W]` their ground truth.
    pub masks: Tensor<T>,
    pub prompt: GroupPrompt<T>,
    /// Multiplier on this task's loss.
    pub weight: f64,
}

/// The groups of inner iteration `i` of a balanced batch: task `t`
/// segments slice `[iB, (i+1)B)` with the other `N − B` samples as prompt.
pub fn balanced_groups<T: Scalar>(batch: &IterationBatch<T>, b: usize, i: usize) -> Result<Vec<TaskGroup<T>>> {
    let n = batch.n();
    if b == 0 || n % b != 0 || i >= n / b {
        return Err(Error::Contract(format!("inner iteration {i} out of range for N={n}, B={b}")));
    }
    let seg: Vec<usize> = (i * b..(i + 1) * b).collect();
    let rest: Vec<usize> = (0..i * b).chain((i + 1) * b..n).collect();
    batch
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let (images, masks) = batch.select(t, &seg)?;
            let (pi, pm) = batch.select(t, &rest)?;
            let ids = rest.iter().map(|&r| batch.indices[t][r].to_string()).collect();
            Ok(TaskGroup {
                images,
                masks,
                prompt: GroupPrompt::new(task.name(), pi, pm, ids)?,
                weight: 1.0,
            })
        })
        .collect()
}

/// Groups for the random-multiset variant: prompts as in the balanced case,
/// but the `T·B` segmentation slots go to uniformly drawn tasks, filled
/// with further training samples outside the prompt. Each task's loss is
/// weighted by its slot count over `B`.
fn random_groups(
    datasets: &[&Dataset],
    batch: &IterationBatch<f32>,
    b: usize,
    i: usize,
    hflip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskGroup<f32>>> {
    let balanced = balanced_groups(batch, b, i)?;
    let t_count = datasets.len();
    let mut counts = vec![0usize; t_count];
    for _ in 0..t_count * b {
        counts[rng.gen_range(0..t_count)] += 1;
    }
    let n = batch.n();
    let prompt_rows: Vec<usize> = (0..i * b).chain((i + 1) * b..n).collect();
    let mut groups = Vec::new();
    for (t, group) in balanced.into_iter().enumerate() {
        if counts[t] == 0 {
            continue;
        }
        let ds = datasets[t];
        let excluded: Vec<usize> = prompt_rows.iter().map(|&r| batch.indices[t][r]).collect();
        let pool: Vec<usize> = (0..ds.train.len()).filter(|j| !excluded.contains(j)).collect();
        if pool.len() < counts[t] {
            return Err(Error::Data(format!("task {} has too few samples for random batching", ds.task)));
        }
        let chosen: Vec<&SceneSample> = sample(rng, pool.len(), counts[t])
            .into_iter()
            .map(|k| &ds.train[pool[k]])
            .collect();
        let flipped: Vec<SceneSample> = chosen
            .iter()
            .map(|s| if hflip && rng.gen_bool(0.5) { s.hflip() } else { (*s).clone() })
            .collect();
        let refs: Vec<&SceneSample> = flipped.iter().collect();
        groups.push(TaskGroup {
            images: Dataset::stack_images(&refs)?,
            masks: Dataset::stack_masks(&refs, ds.task)?,
            prompt: group.prompt,
            weight: counts[t] as f64 / b as f64,
        });
    }
    Ok(groups)
}

/// Joint forward of several task groups: the segmentation inputs of all
/// groups go through the encoder–decoder as one batch (so batch norm sees
/// every task together); each group's logits come from its own prompt's
/// filter. Returns the summed loss and the per-group losses.
pub fn joint_loss<T: Scalar>(
    fw: &mut Forward<'_, T>,
    model: &ModelParams<T>,
    groups: &[TaskGroup<T>],
    bn_training: bool,
    window: usize,
) -> Result<(Var, Vec<Var>)> {
    if groups.is_empty() {
        return Err(Error::Contract("joint loss over no task groups".into()));
    }
    let images = cat_first(&groups.iter().map(|g| &g.images).collect::<Vec<_>>())?;
    let s = images.shape().to_vec();
    let x = fw.tape.constant(&images);
    let pyramid = model.encode(fw, x, bn_training)?;
    let features = model.decode(fw, &pyramid)?;
    let mut start = 0;
    let mut losses = Vec::with_capacity(groups.len());
    for g in groups {
        let count = g.images.shape()[0];
        let f = fw.tape.narrow(features, 0, start, count)?;
        start += count;
        let filter = filter_vars(fw, model, &g.prompt)?;
        let logits = dynamic_head(fw, f, filter.w_obj, filter.b_ctx, s[2], s[3])?;
        let loss = ppa_loss(&mut fw.tape, logits, &g.masks, window)?;
        let loss = if g.weight == 1.0 { loss } else { fw.tape.scale(loss, T::of(g.weight))? };
        losses.push(loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = fw.tape.add(total, l)?;
    }
    Ok((total, losses))
}

/// Concatenation along the leading axis.
pub fn cat_first<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Contract("concatenating nothing".into()))?;
    let tail = &first.shape()[1..];
    if parts.iter().any(|p| &p.shape()[1..] != tail) {
        return Err(dim_err!("cannot concatenate {:?}", parts.iter().map(|p| p.shape()).collect::<Vec<_>>()));
    }
    let mut shape = vec![parts.iter().map(|p| p.shape()[0]).sum()];
    shape.extend_from_slice(tail);
    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// Loss values and parameter effects of one differentiated pass.
pub struct StepOutput<T: Scalar> {
    pub total: f64,
    pub per_group: Vec<f64>,
    pub effects: PassEffects<T>,
}

/// Forward and backward of inner iteration `i` of a balanced batch.
pub fn train_step<T: Scalar>(
    model: &ModelParams<T>,
    batch: &IterationBatch<T>,
    cfg: &TrainConfig,
    i: usize,
) -> Result<StepOutput<T>> {
    let groups = balanced_groups(batch, cfg.b, i)?;
    differentiate(model, &groups, cfg)
}

fn differentiate<T: Scalar>(model: &ModelParams<T>, groups: &[TaskGroup<T>], cfg: &TrainConfig) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    tape.set_strict(cfg.strict);
    let mut fw = Forward::with_tape(&model.store, tape, true);
    let (total, per) = joint_loss(&mut fw, model, groups, !cfg.freeze_bn, cfg.ppa_window)?;
    let total_v = fw.tape.item(total).f64();
    if !total_v.is_finite() {
        return Err(Error::Numeric(format!("training loss is {total_v}")));
    }
    let per_group = per.iter().map(|&v| fw.tape.item(v).f64()).collect();
    fw.backward(total)?;
    Ok(StepOutput {
        total: total_v,
        per_group,
        effects: fw.finish(),
    })
}

/// One logged inner iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    /// Per-task losses in [`LossCurve::tasks`] order (0 when the task had
    /// no segmentation slot in that iteration).
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub tasks: Vec<TaskId>,
    pub rows: Vec<LossRow>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,lr,total_loss");
        for t in &self.tasks {
            let _ = write!(out, ",loss_{t}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{:e},{:e}", r.iteration, r.epoch, r.lr, r.total);
            for v in &r.per_task {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| r.total.is_finite() && r.per_task.iter().all(|v| v.is_finite()))
    }

    /// Mean total loss over the first and the last `k` rows.
    pub fn head_tail_means(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.rows.len()).max(1);
        let mean = |rows: &[LossRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len().max(1) as f64;
        (mean(&self.rows[..k.min(self.rows.len())]), mean(&self.rows[self.rows.len().saturating_sub(k)..]))
    }
}

/// Trained parameters together with their loss history.
pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub curve: LossCurve,
}

/// Initializes a model from `cfg.seed` and trains it on `datasets`.
pub fn run_training(model_cfg: ModelConfig, cfg: &TrainConfig, datasets: &[Dataset]) -> Result<TrainOutcome> {
    let mut model = ModelParams::new(model_cfg, cfg.seed)?;
    let curve = train_model(&mut model, cfg, datasets)?;
    Ok(TrainOutcome { model, curve })
}

/// Trains the currently trainable parameters of `model` in place.
/// `datasets` must contain one dataset for each of `cfg.tasks`.
pub fn train_model(model: &mut ModelParams<f32>, cfg: &TrainConfig, datasets: &[Dataset]) -> Result<LossCurve> {
    train_model_with(model, cfg, datasets, |_, _| {})
}

/// [`train_model`] with a callback after every logged row.
pub fn train_model_with(
    model: &mut ModelParams<f32>,
    cfg: &TrainConfig,
    datasets: &[Dataset],
    mut on_row: impl FnMut(&LossRow, &ModelParams<f32>),
) -> Result<LossCurve> {
    cfg.validate()?;
    let ds: Vec<&Dataset> = cfg
        .tasks
        .iter()
        .map(|t| {
            datasets
                .iter()
                .find(|d| d.task == *t)
                .ok_or_else(|| Error::Config(format!("no dataset for task {t}")))
        })
        .collect::<Result<_>>()?;
    let n_train = ds.iter().map(|d| d.train.len()).min().unwrap_or(0);
    let per_epoch = cfg.iterations_per_epoch.unwrap_or((n_train / cfg.n).max(1));
    let sched = StepLr {
        base: cfg.lr,
        size: cfg.decay_size,
        rate: cfg.decay_rate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c_4e5d_0000_0001);
    let mut adam = Adam::new(&model.store);
    let mut curve = LossCurve {
        tasks: cfg.tasks.clone(),
        rows: Vec::new(),
    };
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let lr = sched.at(epoch);
        for _ in 0..per_epoch {
            let batch = build_iteration_batch(&ds, cfg.n, cfg.hflip, &mut rng)?;
            let mut pending = Grads::new(&model.store);
            for i in 0..cfg.inner_loops() {
                let mut per_task = vec![0.0; ds.len()];
                let total = match cfg.strategy {
                    Strategy::BalanceUnify | Strategy::RandomUnify => {
                        let groups = if cfg.strategy == Strategy::BalanceUnify {
                            balanced_groups(&batch, cfg.b, i)?
                        } else {
                            random_groups(&ds, &batch, cfg.b, i, cfg.hflip, &mut rng)?
                        };
                        let out = differentiate(model, &groups, cfg)?;
                        for (g, v) in groups.iter().zip(&out.per_group) {
                            let t = cfg.tasks.iter().position(|t| t.name() == g.prompt.task).expect("own task");
                            per_task[t] = *v;
                        }
                        out.effects.update_running_stats(&mut model.store);
                        pending.add(&out.effects);
                        if cfg.schedule == StepSchedule::PerInner {
                            adam.step(&mut model.store, &pending, lr)?;
                            pending = Grads::new(&model.store);
                        }
                        out.total
                    }
                    Strategy::BalanceSeparate => {
                        let groups = balanced_groups(&batch, cfg.b, i)?;
                        let mut total = 0.0;
                        for (t, g) in groups.into_iter().enumerate() {
                            let out = differentiate(model, std::slice::from_ref(&g), cfg)?;
                            per_task[t] = out.total;
                            total += out.total;
                            out.effects.update_running_stats(&mut model.store);
                            let grads = Grads::from_effects(&model.store, &out.effects);
                            adam.step(&mut model.store, &grads, lr)?;
                        }
                        total
                    }
                };
                let row = LossRow {
                    iteration,
                    epoch,
                    lr,
                    total,
                    per_task,
                };
                on_row(&row, model);
                curve.rows.push(row);
                iteration += 1;
            }
            if cfg.schedule == StepSchedule::PerOuter && cfg.strategy != Strategy::BalanceSeparate {
                adam.step(&mut model.store, &pending, lr)?;
            }
        }
    }
    Ok(curve)
}
