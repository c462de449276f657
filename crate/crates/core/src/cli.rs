//! Command implementations behind the `spider` binary. Each command reads a
//! [`RunConfig`], writes its artifacts under `out_dir` and returns the paths
//! it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::concept::{build_filter, ConceptFilter, GroupPrompt};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, MetricReport};
use crate::experiments::{
    experiment_continual, experiment_joint_vs_separate, experiment_mask_robustness, experiment_prompt_count,
    experiment_strategies, PromptSource,
};
use crate::imageio::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::networks::ModelParams;
use crate::prompts::{format_prompt_list, group_prompt, parse_prompt_list, select_representatives, EmbeddingIndex};
use crate::synth::{make_dataset, sample_seed, Dataset, TaskId};
use crate::tensor::Tensor;
use crate::training::{run_training, Strategy, TrainConfig};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Regenerates the datasets of `tasks` from the configured data seed.
pub fn load_datasets(cfg: &RunConfig, tasks: &[TaskId]) -> Result<Vec<Dataset>> {
    tasks.iter().map(|&t| make_dataset(&cfg.task_config(t), cfg.data_seed)).collect()
}

fn all_tasks(cfg: &RunConfig) -> Vec<TaskId> {
    let mut tasks = cfg.tasks.clone();
    tasks.extend(cfg.new_tasks.iter().filter(|t| !cfg.tasks.contains(t)));
    tasks
}

fn save_model(model: &ModelParams<f32>, cfg: &RunConfig, epoch: usize, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(model);
    ckpt.metadata.insert("config_digest".into(), cfg.digest());
    ckpt.metadata.insert("epoch".into(), epoch.to_string());
    ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
    ckpt.save(path)
}

pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    Checkpoint::load(path)?.to_model()
}

/// Output of `train`.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
    pub digest: String,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    ensure_dir(&cfg.out_dir)?;
    let datasets = load_datasets(cfg, &cfg.tasks)?;
    let out = run_training(cfg.model_config(), &cfg.train_config(), &datasets)?;
    if !out.curve.is_finite() {
        return Err(Error::Numeric("loss curve contains non-finite values".into()));
    }
    let checkpoint = cfg.checkpoint_path();
    save_model(&out.model, cfg, cfg.epochs, &checkpoint)?;
    let loss_csv = cfg.out_dir.join("loss.csv");
    write_text(&loss_csv, &out.curve.to_csv())?;
    Ok(TrainSummary {
        checkpoint,
        loss_csv,
        final_loss: out.curve.rows.last().map(|r| r.total).unwrap_or(f64::NAN),
        digest: cfg.digest(),
    })
}

/// Writes one prompt list per task (`<prompts_dir>/<TASK>.txt`) holding the
/// `k` cluster representatives of its training split.
pub fn cmd_cluster_prompts(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(&cfg.checkpoint_path())?;
    let dir = cfg.prompts_path();
    ensure_dir(&dir)?;
    let mut written = Vec::new();
    for ds in load_datasets(cfg, &cfg.tasks)? {
        let index = EmbeddingIndex::build(&model, &ds)?;
        let ids = select_representatives(&index, cfg.k, sample_seed(cfg.seed, ds.task, 0), cfg.distance)?;
        let entries: Vec<_> = ids.iter().map(|&i| (ds.task, i)).collect();
        let path = dir.join(format!("{}.txt", ds.task));
        write_text(&path, &format_prompt_list(&entries))?;
        written.push(path);
    }
    Ok(written)
}

/// Prompt of `task`: its list file in the prompts directory when present,
/// otherwise `g` random training samples.
fn prompt_for(cfg: &RunConfig, model: &ModelParams<f32>, ds: &Dataset) -> Result<GroupPrompt<f32>> {
    let path = cfg.prompts_path().join(format!("{}.txt", ds.task));
    let ids = if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = parse_prompt_list(&text)?;
        entries
            .into_iter()
            .filter(|(t, _)| *t == ds.task)
            .map(|(_, i)| i)
            .collect()
    } else {
        PromptSource::Random {
            g: cfg.g,
            seed: cfg.seed,
        }
        .select(model, ds)?
    };
    group_prompt(ds, &ids, None)
}

/// Test-split metrics of every configured task, written to `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    let model = load_model(&cfg.checkpoint_path())?;
    let datasets = load_datasets(cfg, &cfg.tasks)?;
    let filters = datasets
        .iter()
        .map(|ds| build_filter(&model, &prompt_for(cfg, &model, ds)?))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&model, &filters, &datasets, &cfg.tasks, cfg.seed, &cfg.digest())?;
    report.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("metrics.csv");
    write_text(&path, &report.to_csv())?;
    Ok(path)
}

/// Filters from prompt sources. A file is a prompt list (samples of the
/// regenerated training sets); a directory holds `<name>.ppm` images with
/// `<name>.pgm` masks and names its task after itself.
fn filters_from_sources(cfg: &RunConfig, model: &ModelParams<f32>, sources: &[PathBuf]) -> Result<Vec<ConceptFilter<f32>>> {
    let mut filters = Vec::new();
    for src in sources {
        if src.is_dir() {
            filters.push(build_filter(model, &prompt_from_dir(src)?)?);
        } else {
            let text = std::fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
            let mut by_task: BTreeMap<TaskId, Vec<usize>> = BTreeMap::new();
            for (t, i) in parse_prompt_list(&text)? {
                by_task.entry(t).or_default().push(i);
            }
            for (task, ids) in by_task {
                let ds = make_dataset(&cfg.task_config(task), cfg.data_seed)?;
                filters.push(build_filter(model, &group_prompt(&ds, &ids, None)?)?);
            }
        }
    }
    if filters.is_empty() {
        return Err(Error::Data("no prompts given".into()));
    }
    Ok(filters)
}

fn prompt_from_dir(dir: &Path) -> Result<GroupPrompt<f32>> {
    let mut stems: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("{}: no .ppm prompt images", dir.display())));
    }
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for p in &stems {
        images.push(read_ppm(p)?);
        masks.push(read_pgm(&p.with_extension("pgm"))?);
    }
    let task = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prompt".into());
    GroupPrompt::new(
        task,
        Tensor::stack(&images.iter().collect::<Vec<_>>())?,
        Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
        stems.iter().map(|p| p.display().to_string()).collect(),
    )
}

/// One PGM probability map per (image, filter) pair, named
/// `<image stem>_<task>.pgm` in `out_dir`.
pub fn cmd_infer(cfg: &RunConfig, images: &[PathBuf], prompt_sources: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let model = load_model(&cfg.checkpoint_path())?;
    let filters = filters_from_sources(cfg, &model, prompt_sources)?;
    ensure_dir(&cfg.out_dir)?;
    let mut written = Vec::new();
    for path in images {
        let image = read_ppm(path)?;
        let s = image.shape().to_vec();
        let batch = image.reshape([1, s[0], s[1], s[2]])?;
        let stem = path
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        for f in &filters {
            let probs = predict(&model, f, &batch)?;
            let out = cfg.out_dir.join(format!("{stem}_{}.pgm", f.task));
            write_pgm(&out, &probs.reshape([1, s[1], s[2]])?)?;
            written.push(out);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Strategy,
    Prompts,
    Robustness,
    JointVsSeparate,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "strategy" => Ok(Ablation::Strategy),
            "prompts" => Ok(Ablation::Prompts),
            "robustness" => Ok(Ablation::Robustness),
            "joint-vs-separate" => Ok(Ablation::JointVsSeparate),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Strategy => "strategy",
            Ablation::Prompts => "prompts",
            Ablation::Robustness => "robustness",
            Ablation::JointVsSeparate => "joint-vs-separate",
        }
    }
}

/// Row-wise mean of reports that share their (task, metric) layout.
pub fn average_reports(reports: &[MetricReport], seed: u64, digest: &str) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::Contract("no reports to average".into()))?;
    let mut out = MetricReport::new(seed, digest);
    for (i, row) in first.rows.iter().enumerate() {
        let mut sum = 0.0;
        for r in reports {
            let other = r
                .rows
                .get(i)
                .filter(|o| o.task == row.task && o.metric == row.metric)
                .ok_or_else(|| Error::Contract("reports differ in layout".into()))?;
            sum += other.value;
        }
        out.push(row.task.clone(), row.metric.clone(), sum / reports.len() as f64, row.n);
    }
    Ok(out)
}

fn random_sources(cfg: &RunConfig) -> Vec<PromptSource> {
    cfg.seeds.iter().map(|&seed| PromptSource::Random { g: cfg.g, seed }).collect()
}

/// Runs one ablation and writes `ablation_<which>.csv`. Training-based
/// ablations average over `seeds` with `ablation_epochs` epochs each;
/// prompt-based ones use the configured checkpoint.
pub fn cmd_ablate(cfg: &RunConfig, which: Ablation) -> Result<PathBuf> {
    let datasets = load_datasets(cfg, &cfg.tasks)?;
    let sources = random_sources(cfg);
    let digest = cfg.digest();
    let report = match which {
        Ablation::Strategy | Ablation::JointVsSeparate => {
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                let tc = TrainConfig {
                    seed,
                    epochs: cfg.ablation_epochs,
                    ..cfg.train_config()
                };
                reports.push(match which {
                    Ablation::Strategy => {
                        experiment_strategies(&cfg.model_config(), &tc, &datasets, &Strategy::ALL, &sources)?
                    }
                    _ => experiment_joint_vs_separate(&cfg.model_config(), &tc, &datasets, &sources)?,
                });
            }
            average_reports(&reports, cfg.seed, &digest)?
        }
        Ablation::Prompts => {
            let model = load_model(&cfg.checkpoint_path())?;
            let mut r = experiment_prompt_count(&model, &datasets, &cfg.tasks, &cfg.g_list, cfg.k, &cfg.seeds, cfg.distance)?;
            r.seed = cfg.seed;
            r.config_digest = digest;
            r
        }
        Ablation::Robustness => {
            let model = load_model(&cfg.checkpoint_path())?;
            let mut r = experiment_mask_robustness(&model, &datasets, &cfg.tasks, &cfg.kernels, &sources)?;
            r.seed = cfg.seed;
            r.config_digest = digest;
            r
        }
    };
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("ablation_{}.csv", which.name()));
    write_text(&path, &report.to_csv())?;
    Ok(path)
}

/// Fine-tunes the configured checkpoint on `new_tasks` one after another;
/// writes `continual.csv` and `continual_stage<i>.spdr`.
pub fn cmd_continual(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let pretrained = load_model(&cfg.checkpoint_path())?;
    let tasks = all_tasks(cfg);
    let datasets = load_datasets(cfg, &tasks)?;
    let ft = TrainConfig {
        epochs: cfg.ft_epochs,
        lr: cfg.ft_lr,
        ..cfg.train_config()
    };
    let out = experiment_continual(&pretrained, &datasets, &tasks, &cfg.new_tasks, &ft, &random_sources(cfg))?;
    ensure_dir(&cfg.out_dir)?;
    let mut timeline = out.timeline;
    timeline.seed = cfg.seed;
    timeline.config_digest = cfg.digest();
    let csv = cfg.out_dir.join("continual.csv");
    write_text(&csv, &timeline.to_csv())?;
    let mut written = vec![csv];
    for (i, m) in out.stages.iter().enumerate() {
        let p = cfg.out_dir.join(format!("continual_stage{}.spdr", i + 1));
        save_model(m, cfg, cfg.ft_epochs, &p)?;
        written.push(p);
    }
    Ok(written)
}

/// Writes every scene of the configured tasks as `<TASK>/<split>_<i>.ppm`
/// with the task mask as `.pgm` alongside.
pub fn cmd_export(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for ds in load_datasets(cfg, &cfg.tasks)? {
        let dir = cfg.out_dir.join(ds.task.name());
        ensure_dir(&dir)?;
        for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
            for (i, s) in samples.iter().enumerate() {
                let img = dir.join(format!("{split}_{i}.ppm"));
                write_ppm(&img, &s.image)?;
                let mask = s.mask(ds.task).expect("task mask present");
                write_pgm(&img.with_extension("pgm"), mask)?;
                written.push(img);
            }
        }
    }
    Ok(written)
}
