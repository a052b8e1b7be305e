//! Experiment runner for the semi-supervised wafer-map pipeline.
//!
//! Every subcommand is deterministic given (config, seed): diagnostics go to
//! stderr, data artifacts go to files under the output directory. Stepwise
//! subcommands exchange JSON checkpoints so a failed late stage never forces
//! re-running the earlier ones.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use wafer_ssl::checkpoint::Checkpoint;
use wafer_ssl::classifier::{
    evaluate, train_supervised, Classifier, FusionPoint, NetworkConfig, TrainConfig,
};
use wafer_ssl::data::{
    self, class_histogram, DatasetSplit, WaferMap, NUM_CLASSES,
};
use wafer_ssl::semisup::{
    build_student_set, fine_tune, run_pipeline, score_unlabeled, select_topk, PipelineConfig,
    PipelineReport, PseudoLabel,
};
use wafer_ssl::vae::{pretrain_vae, VaeConfig, VaeModel, VaeTrainConfig};
use wafer_ssl::Tensor;

// ── configuration ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    seeds: Vec<u64>,
    output_dir: PathBuf,
    data: DataSection,
    #[serde(default)]
    vae: VaeSection,
    #[serde(default)]
    network: NetworkSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    semisup: SemisupSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    /// Synthetic generation: per-class map counts. Mutually exclusive with
    /// `ingest_path`.
    #[serde(default)]
    class_counts: Option<[usize; NUM_CLASSES]>,
    /// Existing JSONL dataset to ingest instead of generating.
    #[serde(default)]
    ingest_path: Option<PathBuf>,
    #[serde(default = "default_size")]
    size: usize,
    #[serde(default = "default_noise")]
    noise_rate: f64,
    /// Seed for synthetic generation; independent of the run seeds so that
    /// every seed of an experiment sees the same dataset.
    #[serde(default)]
    generator_seed: u64,
    /// (labeled, unlabeled, test) fractions; must sum to 1.
    #[serde(default = "default_split")]
    split: [f64; 3],
    /// Balance the labeled split to this many maps per class.
    #[serde(default)]
    balance_per_class: Option<usize>,
}

fn default_size() -> usize {
    27
}
fn default_noise() -> f64 {
    0.05
}
fn default_split() -> [f64; 3] {
    [0.15, 0.7, 0.15]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct VaeSection {
    latent_dim: usize,
    channels: [usize; 3],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    kl_weight: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        VaeSection {
            latent_dim: 16,
            channels: [8, 16, 32],
            epochs: 30,
            batch_size: 32,
            lr: 0.002,
            kl_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NetworkSection {
    stem_channels: usize,
    stem_pool: bool,
    block_counts: [usize; 4],
    stage_channels: [usize; 4],
    /// Insertion point of the latent vector in the student network; the
    /// teacher always runs without fusion.
    fusion_point: FusionPoint,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            stem_channels: 8,
            stem_pool: true,
            block_counts: [1, 1, 2, 1],
            stage_channels: [8, 16, 32, 64],
            fusion_point: FusionPoint::AfterStage2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 25, batch_size: 32, lr: 0.002, beta1: 0.9, beta2: 0.99 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SemisupSection {
    confidence_threshold: f64,
    top_k: usize,
    fine_tune_epochs: usize,
}

impl Default for SemisupSection {
    fn default() -> Self {
        SemisupSection { confidence_threshold: 0.9, top_k: 50, fine_tune_epochs: 5 }
    }
}

impl ExperimentConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config: `seeds` must list at least one seed");
        }
        match (&self.data.class_counts, &self.data.ingest_path) {
            (None, None) => bail!("config: set either data.class_counts or data.ingest_path"),
            (Some(_), Some(_)) => {
                bail!("config: data.class_counts and data.ingest_path are mutually exclusive")
            }
            _ => {}
        }
        Ok(())
    }

    fn network_config(&self, fusion: FusionPoint) -> NetworkConfig {
        NetworkConfig {
            input_size: self.data.size,
            stem_channels: self.network.stem_channels,
            stem_pool: self.network.stem_pool,
            block_counts: self.network.block_counts,
            stage_channels: self.network.stage_channels,
            fusion_point: fusion,
            num_classes: NUM_CLASSES,
            latent_dim: self.vae.latent_dim,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            seed,
        }
    }

    fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            input_size: self.data.size,
            latent_dim: self.vae.latent_dim,
            channels: self.vae.channels,
        }
    }

    fn vae_train_config(&self, seed: u64) -> VaeTrainConfig {
        VaeTrainConfig {
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            lr: self.vae.lr,
            kl_weight: self.vae.kl_weight,
            seed,
        }
    }

    fn pipeline_config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            confidence_threshold: self.semisup.confidence_threshold,
            top_k: self.semisup.top_k,
            teacher: self.network_config(FusionPoint::None),
            student: self.network_config(self.network.fusion_point),
            teacher_train: self.train_config(seed),
            student_train: self.train_config(seed),
            fine_tune_epochs: self.semisup.fine_tune_epochs,
            seed,
        }
    }
}

// ── command line ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "wafer-ssl", about = "Semi-supervised wafer-map defect classification")]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed, overriding the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset as JSONL plus a per-class stats file.
    Generate,
    /// Pretrain the VAE on all training maps and checkpoint it per seed.
    PretrainVae,
    /// Train the teacher on the balanced labeled split and checkpoint it.
    TrainTeacher,
    /// Score the unlabeled pool with a teacher checkpoint and keep the
    /// confident top-K per class.
    PseudoLabel,
    /// Train and fine-tune the student from a pseudo-label file.
    TrainStudent,
    /// Evaluate a model checkpoint on the test split.
    Evaluate {
        /// Checkpoint to evaluate; defaults to the student of each seed.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Execute the full pipeline per seed and write an aggregate summary.
    Run,
    /// Compare latent insertion points with shared data and seeds.
    Ablate {
        /// Comma-separated fusion points, e.g. `none,after_stage2`.
        #[arg(long, value_delimiter = ',', required = true)]
        fusion_points: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config_path =
        cli.config.as_deref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;

    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::PretrainVae => cmd_pretrain_vae(&cfg),
        Command::TrainTeacher => cmd_train_teacher(&cfg),
        Command::PseudoLabel => cmd_pseudo_label(&cfg),
        Command::TrainStudent => cmd_train_student(&cfg),
        Command::Evaluate { model } => cmd_evaluate(&cfg, model.as_deref()),
        Command::Run => cmd_run(&cfg),
        Command::Ablate { fusion_points } => cmd_ablate(&cfg, &fusion_points),
    }
}

// ── dataset plumbing ─────────────────────────────────────────────────

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<WaferMap>> {
    if let Some(path) = &cfg.data.ingest_path {
        return data::ingest(path)
            .with_context(|| format!("ingesting {}", path.display()));
    }
    let counts = cfg.data.class_counts.expect("validated: one source set");
    Ok(data::generate_batch(&counts, cfg.data.size, cfg.data.noise_rate, cfg.data.generator_seed)?)
}

/// Split and (optionally) balance the labeled portion; deterministic per seed.
fn prepare_split(cfg: &ExperimentConfig, maps: &[WaferMap], seed: u64) -> Result<DatasetSplit> {
    let [fl, fu, ft] = cfg.data.split;
    let mut split = data::split(maps, (fl, fu, ft), seed)?;
    if let Some(target) = cfg.data.balance_per_class {
        split.labeled = data::balance(&split.labeled, target, seed)?;
    }
    Ok(split)
}

/// All training-side images (labeled + unlabeled), for VAE pretraining.
fn vae_images(split: &DatasetSplit) -> Vec<Tensor> {
    split
        .labeled
        .iter()
        .map(|m| m.to_tensor())
        .chain(split.unlabeled.iter().map(|u| u.map.to_tensor()))
        .collect()
}

fn seed_path(dir: &Path, stem: &str, seed: u64) -> PathBuf {
    dir.join(format!("{stem}-seed{seed}.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ── subcommands ──────────────────────────────────────────────────────

#[derive(Serialize)]
struct DatasetStats<'a> {
    total: usize,
    size: usize,
    noise_rate: f64,
    per_class: Vec<ClassCount<'a>>,
}

#[derive(Serialize)]
struct ClassCount<'a> {
    class: usize,
    name: &'a str,
    count: usize,
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let maps = load_dataset(cfg).context("generate")?;
    let dataset_path = cfg.output_dir.join("dataset.jsonl");
    data::export(&maps, &dataset_path).context("generate")?;
    let hist = class_histogram(&maps);
    let per_class = (0..NUM_CLASSES)
        .map(|c| {
            Ok(ClassCount {
                class: c,
                name: data::DefectClass::from_index(c)?.name(),
                count: hist.get(&c).copied().unwrap_or(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = DatasetStats {
        total: maps.len(),
        size: cfg.data.size,
        noise_rate: cfg.data.noise_rate,
        per_class,
    };
    write_json(&cfg.output_dir.join("stats.json"), &stats)?;
    eprintln!("generate: wrote {} maps to {}", maps.len(), dataset_path.display());
    Ok(())
}

fn cmd_pretrain_vae(cfg: &ExperimentConfig) -> Result<()> {
    let maps = load_dataset(cfg).context("pretrain-vae")?;
    for &seed in &cfg.seeds {
        let split = prepare_split(cfg, &maps, seed).context("pretrain-vae")?;
        let images = vae_images(&split);
        eprintln!("pretrain-vae: seed {seed}, {} images", images.len());
        let (vae, history) =
            pretrain_vae(&images, &cfg.vae_config(), &cfg.vae_train_config(seed))
                .context("pretrain-vae")?;
        vae.to_checkpoint().save(&seed_path(&cfg.output_dir, "vae", seed))?;
        #[derive(Serialize)]
        struct History {
            loss: Vec<f64>,
            kl: Vec<f64>,
        }
        write_json(
            &seed_path(&cfg.output_dir, "vae-history", seed),
            &History { loss: history.loss, kl: history.kl },
        )?;
    }
    Ok(())
}

fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<()> {
    let maps = load_dataset(cfg).context("train-teacher")?;
    for &seed in &cfg.seeds {
        let split = prepare_split(cfg, &maps, seed).context("train-teacher")?;
        eprintln!("train-teacher: seed {seed}, {} labeled maps", split.labeled.len());
        let mut teacher = Classifier::new(cfg.network_config(FusionPoint::None), seed)
            .context("train-teacher")?;
        train_supervised(&mut teacher, None, &split.labeled, &cfg.train_config(seed))
            .context("train-teacher")?;
        teacher.to_checkpoint().save(&seed_path(&cfg.output_dir, "teacher", seed))?;
        let metrics = evaluate(&teacher, None, &split.test).context("train-teacher")?;
        write_json(&seed_path(&cfg.output_dir, "teacher-metrics", seed), &metrics)?;
    }
    Ok(())
}

fn cmd_pseudo_label(cfg: &ExperimentConfig) -> Result<()> {
    let maps = load_dataset(cfg).context("pseudo-label")?;
    for &seed in &cfg.seeds {
        let split = prepare_split(cfg, &maps, seed).context("pseudo-label")?;
        let ckpt = Checkpoint::load(&seed_path(&cfg.output_dir, "teacher", seed))
            .context("pseudo-label: teacher checkpoint (run train-teacher first)")?;
        let teacher = Classifier::from_checkpoint(&ckpt).context("pseudo-label")?;
        let scored = score_unlabeled(&teacher, None, &split.unlabeled).context("pseudo-label")?;
        let selected =
            select_topk(&scored, cfg.semisup.top_k, cfg.semisup.confidence_threshold);
        eprintln!(
            "pseudo-label: seed {seed}, kept {} of {} unlabeled maps",
            selected.len(),
            split.unlabeled.len()
        );
        write_json(&seed_path(&cfg.output_dir, "pseudo", seed), &selected)?;
    }
    Ok(())
}

fn cmd_train_student(cfg: &ExperimentConfig) -> Result<()> {
    let maps = load_dataset(cfg).context("train-student")?;
    let student_net = cfg.network_config(cfg.network.fusion_point);
    for &seed in &cfg.seeds {
        let split = prepare_split(cfg, &maps, seed).context("train-student")?;
        let selected: Vec<PseudoLabel> = {
            let path = seed_path(&cfg.output_dir, "pseudo", seed);
            let text = std::fs::read_to_string(&path)
                .context("train-student: pseudo-label file (run pseudo-label first)")?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        };
        let vae = load_vae_if_fused(cfg, seed, student_net.fusion_point)?;
        let student_set = build_student_set(&split.labeled, &selected, &split.unlabeled)
            .context("train-student")?;
        eprintln!("train-student: seed {seed}, {} training maps", student_set.len());
        let train = cfg.train_config(seed);
        let (mut student, _) =
            wafer_ssl::semisup::train_student(&student_net, vae.as_ref(), &student_set, &train)
                .context("train-student")?;
        fine_tune(
            &mut student,
            vae.as_ref(),
            &split.labeled,
            cfg.semisup.fine_tune_epochs,
            &train,
        )
        .context("train-student")?;
        student.to_checkpoint().save(&seed_path(&cfg.output_dir, "student", seed))?;
        let metrics = evaluate(&student, vae.as_ref(), &split.test).context("train-student")?;
        write_json(&seed_path(&cfg.output_dir, "student-metrics", seed), &metrics)?;
    }
    Ok(())
}

fn load_vae_if_fused(
    cfg: &ExperimentConfig,
    seed: u64,
    fusion: FusionPoint,
) -> Result<Option<VaeModel>> {
    if fusion == FusionPoint::None {
        return Ok(None);
    }
    let path = seed_path(&cfg.output_dir, "vae", seed);
    let ckpt = Checkpoint::load(&path)
        .with_context(|| format!("VAE checkpoint {} (run pretrain-vae first)", path.display()))?;
    Ok(Some(VaeModel::from_checkpoint(&ckpt)?))
}

fn cmd_evaluate(cfg: &ExperimentConfig, model: Option<&Path>) -> Result<()> {
    let maps = load_dataset(cfg).context("evaluate")?;
    for &seed in &cfg.seeds {
        let split = prepare_split(cfg, &maps, seed).context("evaluate")?;
        let path = match model {
            Some(p) => p.to_path_buf(),
            None => seed_path(&cfg.output_dir, "student", seed),
        };
        let ckpt = Checkpoint::load(&path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let classifier = Classifier::from_checkpoint(&ckpt).context("evaluate")?;
        let vae = load_vae_if_fused(cfg, seed, classifier.cfg.fusion_point)?;
        let metrics = evaluate(&classifier, vae.as_ref(), &split.test).context("evaluate")?;
        eprintln!(
            "evaluate: seed {seed}, {} — accuracy {:.4}, macro-F1 {:.4}",
            path.display(),
            metrics.accuracy,
            metrics.macro_f1
        );
        write_json(&seed_path(&cfg.output_dir, "evaluation", seed), &metrics)?;
        std::fs::write(
            seed_path(&cfg.output_dir, "evaluation", seed).with_extension("txt"),
            metrics.render_table(),
        )?;
    }
    Ok(())
}

// ── full pipeline ────────────────────────────────────────────────────

/// Per-seed report: a config echo makes it self-describing.
#[derive(Serialize, Deserialize)]
struct SeedReport {
    seed: u64,
    experiment: ExperimentConfig,
    pipeline: PipelineReport,
}

fn run_one_seed(cfg: &ExperimentConfig, maps: &[WaferMap], seed: u64) -> Result<SeedReport> {
    let split = prepare_split(cfg, maps, seed)?;
    let pipeline_cfg = cfg.pipeline_config(seed);
    let needs_vae = pipeline_cfg.teacher.fusion_point != FusionPoint::None
        || pipeline_cfg.student.fusion_point != FusionPoint::None;
    let vae = if needs_vae {
        eprintln!("run: seed {seed}, pretraining VAE");
        let images = vae_images(&split);
        let (vae, _) =
            pretrain_vae(&images, &cfg.vae_config(), &cfg.vae_train_config(seed))
                .context("pretrain-vae")?;
        Some(vae)
    } else {
        None
    };
    eprintln!("run: seed {seed}, training teacher and student");
    let outcome = run_pipeline(&pipeline_cfg, &split, vae.as_ref()).context("pipeline")?;
    eprintln!(
        "run: seed {seed} done — teacher acc {:.4}, student acc {:.4}, student macro-F1 {:.4}",
        outcome.report.teacher_metrics.accuracy,
        outcome.report.student_metrics.accuracy,
        outcome.report.student_metrics.macro_f1
    );
    Ok(SeedReport { seed, experiment: cfg.clone(), pipeline: outcome.report })
}

#[derive(Serialize, Deserialize)]
struct MetricSummary {
    mean: f64,
    stddev: f64,
    per_seed: Vec<f64>,
}

fn summarize(values: Vec<f64>) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MetricSummary { mean, stddev: var.sqrt(), per_seed: values }
}

#[derive(Serialize, Deserialize)]
struct ModelSummary {
    macro_precision: MetricSummary,
    macro_recall: MetricSummary,
    macro_f1: MetricSummary,
    accuracy: MetricSummary,
}

fn summarize_model(
    reports: &[SeedReport],
    pick: impl Fn(&PipelineReport) -> &wafer_ssl::metrics::MetricsReport,
) -> ModelSummary {
    let get = |f: fn(&wafer_ssl::metrics::MetricsReport) -> f64| {
        summarize(reports.iter().map(|r| f(pick(&r.pipeline))).collect())
    };
    ModelSummary {
        macro_precision: get(|m| m.macro_precision),
        macro_recall: get(|m| m.macro_recall),
        macro_f1: get(|m| m.macro_f1),
        accuracy: get(|m| m.accuracy),
    }
}

#[derive(Serialize, Deserialize)]
struct RunSummary {
    seeds: Vec<u64>,
    experiment: ExperimentConfig,
    teacher: ModelSummary,
    student: ModelSummary,
}

fn cmd_run(cfg: &ExperimentConfig) -> Result<()> {
    let maps = load_dataset(cfg).context("run")?;
    // Seeds are disjoint computations with distinct output files.
    use rayon::prelude::*;
    let reports: Vec<SeedReport> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_one_seed(cfg, &maps, seed))
        .collect::<Result<_>>()?;
    for report in &reports {
        write_json(&seed_path(&cfg.output_dir, "report", report.seed), report)?;
    }
    let summary = RunSummary {
        seeds: cfg.seeds.clone(),
        experiment: cfg.clone(),
        teacher: summarize_model(&reports, |p| &p.teacher_metrics),
        student: summarize_model(&reports, |p| &p.student_metrics),
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    eprintln!(
        "run: summary — student macro-F1 {:.4} ± {:.4}, accuracy {:.4} ± {:.4}",
        summary.student.macro_f1.mean,
        summary.student.macro_f1.stddev,
        summary.student.accuracy.mean,
        summary.student.accuracy.stddev
    );
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, fusion_points: &[String]) -> Result<()> {
    if fusion_points.len() < 2 {
        bail!("ablate: need at least two fusion points to compare");
    }
    let points: Vec<FusionPoint> = fusion_points
        .iter()
        .map(|s| FusionPoint::parse(s).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (&point, name) in points.iter().zip(fusion_points) {
        let mut sub = cfg.clone();
        sub.network.fusion_point = point;
        sub.output_dir = cfg.output_dir.join("ablate").join(name);
        std::fs::create_dir_all(&sub.output_dir)?;
        eprintln!("ablate: fusion_point = {name}");
        cmd_run(&sub).with_context(|| format!("ablate: fusion_point {name}"))?;
        let text = std::fs::read_to_string(sub.output_dir.join("summary.json"))?;
        let summary: RunSummary = serde_json::from_str(&text)?;
        rows.push((name.clone(), summary));
    }

    let mut table = format!("{:<14} {:>10} {:>10} {:>10} {:>10}\n", "fusion", "P", "R", "F1", "A");
    let mut csv = String::from("fusion,P,R,F1,A\n");
    for (name, s) in &rows {
        let m = &s.student;
        table.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            name,
            m.macro_precision.mean,
            m.macro_recall.mean,
            m.macro_f1.mean,
            m.accuracy.mean
        ));
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name, m.macro_precision.mean, m.macro_recall.mean, m.macro_f1.mean, m.accuracy.mean
        ));
    }
    let dir = cfg.output_dir.join("ablate");
    std::fs::write(dir.join("table.txt"), &table)?;
    std::fs::write(dir.join("table.csv"), &csv)?;
    eprint!("{table}");
    Ok(())
}
