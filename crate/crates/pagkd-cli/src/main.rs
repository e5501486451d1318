use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pagkd_core::config::{PairingMode, TrainConfig};
use pagkd_core::dataset::ImageStore;
use pagkd_core::dense::NormMode;
use pagkd_core::experiment::{self, TeacherCache};
use pagkd_core::grouping::{self, ManifestRow, Modality};
use pagkd_core::metrics;
use pagkd_core::synthdata::{self, GenConfig};
use pagkd_core::trainer::{self, Distiller};
use pagkd_core::{dense, qformer, Tape};

#[derive(Parser)]
#[command(name = "pagkd", about = "Pairing-free group-level knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring TrainConfig; a config file, when given, overrides them.
#[derive(Args, Clone)]
struct TrainArgs {
    /// TOML config file; its values take precedence over flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    reform_period: Option<usize>,
    #[arg(long)]
    enable_pro: Option<bool>,
    #[arg(long)]
    enable_den: Option<bool>,
    #[arg(long)]
    use_qformer: Option<bool>,
    #[arg(long)]
    use_srca: Option<bool>,
    #[arg(long)]
    bidirectional: Option<bool>,
    #[arg(long, value_parser = ["group", "image", "mixed"])]
    pairing_mode: Option<String>,
    #[arg(long, value_parser = ["squared", "mean"])]
    norm_mode: Option<String>,
    #[arg(long)]
    refinement: Option<bool>,
    /// Defaults to PAGKD_SEED when unset
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
}

impl TrainArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Ok(v) = std::env::var("PAGKD_SEED") {
            cfg.seed = v.parse().context("PAGKD_SEED must be an integer")?;
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(epochs);
        set!(lr);
        set!(weight_decay);
        set!(batch);
        set!(num_queries);
        set!(tau1);
        set!(tau2);
        set!(reform_period);
        set!(seed);
        if let Some(v) = self.enable_pro {
            cfg.flags.enable_pro = v;
        }
        if let Some(v) = self.enable_den {
            cfg.flags.enable_den = v;
        }
        if let Some(v) = self.use_qformer {
            cfg.flags.use_qformer = v;
        }
        if let Some(v) = self.use_srca {
            cfg.flags.use_srca = v;
        }
        if let Some(v) = self.bidirectional {
            cfg.flags.bidirectional = v;
        }
        if let Some(v) = self.refinement {
            cfg.flags.refinement = v;
        }
        if let Some(m) = &self.pairing_mode {
            cfg.flags.pairing_mode = match m.as_str() {
                "group" => PairingMode::Group,
                "image" => PairingMode::Image,
                _ => PairingMode::Mixed,
            };
        }
        if let Some(m) = &self.norm_mode {
            cfg.flags.norm_mode = match m.as_str() {
                "squared" => NormMode::Squared,
                _ => NormMode::Mean,
            };
        }
        cfg.fold = self.fold;
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .with_context(|| format!("loading {}", path.display()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-modality benchmark
    GenerateData {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 120)]
        per_class: usize,
        /// Fraction of instances rendered in both modalities
        #[arg(long, default_value_t = 0.4)]
        pairing: f64,
        /// Modality gap in [0, 1]
        #[arg(long, default_value_t = 0.5)]
        gap: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the NBI teacher and save its checkpoint
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run distillation against a pretrained, frozen teacher
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step JSONL log file
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a student checkpoint on the WLI side of a fold
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// 5-fold cross-validation (or one fold via --fold)
    RunCv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Ablation matrix over a named variant family
    RunMatrix {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["components", "pairing", "thresholds", "subcomponents"])]
        family: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Check that the NBI modality really is easier than WLI
    VerifyGap {
        #[arg(long)]
        data: PathBuf,
        /// Required NBI-minus-WLI macro-AUC margin
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        /// Fold whose test split is scored (default 0)
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Finite-difference check of both loss heads on a tiny model
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Relation-matrix statistics for one training batch
    InspectRelations {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
}

fn load_dataset(dir: &Path) -> Result<(ImageStore, Vec<ManifestRow>)> {
    let rows = grouping::load_manifest(dir.join("manifest.csv"))?;
    let store = ImageStore::load(dir, &rows)?;
    Ok((store, rows))
}

fn nbi_train_ids(rows: &[ManifestRow], fold: Option<usize>) -> Vec<String> {
    rows.iter()
        .filter(|r| r.modality == Modality::Nbi && (fold.is_none() || r.fold != fold))
        .map(|r| r.id.clone())
        .collect()
}

fn load_teacher(
    path: &Path,
    cfg: &TrainConfig,
    store: &ImageStore,
) -> Result<pagkd_core::backbone::Backbone> {
    let bcfg = pagkd_core::backbone::BackboneConfig {
        in_channels: store.image_shape[0],
        stage_channels: cfg.stage_channels.clone(),
        input_side: cfg.input_side,
        num_classes: store.num_classes,
        layer_norm: cfg.layer_norm,
    };
    let mut teacher = pagkd_core::backbone::Backbone::init(bcfg, "teacher", cfg.seed)?;
    trainer::load_into(path, &mut teacher.params)?;
    teacher.freeze();
    Ok(teacher)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData {
            classes,
            per_class,
            pairing,
            gap,
            seed,
            out,
        } => {
            let seed = seed
                .or_else(|| std::env::var("PAGKD_SEED").ok().and_then(|v| v.parse().ok()))
                .unwrap_or(0);
            let cfg = GenConfig {
                classes,
                per_class,
                pairing,
                gap,
                seed,
                ..GenConfig::default()
            };
            let ds = synthdata::generate(&cfg, &out)?;
            println!(
                "wrote {} images and {}",
                ds.rows.len(),
                ds.manifest_path.display()
            );
        }
        Command::PretrainTeacher { data, out, train } => {
            let cfg = train.build()?;
            let (store, rows) = load_dataset(&data)?;
            let ids = nbi_train_ids(&rows, cfg.fold);
            let (teacher, acc) = trainer::pretrain_teacher(&cfg, &store, &ids)?;
            trainer::save_checkpoint(&out, &[&teacher.params])?;
            println!("teacher train accuracy {acc:.4}; saved {}", out.display());
        }
        Command::Distill {
            data,
            teacher,
            out,
            log,
            train,
        } => {
            let cfg = train.build()?;
            let (mut store, rows) = load_dataset(&data)?;
            // honor the fold protocol: hold out the test fold entirely
            let train_rows: Vec<ManifestRow> = match cfg.fold {
                Some(f) => rows.iter().filter(|r| r.fold != Some(f)).cloned().collect(),
                None => rows.clone(),
            };
            if let Some(f) = cfg.fold {
                store.forbid(
                    rows.iter()
                        .filter(|r| r.fold == Some(f))
                        .map(|r| r.id.clone()),
                );
            }
            let teacher = load_teacher(&teacher, &cfg, &store)?;
            let mut distiller = Distiller::new(cfg, &store, teacher, &train_rows)?;
            let mut log_file = match &log {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            let reports = distiller.train(
                &store,
                log_file.as_mut().map(|w| w as &mut dyn std::io::Write),
                out.parent(),
            )?;
            distiller.save(&out)?;
            let last = reports.last().expect("at least one step");
            println!(
                "distilled {} steps; final L_total {:.6}; saved {}",
                reports.len(),
                last.l_total,
                out.display()
            );
            println!(
                "extra params: qformer {} srca {}",
                distiller.qformer.param_count(),
                distiller.srca.param_count()
            );
        }
        Command::Evaluate {
            data,
            checkpoint,
            train,
        } => {
            let cfg = train.build()?;
            let (store, rows) = load_dataset(&data)?;
            let eval_ids: Vec<String> = rows
                .iter()
                .filter(|r| {
                    r.modality == Modality::Wli
                        && match cfg.fold {
                            Some(f) => r.fold == Some(f),
                            None => r.pair_id.is_some(),
                        }
                })
                .map(|r| r.id.clone())
                .collect();
            if eval_ids.is_empty() {
                bail!("no WLI evaluation images for the requested fold");
            }
            let bcfg = pagkd_core::backbone::BackboneConfig {
                in_channels: store.image_shape[0],
                stage_channels: cfg.stage_channels.clone(),
                input_side: cfg.input_side,
                num_classes: store.num_classes,
                layer_norm: false,
            };
            let mut student =
                pagkd_core::backbone::Backbone::init(bcfg, "student", cfg.seed)?;
            trainer::load_into(&checkpoint, &mut student.params)?;
            let (probs, labels) = trainer::run_inference(&student, &store, &eval_ids)?;
            let report = metrics::compute_metrics(&probs, &labels)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RunCv { data, out, train } => {
            let cfg = train.build()?;
            let (mut store, rows) = load_dataset(&data)?;
            let mut teachers = TeacherCache::default();
            let result = experiment::run_cv(&cfg, &mut store, &rows, &mut teachers)?;
            let json = serde_json::to_string_pretty(&result)?;
            if let Some(path) = out {
                std::fs::write(&path, &json)?;
                println!("wrote {}", path.display());
            }
            println!(
                "macro-AUC {:.4} +/- {:.4} over {} folds",
                result.aggregate.macro_auc.mean,
                result.aggregate.macro_auc.std,
                result.aggregate.folds
            );
        }
        Command::VerifyGap {
            data,
            margin,
            fold,
            train,
        } => {
            let cfg = train.build()?;
            let (mut store, rows) = load_dataset(&data)?;
            let report = experiment::verify_gap(&cfg, &mut store, &rows, fold, margin)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::RunMatrix {
            data,
            family,
            seeds,
            out_csv,
            out_json,
            train,
        } => {
            let base = train.build()?;
            let variants = match family.as_str() {
                "components" => experiment::component_variants(&base),
                "pairing" => experiment::pairing_variants(&base),
                "thresholds" => experiment::threshold_variants(&base),
                _ => experiment::subcomponent_variants(&base),
            };
            let (mut store, rows) = load_dataset(&data)?;
            let report = experiment::run_matrix(&variants, &seeds, &mut store, &rows);
            experiment::write_matrix_csv(&report, &out_csv)?;
            if let Some(path) = &out_json {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            println!("wrote {}", out_csv.display());
            for t in &report.trend {
                println!(
                    "{:>16}: macro-AUC {:.4} over {} runs",
                    t.name, t.mean_macro_auc, t.runs
                );
            }
        }
        Command::Gradcheck { seeds, tolerance } => {
            let failures = gradcheck_losses(seeds, tolerance)?;
            if failures > 0 {
                bail!("{failures} gradient checks exceeded {tolerance} relative error");
            }
            println!("all gradient checks within {tolerance} relative error ({seeds} seeds)");
        }
        Command::InspectRelations {
            data,
            teacher,
            train,
        } => {
            let cfg = train.build()?;
            let (store, rows) = load_dataset(&data)?;
            let train_rows: Vec<ManifestRow> = match cfg.fold {
                Some(f) => rows.iter().filter(|r| r.fold != Some(f)).cloned().collect(),
                None => rows.clone(),
            };
            let teacher = load_teacher(&teacher, &cfg, &store)?;
            let mut distiller = Distiller::new(cfg, &store, teacher, &train_rows)?;
            let stats = distiller.inspect_relations(&store)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(())
}

/// Central finite differences of L_pro + L_den through the LR-QFormer and
/// SRCA on a tiny random problem, for every trainable parameter entry.
fn gradcheck_losses(seeds: u64, tolerance: f64) -> Result<usize> {
    use pagkd_core::grouping::Modality;
    use pagkd_core::qformer::{QFormer, QFormerConfig, RefinedSet};
    use pagkd_core::rng;

    let d = 8;
    let l = 6;
    let n_q = 3;
    let mut failures = 0usize;
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "gradcheck-cli");
        let f_wli = rng::uniform_tensor(&mut r, vec![l, d], -1.0, 1.0);
        let f_nbi = rng::uniform_tensor(&mut r, vec![l, d], -1.0, 1.0);
        let mut qf = QFormer::init(
            QFormerConfig {
                num_queries: n_q,
                dim: d,
                blocks: 1,
            },
            seed,
        );
        let mut srca = dense::Srca::init(d, seed)?;
        let pos = qformer::positional_encoding(2, 3, d);
        let rel = pagkd_core::Tensor::zeros(vec![l, l]);

        let eval = |qf: &QFormer, srca: &dense::Srca| -> Result<f64> {
            let tape = Tape::new();
            let qv = qf.bind(&tape);
            let sv = srca.bind(&tape);
            let a = tape.constant(f_wli.clone());
            let b = tape.constant(f_nbi.clone());
            let qa = qf.forward(&tape, &qv, a, &pos)?;
            let qb = qf.forward(&tape, &qv, b, &pos)?;
            let sets = [
                RefinedSet {
                    class: 0,
                    modality: Modality::Wli,
                    queries: qa,
                },
                RefinedSet {
                    class: 0,
                    modality: Modality::Nbi,
                    queries: qb,
                },
            ];
            let _ = &sets;
            let l_pro = qformer::contrastive_loss(&tape, &sets)?;
            let recon = dense::srca_reconstruct(&tape, &sv, a, b, Some(&rel), None)?;
            let terms = [dense::DenseClassTerms {
                f_wli: a,
                recon_wli: recon,
                f_nbi: b,
                recon_nbi: b,
            }];
            let l_den = dense::dense_loss(&tape, &terms, NormMode::Mean, false)?;
            let total = tape.add(l_pro, l_den)?;
            Ok(tape.item(total))
        };

        // analytic grads
        let tape = Tape::new();
        let qv = qf.bind(&tape);
        let sv = srca.bind(&tape);
        let a = tape.constant(f_wli.clone());
        let b = tape.constant(f_nbi.clone());
        let qa = qf.forward(&tape, &qv, a, &pos)?;
        let qb = qf.forward(&tape, &qv, b, &pos)?;
        let sets = [
            RefinedSet {
                class: 0,
                modality: Modality::Wli,
                queries: qa,
            },
            RefinedSet {
                class: 0,
                modality: Modality::Nbi,
                queries: qb,
            },
        ];
        let l_pro = qformer::contrastive_loss(&tape, &sets)?;
        let recon = dense::srca_reconstruct(&tape, &sv, a, b, Some(&rel), None)?;
        let terms = [dense::DenseClassTerms {
            f_wli: a,
            recon_wli: recon,
            f_nbi: b,
            recon_nbi: b,
        }];
        let l_den = dense::dense_loss(&tape, &terms, NormMode::Mean, false)?;
        let total = tape.add(l_pro, l_den)?;
        tape.backward(total)?;
        qf.collect_grads(&tape, &qv);
        srca.collect_grads(&tape, &sv);

        let analytic: Vec<(String, Vec<f64>)> = qf
            .params
            .iter()
            .chain(srca.params.iter())
            .map(|p| {
                (
                    p.name.clone(),
                    p.grad
                        .as_ref()
                        .map(|g| g.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; p.value.len()]),
                )
            })
            .collect();

        let eps = 1e-5;
        // sample a few entries per parameter rather than every entry
        let mut checked = HashSet::new();
        for pi in 0..qf.params.len() + srca.params.len() {
            let len = if pi < qf.params.len() {
                qf.params[pi].value.len()
            } else {
                srca.params[pi - qf.params.len()].value.len()
            };
            for k in 0..3.min(len) {
                let idx = (k * 37) % len;
                if !checked.insert((pi, idx)) {
                    continue;
                }
                let perturb = |qf: &mut QFormer, srca: &mut dense::Srca, delta: f64| {
                    if pi < qf.params.len() {
                        qf.params[pi].value.data_mut()[idx] += delta;
                    } else {
                        srca.params[pi - qf.params.len()].value.data_mut()[idx] += delta;
                    }
                };
                perturb(&mut qf, &mut srca, eps);
                let plus = eval(&qf, &srca)?;
                perturb(&mut qf, &mut srca, -2.0 * eps);
                let minus = eval(&qf, &srca)?;
                perturb(&mut qf, &mut srca, eps);
                let fd = (plus - minus) / (2.0 * eps);
                let an = analytic[pi].1[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                if (fd - an).abs() / denom > tolerance {
                    failures += 1;
                }
            }
        }
    }
    Ok(failures)
}
