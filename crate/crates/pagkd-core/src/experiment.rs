//! The 5-fold cross-validation driver and the ablation matrix: train on
//! paired train folds plus all unpaired data, evaluate on the WLI side of
//! the held-out paired fold, aggregate mean +/- std across folds and
//! seeds.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::backbone::Backbone;
use crate::config::TrainConfig;
use crate::dataset::ImageStore;
use crate::error::{Error, Result};
use crate::grouping::{ManifestRow, Modality};
use crate::metrics::{self, AggregateReport, MetricsReport};
use crate::synthdata::NUM_FOLDS;
use crate::trainer::{self, Distiller};

/// Teacher checkpoints shared across matrix variants: the teacher depends
/// only on (seed, fold), not on distillation flags.
#[derive(Default)]
pub struct TeacherCache {
    map: HashMap<(u64, usize), Backbone>,
}

impl TeacherCache {
    pub fn get_or_train(
        &mut self,
        cfg: &TrainConfig,
        store: &ImageStore,
        nbi_train_ids: &[String],
        fold: usize,
    ) -> Result<Backbone> {
        if let Some(t) = self.map.get(&(cfg.seed, fold)) {
            return Ok(t.clone());
        }
        let (mut teacher, _acc) = trainer::pretrain_teacher(cfg, store, nbi_train_ids)?;
        teacher.freeze();
        self.map.insert((cfg.seed, fold), teacher.clone());
        Ok(teacher)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CvResult {
    pub per_fold: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
}

fn fold_split(rows: &[ManifestRow], fold: usize) -> (Vec<ManifestRow>, Vec<ManifestRow>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for r in rows {
        if r.fold == Some(fold) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, test)
}

/// Trains and evaluates one fold. The test fold's images are forbidden in
/// the store for the whole training phase (the access audit); evaluation
/// reads only the WLI side of the held-out fold.
pub fn run_fold(
    cfg: &TrainConfig,
    store: &mut ImageStore,
    rows: &[ManifestRow],
    fold: usize,
    teachers: &mut TeacherCache,
) -> Result<MetricsReport> {
    if rows.iter().all(|r| r.fold.is_none()) {
        return Err(Error::Manifest("manifest has no fold assignments".into()));
    }
    let (train_rows, test_rows) = fold_split(rows, fold);
    let test_wli: Vec<String> = test_rows
        .iter()
        .filter(|r| r.modality == Modality::Wli)
        .map(|r| r.id.clone())
        .collect();
    if test_wli.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no WLI test images")));
    }
    store.allow_all();
    store.forbid(test_rows.iter().map(|r| r.id.clone()));

    let nbi_train: Vec<String> = train_rows
        .iter()
        .filter(|r| r.modality == Modality::Nbi)
        .map(|r| r.id.clone())
        .collect();
    let teacher = teachers.get_or_train(cfg, store, &nbi_train, fold)?;

    let mut fold_cfg = cfg.clone();
    fold_cfg.fold = Some(fold);
    let mut distiller = Distiller::new(fold_cfg, store, teacher, &train_rows)?;
    distiller.train(store, None, None)?;

    store.allow_all();
    let (probs, labels) = trainer::run_inference(&distiller.student, store, &test_wli)?;
    metrics::compute_metrics(&probs, &labels)
}

/// Full cross-validation; `cfg.fold` restricts the run to a single fold.
pub fn run_cv(
    cfg: &TrainConfig,
    store: &mut ImageStore,
    rows: &[ManifestRow],
    teachers: &mut TeacherCache,
) -> Result<CvResult> {
    let folds: Vec<usize> = match cfg.fold {
        Some(f) => vec![f],
        None => (0..NUM_FOLDS).collect(),
    };
    let mut per_fold = Vec::new();
    for fold in folds {
        per_fold.push(run_fold(cfg, store, rows, fold, teachers)?);
    }
    let aggregate = metrics::aggregate(&per_fold)?;
    Ok(CvResult {
        per_fold,
        aggregate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub fold: usize,
    pub nbi_auc: f64,
    pub wli_auc: f64,
    pub margin_required: f64,
}

/// Trains identical classifiers on the NBI-only and WLI-only train splits
/// of one fold and checks that the NBI test macro-AUC exceeds the WLI one
/// by at least `margin`. Fails with a dataset-quality error otherwise.
pub fn verify_gap(
    cfg: &TrainConfig,
    store: &mut ImageStore,
    rows: &[ManifestRow],
    fold: usize,
    margin: f64,
) -> Result<GapReport> {
    if rows.iter().all(|r| r.fold.is_none()) {
        return Err(Error::Manifest("manifest has no fold assignments".into()));
    }
    let (train_rows, test_rows) = fold_split(rows, fold);
    store.allow_all();
    let auc_for = |modality: Modality| -> Result<f64> {
        let train_ids: Vec<String> = train_rows
            .iter()
            .filter(|r| r.modality == modality)
            .map(|r| r.id.clone())
            .collect();
        let test_ids: Vec<String> = test_rows
            .iter()
            .filter(|r| r.modality == modality)
            .map(|r| r.id.clone())
            .collect();
        if test_ids.is_empty() {
            return Err(Error::Data(format!(
                "fold {fold} has no {} test images",
                modality.as_str()
            )));
        }
        let (model, _acc) = trainer::pretrain_teacher(cfg, store, &train_ids)?;
        let (probs, labels) = trainer::run_inference(&model, store, &test_ids)?;
        Ok(metrics::compute_metrics(&probs, &labels)?.macro_auc)
    };
    let nbi_auc = auc_for(Modality::Nbi)?;
    let wli_auc = auc_for(Modality::Wli)?;
    if nbi_auc - wli_auc < margin {
        return Err(Error::Data(format!(
            "modality gap too small: NBI AUC {nbi_auc:.4} - WLI AUC {wli_auc:.4} < \
             required margin {margin:.4}; regenerate with a larger gap"
        )));
    }
    Ok(GapReport {
        fold,
        nbi_auc,
        wli_auc,
        margin_required: margin,
    })
}

// ---- the ablation matrix ----

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub cfg: TrainConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixRow {
    pub name: String,
    pub seed: u64,
    pub enable_pro: bool,
    pub enable_den: bool,
    pub use_qformer: bool,
    pub use_srca: bool,
    pub bidirectional: bool,
    pub pairing_mode: String,
    pub norm_mode: String,
    pub refinement: bool,
    pub tau1: f64,
    pub tau2: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub result: Option<CvResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrendEntry {
    pub name: String,
    pub runs: usize,
    pub mean_macro_auc: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    /// Per-variant means over successful runs, best AUC first.
    pub trend: Vec<TrendEntry>,
}

/// Runs every variant for every seed; a failing run becomes a row with an
/// error message and the matrix continues.
pub fn run_matrix(
    variants: &[Variant],
    seeds: &[u64],
    store: &mut ImageStore,
    rows: &[ManifestRow],
) -> MatrixReport {
    let mut out_rows = Vec::new();
    let mut teachers = TeacherCache::default();
    for &seed in seeds {
        for v in variants {
            let mut cfg = v.cfg.clone();
            cfg.seed = seed;
            let result = run_cv(&cfg, store, rows, &mut teachers);
            let (ok, error, result) = match result {
                Ok(r) => (true, None, Some(r)),
                Err(e) => (false, Some(e.to_string()), None),
            };
            out_rows.push(MatrixRow {
                name: v.name.clone(),
                seed,
                enable_pro: cfg.flags.enable_pro,
                enable_den: cfg.flags.enable_den,
                use_qformer: cfg.flags.use_qformer,
                use_srca: cfg.flags.use_srca,
                bidirectional: cfg.flags.bidirectional,
                pairing_mode: format!("{:?}", cfg.flags.pairing_mode).to_lowercase(),
                norm_mode: format!("{:?}", cfg.flags.norm_mode).to_lowercase(),
                refinement: cfg.flags.refinement,
                tau1: cfg.tau1,
                tau2: cfg.tau2,
                ok,
                error,
                result,
            });
        }
    }
    let mut trend: Vec<TrendEntry> = variants
        .iter()
        .map(|v| {
            let runs: Vec<&MatrixRow> = out_rows
                .iter()
                .filter(|r| r.name == v.name && r.ok)
                .collect();
            let n = runs.len().max(1) as f64;
            TrendEntry {
                name: v.name.clone(),
                runs: runs.len(),
                mean_macro_auc: runs
                    .iter()
                    .map(|r| r.result.as_ref().unwrap().aggregate.macro_auc.mean)
                    .sum::<f64>()
                    / n,
                mean_accuracy: runs
                    .iter()
                    .map(|r| r.result.as_ref().unwrap().aggregate.accuracy.mean)
                    .sum::<f64>()
                    / n,
            }
        })
        .collect();
    trend.sort_by(|a, b| b.mean_macro_auc.partial_cmp(&a.mean_macro_auc).unwrap());
    MatrixReport {
        rows: out_rows,
        trend,
    }
}

pub fn write_matrix_csv(report: &MatrixReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record([
        "name",
        "seed",
        "enable_pro",
        "enable_den",
        "use_qformer",
        "use_srca",
        "bidirectional",
        "pairing_mode",
        "norm_mode",
        "refinement",
        "tau1",
        "tau2",
        "ok",
        "error",
        "accuracy_mean",
        "accuracy_std",
        "macro_f1_mean",
        "macro_auc_mean",
        "macro_auc_std",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for r in &report.rows {
        let agg = r.result.as_ref().map(|c| &c.aggregate);
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record([
            r.name.clone(),
            r.seed.to_string(),
            r.enable_pro.to_string(),
            r.enable_den.to_string(),
            r.use_qformer.to_string(),
            r.use_srca.to_string(),
            r.bidirectional.to_string(),
            r.pairing_mode.clone(),
            r.norm_mode.clone(),
            r.refinement.to_string(),
            r.tau1.to_string(),
            r.tau2.to_string(),
            r.ok.to_string(),
            r.error.clone().unwrap_or_default(),
            f(agg.map(|a| a.accuracy.mean)),
            f(agg.map(|a| a.accuracy.std)),
            f(agg.map(|a| a.macro_f1.mean)),
            f(agg.map(|a| a.macro_auc.mean)),
            f(agg.map(|a| a.macro_auc.std)),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Component on/off grid: baseline, prototype head only, dense head only,
/// both.
pub fn component_variants(base: &TrainConfig) -> Vec<Variant> {
    let mk = |name: &str, pro: bool, den: bool| {
        let mut cfg = base.clone();
        cfg.flags.enable_pro = pro;
        cfg.flags.enable_den = den;
        Variant {
            name: name.to_string(),
            cfg,
        }
    };
    vec![
        mk("baseline", false, false),
        mk("pro_only", true, false),
        mk("den_only", false, true),
        mk("full", true, true),
    ]
}

/// Group-level vs image-level joint configuration.
pub fn pairing_variants(base: &TrainConfig) -> Vec<Variant> {
    use crate::config::PairingMode;
    let mk = |name: &str, mode: PairingMode| {
        let mut cfg = base.clone();
        cfg.flags.pairing_mode = mode;
        Variant {
            name: name.to_string(),
            cfg,
        }
    };
    vec![
        mk("group_level", PairingMode::Group),
        mk("image_level", PairingMode::Image),
    ]
}

/// Threshold sweeps: tau1 over a grid at fixed tau2, and tau2 over a grid
/// at fixed tau1.
pub fn threshold_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for tau1 in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let mut cfg = base.clone();
        cfg.tau1 = tau1;
        cfg.tau2 = 0.7;
        out.push(Variant {
            name: format!("tau1_{tau1:.1}"),
            cfg,
        });
    }
    for tau2 in [0.5, 0.6, 0.7, 0.8, 0.9] {
        let mut cfg = base.clone();
        cfg.tau1 = 0.3;
        cfg.tau2 = tau2;
        out.push(Variant {
            name: format!("tau2_{tau2:.1}"),
            cfg,
        });
    }
    out
}

/// Sub-component ablations: qformer off, srca off, one-directional dense
/// loss, refinement off.
pub fn subcomponent_variants(base: &TrainConfig) -> Vec<Variant> {
    let mk = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant {
            name: name.to_string(),
            cfg,
        }
    };
    vec![
        mk("full", &|_| {}),
        mk("no_qformer", &|c| c.flags.use_qformer = false),
        mk("no_srca", &|c| c.flags.use_srca = false),
        mk("unidirectional", &|c| c.flags.bidirectional = false),
        mk("no_refinement", &|c| c.flags.refinement = false),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cv_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 1;
        cfg.batch = 8;
        cfg.num_queries = 3;
        cfg.qformer_blocks = 1;
        cfg.stage_channels = vec![8, 16];
        cfg.input_side = 8;
        cfg.refine_iterations = 1;
        cfg.teacher.epochs = 2;
        cfg.teacher.lr = 1e-2;
        cfg.seed = 3;
        cfg
    }

    /// Paired instances spread over all folds plus a few unpaired images.
    fn cv_dataset(seed: u64) -> (ImageStore, Vec<ManifestRow>) {
        let mut items = Vec::new();
        let mut rows = Vec::new();
        let mut id = 0;
        let mut mk_img = |class: usize, tag: &str| {
            let mut r = rng::stream(seed, tag);
            let mut img = rng::uniform_tensor(&mut r, vec![3, 8, 8], 0.3, 0.7);
            let boost = if class == 0 { -0.25 } else { 0.25 };
            for v in &mut img.data_mut()[64..128] {
                *v = (*v + boost).clamp(0.0, 1.0);
            }
            img
        };
        for class in 0..2usize {
            for inst in 0..10usize {
                let fold = Some(inst % NUM_FOLDS);
                for modality in [Modality::Wli, Modality::Nbi] {
                    let sid = format!("e{id}");
                    items.push((
                        sid.clone(),
                        class,
                        modality,
                        mk_img(class, &format!("p-{class}-{inst}-{}", modality.as_str())),
                    ));
                    rows.push(ManifestRow {
                        id: sid,
                        path: String::new(),
                        class,
                        modality,
                        pair_id: Some(format!("pair-{class}-{inst}")),
                        split: "paired".into(),
                        fold,
                    });
                    id += 1;
                }
            }
            // unpaired extras, one per modality
            for modality in [Modality::Wli, Modality::Nbi] {
                let sid = format!("e{id}");
                items.push((
                    sid.clone(),
                    class,
                    modality,
                    mk_img(class, &format!("u-{class}-{}", modality.as_str())),
                ));
                rows.push(ManifestRow {
                    id: sid,
                    path: String::new(),
                    class,
                    modality,
                    pair_id: None,
                    split: "unpaired".into(),
                    fold: None,
                });
                id += 1;
            }
        }
        (ImageStore::from_tensors(items).unwrap(), rows)
    }

    #[test]
    fn single_fold_runs_and_is_reproducible() {
        let mut cfg = cv_cfg();
        cfg.fold = Some(0);
        let (mut store, rows) = cv_dataset(1);
        let mut teachers = TeacherCache::default();
        let a = run_cv(&cfg, &mut store, &rows, &mut teachers).unwrap();
        let b = run_cv(&cfg, &mut store, &rows, &mut teachers).unwrap();
        assert_eq!(a.per_fold.len(), 1);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn all_folds_produce_reports() {
        let cfg = cv_cfg();
        let (mut store, rows) = cv_dataset(2);
        let mut teachers = TeacherCache::default();
        let r = run_cv(&cfg, &mut store, &rows, &mut teachers).unwrap();
        assert_eq!(r.per_fold.len(), NUM_FOLDS);
        assert_eq!(r.aggregate.folds, NUM_FOLDS);
    }

    #[test]
    fn missing_folds_is_a_manifest_error() {
        let cfg = cv_cfg();
        let (mut store, mut rows) = cv_dataset(3);
        for r in &mut rows {
            r.fold = None;
        }
        let mut teachers = TeacherCache::default();
        assert!(matches!(
            run_fold(&cfg, &mut store, &rows, 0, &mut teachers),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn unpaired_rows_never_enter_evaluation() {
        // fold_split keeps every unpaired row on the train side
        let (_, rows) = cv_dataset(4);
        for fold in 0..NUM_FOLDS {
            let (_, test) = fold_split(&rows, fold);
            assert!(test.iter().all(|r| r.pair_id.is_some()));
        }
    }

    #[test]
    fn matrix_tolerates_failing_variant_and_tracks_flags() {
        let mut base = cv_cfg();
        base.fold = Some(0);
        let mut variants = component_variants(&base);
        // sabotage one variant with an invalid threshold pair
        variants[1].cfg.tau1 = 0.9;
        let (mut store, rows) = cv_dataset(5);
        let report = run_matrix(&variants, &[3], &mut store, &rows);
        assert_eq!(report.rows.len(), 4);
        let failed: Vec<&MatrixRow> = report.rows.iter().filter(|r| !r.ok).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, "pro_only");
        assert!(failed[0].error.is_some());
        // provenance columns reflect each variant's flags
        let base_row = report.rows.iter().find(|r| r.name == "baseline").unwrap();
        assert!(!base_row.enable_pro && !base_row.enable_den);
        let full_row = report.rows.iter().find(|r| r.name == "full").unwrap();
        assert!(full_row.enable_pro && full_row.enable_den);
        // csv writes
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("matrix.csv");
        write_matrix_csv(&report, &csv_path).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn variant_builders_differ_only_in_named_flags() {
        let base = TrainConfig::default();
        for v in component_variants(&base) {
            let mut expect = base.clone();
            expect.flags.enable_pro = v.cfg.flags.enable_pro;
            expect.flags.enable_den = v.cfg.flags.enable_den;
            assert_eq!(v.cfg, expect);
        }
        for v in pairing_variants(&base) {
            let mut expect = base.clone();
            expect.flags.pairing_mode = v.cfg.flags.pairing_mode;
            assert_eq!(v.cfg, expect);
        }
        assert_eq!(threshold_variants(&base).len(), 10);
        assert_eq!(subcomponent_variants(&base).len(), 5);
    }
}
