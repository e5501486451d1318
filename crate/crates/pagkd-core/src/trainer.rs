//! Teacher pretraining, the distillation loop (L_total = L_pro + L_den +
//! L_cls), the plain cross-entropy reference trainer, inference, and
//! checkpoint IO.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::adam::{AdamState, Param};
use crate::backbone::{self, Backbone, BackboneConfig, ClassifierOutput};
use crate::config::{PairingMode, TrainConfig};
use crate::dataset::ImageStore;
use crate::dense::{
    self, AttnAudit, DenseClassTerms, RefineConfig, RelationStats, Srca, SrcaVars,
};
use crate::error::{Error, Result};
use crate::grouping::{self, GroupPlan, ManifestRow, Modality};
use crate::qformer::{self, QFormer, QFormerConfig, RefinedSet};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

// ---- checkpoint IO ----

pub fn save_checkpoint(path: &Path, sets: &[&[Param]]) -> Result<()> {
    let mut entries = Vec::new();
    for set in sets {
        for p in *set {
            entries.push((p.name.clone(), &p.value));
        }
    }
    tensor::save_archive(path, &entries)
}

/// Fills `params` from the archive by name; extra archive entries are
/// ignored, missing ones are an error.
pub fn load_into(path: &Path, params: &mut [Param]) -> Result<()> {
    let entries: HashMap<String, Tensor> = tensor::load_archive(path)?.into_iter().collect();
    for p in params {
        match entries.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "`{}`: shape {:?} in archive, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "archive is missing parameter `{}`",
                    p.name
                )))
            }
        }
    }
    Ok(())
}

/// FNV-1a over the exact parameter bytes; used for frozenness checks.
pub fn params_digest(params: &[Param]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for p in params {
        eat(p.name.as_bytes());
        for &v in p.value.data() {
            eat(&v.to_le_bytes());
        }
    }
    h
}

// ---- teacher pretraining ----

fn backbone_config(cfg: &TrainConfig, in_channels: usize, num_classes: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels,
        stage_channels: cfg.stage_channels.clone(),
        input_side: cfg.input_side,
        num_classes,
        layer_norm: cfg.layer_norm,
    }
}

/// Plain cross-entropy minibatch training of the teacher on NBI ids.
/// Returns the trained (not yet frozen) backbone and its final train
/// accuracy.
pub fn pretrain_teacher(
    cfg: &TrainConfig,
    store: &ImageStore,
    nbi_ids: &[String],
) -> Result<(Backbone, f64)> {
    if nbi_ids.is_empty() {
        return Err(Error::Data("teacher pretraining needs a non-empty NBI split".into()));
    }
    let bcfg = backbone_config(cfg, store.image_shape[0], store.num_classes);
    let mut teacher = Backbone::init(bcfg, "teacher", cfg.seed)?;
    let mut adam = AdamState::new(cfg.teacher.lr, cfg.teacher.weight_decay);
    let mut ids = nbi_ids.to_vec();
    for epoch in 0..cfg.teacher.epochs {
        let mut r = rng::stream(cfg.seed, &format!("teacher-epoch-{epoch}"));
        ids.shuffle(&mut r);
        for chunk in ids.chunks(cfg.teacher.batch) {
            let images = store.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|id| store.class(id)).collect::<Result<_>>()?;
            let tape = Tape::new();
            let vars = teacher.bind(&tape);
            let x = tape.constant(images);
            let out = teacher.forward(&tape, &vars, x)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            tape.backward(loss)?;
            teacher.collect_grads(&tape, &vars);
            adam.step(&mut teacher.params)?;
        }
    }
    // final train accuracy
    let (probs, labels) = run_inference(&teacher, store, nbi_ids)?;
    let mut correct = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let c = probs.cols();
        let pred = (0..c)
            .max_by(|&a, &b| probs.at2(i, a).partial_cmp(&probs.at2(i, b)).unwrap())
            .unwrap();
        if pred == l {
            correct += 1;
        }
    }
    Ok((teacher, correct as f64 / labels.len() as f64))
}

// ---- inference ----

/// Per-image class probabilities over `ids`, in order, plus their labels.
/// Needs only the backbone — no teacher, qformer, or srca weights.
pub fn run_inference(
    model: &Backbone,
    store: &ImageStore,
    ids: &[String],
) -> Result<(Tensor, Vec<usize>)> {
    if ids.is_empty() {
        return Err(Error::Data("no images to score".into()));
    }
    let c = model.cfg.num_classes;
    let mut data = Vec::with_capacity(ids.len() * c);
    let mut labels = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(32) {
        let images = store.batch(chunk)?;
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let x = tape.constant(images);
        let out = model.forward(&tape, &vars, x)?;
        let probs = tape.softmax_rows(out.logits)?;
        data.extend_from_slice(tape.value(probs).data());
        for id in chunk {
            labels.push(store.class(id)?);
        }
    }
    Ok((Tensor::new(vec![ids.len(), c], data), labels))
}

// ---- losses ----

/// Class-balanced cross entropy: 1/C Σ_c (1/N_c Σ_i CE). `items` holds one
/// or more logit blocks per class, each with a single label.
pub fn classification_loss(tape: &Tape, items: &[(Var, usize)]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Data("classification loss over zero groups".into()));
    }
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for &(logits, label) in items {
        *per_class.entry(label).or_default() += tape.shape(logits)[0];
    }
    let c = per_class.len() as f64;
    let mut terms = Vec::with_capacity(items.len());
    for &(logits, label) in items {
        let n = tape.shape(logits)[0];
        let labels = vec![label; n];
        let ce = tape.cross_entropy(logits, &labels)?; // mean over this block
        let weight = n as f64 / per_class[&label] as f64 / c;
        terms.push(tape.scale(ce, weight));
    }
    tape.add_n(&terms)
}

// ---- the distiller ----

#[derive(Debug, Clone, Serialize)]
pub struct RelationSummary {
    pub units: usize,
    pub matched_frac: f64,
    pub amb_frac: f64,
    pub fg_frac_wli: f64,
    pub fg_frac_nbi: f64,
    pub all_masked_rows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    pub l_pro: f64,
    pub l_den: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    /// Gradient norm over the student backbone alone, to show how the
    /// distillation heads' gradients split between the trunk and their
    /// own parameters.
    pub grad_norm_student: f64,
    pub relation: Option<RelationSummary>,
}

/// One distillation unit: the feature sets contrasted / reconstructed
/// against each other. Group mode has one unit per class; image mode one
/// per sampled cross-modal pair.
struct Unit {
    set_id: usize,
    class: usize,
    wli_ids: Vec<String>,
    nbi_ids: Vec<String>,
}

pub struct Distiller {
    pub cfg: TrainConfig,
    pub teacher: Backbone,
    pub student: Backbone,
    pub qformer: QFormer,
    pub srca: Srca,
    pub adam: AdamState,
    pub plan: GroupPlan,
    pub audit: AttnAudit,
    pub epoch: usize,
    pub step: usize,
    pair_partner: HashMap<String, String>,
    feature_dims: (usize, usize, usize), // (d, h, w)
}

impl Distiller {
    /// `teacher` must already be frozen. `train_rows` defines both the
    /// group plan and the pair-id lookup for image/mixed pairing.
    pub fn new(
        cfg: TrainConfig,
        store: &ImageStore,
        teacher: Backbone,
        train_rows: &[ManifestRow],
    ) -> Result<Self> {
        cfg.validate()?;
        if !teacher.is_frozen() {
            return Err(Error::Config("teacher must be frozen before distillation".into()));
        }
        let bcfg = backbone_config(&cfg, store.image_shape[0], store.num_classes);
        let feature_dims = bcfg.feature_dims();
        let (d, _, _) = feature_dims;
        let student = Backbone::init(bcfg, "student", cfg.seed)?;
        let mut qformer = QFormer::init(
            QFormerConfig {
                num_queries: cfg.num_queries,
                dim: d,
                blocks: cfg.qformer_blocks,
            },
            cfg.seed,
        );
        for p in &mut qformer.params {
            p.lr_scale = cfg.qformer_lr_scale;
        }
        let srca = Srca::init(d, cfg.seed)?;
        let adam = AdamState::new(cfg.lr, cfg.weight_decay);
        let plan = grouping::plan_groups(train_rows, cfg.batch, cfg.reform_period, cfg.seed)?;
        // partner lookup over rows that share a pair id
        let mut by_pair: HashMap<String, Vec<String>> = HashMap::new();
        for r in train_rows {
            if let Some(p) = &r.pair_id {
                by_pair.entry(p.clone()).or_default().push(r.id.clone());
            }
        }
        let mut pair_partner = HashMap::new();
        for ids in by_pair.values() {
            if ids.len() == 2 {
                pair_partner.insert(ids[0].clone(), ids[1].clone());
                pair_partner.insert(ids[1].clone(), ids[0].clone());
            }
        }
        Ok(Distiller {
            cfg,
            teacher,
            student,
            qformer,
            srca,
            adam,
            plan,
            audit: AttnAudit::default(),
            epoch: 0,
            step: 0,
            pair_partner,
            feature_dims,
        })
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            iterations: self.cfg.refine_iterations,
            sigma_color: self.cfg.refine_sigma_color,
            sigma_spatial: self.cfg.refine_sigma_spatial,
            identity: !self.cfg.flags.refinement,
        }
    }

    /// Splits the batch's (class, modality) cells into distillation units
    /// per the pairing mode.
    fn build_units(&self, batch: &[(usize, Modality, Vec<String>)]) -> Vec<Unit> {
        let mut per_class: BTreeMap<usize, (Vec<String>, Vec<String>)> = BTreeMap::new();
        for (class, modality, ids) in batch {
            let entry = per_class.entry(*class).or_default();
            match modality {
                Modality::Wli => entry.0.extend(ids.iter().cloned()),
                Modality::Nbi => entry.1.extend(ids.iter().cloned()),
            }
        }
        let mut units = Vec::new();
        let mut pseudo = 1_000_000; // set ids for image-level pairs, clear of class ids
        let mut r = rng::stream(
            self.cfg.seed,
            &format!("pairing-{}-{}", self.epoch, self.step),
        );
        for (class, (wli, nbi)) in per_class {
            match self.cfg.flags.pairing_mode {
                PairingMode::Group => units.push(Unit {
                    set_id: class,
                    class,
                    wli_ids: wli,
                    nbi_ids: nbi,
                }),
                PairingMode::Image | PairingMode::Mixed => {
                    let mixed = self.cfg.flags.pairing_mode == PairingMode::Mixed;
                    let mut wli_left = wli;
                    let mut nbi_left = nbi;
                    // true pairs first
                    let mut pairs = Vec::new();
                    let mut i = 0;
                    while i < wli_left.len() {
                        let partner = self.pair_partner.get(&wli_left[i]);
                        if let Some(p) = partner {
                            if let Some(j) = nbi_left.iter().position(|n| n == p) {
                                pairs.push((wli_left.remove(i), nbi_left.remove(j)));
                                continue;
                            }
                        }
                        i += 1;
                    }
                    if !mixed {
                        // image mode: randomly match the rest one-to-one
                        wli_left.shuffle(&mut r);
                        nbi_left.shuffle(&mut r);
                        while let (Some(w), Some(n)) = (wli_left.pop(), nbi_left.pop()) {
                            pairs.push((w, n));
                        }
                    }
                    for (w, n) in pairs {
                        units.push(Unit {
                            set_id: pseudo,
                            class,
                            wli_ids: vec![w],
                            nbi_ids: vec![n],
                        });
                        pseudo += 1;
                    }
                    // mixed mode: leftovers stay a group when both sides survive
                    if mixed && !wli_left.is_empty() && !nbi_left.is_empty() {
                        units.push(Unit {
                            set_id: class,
                            class,
                            wli_ids: wli_left,
                            nbi_ids: nbi_left,
                        });
                    }
                }
            }
        }
        units
    }

    /// CAM position labels for one group, in flattened row order.
    fn cam_labels(
        &self,
        tape: &Tape,
        out: &ClassifierOutput,
        class: usize,
        guide: &Tensor,
    ) -> Result<Vec<dense::CamLabel>> {
        let cam = backbone::compute_cam(tape, out, class)?;
        let refined = dense::refine_cam(&cam, guide, &self.refine_config());
        dense::tri_threshold(refined.data(), self.cfg.tau1, self.cfg.tau2)
    }

    pub fn distill_step(&mut self, store: &ImageStore) -> Result<StepReport> {
        let batch = grouping::next_batch_ids(&mut self.plan);
        let flags = self.cfg.flags.clone();
        let distilling = flags.enable_pro || flags.enable_den;
        let units = if distilling {
            self.build_units(&batch)
        } else {
            // plain CE path: class groups only, no teacher side needed
            batch
                .iter()
                .filter(|(_, m, _)| *m == Modality::Wli)
                .map(|(class, _, ids)| Unit {
                    set_id: *class,
                    class: *class,
                    wli_ids: ids.clone(),
                    nbi_ids: Vec::new(),
                })
                .collect()
        };

        let tape = Tape::new();
        let s_vars = self.student.bind(&tape);
        let t_vars = distilling.then(|| self.teacher.bind(&tape));
        let q_vars = (flags.enable_pro && flags.use_qformer).then(|| self.qformer.bind(&tape));
        let srca_vars = (flags.enable_den && flags.use_srca).then(|| self.srca.bind(&tape));
        let (d, h, w) = self.feature_dims;

        let mut cls_items: Vec<(Var, usize)> = Vec::new();
        let mut refined_sets: Vec<RefinedSet> = Vec::new();
        let mut dense_terms: Vec<DenseClassTerms> = Vec::new();
        let mut relation_acc: Vec<RelationStats> = Vec::new();

        for unit in &units {
            let wli_images = store.batch(&unit.wli_ids)?;
            let wli_in = tape.constant(wli_images.clone());
            let s_out = self.student.forward(&tape, &s_vars, wli_in)?;
            cls_items.push((s_out.logits, unit.class));
            if !distilling {
                continue;
            }
            let nbi_images = store.batch(&unit.nbi_ids)?;
            let nbi_in = tape.constant(nbi_images.clone());
            let t_out = self
                .teacher
                .forward(&tape, t_vars.as_ref().unwrap(), nbi_in)?;
            let f_wli = tape.nchw_to_rows(s_out.features)?;
            let f_nbi = tape.nchw_to_rows(t_out.features)?;

            if flags.enable_pro {
                let make_set = |feat: Var, modality: Modality, n_imgs: usize| -> Result<Var> {
                    if flags.use_qformer {
                        let pos = qformer::tiled_positional_encoding(n_imgs, h, w, d);
                        self.qformer
                            .forward(&tape, q_vars.as_ref().unwrap(), feat, &pos)
                    } else {
                        // ablation: per-group mean of GAP image vectors
                        let gap = match modality {
                            Modality::Wli => s_out.gap,
                            Modality::Nbi => t_out.gap,
                        };
                        tape.reshape(tape.mean_rows(gap), vec![1, d])
                    }
                };
                refined_sets.push(RefinedSet {
                    class: unit.set_id,
                    modality: Modality::Wli,
                    queries: make_set(f_wli, Modality::Wli, unit.wli_ids.len())?,
                });
                refined_sets.push(RefinedSet {
                    class: unit.set_id,
                    modality: Modality::Nbi,
                    queries: make_set(f_nbi, Modality::Nbi, unit.nbi_ids.len())?,
                });
            }

            if flags.enable_den {
                let labels_wli = self.cam_labels(&tape, &s_out, unit.class, &wli_images)?;
                let labels_nbi = self.cam_labels(&tape, &t_out, unit.class, &nbi_images)?;
                let rel = dense::build_relation(&labels_wli, &labels_nbi);
                relation_acc.push(rel.stats.clone());
                let recon_wli =
                    self.reconstruct(&tape, &srca_vars, f_wli, f_nbi, &rel.bias)?;
                let recon_nbi = if flags.bidirectional {
                    self.reconstruct(&tape, &srca_vars, f_nbi, f_wli, &rel.transposed())?
                } else {
                    f_nbi
                };
                dense_terms.push(DenseClassTerms {
                    f_wli,
                    recon_wli,
                    f_nbi,
                    recon_nbi,
                });
            }
        }

        let l_cls = classification_loss(&tape, &cls_items)?;
        let mut parts = vec![l_cls];
        let l_pro = if flags.enable_pro {
            let l = qformer::contrastive_loss(&tape, &refined_sets)?;
            parts.push(l);
            Some(l)
        } else {
            None
        };
        let l_den = if flags.enable_den {
            let l = dense::dense_loss(&tape, &dense_terms, flags.norm_mode, flags.bidirectional)?;
            parts.push(l);
            Some(l)
        } else {
            None
        };
        let l_total = tape.add_n(&parts)?;

        let report_partial = |grad_norm: f64, grad_norm_student: f64| StepReport {
            epoch: self.epoch,
            step: self.step,
            l_pro: l_pro.map_or(0.0, |v| tape.item(v)),
            l_den: l_den.map_or(0.0, |v| tape.item(v)),
            l_cls: tape.item(l_cls),
            l_total: tape.item(l_total),
            grad_norm,
            grad_norm_student,
            relation: summarize_relations(&relation_acc),
        };
        if !tape.item(l_total).is_finite() {
            let snap = report_partial(f64::NAN, f64::NAN);
            return Err(Error::Aborted(format!(
                "non-finite loss at epoch {} step {}: {}",
                self.epoch,
                self.step,
                serde_json::to_string(&snap).unwrap_or_default()
            )));
        }

        tape.backward(l_total)?;
        self.student.collect_grads(&tape, &s_vars);
        if let Some(qv) = &q_vars {
            self.qformer.collect_grads(&tape, qv);
        }
        if let Some(sv) = &srca_vars {
            self.srca.collect_grads(&tape, sv);
        }

        let mut grad_sq = 0.0;
        let mut student_sq = 0.0;
        let mut all: Vec<Param> = Vec::new();
        all.append(&mut self.student.params);
        let n_student = all.len();
        if q_vars.is_some() {
            all.append(&mut self.qformer.params);
        }
        let n_qf = all.len() - n_student;
        if srca_vars.is_some() {
            all.append(&mut self.srca.params);
        }
        for (i, p) in all.iter().enumerate() {
            if let Some(g) = &p.grad {
                let s: f64 = g.data().iter().map(|v| v * v).sum();
                grad_sq += s;
                if i < n_student {
                    student_sq += s;
                }
            }
        }
        let step_result = self.adam.step(&mut all);
        // restore ownership before surfacing any error
        let mut rest = all.split_off(n_student);
        self.student.params = all;
        if q_vars.is_some() {
            let tail = rest.split_off(n_qf);
            self.qformer.params = rest;
            rest = tail;
        }
        if srca_vars.is_some() {
            self.srca.params = rest;
        }
        step_result?;

        let report = report_partial(grad_sq.sqrt(), student_sq.sqrt());
        self.step += 1;
        Ok(report)
    }

    fn reconstruct(
        &self,
        tape: &Tape,
        srca_vars: &Option<SrcaVars>,
        f_dst: Var,
        f_src: Var,
        bias: &Tensor,
    ) -> Result<Var> {
        match srca_vars {
            Some(vars) => dense::srca_reconstruct(
                tape,
                vars,
                f_dst,
                f_src,
                Some(bias),
                Some(&self.audit),
            ),
            None => {
                // ablation: relation-masked uniform averaging of source rows
                let (eb, fallbacks) = dense::bias_with_fallback(bias);
                self.audit
                    .fallback_rows
                    .set(self.audit.fallback_rows.get() + fallbacks);
                let zeros = tape.constant(Tensor::zeros(bias.shape().to_vec()));
                let attn = tape.masked_softmax(zeros, Some(&eb))?;
                tape.matmul(attn, f_src)
            }
        }
    }

    /// Runs the full loop: reform on schedule, one epoch = one cycling
    /// pass over the batch budget, optional JSONL step log and periodic
    /// checkpoints.
    pub fn train(
        &mut self,
        store: &ImageStore,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        for epoch in 0..self.cfg.epochs {
            self.epoch = epoch;
            self.plan = grouping::reform(&self.plan, epoch);
            for _ in 0..grouping::batches_per_epoch(&self.plan) {
                let report = self.distill_step(store)?;
                if let Some(log) = log.as_deref_mut() {
                    serde_json::to_writer(&mut *log, &report)
                        .map_err(|e| Error::Data(format!("step log: {e}")))?;
                    writeln!(log)?;
                }
                reports.push(report);
            }
            if let Some(dir) = checkpoint_dir {
                if (epoch + 1) % self.cfg.checkpoint_every == 0 || epoch + 1 == self.cfg.epochs {
                    self.save(&dir.join(format!("epoch_{:04}.pgkd", epoch + 1)))?;
                }
            }
        }
        Ok(reports)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &[
                &self.student.params,
                &self.teacher.params,
                &self.qformer.params,
                &self.srca.params,
            ],
        )
    }

    /// Relation-matrix statistics for the next batch, without touching any
    /// trainable state (the batch cursor does advance).
    pub fn inspect_relations(&mut self, store: &ImageStore) -> Result<Vec<RelationStats>> {
        let batch = grouping::next_batch_ids(&mut self.plan);
        let units = self.build_units(&batch);
        let tape = Tape::new();
        let s_vars = self.student.bind(&tape);
        let t_vars = self.teacher.bind(&tape);
        let mut stats = Vec::new();
        for unit in &units {
            if unit.wli_ids.is_empty() || unit.nbi_ids.is_empty() {
                continue;
            }
            let wli_images = store.batch(&unit.wli_ids)?;
            let nbi_images = store.batch(&unit.nbi_ids)?;
            let s_out = self
                .student
                .forward(&tape, &s_vars, tape.constant(wli_images.clone()))?;
            let t_out = self
                .teacher
                .forward(&tape, &t_vars, tape.constant(nbi_images.clone()))?;
            let labels_wli = self.cam_labels(&tape, &s_out, unit.class, &wli_images)?;
            let labels_nbi = self.cam_labels(&tape, &t_out, unit.class, &nbi_images)?;
            stats.push(dense::build_relation(&labels_wli, &labels_nbi).stats);
        }
        Ok(stats)
    }
}

fn summarize_relations(stats: &[RelationStats]) -> Option<RelationSummary> {
    if stats.is_empty() {
        return None;
    }
    let n = stats.len() as f64;
    Some(RelationSummary {
        units: stats.len(),
        matched_frac: stats.iter().map(|s| s.matched_frac).sum::<f64>() / n,
        amb_frac: stats.iter().map(|s| s.amb_frac).sum::<f64>() / n,
        fg_frac_wli: stats.iter().map(|s| s.fg_frac_wli).sum::<f64>() / n,
        fg_frac_nbi: stats.iter().map(|s| s.fg_frac_nbi).sum::<f64>() / n,
        all_masked_rows: stats.iter().map(|s| s.all_masked_rows).sum(),
    })
}

/// Reference trainer: identical group plan, student init, and optimizer,
/// but the loss is plain class-balanced cross entropy on the WLI groups.
/// The acceptance contract is a bit-identical loss trace against the
/// distiller with both components disabled.
pub fn train_plain_ce(
    cfg: &TrainConfig,
    store: &ImageStore,
    train_rows: &[ManifestRow],
) -> Result<(Backbone, Vec<StepReport>)> {
    let bcfg = backbone_config(cfg, store.image_shape[0], store.num_classes);
    let mut student = Backbone::init(bcfg, "student", cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut plan = grouping::plan_groups(train_rows, cfg.batch, cfg.reform_period, cfg.seed)?;
    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        plan = grouping::reform(&plan, epoch);
        for _ in 0..grouping::batches_per_epoch(&plan) {
            let batch = grouping::next_batch_ids(&mut plan);
            let tape = Tape::new();
            let s_vars = student.bind(&tape);
            let mut cls_items = Vec::new();
            let mut grad_sq = 0.0;
            for (class, modality, ids) in &batch {
                if *modality != Modality::Wli {
                    continue;
                }
                let images = store.batch(ids)?;
                let out = student.forward(&tape, &s_vars, tape.constant(images))?;
                cls_items.push((out.logits, *class));
            }
            let loss = classification_loss(&tape, &cls_items)?;
            tape.backward(loss)?;
            student.collect_grads(&tape, &s_vars);
            for p in &student.params {
                if let Some(g) = &p.grad {
                    grad_sq += g.data().iter().map(|v| v * v).sum::<f64>();
                }
            }
            adam.step(&mut student.params)?;
            reports.push(StepReport {
                epoch,
                step,
                l_pro: 0.0,
                l_den: 0.0,
                l_cls: tape.item(loss),
                l_total: tape.item(loss),
                grad_norm: grad_sq.sqrt(),
                grad_norm_student: grad_sq.sqrt(),
                relation: None,
            });
            step += 1;
        }
    }
    Ok((student, reports))
}
