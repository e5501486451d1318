//! Group-level dense distillation: pixel-adaptive CAM refinement,
//! tri-thresholding into {background, lesion, ambiguous}, the semantic
//! relation matrix, relation-guided cross-attention reconstruction, and
//! the bidirectional consistency loss.

use std::cell::Cell;

use crate::adam::Param;
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, NEG_INF};

// ---- CAM refinement ----

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub iterations: usize,
    pub sigma_color: f64,
    pub sigma_spatial: f64,
    /// Skip refinement entirely (ablation).
    pub identity: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 10,
            sigma_color: 0.1,
            sigma_spatial: 1.0,
            identity: false,
        }
    }
}

/// Local affinity smoothing of a normalized CAM [N, h, w], guided by the
/// input images [N, ch, H, W] (downsampled to h x w). Each pixel becomes an
/// affinity-weighted average of its 8-neighborhood; affinities are a
/// softmax over neighbors of -(color distance / sigma_c + spatial distance
/// / sigma_s). Values are clamped to [0, 1] after every iteration.
pub fn refine_cam(cam: &Tensor, guide: &Tensor, cfg: &RefineConfig) -> Tensor {
    if cfg.identity || cfg.iterations == 0 {
        return cam.clone();
    }
    let s = cam.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let gs = guide.shape();
    let (ch, gh, gw) = (gs[1], gs[2], gs[3]);
    let small = downsample_guide(guide, n, ch, gh, gw, h, w);
    let mut out = cam.data().to_vec();
    let mut next = vec![0.0; out.len()];
    for img in 0..n {
        // neighbor weights from the guide, computed once per image
        let weights = affinity_weights(&small[img * ch * h * w..(img + 1) * ch * h * w], ch, h, w, cfg);
        let plane_range = img * h * w..(img + 1) * h * w;
        for _ in 0..cfg.iterations {
            let src = &out[plane_range.clone()];
            let dst = &mut next[plane_range.clone()];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let p = (y * w as isize + x) as usize;
                    let mut acc = 0.0;
                    for (k, (dy, dx)) in NEIGHBORS.iter().enumerate() {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        acc += weights[p * 8 + k] * src[(ny * w as isize + nx) as usize];
                    }
                    dst[p] = acc.clamp(0.0, 1.0);
                }
            }
            out[plane_range.clone()].copy_from_slice(&next[plane_range.clone()]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn downsample_guide(
    guide: &Tensor,
    n: usize,
    ch: usize,
    gh: usize,
    gw: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (fy, fx) = (gh / h, gw / w);
    let mut out = vec![0.0; n * ch * h * w];
    for img in 0..n {
        for c in 0..ch {
            let src = &guide.data()[(img * ch + c) * gh * gw..(img * ch + c + 1) * gh * gw];
            let dst = &mut out[(img * ch + c) * h * w..(img * ch + c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for yy in 0..fy {
                        for xx in 0..fx {
                            s += src[(y * fy + yy) * gw + x * fx + xx];
                        }
                    }
                    dst[y * w + x] = s / (fy * fx) as f64;
                }
            }
        }
    }
    out
}

/// Softmax affinity over the (existing) 8-neighborhood of every pixel;
/// weights of out-of-bounds neighbors are 0.
fn affinity_weights(small: &[f64], ch: usize, h: usize, w: usize, cfg: &RefineConfig) -> Vec<f64> {
    let hw = h * w;
    let mut weights = vec![0.0; hw * 8];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = (y * w as isize + x) as usize;
            let mut logits = [f64::NEG_INFINITY; 8];
            for (k, (dy, dx)) in NEIGHBORS.iter().enumerate() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                    continue;
                }
                let q = (ny * w as isize + nx) as usize;
                let mut color2 = 0.0;
                for c in 0..ch {
                    let d = small[c * hw + p] - small[c * hw + q];
                    color2 += d * d;
                }
                let spatial = ((dy * dy + dx * dx) as f64).sqrt();
                logits[k] = -(color2.sqrt() / cfg.sigma_color + spatial / cfg.sigma_spatial);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut e = [0.0; 8];
            for k in 0..8 {
                if logits[k] > f64::NEG_INFINITY {
                    e[k] = (logits[k] - max).exp();
                    z += e[k];
                }
            }
            for k in 0..8 {
                weights[p * 8 + k] = e[k] / z;
            }
        }
    }
    weights
}

// ---- tri-thresholding and the relation matrix ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamLabel {
    Background,
    Foreground,
    Ambiguous,
}

/// v < tau1 -> background, v > tau2 -> foreground, the inclusive middle
/// band (boundaries included) -> ambiguous.
pub fn tri_threshold(values: &[f64], tau1: f64, tau2: f64) -> Result<Vec<CamLabel>> {
    if !(0.0 < tau1 && tau1 < tau2 && tau2 < 1.0) {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 < tau1 < tau2 < 1, got ({tau1}, {tau2})"
        )));
    }
    Ok(values
        .iter()
        .map(|&v| {
            if v < tau1 {
                CamLabel::Background
            } else if v > tau2 {
                CamLabel::Foreground
            } else {
                CamLabel::Ambiguous
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct RelationStats {
    pub rows: usize,
    pub cols: usize,
    pub matched: usize,
    pub fg_frac_wli: f64,
    pub fg_frac_nbi: f64,
    pub amb_frac: f64,
    pub matched_frac: f64,
    pub all_masked_rows: usize,
}

/// Additive attention bias between WLI positions (rows) and NBI positions
/// (columns): 0 where both labels are confident and equal, the negative
/// sentinel everywhere else.
#[derive(Debug, Clone)]
pub struct RelationMatrix {
    pub bias: Tensor,
    pub stats: RelationStats,
}

pub fn build_relation(labels_wli: &[CamLabel], labels_nbi: &[CamLabel]) -> RelationMatrix {
    let (rows, cols) = (labels_wli.len(), labels_nbi.len());
    let mut bias = vec![NEG_INF; rows * cols];
    let mut matched = 0usize;
    let mut all_masked_rows = 0usize;
    for (p, &lw) in labels_wli.iter().enumerate() {
        let mut row_matched = 0usize;
        if lw != CamLabel::Ambiguous {
            for (q, &ln) in labels_nbi.iter().enumerate() {
                if ln == lw {
                    bias[p * cols + q] = 0.0;
                    row_matched += 1;
                }
            }
        }
        matched += row_matched;
        if row_matched == 0 {
            all_masked_rows += 1;
        }
    }
    let count = |labels: &[CamLabel], want: CamLabel| {
        labels.iter().filter(|&&l| l == want).count() as f64
    };
    let amb = count(labels_wli, CamLabel::Ambiguous) + count(labels_nbi, CamLabel::Ambiguous);
    let stats = RelationStats {
        rows,
        cols,
        matched,
        fg_frac_wli: count(labels_wli, CamLabel::Foreground) / rows as f64,
        fg_frac_nbi: count(labels_nbi, CamLabel::Foreground) / cols as f64,
        amb_frac: amb / (rows + cols) as f64,
        matched_frac: matched as f64 / (rows * cols) as f64,
        all_masked_rows,
    };
    RelationMatrix {
        bias: Tensor::new(vec![rows, cols], bias),
        stats,
    }
}

impl RelationMatrix {
    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.bias.rows(), self.bias.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.bias.at2(i, j);
            }
        }
        Tensor::new(vec![c, r], data)
    }
}

/// Replaces all-sentinel rows with zero bias (plain attention) so the
/// softmax never sees a fully masked row; returns the fallback row count.
pub fn bias_with_fallback(bias: &Tensor) -> (Tensor, usize) {
    let (r, c) = (bias.rows(), bias.cols());
    let mut out = bias.data().to_vec();
    let mut fallbacks = 0;
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        if row.iter().all(|&v| v == NEG_INF) {
            row.fill(0.0);
            fallbacks += 1;
        }
    }
    (Tensor::new(vec![r, c], out), fallbacks)
}

// ---- SRCA ----

pub struct Srca {
    pub dim: usize,
    pub params: Vec<Param>, // srca.wq [d, d/4], srca.wk [d, d/4], srca.wv [d, d]
}

pub struct SrcaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// wq and wk project to d/4, wv keeps d.
pub fn srca_param_count(d: usize) -> usize {
    2 * d * (d / 4) + d * d
}

impl Srca {
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(Error::Config(format!(
                "srca feature dim {dim} must be divisible by 4"
            )));
        }
        let mut rng = rng::stream(seed, "srca-init");
        let std = (1.0 / dim as f64).sqrt();
        let params = vec![
            Param::new("srca.wq", rng::normal_tensor(&mut rng, vec![dim, dim / 4], std)),
            Param::new("srca.wk", rng::normal_tensor(&mut rng, vec![dim, dim / 4], std)),
            Param::new("srca.wv", rng::normal_tensor(&mut rng, vec![dim, dim], std)),
        ];
        Ok(Srca { dim, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &Tape) -> SrcaVars {
        SrcaVars {
            wq: tape.leaf(self.params[0].value.clone(), self.params[0].trainable),
            wk: tape.leaf(self.params[1].value.clone(), self.params[1].trainable),
            wv: tape.leaf(self.params[2].value.clone(), self.params[2].trainable),
        }
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &SrcaVars) {
        for (p, v) in self.params.iter_mut().zip([vars.wq, vars.wk, vars.wv]) {
            p.grad = tape.grad(v);
        }
    }
}

/// Counters for the runtime attention-correctness audit: every attention
/// row must sum to 1 and sentinel-masked entries must be exactly 0.
#[derive(Debug, Default)]
pub struct AttnAudit {
    pub rows_checked: Cell<usize>,
    pub row_sum_violations: Cell<usize>,
    pub mask_violations: Cell<usize>,
    pub fallback_rows: Cell<usize>,
}

/// Reconstructs src-side features in the dst coordinate space:
/// A = softmax(R + (F_dst Wq)(F_src Wk)^T / sqrt(d/4)), output A (F_src Wv).
/// Rows of `bias` that are entirely masked fall back to zero bias first.
pub fn srca_reconstruct(
    tape: &Tape,
    vars: &SrcaVars,
    f_dst: Var,
    f_src: Var,
    bias: Option<&Tensor>,
    audit: Option<&AttnAudit>,
) -> Result<Var> {
    let d = tape.shape(f_dst)[1];
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "srca feature dim {d} must be divisible by 4"
        )));
    }
    let q = tape.matmul(f_dst, vars.wq)?;
    let k = tape.matmul(f_src, vars.wk)?;
    let v = tape.matmul(f_src, vars.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.scale(tape.matmul(q, kt)?, 1.0 / ((d / 4) as f64).sqrt());
    let (effective_bias, fallbacks) = match bias {
        Some(b) => {
            let (eb, n) = bias_with_fallback(b);
            (Some(eb), n)
        }
        None => (None, 0),
    };
    let attn = tape.masked_softmax(scores, effective_bias.as_ref())?;
    if let Some(audit) = audit {
        audit.fallback_rows.set(audit.fallback_rows.get() + fallbacks);
        let a = tape.value(attn);
        let (r, c) = (a.rows(), a.cols());
        audit.rows_checked.set(audit.rows_checked.get() + r);
        for i in 0..r {
            let row = &a.data()[i * c..(i + 1) * c];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                audit.row_sum_violations.set(audit.row_sum_violations.get() + 1);
            }
            if let Some(eb) = effective_bias.as_ref() {
                for j in 0..c {
                    if eb.at2(i, j) == NEG_INF && row[j] != 0.0 {
                        audit.mask_violations.set(audit.mask_violations.get() + 1);
                    }
                }
            }
        }
    }
    tape.matmul(attn, v)
}

// ---- dense consistency loss ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Prefactor 1/(C * L_wli^2) over position sums, with the WLI-side
    /// length squared used for both directions.
    Squared,
    /// Per-direction mean over positions, averaged over 2C terms.
    Mean,
}

/// One class's original and reconstructed feature sets.
pub struct DenseClassTerms {
    /// [L_wli, d] original WLI features.
    pub f_wli: Var,
    /// [L_wli, d] NBI features reconstructed in WLI space.
    pub recon_wli: Var,
    /// [L_nbi, d] original NBI features.
    pub f_nbi: Var,
    /// [L_nbi, d] WLI features reconstructed in NBI space.
    pub recon_nbi: Var,
}

/// Bidirectional consistency loss over all classes. `bidirectional: false`
/// keeps only the WLI-side term (ablation).
pub fn dense_loss(
    tape: &Tape,
    per_class: &[DenseClassTerms],
    mode: NormMode,
    bidirectional: bool,
) -> Result<Var> {
    let c = per_class.len();
    let mut terms = Vec::with_capacity(2 * c);
    for t in per_class {
        if tape.shape(t.f_wli) != tape.shape(t.recon_wli) {
            return Err(Error::Dimension {
                op: "dense_loss wli",
                lhs: tape.shape(t.f_wli),
                rhs: tape.shape(t.recon_wli),
            });
        }
        if bidirectional && tape.shape(t.f_nbi) != tape.shape(t.recon_nbi) {
            return Err(Error::Dimension {
                op: "dense_loss nbi",
                lhs: tape.shape(t.f_nbi),
                rhs: tape.shape(t.recon_nbi),
            });
        }
        let l_wli = tape.shape(t.f_wli)[0];
        let wli_norms = tape.row_norm(tape.sub(t.f_wli, t.recon_wli)?);
        match mode {
            NormMode::Squared => {
                // 1/(C * L_wli^2) prefactor, WLI-side L for both directions
                let factor = 1.0 / (c as f64 * (l_wli * l_wli) as f64);
                terms.push(tape.scale(tape.sum_all(wli_norms), factor));
                if bidirectional {
                    let nbi_norms = tape.row_norm(tape.sub(t.f_nbi, t.recon_nbi)?);
                    terms.push(tape.scale(tape.sum_all(nbi_norms), factor));
                }
            }
            NormMode::Mean => {
                let denom = if bidirectional { 2 * c } else { c } as f64;
                terms.push(tape.scale(tape.mean_all(wli_norms), 1.0 / denom));
                if bidirectional {
                    let nbi_norms = tape.row_norm(tape.sub(t.f_nbi, t.recon_nbi)?);
                    terms.push(tape.scale(tape.mean_all(nbi_norms), 1.0 / denom));
                }
            }
        }
    }
    tape.add_n(&terms)
}
