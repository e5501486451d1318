//! Group-level prototype distillation: shared lesion queries refined per
//! group by stacked self-attention / cross-attention blocks, per-index
//! cosine similarity between refined sets, and the symmetric group-level
//! contrastive loss.

use crate::adam::Param;
use crate::error::{Error, Result};
use crate::grouping::Modality;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct QFormerConfig {
    /// Shared lesion query count N_q.
    pub num_queries: usize,
    /// Feature dimension d.
    pub dim: usize,
    /// Stacked blocks T.
    pub blocks: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        QFormerConfig {
            num_queries: 12,
            dim: 64,
            blocks: 2,
        }
    }
}

/// Per block: self-attention q/k/v [d,d] and cross-attention q/k/v/out [d,d].
/// Plus the shared query table [N_q, d]. No feed-forward sublayer.
pub fn qformer_param_count(cfg: &QFormerConfig) -> usize {
    cfg.blocks * 7 * cfg.dim * cfg.dim + cfg.num_queries * cfg.dim
}

pub struct QFormer {
    pub cfg: QFormerConfig,
    pub params: Vec<Param>,
}

pub struct QFormerVars {
    pub queries: Var,
    blocks: Vec<[Var; 7]>, // sa.wq, sa.wk, sa.wv, ca.wq, ca.wk, ca.wv, ca.wo
}

impl QFormerVars {
    /// Assembles vars from externally created leaves in parameter order:
    /// queries first, then seven weights per block.
    pub fn from_slice(vars: &[Var]) -> Self {
        let blocks = (vars.len() - 1) / 7;
        QFormerVars {
            queries: vars[0],
            blocks: (0..blocks)
                .map(|t| {
                    let base = 1 + t * 7;
                    std::array::from_fn(|i| vars[base + i])
                })
                .collect(),
        }
    }
}

const BLOCK_PARTS: [&str; 7] = [
    "sa.wq", "sa.wk", "sa.wv", "ca.wq", "ca.wk", "ca.wv", "ca.wo",
];

impl QFormer {
    pub fn init(cfg: QFormerConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "qformer-init");
        let d = cfg.dim;
        let std = (1.0 / d as f64).sqrt();
        let mut params = vec![Param::new(
            "qformer.queries",
            rng::normal_tensor(&mut rng, vec![cfg.num_queries, d], std),
        )];
        for t in 0..cfg.blocks {
            for part in BLOCK_PARTS {
                // value/output projections start at identity plus noise
                // and query/key projections at a tenth of the usual scale:
                // initial attention is then near-uniform and the refined
                // prototypes begin as group feature means instead of random
                // rotations of them, which keeps early contrastive
                // gradients into the backbone aligned with the features
                // rather than injecting projection noise through the
                // attention-weight (key) path
                let value = match part {
                    "sa.wv" | "ca.wv" | "ca.wo" => {
                        let mut m = rng::normal_tensor(&mut rng, vec![d, d], 0.1 * std);
                        for i in 0..d {
                            m.data_mut()[i * d + i] += 1.0;
                        }
                        m
                    }
                    _ => rng::normal_tensor(&mut rng, vec![d, d], 0.1 * std),
                };
                params.push(Param::new(format!("qformer.block{t}.{part}"), value));
            }
        }
        QFormer { cfg, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &Tape) -> QFormerVars {
        let queries = tape.leaf(self.params[0].value.clone(), self.params[0].trainable);
        let mut blocks = Vec::with_capacity(self.cfg.blocks);
        for t in 0..self.cfg.blocks {
            let base = 1 + t * 7;
            let vars: Vec<Var> = (0..7)
                .map(|i| {
                    tape.leaf(
                        self.params[base + i].value.clone(),
                        self.params[base + i].trainable,
                    )
                })
                .collect();
            blocks.push(vars.try_into().unwrap());
        }
        QFormerVars { queries, blocks }
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &QFormerVars) {
        self.params[0].grad = tape.grad(vars.queries);
        for (t, block) in vars.blocks.iter().enumerate() {
            for (i, v) in block.iter().enumerate() {
                self.params[1 + t * 7 + i].grad = tape.grad(*v);
            }
        }
    }

    /// Refines the shared queries against one flattened group [L, d]:
    /// T iterations of Q <- CA(SA(Q), group + E_pos). `pos` must already be
    /// tiled to L rows. With zero blocks the queries come back untouched.
    pub fn forward(&self, tape: &Tape, vars: &QFormerVars, group: Var, pos: &Tensor) -> Result<Var> {
        let gshape = tape.shape(group);
        let d = self.cfg.dim;
        if gshape.len() != 2 || gshape[1] != d {
            return Err(Error::Dimension {
                op: "qformer forward",
                lhs: gshape,
                rhs: vec![0, d],
            });
        }
        let l = gshape[0];
        if l <= self.cfg.num_queries {
            return Err(Error::Config(format!(
                "group length {l} must exceed the query count {}",
                self.cfg.num_queries
            )));
        }
        if pos.shape() != [l, d] {
            return Err(Error::Dimension {
                op: "qformer positional table",
                lhs: pos.shape().to_vec(),
                rhs: vec![l, d],
            });
        }
        let pos_var = tape.constant(pos.clone());
        // positions address the keys only; values stay raw features so
        // the refined prototypes live in the feature space itself
        let keyed = tape.add(group, pos_var)?;
        let mut q = vars.queries;
        let scale = 1.0 / (d as f64).sqrt();
        for block in &vars.blocks {
            let [sa_wq, sa_wk, sa_wv, ca_wq, ca_wk, ca_wv, ca_wo] = *block;
            let sa = attention(tape, q, q, q, sa_wq, sa_wk, sa_wv, scale)?;
            let ca = attention(tape, sa, keyed, group, ca_wq, ca_wk, ca_wv, scale)?;
            q = tape.matmul(ca, ca_wo)?;
        }
        Ok(q)
    }
}

/// Single-head scaled dot-product attention: softmax(qWq (kWk)^T * scale) (vWv).
fn attention(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    scale: f64,
) -> Result<Var> {
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let kt = tape.transpose(kp)?;
    let scores = tape.scale(tape.matmul(qp, kt)?, scale);
    let attn = tape.softmax_rows(scores)?;
    tape.matmul(attn, vp)
}

/// Fixed 2D sinusoidal positional table for an h x w grid, [h*w, d].
/// Half the channels encode x, half y. d must be divisible by 4.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Tensor {
    assert_eq!(d % 4, 0, "positional encoding needs d divisible by 4");
    let quarter = d / 4;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                data[p * d + 2 * i] = (x as f64 * freq).sin();
                data[p * d + 2 * i + 1] = (x as f64 * freq).cos();
                data[p * d + d / 2 + 2 * i] = (y as f64 * freq).sin();
                data[p * d + d / 2 + 2 * i + 1] = (y as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, d], data)
}

/// The positional table tiled identically for each of the `n` images in a
/// group, [n*h*w, d]. Images within a group are interchangeable, so each
/// repeats the same spatial encoding.
pub fn tiled_positional_encoding(n: usize, h: usize, w: usize, d: usize) -> Tensor {
    let base = positional_encoding(h, w, d);
    let mut data = Vec::with_capacity(n * base.len());
    for _ in 0..n {
        data.extend_from_slice(base.data());
    }
    Tensor::new(vec![n * h * w, d], data)
}

/// Mean over query indices of cos(a_i, b_i), a scalar in [-1, 1].
pub fn prototype_similarity(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 2 {
        return Err(Error::Dimension {
            op: "prototype_similarity",
            lhs: sa,
            rhs: sb,
        });
    }
    const EPS: f64 = 1e-12;
    {
        let ta = tape.value(a);
        let tb = tape.value(b);
        let c = ta.cols();
        for i in 0..ta.rows() {
            let na: f64 = ta.data()[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = tb.data()[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < EPS && nb < EPS {
                return Err(Error::Numerical(format!(
                    "prototype_similarity: query row {i} has zero norm on both sides"
                )));
            }
        }
    }
    let dot = tape.row_dot(a, b)?;
    let na = tape.add_scalar(tape.row_norm(a), EPS);
    let nb = tape.add_scalar(tape.row_norm(b), EPS);
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dot, denom)?;
    Ok(tape.mean_all(cos))
}

/// One refined query set entering the contrastive loss.
pub struct RefinedSet {
    pub class: usize,
    pub modality: Modality,
    pub queries: Var,
}

/// Symmetric group-level contrastive loss over all refined sets.
/// Each class anchors once per modality; the denominator sums exp(S) over
/// every set other than the anchor itself (the positive stays in).
pub fn contrastive_loss(tape: &Tape, sets: &[RefinedSet]) -> Result<Var> {
    let mut classes: Vec<usize> = sets.iter().map(|s| s.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for &c in &classes {
        for m in [Modality::Wli, Modality::Nbi] {
            if !sets.iter().any(|s| s.class == c && s.modality == m) {
                return Err(Error::Data(format!(
                    "contrastive_loss: class {c} is missing its {} set",
                    m.as_str()
                )));
            }
        }
    }
    let n = sets.len();
    // pairwise similarities, computed once per unordered pair
    let mut sims: Vec<Vec<Option<Var>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = prototype_similarity(tape, sets[i].queries, sets[j].queries)?;
            sims[i][j] = Some(s);
            sims[j][i] = Some(s);
        }
    }
    let big_c = classes.len();
    let mut terms = Vec::with_capacity(2 * big_c);
    for (i, anchor) in sets.iter().enumerate() {
        let pos = sets
            .iter()
            .position(|s| s.class == anchor.class && s.modality == anchor.modality.other())
            .expect("checked above");
        let s_pos = sims[i][pos].unwrap();
        // log-sum-exp with a detached max shift: stable, and when the
        // denominator holds only the positive (C = 1) the anchor term
        // cancels to exactly zero.
        let max_val = (0..n)
            .filter(|&j| j != i)
            .map(|j| tape.item(sims[i][j].unwrap()))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut exps = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j != i {
                exps.push(tape.exp(tape.add_scalar(sims[i][j].unwrap(), -max_val)));
            }
        }
        let denom = tape.add_n(&exps)?;
        let log_denom = tape.add_scalar(tape.ln(denom)?, max_val);
        terms.push(tape.sub(s_pos, log_denom)?);
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, -1.0 / (2.0 * big_c as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blocks_is_identity() {
        let cfg = QFormerConfig {
            num_queries: 2,
            dim: 4,
            blocks: 0,
        };
        let qf = QFormer::init(cfg, 1);
        let tape = Tape::new();
        let vars = qf.bind(&tape);
        let mut r = rng::stream(2, "g");
        let group = tape.constant(rng::uniform_tensor(&mut r, vec![5, 4], -1.0, 1.0));
        let pos = tiled_positional_encoding(5, 1, 1, 4);
        let out = qf.forward(&tape, &vars, group, &pos).unwrap();
        assert_eq!(tape.value_clone(out), qf.params[0].value);
    }

    #[test]
    fn group_no_larger_than_queries_is_rejected() {
        let cfg = QFormerConfig {
            num_queries: 3,
            dim: 4,
            blocks: 1,
        };
        let qf = QFormer::init(cfg, 1);
        let tape = Tape::new();
        let vars = qf.bind(&tape);
        let group = tape.constant(Tensor::zeros(vec![1, 4]));
        let pos = tiled_positional_encoding(1, 1, 1, 4);
        assert!(matches!(
            qf.forward(&tape, &vars, group, &pos),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_block_matches_step_by_step_recomputation() {
        let cfg = QFormerConfig {
            num_queries: 2,
            dim: 4,
            blocks: 1,
        };
        let qf = QFormer::init(cfg, 5);
        let tape = Tape::new();
        let vars = qf.bind(&tape);
        let mut r = rng::stream(7, "g");
        let group_t = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let group = tape.constant(group_t.clone());
        let pos = tiled_positional_encoding(3, 1, 1, 4);
        let out = qf.forward(&tape, &vars, group, &pos).unwrap();
        let got = tape.value_clone(out);

        // independent recomputation with explicit loops
        let d = 4usize;
        let w = |idx: usize| qf.params[1 + idx].value.clone();
        let mm = |a: &Tensor, b: &Tensor| -> Tensor {
            let (m, k, n2) = (a.rows(), a.cols(), b.cols());
            let mut c = Tensor::zeros(vec![m, n2]);
            for i in 0..m {
                for j in 0..n2 {
                    let mut s = 0.0;
                    for l in 0..k {
                        s += a.at2(i, l) * b.at2(l, j);
                    }
                    c.data_mut()[i * n2 + j] = s;
                }
            }
            c
        };
        let softmax_rows = |a: &Tensor| -> Tensor {
            let mut out = a.clone();
            let (rr, cc) = (a.rows(), a.cols());
            for i in 0..rr {
                let row = &mut out.data_mut()[i * cc..(i + 1) * cc];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            out
        };
        let attn = |q: &Tensor,
                    k: &Tensor,
                    v: &Tensor,
                    wq: &Tensor,
                    wk: &Tensor,
                    wv: &Tensor|
         -> Tensor {
            let qp = mm(q, wq);
            let kp = mm(k, wk);
            let vp = mm(v, wv);
            let mut scores = Tensor::zeros(vec![qp.rows(), kp.rows()]);
            for i in 0..qp.rows() {
                for j in 0..kp.rows() {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += qp.at2(i, l) * kp.at2(j, l);
                    }
                    scores.data_mut()[i * kp.rows() + j] = s / (d as f64).sqrt();
                }
            }
            mm(&softmax_rows(&scores), &vp)
        };
        let q0 = qf.params[0].value.clone();
        let sa = attn(&q0, &q0, &q0, &w(0), &w(1), &w(2));
        let mut keyed = group_t.clone();
        let pe = tiled_positional_encoding(3, 1, 1, 4);
        for (a, b) in keyed.data_mut().iter_mut().zip(pe.data()) {
            *a += b;
        }
        // positions enter the keys only, not the values
        let ca = attn(&sa, &keyed, &group_t, &w(3), &w(4), &w(5));
        let want = mm(&ca, &w(6));
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn similarity_self_orthogonal_and_oracle() {
        let tape = Tape::new();
        let mut r = rng::stream(4, "q");
        let a_t = rng::uniform_tensor(&mut r, vec![12, 8], -1.0, 1.0);
        let a = tape.constant(a_t.clone());
        let s_self = prototype_similarity(&tape, a, a).unwrap();
        assert!((tape.item(s_self) - 1.0).abs() < 1e-9);

        // pairwise-orthogonal rows -> 0
        let e0 = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let e1 = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]));
        let s_orth = prototype_similarity(&tape, e0, e1).unwrap();
        assert!(tape.item(s_orth).abs() < 1e-12);

        // brute-force per-row cosine mean
        let b_t = rng::uniform_tensor(&mut r, vec![12, 8], -1.0, 1.0);
        let b = tape.constant(b_t.clone());
        let s = prototype_similarity(&tape, a, b).unwrap();
        let mut want = 0.0;
        for i in 0..12 {
            let ar = &a_t.data()[i * 8..(i + 1) * 8];
            let br = &b_t.data()[i * 8..(i + 1) * 8];
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
            want += dot / ((na + 1e-12) * (nb + 1e-12));
        }
        want /= 12.0;
        assert!((tape.item(s) - want).abs() < 1e-12);
    }

    #[test]
    fn similarity_symmetry_and_scale_invariance() {
        let tape = Tape::new();
        let mut r = rng::stream(6, "q");
        let a_t = rng::uniform_tensor(&mut r, vec![4, 6], -1.0, 1.0);
        let b_t = rng::uniform_tensor(&mut r, vec![4, 6], -1.0, 1.0);
        let a = tape.constant(a_t.clone());
        let b = tape.constant(b_t.clone());
        let sab = tape.item(prototype_similarity(&tape, a, b).unwrap());
        let sba = tape.item(prototype_similarity(&tape, b, a).unwrap());
        assert_eq!(sab, sba);
        let a2 = tape.scale(a, 3.0);
        let b2 = tape.scale(b, 0.25);
        let s2 = tape.item(prototype_similarity(&tape, a2, b2).unwrap());
        assert!((sab - s2).abs() < 1e-12);
    }

    #[test]
    fn similarity_zero_norm_both_sides_errors() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            prototype_similarity(&tape, z, z),
            Err(Error::Numerical(_))
        ));
    }

    fn make_sets(tape: &Tape, tensors: &[(usize, Modality, Tensor)]) -> Vec<RefinedSet> {
        tensors
            .iter()
            .map(|(c, m, t)| RefinedSet {
                class: *c,
                modality: *m,
                queries: tape.constant(t.clone()),
            })
            .collect()
    }

    #[test]
    fn contrastive_loss_single_class_is_zero() {
        let tape = Tape::new();
        let mut r = rng::stream(9, "s");
        let a = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let sets = make_sets(&tape, &[(0, Modality::Wli, a), (0, Modality::Nbi, b)]);
        let loss = contrastive_loss(&tape, &sets).unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn contrastive_loss_identical_sets_two_classes() {
        // all four sets identical: every similarity is 1, each anchor ratio
        // is e / (3e), so the loss is ln 3 (confirmed by the brute-force
        // oracle below on the same input).
        let tape = Tape::new();
        let mut r = rng::stream(10, "s");
        let q = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let sets = make_sets(
            &tape,
            &[
                (0, Modality::Wli, q.clone()),
                (0, Modality::Nbi, q.clone()),
                (1, Modality::Wli, q.clone()),
                (1, Modality::Nbi, q.clone()),
            ],
        );
        let loss = tape.item(contrastive_loss(&tape, &sets).unwrap());
        assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
        let oracle = brute_force_loss(&[
            (0, Modality::Wli, q.clone()),
            (0, Modality::Nbi, q.clone()),
            (1, Modality::Wli, q.clone()),
            (1, Modality::Nbi, q),
        ]);
        assert!((loss - oracle).abs() < 1e-12);
    }

    /// Scalar-loop enumeration of every anchor term.
    fn brute_force_loss(sets: &[(usize, Modality, Tensor)]) -> f64 {
        let sim = |a: &Tensor, b: &Tensor| -> f64 {
            let (r, c) = (a.rows(), a.cols());
            let mut s = 0.0;
            for i in 0..r {
                let ar = &a.data()[i * c..(i + 1) * c];
                let br = &b.data()[i * c..(i + 1) * c];
                let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
                s += dot / ((na + 1e-12) * (nb + 1e-12));
            }
            s / r as f64
        };
        let mut classes: Vec<usize> = sets.iter().map(|s| s.0).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut total = 0.0;
        for (i, anchor) in sets.iter().enumerate() {
            let pos = sets
                .iter()
                .find(|s| s.0 == anchor.0 && s.1 == anchor.1.other())
                .unwrap();
            let s_pos = sim(&anchor.2, &pos.2);
            let mut denom = 0.0;
            for (j, other) in sets.iter().enumerate() {
                if j != i {
                    denom += sim(&anchor.2, &other.2).exp();
                }
            }
            total += s_pos.exp().ln() - denom.ln();
        }
        -total / (2.0 * classes.len() as f64)
    }

    #[test]
    fn contrastive_loss_matches_brute_force_on_random_sets() {
        for seed in 0..20 {
            let tape = Tape::new();
            let mut r = rng::stream(seed, "cl");
            let ts: Vec<(usize, Modality, Tensor)> = vec![
                (0, Modality::Wli, rng::uniform_tensor(&mut r, vec![4, 5], -1.0, 1.0)),
                (0, Modality::Nbi, rng::uniform_tensor(&mut r, vec![4, 5], -1.0, 1.0)),
                (1, Modality::Wli, rng::uniform_tensor(&mut r, vec![4, 5], -1.0, 1.0)),
                (1, Modality::Nbi, rng::uniform_tensor(&mut r, vec![4, 5], -1.0, 1.0)),
            ];
            let sets = make_sets(&tape, &ts);
            let got = tape.item(contrastive_loss(&tape, &sets).unwrap());
            let want = brute_force_loss(&ts);
            assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn contrastive_loss_missing_modality_errors() {
        let tape = Tape::new();
        let mut r = rng::stream(2, "x");
        let sets = make_sets(
            &tape,
            &[
                (0, Modality::Wli, rng::uniform_tensor(&mut r, vec![2, 3], -1.0, 1.0)),
                (0, Modality::Nbi, rng::uniform_tensor(&mut r, vec![2, 3], -1.0, 1.0)),
                (1, Modality::Wli, rng::uniform_tensor(&mut r, vec![2, 3], -1.0, 1.0)),
            ],
        );
        assert!(matches!(
            contrastive_loss(&tape, &sets),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn param_count_formula() {
        for (nq, d, t) in [(12, 64, 2), (4, 8, 1), (6, 16, 3)] {
            let cfg = QFormerConfig {
                num_queries: nq,
                dim: d,
                blocks: t,
            };
            let qf = QFormer::init(cfg.clone(), 0);
            assert_eq!(qf.param_count(), qformer_param_count(&cfg));
            assert_eq!(qf.param_count(), t * 7 * d * d + nq * d);
        }
    }
}
