//! Shared central-finite-difference gradient harness and the op-coverage
//! suites used by both the gradcheck and acceptance targets.

use pagkd_core::dense::{self, DenseClassTerms, NormMode, Srca};
use pagkd_core::grouping::Modality;
use pagkd_core::qformer::{self, QFormer, QFormerConfig, RefinedSet};
use pagkd_core::rng;
use pagkd_core::tape::{Tape, Var};
use pagkd_core::tensor::{Tensor, NEG_INF};

/// Compares analytic gradients of `build`'s scalar output against central
/// finite differences for every entry of every input. Returns
/// (failures, checks).
pub fn check_grads<F>(inputs: &[Tensor], tol: f64, build: F) -> (usize, usize)
where
    F: Fn(&Tape, &[Var]) -> pagkd_core::Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&tape, &vars).expect("forward pass");
    tape.backward(loss).expect("backward pass");
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let loss = build(&tape, &vars).expect("forward pass");
        tape.item(loss)
    };

    let eps = 1e-5;
    let mut failures = 0;
    let mut checks = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            work[i].data_mut()[k] += eps;
            let plus = eval(&work);
            work[i].data_mut()[k] -= 2.0 * eps;
            let minus = eval(&work);
            work[i].data_mut()[k] += eps;
            let fd = (plus - minus) / (2.0 * eps);
            let an = grads[i].data()[k];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            checks += 1;
            if (fd - an).abs() / denom > tol {
                failures += 1;
            }
        }
    }
    (failures, checks)
}

fn acc(total: &mut (usize, usize), got: (usize, usize)) {
    total.0 += got.0;
    total.1 += got.1;
}

/// Random tensor bounded away from zero (for kinked or singular ops).
fn away_from_zero(r: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>, min_abs: f64) -> Tensor {
    let mut t = rng::uniform_tensor(r, shape, -1.0, 1.0);
    for v in t.data_mut() {
        if v.abs() < min_abs {
            *v = min_abs * if *v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    t
}

fn positive(r: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    rng::uniform_tensor(r, shape, 0.2, 2.0)
}

pub fn suite_elementwise(seeds: u64, tol: f64) -> (usize, usize) {
    let mut total = (0, 0);
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "gc-elem");
        let a = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = away_from_zero(&mut r, vec![3, 4], 0.2);
        let relu_in = away_from_zero(&mut r, vec![3, 4], 0.1);
        let pos = positive(&mut r, vec![3, 4]);

        acc(&mut total, check_grads(&[a.clone(), b.clone()], tol, |t, v| {
            let sum = t.add(v[0], v[1])?;
            let diff = t.sub(v[0], v[1])?;
            let prod = t.mul(sum, diff)?;
            let quot = t.div(prod, v[1])?;
            let scaled = t.scale(quot, 0.7);
            let shifted = t.add_scalar(scaled, 0.3);
            let negated = t.neg(shifted);
            let combined = t.add_n(&[negated, v[0]])?;
            Ok(t.sum_all(combined))
        }));
        acc(&mut total, check_grads(&[relu_in], tol, |t, v| {
            Ok(t.mean_all(t.relu(v[0])))
        }));
        acc(&mut total, check_grads(&[a.clone()], tol, |t, v| {
            Ok(t.sum_all(t.exp(t.scale(v[0], 0.5))))
        }));
        acc(&mut total, check_grads(&[pos], tol, |t, v| {
            let l = t.ln(v[0])?;
            Ok(t.mean_all(l))
        }));
    }
    total
}

pub fn suite_matrix(seeds: u64, tol: f64) -> (usize, usize) {
    let mut total = (0, 0);
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "gc-mat");
        let a = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = rng::uniform_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let m = rng::uniform_tensor(&mut r, vec![4, 5], -1.0, 1.0);
        let vrow = rng::uniform_tensor(&mut r, vec![4], -1.0, 1.0);

        acc(&mut total, check_grads(&[a.clone(), b.clone()], tol, |t, v| {
            Ok(t.sum_all(t.row_dot(v[0], v[1])?))
        }));
        acc(&mut total, check_grads(&[a.clone()], tol, |t, v| {
            Ok(t.sum_all(t.row_norm(v[0])))
        }));
        acc(&mut total, check_grads(&[a.clone()], tol, |t, v| {
            Ok(t.sum_all(t.mean_rows(v[0])))
        }));
        acc(&mut total, check_grads(&[a.clone(), m.clone()], tol, |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.mean_all(p))
        }));
        acc(&mut total, check_grads(&[a.clone()], tol, |t, v| {
            let tr = t.transpose(v[0])?;
            let sq = t.mul(tr, tr)?;
            Ok(t.sum_all(sq))
        }));
        acc(&mut total, check_grads(&[a.clone(), vrow], tol, |t, v| {
            Ok(t.sum_all(t.mul(t.add_row_vec(v[0], v[1])?, v[0])?))
        }));
        acc(&mut total, check_grads(&[a.clone(), b.clone()], tol, |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let s = t.slice_rows(c, 1, 5)?;
            let rs = t.reshape(s, vec![2, 8])?;
            Ok(t.sum_all(t.mul(rs, rs)?))
        }));
    }
    total
}

pub fn suite_softmax(seeds: u64, tol: f64) -> (usize, usize) {
    let mut total = (0, 0);
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "gc-soft");
        let logits = rng::uniform_tensor(&mut r, vec![3, 5], -2.0, 2.0);
        let mut bias = Tensor::zeros(vec![3, 5]);
        for i in 0..3 {
            for j in 0..5 {
                if (i + 2 * j) % 4 == 0 && j != 0 {
                    bias.data_mut()[i * 5 + j] = NEG_INF;
                }
            }
        }
        let labels = [0usize, 3, 1];

        acc(&mut total, check_grads(&[logits.clone()], tol, |t, v| {
            let s = t.softmax_rows(v[0])?;
            Ok(t.sum_all(t.mul(s, s)?))
        }));
        let b = bias.clone();
        acc(&mut total, check_grads(&[logits.clone()], tol, move |t, v| {
            let s = t.masked_softmax(v[0], Some(&b))?;
            Ok(t.sum_all(t.mul(s, s)?))
        }));
        acc(&mut total, check_grads(&[logits.clone()], tol, move |t, v| {
            t.cross_entropy(v[0], &labels)
        }));
        // probe with a random linear functional: sum(n*n) of a normalized
        // output is nearly constant and drowns in finite-difference noise
        let weights = rng::uniform_tensor(&mut r, vec![3, 5], -1.0, 1.0);
        acc(&mut total, check_grads(&[logits], tol, move |t, v| {
            let n = t.layer_norm(v[0], 1e-5)?;
            let w = t.constant(weights.clone());
            Ok(t.sum_all(t.mul(n, w)?))
        }));
    }
    total
}

pub fn suite_conv(seeds: u64, tol: f64) -> (usize, usize) {
    let mut total = (0, 0);
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "gc-conv");
        let x = rng::uniform_tensor(&mut r, vec![2, 2, 4, 4], -1.0, 1.0);
        let w = rng::uniform_tensor(&mut r, vec![3, 2, 3, 3], -0.5, 0.5);
        let b = rng::uniform_tensor(&mut r, vec![3], -0.1, 0.1);

        acc(&mut total, check_grads(&[x.clone(), w, b], tol, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            Ok(t.sum_all(t.mul(y, y)?))
        }));
        acc(&mut total, check_grads(&[x.clone()], tol, |t, v| {
            let p = t.avg_pool2(v[0])?;
            Ok(t.sum_all(t.mul(p, p)?))
        }));
        acc(&mut total, check_grads(&[x.clone()], tol, |t, v| {
            let g = t.global_avg_pool(v[0])?;
            Ok(t.sum_all(t.mul(g, g)?))
        }));
        acc(&mut total, check_grads(&[x], tol, |t, v| {
            let rows = t.nchw_to_rows(v[0])?;
            Ok(t.sum_all(t.mul(rows, rows)?))
        }));
    }
    total
}

/// Both loss heads end-to-end (d=8, L=6, N_q=3): gradients w.r.t. every
/// qformer parameter, every srca parameter, and both feature matrices.
pub fn suite_loss_heads(seeds: u64, tol: f64) -> (usize, usize) {
    let d = 8;
    let l = 6;
    let mut total = (0, 0);
    for seed in 0..seeds {
        let mut r = rng::stream(seed, "gc-heads");
        let f_wli = rng::uniform_tensor(&mut r, vec![l, d], -1.0, 1.0);
        let f_nbi = rng::uniform_tensor(&mut r, vec![l, d], -1.0, 1.0);
        let qf = QFormer::init(
            QFormerConfig {
                num_queries: 3,
                dim: d,
                blocks: 1,
            },
            seed,
        );
        let srca = Srca::init(d, seed).unwrap();
        let pos = qformer::positional_encoding(2, 3, d);
        // half-open relation bias with at least one open entry per row
        let mut rel = Tensor::zeros(vec![l, l]);
        for i in 0..l {
            for j in 0..l {
                if (i + j) % 3 == 1 && j != i {
                    rel.data_mut()[i * l + j] = NEG_INF;
                }
            }
        }

        let mut inputs: Vec<Tensor> = vec![f_wli, f_nbi];
        inputs.extend(qf.params.iter().map(|p| p.value.clone()));
        inputs.extend(srca.params.iter().map(|p| p.value.clone()));
        let n_qf = qf.params.len();
        let qf_cfg = qf.cfg.clone();

        let got = check_grads(&inputs, tol, move |t, v| {
            let (a, b) = (v[0], v[1]);
            let shell = QFormer {
                cfg: qf_cfg.clone(),
                params: Vec::new(),
            };
            // route gradients through the provided leaves
            let qvars = qformer::QFormerVars::from_slice(&v[2..2 + n_qf]);
            let svars = dense::SrcaVars {
                wq: v[2 + n_qf],
                wk: v[3 + n_qf],
                wv: v[4 + n_qf],
            };
            let qa = shell.forward(t, &qvars, a, &pos)?;
            let qb = shell.forward(t, &qvars, b, &pos)?;
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
            let l_pro = qformer::contrastive_loss(t, &sets)?;
            let recon_wli = dense::srca_reconstruct(t, &svars, a, b, Some(&rel), None)?;
            let recon_nbi = dense::srca_reconstruct(t, &svars, b, a, Some(&rel), None)?;
            let terms = [DenseClassTerms {
                f_wli: a,
                recon_wli,
                f_nbi: b,
                recon_nbi,
            }];
            let l_den = dense::dense_loss(t, &terms, NormMode::Mean, true)?;
            t.add(l_pro, l_den)
        });
        acc(&mut total, got);
    }
    total
}
