//! Per-class, per-modality image groups: manifest schema, batch-budget
//! allocation, the reform schedule, and group feature flattening.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "WLI")]
    Wli,
    #[serde(rename = "NBI")]
    Nbi,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Wli => Modality::Nbi,
            Modality::Nbi => Modality::Wli,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Wli => "WLI",
            Modality::Nbi => "NBI",
        }
    }
}

/// One image record. `pair_id` is empty for unpaired captures; `fold` is
/// set only for paired instances (the 5-fold evaluation pool).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub class: usize,
    pub modality: Modality,
    #[serde(default)]
    pub pair_id: Option<String>,
    pub split: String,
    #[serde(default)]
    pub fold: Option<usize>,
}

pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.as_ref().display())))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let mut row: ManifestRow = rec.map_err(|e| Error::Manifest(e.to_string()))?;
        if row.pair_id.as_deref() == Some("") {
            row.pair_id = None;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_manifest<P: AsRef<Path>>(path: P, rows: &[ManifestRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
    for row in rows {
        wtr.serialize(row).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// One (class, modality) cell: the group size inside a batch plus the
/// ordered membership list the batch iterator cycles through.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCell {
    pub class: usize,
    pub modality: Modality,
    pub size: usize,
    pub members: Vec<String>,
    cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub cells: Vec<GroupCell>,
    pub batch_budget: usize,
    pub reform_period: usize,
    pub base_seed: u64,
}

/// Sizes every (class, modality) cell proportionally to its sample count,
/// largest-remainder rounding, minimum 2 per cell, summing exactly to `s`.
pub fn plan_groups(rows: &[ManifestRow], s: usize, reform_period: usize, seed: u64) -> Result<GroupPlan> {
    let mut counts: BTreeMap<(usize, Modality), Vec<String>> = BTreeMap::new();
    for r in rows {
        counts
            .entry((r.class, r.modality))
            .or_default()
            .push(r.id.clone());
    }
    if counts.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    let classes: std::collections::BTreeSet<usize> = counts.keys().map(|k| k.0).collect();
    for &c in &classes {
        for m in [Modality::Wli, Modality::Nbi] {
            match counts.get(&(c, m)) {
                Some(ids) if ids.len() >= 2 => {}
                _ => {
                    return Err(Error::Config(format!(
                        "class {c} needs at least 2 {} train samples",
                        m.as_str()
                    )))
                }
            }
        }
    }
    let n_cells = counts.len();
    if s < 2 * n_cells {
        return Err(Error::Config(format!(
            "batch budget {s} infeasible: {n_cells} (class, modality) cells need at least {}",
            2 * n_cells
        )));
    }
    let total: usize = counts.values().map(|v| v.len()).sum();
    // floor-then-largest-remainder
    let mut sizes: Vec<usize> = Vec::with_capacity(n_cells);
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(n_cells);
    for (i, ids) in counts.values().enumerate() {
        let exact = s as f64 * ids.len() as f64 / total as f64;
        sizes.push(exact.floor() as usize);
        remainders.push((exact - exact.floor(), i));
    }
    let mut leftover = s - sizes.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().cycle().take(leftover.min(n_cells * s)) {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    // repair to the minimum of 2 by taking from the largest cells
    loop {
        let Some(low) = sizes.iter().position(|&v| v < 2) else {
            break;
        };
        let high = sizes
            .iter()
            .enumerate()
            .max_by_key(|(_, &v)| v)
            .map(|(i, _)| i)
            .unwrap();
        if sizes[high] <= 2 {
            return Err(Error::Config(format!(
                "batch budget {s} cannot give every cell a group of 2; need at least {}",
                2 * n_cells
            )));
        }
        sizes[low] += 1;
        sizes[high] -= 1;
    }
    let mut cells = Vec::with_capacity(n_cells);
    for (((class, modality), ids), size) in counts.into_iter().zip(sizes) {
        cells.push(GroupCell {
            class,
            modality,
            size,
            members: ids,
            cursor: 0,
        });
    }
    let mut plan = GroupPlan {
        cells,
        batch_budget: s,
        reform_period,
        base_seed: seed,
    };
    shuffle_members(&mut plan, seed);
    Ok(plan)
}

fn shuffle_members(plan: &mut GroupPlan, seed: u64) {
    for cell in &mut plan.cells {
        cell.members.sort();
        let label = format!("group-{}-{}", cell.class, cell.modality.as_str());
        let mut rng = rng::stream(seed, &label);
        cell.members.shuffle(&mut rng);
        cell.cursor = 0;
    }
}

/// Reshuffles group membership when `epoch` hits the reform period;
/// otherwise the plan is returned unchanged. Sizes are always preserved.
pub fn reform(plan: &GroupPlan, epoch: usize) -> GroupPlan {
    let mut out = plan.clone();
    if epoch % plan.reform_period == 0 {
        let seed = plan.base_seed ^ (epoch / plan.reform_period) as u64;
        shuffle_members(&mut out, seed);
    }
    out
}

/// Ids for one batch: each cell contributes `size` members, cycling
/// through its shuffled list across batches.
pub fn next_batch_ids(plan: &mut GroupPlan) -> Vec<(usize, Modality, Vec<String>)> {
    let mut out = Vec::with_capacity(plan.cells.len());
    for cell in &mut plan.cells {
        let mut ids = Vec::with_capacity(cell.size);
        for _ in 0..cell.size {
            ids.push(cell.members[cell.cursor].clone());
            cell.cursor = (cell.cursor + 1) % cell.members.len();
        }
        out.push((cell.class, cell.modality, ids));
    }
    out
}

/// Batches per epoch: one pass of ceil(dataset / s), cycling members.
pub fn batches_per_epoch(plan: &GroupPlan) -> usize {
    let total: usize = plan.cells.iter().map(|c| c.members.len()).sum();
    total.div_ceil(plan.batch_budget)
}

/// Value-level group flattening [N, d, h, w] -> [L, d], row i*h*w + p.
/// The tape-op equivalent is `Tape::nchw_to_rows`.
pub fn flatten_features(features: &Tensor) -> Tensor {
    let s = features.shape();
    let (n, d, hw) = (s[0], s[1], s[2] * s[3]);
    let mut data = vec![0.0; n * hw * d];
    for img in 0..n {
        for ch in 0..d {
            let src = &features.data()[(img * d + ch) * hw..(img * d + ch + 1) * hw];
            for (p, v) in src.iter().enumerate() {
                data[(img * hw + p) * d + ch] = *v;
            }
        }
    }
    Tensor::new(vec![n * hw, d], data)
}

pub fn unflatten_features(rows: &Tensor, n: usize, d: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; n * d * hw];
    for img in 0..n {
        for ch in 0..d {
            for p in 0..hw {
                data[(img * d + ch) * hw + p] = rows.at2(img * hw + p, ch);
            }
        }
    }
    Tensor::new(vec![n, d, h, w], data)
}
