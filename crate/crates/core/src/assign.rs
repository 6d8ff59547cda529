//! Log-likelihood matrices between two images and their optimal / K-best
//! assignments.
//!
//! The solver is a shortest-augmenting-path LAP with dual potentials. K-best
//! enumeration partitions the solution space (Murty); each child subproblem
//! differs from its parent by one freed row, so it is re-solved with a
//! single augmentation warm-started from the parent's potentials.
//!
//! Loss (dummy) columns are interchangeable: assignments that differ only by
//! which dummy a row uses are one hypothesis and are reported once.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::wavepacket::DisplacementModel;
use crate::{Error, Result};

/// ln(1e-300): entries are clamped here so the solver stays finite.
pub const LOG_FLOOR: f64 = -690.775_527_898_213_7;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodMatrix {
    n: usize,
    entries: Vec<f64>,
    /// Rows `0..real_rows` are first-image atoms; the rest are padding.
    pub real_rows: usize,
    /// Columns `0..real_cols` are second-image atoms; the rest are loss columns.
    pub real_cols: usize,
}

impl LikelihoodMatrix {
    /// Square matrix without padding.
    pub fn from_square(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::domain(format!("expected {} entries, got {}", n * n, entries.len())));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("likelihood entries must be finite"));
        }
        Ok(Self { n, entries, real_rows: n, real_cols: n })
    }

    /// Pad a rectangular `rows × cols` block to a square: extra columns take
    /// `loss_entry`, extra rows take `appear_entry`.
    pub fn padded(rows: usize, cols: usize, block: &[f64], loss_entry: f64, appear_entry: f64) -> Result<Self> {
        if block.len() != rows * cols {
            return Err(Error::domain("block size does not match dimensions"));
        }
        let n = rows.max(cols);
        let mut entries = vec![appear_entry.max(LOG_FLOOR); n * n];
        for r in 0..rows {
            for c in 0..n {
                entries[r * n + c] = if c < cols { block[r * cols + c].max(LOG_FLOOR) } else { loss_entry.max(LOG_FLOOR) };
            }
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("likelihood entries must be finite"));
        }
        Ok(Self { n, entries, real_rows: rows, real_cols: cols })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.n + c]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_loss_column(&self, c: usize) -> bool {
        c >= self.real_cols
    }

    /// Row-order sum of the selected entries.
    pub fn total(&self, cols: &[usize]) -> f64 {
        cols.iter().enumerate().fold(0.0, |acc, (r, &c)| acc + self.get(r, c))
    }

    /// Real-row part of an assignment with loss columns mapped to `None`.
    pub fn canonical(&self, cols: &[usize]) -> Vec<Option<usize>> {
        cols[..self.real_rows].iter().map(|&c| if c < self.real_cols { Some(c) } else { None }).collect()
    }
}

/// Options that complete the likelihood with loss hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOptions {
    /// Field-of-view area used by the uniform loss density (m²).
    pub fov_area: f64,
    /// Radius inside which the hover density is replaced by its disk average (m).
    pub hover_core: f64,
}

/// Log-likelihood of each pairing `(α, β)`, with loss columns appended when
/// the second image has fewer atoms.
pub fn build_matrix(
    model: &DisplacementModel,
    first: &[Vector2<f64>],
    second: &[Vector2<f64>],
    opts: &LikelihoodOptions,
) -> Result<LikelihoodMatrix> {
    model.validate()?;
    if first.iter().chain(second).any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::domain("positions must be finite"));
    }
    if !(opts.fov_area > 0.0) {
        return Err(Error::domain("field-of-view area must be positive"));
    }
    let (n1, n2) = (first.len(), second.len());
    let mut block = Vec::with_capacity(n1 * n2);
    for a in first {
        for b in second {
            block.push(model.density(&(b - a), opts.hover_core).ln().max(LOG_FLOOR));
        }
    }
    let loss = (model.p_loss() / opts.fov_area).ln().max(LOG_FLOOR);
    let appear = (1.0 / opts.fov_area).ln();
    LikelihoodMatrix::padded(n1, n2, &block, loss, appear)
}

/// Shortest augmenting path from `start` (unassigned) with potentials.
/// Reduced costs use `cost = −entry` so the maximum-likelihood assignment is
/// a minimum-cost one.
struct Augmenter {
    spc: Vec<f64>,
    path: Vec<usize>,
    in_sr: Vec<bool>,
    in_sc: Vec<bool>,
    rows_seen: Vec<usize>,
    cols_seen: Vec<usize>,
}

impl Augmenter {
    fn new(n: usize) -> Self {
        Self {
            spc: vec![f64::INFINITY; n],
            path: vec![NONE; n],
            in_sr: vec![false; n],
            in_sc: vec![false; n],
            rows_seen: Vec::with_capacity(n),
            cols_seen: Vec::with_capacity(n),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        m: &LikelihoodMatrix,
        allowed: &dyn Fn(usize, usize) -> bool,
        active_col: &[bool],
        col4row: &mut [usize],
        row4col: &mut [usize],
        u: &mut [f64],
        v: &mut [f64],
        start: usize,
    ) -> bool {
        let n = m.n;
        self.spc.iter_mut().for_each(|x| *x = f64::INFINITY);
        self.in_sr.iter_mut().for_each(|x| *x = false);
        self.in_sc.iter_mut().for_each(|x| *x = false);
        self.rows_seen.clear();
        self.cols_seen.clear();
        let mut i = start;
        let mut min_val = 0.0;
        let sink;
        loop {
            self.in_sr[i] = true;
            self.rows_seen.push(i);
            let mut lowest = f64::INFINITY;
            let mut jmin = NONE;
            for j in 0..n {
                if !active_col[j] || self.in_sc[j] {
                    continue;
                }
                if allowed(i, j) {
                    let r = min_val - m.get(i, j) - u[i] - v[j];
                    if r < self.spc[j] {
                        self.path[j] = i;
                        self.spc[j] = r;
                    }
                }
                if self.spc[j] < lowest || (self.spc[j] == lowest && lowest < f64::INFINITY && row4col[j] == NONE) {
                    lowest = self.spc[j];
                    jmin = j;
                }
            }
            if jmin == NONE || !lowest.is_finite() {
                return false;
            }
            min_val = lowest;
            self.in_sc[jmin] = true;
            self.cols_seen.push(jmin);
            if row4col[jmin] == NONE {
                sink = jmin;
                break;
            }
            i = row4col[jmin];
        }
        u[start] += min_val;
        for &r in &self.rows_seen {
            if r != start {
                u[r] += min_val - self.spc[col4row[r]];
            }
        }
        for &j in &self.cols_seen {
            v[j] -= min_val - self.spc[j];
        }
        let mut j = sink;
        loop {
            let r = self.path[j];
            row4col[j] = r;
            let prev = col4row[r];
            col4row[r] = j;
            if r == start {
                break;
            }
            j = prev;
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Column of every (padded) row.
    pub cols: Vec<usize>,
    pub total: f64,
}

/// Maximum-trace assignment, O(n³).
pub fn best_assignment(m: &LikelihoodMatrix) -> Assignment {
    let n = m.n;
    let (mut col4row, mut row4col) = (vec![NONE; n], vec![NONE; n]);
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let active = vec![true; n];
    let mut aug = Augmenter::new(n);
    for r in 0..n {
        let ok = aug.run(m, &|_, _| true, &active, &mut col4row, &mut row4col, &mut u, &mut v, r);
        debug_assert!(ok, "complete bipartite graph always has a perfect matching");
    }
    let total = m.total(&col4row);
    Assignment { cols: col4row, total }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAssignment {
    /// Second-image index of each first-image atom, `None` for loss.
    pub assignment: Vec<Option<usize>>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationRanking {
    pub entries: Vec<RankedAssignment>,
    /// exp(ℓ_k − ℓ_0).
    pub relative_likelihoods: Vec<f64>,
    pub k_requested: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KBestOptions {
    pub k: usize,
    /// Stop once the relative likelihood of the next candidate falls below this.
    pub min_relative_likelihood: Option<f64>,
}

impl KBestOptions {
    pub fn exact(k: usize) -> Self {
        Self { k, min_relative_likelihood: None }
    }
}

/// Forbidden edge chain shared between Murty nodes. `col == NONE` forbids all
/// loss columns for the row.
struct Forbid {
    row: usize,
    col: usize,
    next: Option<Rc<Forbid>>,
}

struct Node {
    total: f64,
    key: Vec<u32>,
    cols: Vec<usize>,
    fixed: usize,
    forbid: Option<Rc<Forbid>>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    /// Max-heap order: larger total first, then lexicographically smaller key.
    fn cmp(&self, other: &Self) -> Ordering {
        self.total.total_cmp(&other.total).then_with(|| other.key.cmp(&self.key))
    }
}

fn key_of(m: &LikelihoodMatrix, cols: &[usize]) -> Vec<u32> {
    cols[..m.real_rows].iter().map(|&c| if c < m.real_cols { c as u32 } else { u32::MAX }).collect()
}

/// The `k` most likely assignments in non-increasing order (ties broken by the
/// lexicographically smaller assignment, loss sorting last).
pub fn k_best_assignments(m: &LikelihoodMatrix, opts: KBestOptions) -> PermutationRanking {
    let n = m.n;
    let k_req = opts.k.max(1);
    let best = best_assignment(m);
    let mut heap = BinaryHeap::new();
    {
        // potentials of the root solution
        let (mut col4row, mut row4col) = (vec![NONE; n], vec![NONE; n]);
        let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
        let active = vec![true; n];
        let mut aug = Augmenter::new(n);
        for r in 0..n {
            aug.run(m, &|_, _| true, &active, &mut col4row, &mut row4col, &mut u, &mut v, r);
        }
        let _ = best;
        heap.push(Node { total: m.total(&col4row), key: key_of(m, &col4row), cols: col4row, fixed: 0, forbid: None, u, v });
    }
    let floor_gap = opts.min_relative_likelihood.filter(|&r| r > 0.0).map(|r| r.ln());
    let mut out: Vec<(f64, Vec<u32>, Vec<usize>)> = Vec::new();
    let mut aug = Augmenter::new(n);
    let mut forbidden = vec![false; n * n];
    let mut loss_forbidden = vec![false; n];
    let mut active = vec![true; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut top_total = f64::NAN;
    let real_rows = m.real_rows;

    while let Some(node) = heap.pop() {
        if out.is_empty() {
            top_total = node.total;
        }
        if let Some(g) = floor_gap {
            if node.total - top_total < g {
                break;
            }
        }
        if out.len() >= k_req && node.total < out[k_req - 1].0 {
            break;
        }
        // children: fix rows < r to the node's columns, forbid (r, cols[r])
        for r in node.fixed..real_rows {
            forbidden.iter_mut().for_each(|x| *x = false);
            loss_forbidden.iter_mut().for_each(|x| *x = false);
            let mut link = node.forbid.as_ref();
            while let Some(f) = link {
                if f.row >= r {
                    if f.col == NONE {
                        loss_forbidden[f.row] = true;
                    } else {
                        forbidden[f.row * n + f.col] = true;
                    }
                }
                link = f.next.as_ref();
            }
            let freed = node.cols[r];
            let new_forbid = if m.is_loss_column(freed) { NONE } else { freed };
            if new_forbid == NONE {
                loss_forbidden[r] = true;
            } else {
                forbidden[r * n + freed] = true;
            }
            active.iter_mut().for_each(|x| *x = true);
            for &c in &node.cols[..r] {
                active[c] = false;
            }
            col4row.copy_from_slice(&node.cols);
            row4col.iter_mut().for_each(|x| *x = NONE);
            for (row, &c) in node.cols.iter().enumerate() {
                if row != r {
                    row4col[c] = row;
                }
            }
            col4row[r] = NONE;
            let mut u = node.u.clone();
            let mut v = node.v.clone();
            let allowed = |i: usize, j: usize| {
                !forbidden[i * n + j] && !(loss_forbidden[i] && m.is_loss_column(j))
            };
            if !aug.run(m, &allowed, &active, &mut col4row, &mut row4col, &mut u, &mut v, r) {
                continue;
            }
            let forbid = Some(Rc::new(Forbid { row: r, col: new_forbid, next: node.forbid.clone() }));
            let child = Node {
                total: m.total(&col4row),
                key: key_of(m, &col4row),
                cols: col4row.clone(),
                fixed: r,
                forbid,
                u,
                v,
            };
            heap.push(child);
        }
        out.push((node.total, node.key, node.cols));
        // keep only as many open nodes as can still matter
        if out.len() < k_req {
            let need = k_req - out.len();
            if heap.len() > 2 * need + 64 {
                prune(&mut heap, need);
            }
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    out.truncate(k_req);
    let top = out.first().map(|o| o.0).unwrap_or(0.0);
    let relative_likelihoods = out.iter().map(|o| (o.0 - top).exp()).collect();
    let entries = out
        .into_iter()
        .map(|(total, _, cols)| RankedAssignment { assignment: m.canonical(&cols), log_likelihood: total })
        .collect();
    PermutationRanking { entries, relative_likelihoods, k_requested: k_req }
}

/// Keep the `need` best nodes, plus any that tie with the last kept.
fn prune(heap: &mut BinaryHeap<Node>, need: usize) {
    let mut v = std::mem::take(heap).into_vec();
    v.sort_unstable_by(|a, b| b.cmp(a));
    let cut_total = v[need - 1].total;
    let keep = v.iter().position(|n| n.total < cut_total).unwrap_or(v.len()).max(need);
    v.truncate(keep);
    *heap = BinaryHeap::from(v);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one() {
        let m = LikelihoodMatrix::from_square(1, vec![-3.0]).unwrap();
        let a = best_assignment(&m);
        assert_eq!(a.cols, vec![0]);
        assert_eq!(a.total, -3.0);
    }

    #[test]
    fn diagonal_dominant_is_identity() {
        let n = 6;
        let e: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { -10.0 - (k % 7) as f64 }).collect();
        let m = LikelihoodMatrix::from_square(n, e).unwrap();
        assert_eq!(best_assignment(&m).cols, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn loss_columns_are_one_hypothesis() {
        // 3 atoms, 1 survivor: 3 distinct hypotheses, not 3! = 6
        let m = LikelihoodMatrix::padded(3, 1, &[-1.0, -2.0, -3.0], -5.0, 0.0).unwrap();
        let r = k_best_assignments(&m, KBestOptions::exact(100));
        assert_eq!(r.entries.len(), 3);
        assert_eq!(r.entries[0].assignment, vec![Some(0), None, None]);
        assert_eq!(r.relative_likelihoods[0], 1.0);
    }
}
