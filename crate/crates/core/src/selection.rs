//! Block distances and weight-sharing base selection.
//!
//! Every pruned block is paired with the unpruned block whose projections
//! are closest once their low-rank difference has been explained away.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::{BlockWeights, Model, Role};
use crate::par::*;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("no pruned blocks given")]
    NothingPruned,
    #[error("no unpruned candidate for block {0}")]
    NoCandidates(usize),
    #[error("block {0} does not exist")]
    NoSuchBlock(usize),
    #[error("block {0} is not native and cannot be scored")]
    NotNative(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed distance table: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetricKind {
    /// Tail energy of the difference of rank-r reconstructions.
    Proposed,
    /// Tail energy of the raw difference.
    NoHighRankPrune,
    /// Frobenius norm of the raw difference.
    PlainFrobenius,
}

impl DistanceMetricKind {
    pub const ALL: [DistanceMetricKind; 3] = [
        DistanceMetricKind::Proposed,
        DistanceMetricKind::NoHighRankPrune,
        DistanceMetricKind::PlainFrobenius,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetricKind::Proposed => "proposed",
            DistanceMetricKind::NoHighRankPrune => "no-hrp",
            DistanceMetricKind::PlainFrobenius => "frobenius",
        }
    }
}

impl fmt::Display for DistanceMetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "proposed" => Ok(DistanceMetricKind::Proposed),
            "no-hrp" => Ok(DistanceMetricKind::NoHighRankPrune),
            "frobenius" => Ok(DistanceMetricKind::PlainFrobenius),
            other => Err(format!("unknown metric '{other}' (expected proposed, no-hrp or frobenius)")),
        }
    }
}

/// `sqrt(Σ_{k ≥ r} σ_k²)` of `w`: the Frobenius residual of its best rank-r
/// approximation.
pub fn tail_energy(w: &Matrix, r: usize) -> Result<f64> {
    let max = w.rows().min(w.cols());
    if r > max {
        return Err(LinalgError::RankOutOfRange { rank: r, max }.into());
    }
    let f = linalg::svd(w)?;
    Ok(f.sigma[r..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

fn check_pair(wi: &Matrix, wj: &Matrix, r: usize) -> Result<()> {
    if wi.shape() != wj.shape() {
        return Err(LinalgError::ShapeMismatch {
            op: "matrix_distance",
            lhs: wi.shape(),
            rhs: wj.shape(),
        }
        .into());
    }
    let max = wi.rows().min(wi.cols());
    if r == 0 || r > max {
        return Err(LinalgError::RankOutOfRange { rank: r, max }.into());
    }
    Ok(())
}

/// Distance between two same-shaped projection matrices.
pub fn matrix_distance(wi: &Matrix, wj: &Matrix, r: usize, kind: DistanceMetricKind) -> Result<f64> {
    check_pair(wi, wj, r)?;
    match kind {
        DistanceMetricKind::PlainFrobenius => Ok(wi.sub(wj)?.frobenius_norm()),
        DistanceMetricKind::NoHighRankPrune => tail_energy(&wi.sub(wj)?, r),
        DistanceMetricKind::Proposed => {
            let hi = linalg::low_rank(wi, r)?.product();
            let hj = linalg::low_rank(wj, r)?.product();
            tail_energy(&hi.sub(&hj)?, r)
        }
    }
}

/// The matrix a metric compares: its rank-r reconstruction for `Proposed`,
/// the raw weights otherwise.
fn prepared(w: &Matrix, r: usize, kind: DistanceMetricKind) -> Result<Matrix> {
    match kind {
        DistanceMetricKind::Proposed => {
            check_pair(w, w, r)?;
            Ok(linalg::low_rank(w, r)?.product())
        }
        _ => Ok(w.clone()),
    }
}

fn prepared_distance(pi: &Matrix, pj: &Matrix, r: usize, kind: DistanceMetricKind) -> Result<f64> {
    check_pair(pi, pj, r)?;
    let diff = pi.sub(pj)?;
    match kind {
        DistanceMetricKind::PlainFrobenius => Ok(diff.frobenius_norm()),
        _ => tail_energy(&diff, r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub i: usize,
    pub j: usize,
    /// q, k, v, o, up, down
    pub per_role: [f64; 6],
    pub aggregate: f64,
    pub rank: usize,
}

impl DistanceRecord {
    fn new(i: usize, j: usize, per_role: [f64; 6], rank: usize) -> Self {
        DistanceRecord {
            i,
            j,
            per_role,
            aggregate: per_role.iter().sum(),
            rank,
        }
    }
}

/// Role-wise distances between two blocks; the aggregate is their sum.
pub fn block_distance(a: &BlockWeights, b: &BlockWeights, r: usize, kind: DistanceMetricKind) -> Result<DistanceRecord> {
    let mut per_role = [0.0; 6];
    for role in Role::ALL {
        per_role[role.index()] = matrix_distance(a.role(role), b.role(role), r, kind)?;
    }
    Ok(DistanceRecord::new(0, 0, per_role, r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub metric: DistanceMetricKind,
    pub rank: usize,
    pub pruned: Vec<usize>,
    pub candidates: Vec<usize>,
    /// Ordered by `(i, j)`.
    pub records: Vec<DistanceRecord>,
    /// Pruned block → chosen base.
    pub chosen: BTreeMap<usize, usize>,
}

impl SelectionReport {
    pub fn base_of(&self, pruned: usize) -> Option<usize> {
        self.chosen.get(&pruned).copied()
    }

    pub fn record(&self, i: usize, j: usize) -> Option<&DistanceRecord> {
        self.records.iter().find(|r| r.i == i && r.j == j)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Argmin of the aggregate for each pruned block; ties go to the nearer
/// block, then to the lower index. Independent of record order.
pub fn choose_from_records(records: &[DistanceRecord], pruned: &[usize]) -> Result<BTreeMap<usize, usize>> {
    let mut chosen = BTreeMap::new();
    for &i in pruned {
        let best = records
            .iter()
            .filter(|r| r.i == i)
            .min_by(|a, b| {
                a.aggregate
                    .total_cmp(&b.aggregate)
                    .then(a.j.abs_diff(i).cmp(&b.j.abs_diff(i)))
                    .then(a.j.cmp(&b.j))
            })
            .ok_or(SelectionError::NoCandidates(i))?;
        chosen.insert(i, best.j);
    }
    Ok(chosen)
}

/// Scores every (pruned, unpruned) pair of `blocks` and picks a base for
/// each pruned block. Candidates may serve several pruned blocks.
pub fn select_bases(blocks: &[&BlockWeights], pruned: &[usize], r: usize, kind: DistanceMetricKind) -> Result<SelectionReport> {
    if pruned.is_empty() {
        return Err(SelectionError::NothingPruned);
    }
    let mut pruned: Vec<usize> = pruned.to_vec();
    pruned.sort_unstable();
    pruned.dedup();
    if let Some(&p) = pruned.iter().find(|&&p| p >= blocks.len()) {
        return Err(SelectionError::NoSuchBlock(p));
    }
    let candidates: Vec<usize> = (0..blocks.len()).filter(|j| !pruned.contains(j)).collect();
    if candidates.is_empty() {
        return Err(SelectionError::NoCandidates(pruned[0]));
    }

    // each block's comparison matrices are computed once and reused per pair
    let jobs: Vec<(usize, Role)> = (0..blocks.len())
        .flat_map(|b| Role::ALL.into_iter().map(move |role| (b, role)))
        .collect();
    let prepared: Vec<Result<Matrix>> = jobs
        .par_iter()
        .map(|&(b, role)| prepared(blocks[b].role(role), r, kind))
        .collect();
    let prepared = prepared.into_iter().collect::<Result<Vec<Matrix>>>()?;
    let prep = |b: usize, role: Role| &prepared[b * 6 + role.index()];

    let pairs: Vec<(usize, usize)> = pruned
        .iter()
        .flat_map(|&i| candidates.iter().map(move |&j| (i, j)))
        .collect();
    let records: Vec<Result<DistanceRecord>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut per_role = [0.0; 6];
            for role in Role::ALL {
                per_role[role.index()] = prepared_distance(prep(i, role), prep(j, role), r, kind)?;
            }
            Ok(DistanceRecord::new(i, j, per_role, r))
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let chosen = choose_from_records(&records, &pruned)?;
    Ok(SelectionReport {
        metric: kind,
        rank: r,
        pruned,
        candidates,
        records,
        chosen,
    })
}

/// `select_bases` over the blocks of a model that has not been modified yet.
pub fn select_bases_in(model: &Model, pruned: &[usize], r: usize, kind: DistanceMetricKind) -> Result<SelectionReport> {
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.native().ok_or(SelectionError::NotNative(i)))
        .collect::<Result<Vec<_>>>()?;
    select_bases(&blocks, pruned, r, kind)
}

const CSV_HEADER: [&str; 11] = ["i", "j", "i_minus_j", "q", "k", "v", "o", "up", "down", "aggregate", "rank"];

/// One row per scored pair: `i, j, i-j`, the six role distances, the
/// aggregate and the rank.
pub fn write_distance_csv<W: Write>(report: &SelectionReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for rec in &report.records {
        let mut row = vec![
            rec.i.to_string(),
            rec.j.to_string(),
            (rec.i as i64 - rec.j as i64).to_string(),
        ];
        row.extend(rec.per_role.iter().map(f64::to_string));
        row.push(rec.aggregate.to_string());
        row.push(rec.rank.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_distance_csv<R: Read>(input: R) -> Result<Vec<DistanceRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(SelectionError::Malformed(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| SelectionError::Malformed(format!("bad number '{}'", &rec[k])))
        };
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .parse()
                .map_err(|_| SelectionError::Malformed(format!("bad integer '{}'", &rec[k])))
        };
        let mut per_role = [0.0; 6];
        for (k, v) in per_role.iter_mut().enumerate() {
            *v = num(3 + k)?;
        }
        out.push(DistanceRecord {
            i: int(0)?,
            j: int(1)?,
            per_role,
            aggregate: num(9)?,
            rank: int(10)?,
        });
    }
    Ok(out)
}

/// Median aggregate distance per `|i − j|`, the proximity trend of a table.
pub fn median_by_gap(records: &[DistanceRecord]) -> BTreeMap<usize, f64> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.i.abs_diff(r.j)).or_default().push(r.aggregate);
    }
    groups
        .into_iter()
        .map(|(gap, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            (gap, med)
        })
        .collect()
}
