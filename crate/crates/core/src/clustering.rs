//! OPTICS ordering with kernel-density parameter selection, cluster
//! extraction, silhouette scoring and the on-disk structured store.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::euclidean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Vec<f64>>,
    norm_scale: f64,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidInput("points must share one dimension".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        let mut ps = Self { points, norm_scale: 0.0 };
        ps.norm_scale = ps.pairwise().into_iter().fold(0.0, f64::max);
        Ok(ps)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Largest pairwise distance.
    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(&self.points[i], &self.points[j])
    }

    /// Distances of all unordered pairs `i < j`.
    pub fn pairwise(&self) -> Vec<f64> {
        let n = self.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.distance(i, j)).collect()
    }

    pub fn median_pairwise_distance(&self) -> f64 {
        median(self.pairwise())
    }

    pub fn nearest_neighbor_distance(&self, i: usize) -> f64 {
        (0..self.len()).filter(|&j| j != i).map(|j| self.distance(i, j)).fold(f64::INFINITY, f64::min)
    }

    /// One whitespace-separated point per line; `#` lines are comments.
    pub fn parse(raw: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let p: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::parse(i + 1, format!("`{t}`: {e}"))))
                .collect::<Result<_>>()?;
            points.push(p);
        }
        Self::new(points)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Epanechnikov kernel.
pub fn kernel(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub densities: Vec<f64>,
    pub max_density: f64,
    pub bandwidth: f64,
}

/// Leave-one-out kernel density over scaled pairwise distances.
pub fn epanechnikov_density(ps: &PointSet, h: f64) -> Result<DensityEstimate> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    let z = ps.len();
    if z < 2 {
        return Err(Error::InvalidInput("density estimation needs at least two points".into()));
    }
    let densities: Vec<f64> = (0..z)
        .into_par_iter()
        .map(|i| (0..z).filter(|&j| j != i).map(|j| kernel(ps.distance(i, j) / h)).sum::<f64>() / (z - 1) as f64)
        .collect();
    let max_density = densities.iter().copied().fold(0.0, f64::max);
    Ok(DensityEstimate { densities, max_density, bandwidth: h })
}

/// `max(2, round(alpha · max_density))`, rounding halves up.
pub fn select_min_pts(de: &DensityEstimate, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    let raw = (alpha * de.max_density + 0.5).floor();
    Ok((raw as usize).max(2))
}

/// Smallest nearest-neighbour distance among points whose density is below
/// `beta · max_density`; the median nearest-neighbour distance when no point
/// is that sparse.
pub fn select_epsilon(ps: &PointSet, de: &DensityEstimate, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidInput(format!("beta must lie in (0, 1), got {beta}")));
    }
    let cutoff = beta * de.max_density;
    let sparse: Vec<usize> = (0..ps.len()).filter(|&i| de.densities[i] < cutoff).collect();
    if sparse.is_empty() {
        return Ok(median((0..ps.len()).map(|i| ps.nearest_neighbor_distance(i)).collect()));
    }
    Ok(sparse.into_iter().map(|i| ps.nearest_neighbor_distance(i)).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityOrdering {
    pub order: Vec<usize>,
    /// Indexed by point; infinite when the point is not core.
    pub core_distance: Vec<f64>,
    /// Indexed by point; infinite for points that start a new expansion.
    pub reachability: Vec<f64>,
    pub min_pts: usize,
    pub epsilon: f64,
}

/// Distance to the `min_pts`-th nearest other point, if within `epsilon`.
pub fn core_distance(ps: &PointSet, p: usize, min_pts: usize, epsilon: f64) -> f64 {
    let mut d: Vec<f64> = (0..ps.len()).filter(|&j| j != p).map(|j| ps.distance(p, j)).collect();
    if d.len() < min_pts {
        return f64::INFINITY;
    }
    d.sort_by(f64::total_cmp);
    let c = d[min_pts - 1];
    if c <= epsilon {
        c
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Seed(f64, usize);

impl Eq for Seed {}

impl PartialOrd for Seed {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Seed {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

pub fn optics_order(ps: &PointSet, min_pts: usize, epsilon: f64) -> Result<ReachabilityOrdering> {
    if min_pts < 2 {
        return Err(Error::InvalidInput(format!("min_pts must be at least 2, got {min_pts}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = ps.len();
    let core: Vec<f64> = (0..n).into_par_iter().map(|p| core_distance(ps, p, min_pts, epsilon)).collect();
    let mut reach = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let update = |p: usize, done: &[bool], reach: &mut [f64], seeds: &mut BTreeSet<Seed>| {
        for o in 0..n {
            if o == p || done[o] {
                continue;
            }
            let d = ps.distance(p, o);
            if d > epsilon {
                continue;
            }
            let r = core[p].max(d);
            if r < reach[o] {
                if reach[o].is_finite() {
                    seeds.remove(&Seed(reach[o], o));
                }
                reach[o] = r;
                seeds.insert(Seed(r, o));
            }
        }
    };

    for start in 0..n {
        if done[start] {
            continue;
        }
        done[start] = true;
        order.push(start);
        if core[start].is_infinite() {
            continue;
        }
        let mut seeds = BTreeSet::new();
        update(start, &done, &mut reach, &mut seeds);
        while let Some(Seed(_, q)) = seeds.pop_first() {
            done[q] = true;
            order.push(q);
            if core[q].is_finite() {
                update(q, &done, &mut reach, &mut seeds);
            }
        }
    }
    Ok(ReachabilityOrdering { order, core_distance: core, reachability: reach, min_pts, epsilon })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Per point; `None` is noise.
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
    pub cut: f64,
}

/// Splits the ordering wherever reachability exceeds `cut`; segments of at
/// least `min_pts` points become clusters, numbered by first appearance.
pub fn extract_clusters(ro: &ReachabilityOrdering, cut: f64) -> Result<ClusterAssignment> {
    if !(cut > 0.0) {
        return Err(Error::InvalidInput(format!("cut must be positive, got {cut}")));
    }
    let mut segments: Vec<Vec<usize>> = Vec::new();
    for &p in &ro.order {
        match segments.last_mut() {
            Some(seg) if ro.reachability[p] <= cut => seg.push(p),
            _ => segments.push(vec![p]),
        }
    }
    let mut labels = vec![None; ro.order.len()];
    let mut n_clusters = 0;
    for seg in segments.into_iter().filter(|s| s.len() >= ro.min_pts) {
        for p in seg {
            labels[p] = Some(n_clusters);
        }
        n_clusters += 1;
    }
    Ok(ClusterAssignment { labels, n_clusters, cut })
}

/// Mean silhouette over clustered points; noise is excluded and singleton
/// clusters score 0.
pub fn silhouette(ps: &PointSet, ca: &ClusterAssignment) -> Result<f64> {
    let k = ca.labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, l) in ca.labels.iter().enumerate() {
        if let Some(c) = l {
            members[*c].push(i);
        }
    }
    members.retain(|m| !m.is_empty());
    if members.len() < 2 {
        return Err(Error::Undefined(format!("silhouette needs two clusters, found {}", members.len())));
    }
    let mean_dist = |i: usize, m: &[usize]| -> f64 {
        let others: Vec<usize> = m.iter().copied().filter(|&j| j != i).collect();
        others.iter().map(|&j| ps.distance(i, j)).sum::<f64>() / others.len() as f64
    };
    let scores: Vec<f64> = members
        .par_iter()
        .enumerate()
        .flat_map_iter(|(c, own)| {
            let members = &members;
            own.iter().map(move |&i| {
                if own.len() == 1 {
                    return 0.0;
                }
                let a = mean_dist(i, own);
                let b = members
                    .iter()
                    .enumerate()
                    .filter(|(o, _)| *o != c)
                    .map(|(_, m)| mean_dist(i, m))
                    .fold(f64::INFINITY, f64::min);
                let denom = a.max(b);
                if denom == 0.0 {
                    0.0
                } else {
                    (b - a) / denom
                }
            })
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkParams {
    /// Kernel bandwidth; the median pairwise distance when unset.
    pub bandwidth: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Extraction cut; epsilon when unset.
    pub cut: Option<f64>,
}

impl Default for EkParams {
    fn default() -> Self {
        Self { bandwidth: None, alpha: 5.0, beta: 0.5, cut: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkClustering {
    pub density: DensityEstimate,
    pub ordering: ReachabilityOrdering,
    pub assignment: ClusterAssignment,
}

/// Density-driven parameter selection followed by OPTICS and extraction.
pub fn ek_optics(ps: &PointSet, params: &EkParams) -> Result<EkClustering> {
    let h = match params.bandwidth {
        Some(h) => h,
        None => {
            let m = ps.median_pairwise_distance();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let density = epanechnikov_density(ps, h)?;
    let min_pts = select_min_pts(&density, params.alpha)?;
    let mut epsilon = select_epsilon(ps, &density, params.beta)?;
    if !(epsilon > 0.0) {
        // Coincident points: any positive radius reaches them.
        epsilon = f64::MIN_POSITIVE;
    }
    let ordering = optics_order(ps, min_pts, epsilon)?;
    let assignment = extract_clusters(&ordering, params.cut.unwrap_or(epsilon))?;
    Ok(EkClustering { density, ordering, assignment })
}

/// One line of the structured store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredRecord {
    pub id: u32,
    pub label: Option<usize>,
    pub reachability: f64,
    pub core_distance: f64,
    pub features: Vec<f64>,
}

pub const STORE_HEADER: &str = "# id\tlabel\treachability\tcore_distance\tfeatures...";

/// Tab-separated store; noise is written as `NOISE`, infinities as `inf`.
pub fn write_store(records: &[StructuredRecord]) -> String {
    let mut out = String::from(STORE_HEADER);
    out.push('\n');
    for r in records {
        let label = r.label.map_or_else(|| "NOISE".to_string(), |l| l.to_string());
        let _ = write!(out, "{}\t{}\t{:?}\t{:?}", r.id, label, r.reachability, r.core_distance);
        for x in &r.features {
            let _ = write!(out, "\t{x:?}");
        }
        out.push('\n');
    }
    out
}

pub fn read_store(raw: &str) -> Result<Vec<StructuredRecord>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(Error::parse(lineno, "store line needs id, label, reachability and core distance"));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::parse(lineno, format!("bad {what} `{s}`")))
        };
        let id = cols[0].parse::<u32>().map_err(|_| Error::parse(lineno, format!("bad id `{}`", cols[0])))?;
        let label = match cols[1] {
            "NOISE" => None,
            s => Some(s.parse::<usize>().map_err(|_| Error::parse(lineno, format!("bad label `{s}`")))?),
        };
        let features = cols[4..].iter().map(|s| num(s, "feature")).collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::parse(lineno, format!("expected {d} features, found {}", features.len())))
            }
            _ => {}
        }
        out.push(StructuredRecord {
            id,
            label,
            reachability: num(cols[2], "reachability")?,
            core_distance: num(cols[3], "core distance")?,
            features,
        });
    }
    Ok(out)
}
