//! Entropy-weighted feature fusion and mean-shift clustering.

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_WEIGHT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Semantic,
    ConsistencyColumn,
    SmoothnessColumn,
}

#[derive(Debug, Clone)]
pub struct Feature {
    pub role: FeatureRole,
    /// n×m_l, one row per point.
    pub matrix: DMatrix<f64>,
    /// Entropy bandwidth σ_l.
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct FeatureBundle {
    features: Vec<Feature>,
}

impl FeatureBundle {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::EmptyInput);
        };
        let n = first.matrix.nrows();
        for f in &features {
            if f.matrix.nrows() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: f.matrix.nrows(),
                });
            }
            if f.matrix.ncols() == 0 {
                return Err(Error::InvalidArgument("feature with no columns".into()));
            }
            if !(f.sigma > 0.0) {
                return Err(Error::InvalidArgument(format!("entropy bandwidth must be positive, got {}", f.sigma)));
            }
        }
        if features.iter().filter(|f| f.role == FeatureRole::Semantic).count() > 1 {
            return Err(Error::InvalidArgument("at most one semantic feature".into()));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n(&self) -> usize {
        self.features[0].matrix.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Features whose `1/H` was replaced by the cap.
    pub clamped: Vec<bool>,
}

fn row_sq_dist(f: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..f.ncols()).map(|c| (f[(i, c)] - f[(j, c)]).powi(2)).sum()
}

/// Row-major copy, for cache-friendly pairwise loops.
fn rows_of(f: &DMatrix<f64>) -> Vec<f64> {
    let (n, m) = f.shape();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for c in 0..m {
            out[i * m + c] = f[(i, c)];
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `H = −Σ_i P_i ln P_i` with `P_i` the Gaussian kernel density of the rows of
/// `F` evaluated at row `i`.
pub fn feature_entropy(f: &DMatrix<f64>, sigma: f64) -> f64 {
    let (n, m) = f.shape();
    let rows = rows_of(f);
    let norm = (2.0 * std::f64::consts::PI).powf(-(m as f64) / 2.0) * sigma.powi(-(m as i32)) / n as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = &rows[i * m..(i + 1) * m];
            let s: f64 = (0..n).map(|j| (-sq_dist(ri, &rows[j * m..(j + 1) * m]) * inv).exp()).sum();
            let p = norm * s;
            -p * p.ln()
        })
        .collect();
    terms.iter().sum()
}

/// `w_l = w̄_l/‖w̄‖` with `w̄_l = 1/H_l`; non-positive entropies (and `1/H`
/// above the cap) use the cap instead.
pub fn weights_from_entropies(entropies: &[f64], max_weight: f64) -> WeightVector {
    let mut clamped = Vec::with_capacity(entropies.len());
    let wbar: Vec<f64> = entropies
        .iter()
        .map(|&h| {
            let inv = if h > 0.0 { 1.0 / h } else { f64::INFINITY };
            if inv > max_weight || !inv.is_finite() {
                clamped.push(true);
                max_weight
            } else {
                clamped.push(false);
                inv
            }
        })
        .collect();
    let norm = wbar.iter().map(|x| x * x).sum::<f64>().sqrt();
    WeightVector {
        w: wbar.iter().map(|x| x / norm).collect(),
        entropies: entropies.to_vec(),
        clamped,
    }
}

pub fn compute_weights(bundle: &FeatureBundle, max_weight: f64) -> WeightVector {
    let entropies: Vec<f64> = bundle
        .features()
        .iter()
        .map(|f| feature_entropy(&f.matrix, f.sigma))
        .collect();
    let out = weights_from_entropies(&entropies, max_weight);
    let non_positive = entropies.iter().filter(|&&h| !(h > 0.0)).count();
    if non_positive > 0 {
        warn!("{non_positive} of {} features had non-positive entropy; their weight was capped at {max_weight}", out.w.len());
    }
    let clamped = out.clamped.iter().filter(|&&c| c).count();
    debug!("{clamped} of {} features at the weight cap {max_weight}", out.w.len());
    out
}

/// Column concatenation of `w_l·F_l`.
pub fn assemble_feature_space(bundle: &FeatureBundle, weights: &WeightVector) -> Result<DMatrix<f64>> {
    if weights.w.len() != bundle.len() {
        return Err(Error::LengthMismatch {
            expected: bundle.len(),
            found: weights.w.len(),
        });
    }
    let n = bundle.n();
    let total: usize = bundle.features().iter().map(|f| f.matrix.ncols()).sum();
    let mut out = DMatrix::zeros(n, total);
    let mut col = 0;
    for (f, &w) in bundle.features().iter().zip(&weights.w) {
        let m = f.matrix.ncols();
        out.columns_mut(col, m).copy_from(&(&f.matrix * w));
        col += m;
    }
    Ok(out)
}

/// Median Euclidean distance over all unordered row pairs.
pub fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let (n, m) = x.shape();
    if n < 2 {
        return 0.0;
    }
    let rows = rows_of(x);
    let mut d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (i + 1..n).map(move |j| sq_dist(&rows[i * m..(i + 1) * m], &rows[j * m..(j + 1) * m]))
        })
        .collect();
    let mid = d.len() / 2;
    let (_, v, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    v.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanShiftOptions {
    pub max_iter: usize,
    /// Convergence when a seed moves less than `tol_factor·h`.
    pub tol_factor: f64,
    /// Modes closer than `merge_factor·h` are merged.
    pub merge_factor: f64,
    pub min_size: usize,
    /// A trajectory that comes within `capture_factor·h` of an endpoint
    /// from an earlier seed block stops there; 0 disables.
    pub capture_factor: f64,
}

impl Default for MeanShiftOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol_factor: 1e-4,
            merge_factor: 0.5,
            min_size: 20,
            capture_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub modes: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }
}

/// Kernel weights below `exp(-25)` relative to the peak are dropped.
const KERNEL_CUTOFF: f64 = 50.0;

/// Seeds per block; capture targets only come from earlier blocks.
const SEED_BLOCK: usize = 128;

/// Gaussian mean shift seeded from every row of `x`.
pub fn mean_shift(x: &DMatrix<f64>, bandwidth: f64, opts: &MeanShiftOptions) -> Result<ClusterResult> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let (n, m) = x.shape();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let rows = rows_of(x);
    let h2 = bandwidth * bandwidth;
    let inv = 1.0 / (2.0 * h2);
    let tol2 = (opts.tol_factor * bandwidth).powi(2);
    let cutoff = KERNEL_CUTOFF * h2;
    let cap2 = (opts.capture_factor * bandwidth).powi(2);
    let mut attractors: Vec<Vec<f64>> = Vec::new();
    let mut converged: Vec<Vec<f64>> = Vec::with_capacity(n);
    for block in (0..n).collect::<Vec<_>>().chunks(SEED_BLOCK) {
        let ends: Vec<Vec<f64>> = block
            .par_iter()
            .map(|&s| {
                let mut cur = rows[s * m..(s + 1) * m].to_vec();
                let mut acc = vec![0.0; m];
                for _ in 0..opts.max_iter {
                    if let Some(a) = attractors.iter().find(|a| sq_dist(a, &cur) <= cap2) {
                        return a.clone();
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let mut wsum = 0.0;
                    for j in 0..n {
                        let rj = &rows[j * m..(j + 1) * m];
                        let d2 = sq_dist(&cur, rj);
                        if d2 > cutoff {
                            continue;
                        }
                        let w = (-d2 * inv).exp();
                        wsum += w;
                        for (a, v) in acc.iter_mut().zip(rj) {
                            *a += w * v;
                        }
                    }
                    if !(wsum > 0.0) {
                        break;
                    }
                    acc.iter_mut().for_each(|a| *a /= wsum);
                    let shift = sq_dist(&acc, &cur);
                    std::mem::swap(&mut cur, &mut acc);
                    if shift < tol2 {
                        break;
                    }
                }
                cur
            })
            .collect();
        if cap2 > 0.0 {
            for e in &ends {
                if !attractors.iter().any(|a| sq_dist(a, e) <= cap2) {
                    attractors.push(e.clone());
                }
            }
        }
        converged.extend(ends);
    }

    // Sequential merge in seed order.
    let merge2 = (opts.merge_factor * bandwidth).powi(2);
    let mut modes: Vec<Vec<f64>> = Vec::new();
    let mut assign = vec![0usize; n];
    for (i, c) in converged.iter().enumerate() {
        match modes.iter().position(|mo| sq_dist(mo, c) <= merge2) {
            Some(k) => assign[i] = k,
            None => {
                assign[i] = modes.len();
                modes.push(c.clone());
            }
        }
    }
    let mut sizes = vec![0usize; modes.len()];
    for &a in &assign {
        sizes[a] += 1;
    }
    // Dissolve small clusters into the nearest surviving mode.
    let largest = (0..modes.len()).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k))).expect("n > 0");
    let survives: Vec<bool> = (0..modes.len()).map(|k| sizes[k] >= opts.min_size || k == largest).collect();
    let target: Vec<usize> = (0..modes.len())
        .map(|k| {
            if survives[k] {
                k
            } else {
                (0..modes.len())
                    .filter(|&t| survives[t])
                    .min_by(|&a, &b| sq_dist(&modes[k], &modes[a]).total_cmp(&sq_dist(&modes[k], &modes[b])).then(a.cmp(&b)))
                    .expect("at least one survivor")
            }
        })
        .collect();
    // Relabel by first occurrence in point order.
    let mut relabel = vec![usize::MAX; modes.len()];
    let mut next = 0;
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let t = target[assign[i]];
        if relabel[t] == usize::MAX {
            relabel[t] = next;
            next += 1;
        }
        labels[i] = relabel[t];
    }
    let mut out_modes = vec![Vec::new(); next];
    for (k, &r) in relabel.iter().enumerate() {
        if r != usize::MAX {
            out_modes[r] = modes[k].clone();
        }
    }
    let mut out_sizes = vec![0usize; next];
    for &l in &labels {
        out_sizes[l] += 1;
    }
    Ok(ClusterResult {
        labels,
        modes: out_modes,
        sizes: out_sizes,
    })
}

/// Row distance helper used in tests and diagnostics.
pub fn row_distance(f: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    row_sq_dist(f, i, j).sqrt()
}
