//! Segmentation quality metrics: matched segment IoU, type accuracy, residual
//! of fitted primitives against ground-truth patches, and point coverage.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Primitive, PrimitiveType};
use crate::segmentation::Segmentation;
use crate::synth::Surface;

pub const DEFAULT_RES_SAMPLES: usize = 512;
pub const DEFAULT_COVERAGE_EPS: f64 = 0.01;

/// Minimum-cost assignment of rows to distinct columns (`rows <= cols`),
/// shortest augmenting paths with potentials. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// IoU between every ground-truth segment (rows) and predicted segment (columns).
pub fn iou_matrix(pred: &Segmentation, gt: &Segmentation) -> Result<Vec<Vec<f64>>> {
    if pred.n() != gt.n() {
        return Err(Error::LengthMismatch {
            expected: gt.n(),
            found: pred.n(),
        });
    }
    let (kg, kp) = (gt.num_segments(), pred.num_segments());
    let mut inter = vec![vec![0usize; kp]; kg];
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        inter[g][p] += 1;
    }
    Ok((0..kg)
        .map(|g| {
            (0..kp)
                .map(|p| {
                    let i = inter[g][p];
                    let union = gt.segments[g].size + pred.segments[p].size - i;
                    if union == 0 {
                        0.0
                    } else {
                        i as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect())
}

/// Hungarian matching maximizing total IoU. Ground-truth segments left without
/// an overlapping prediction map to `None`.
pub fn match_segments(pred: &Segmentation, gt: &Segmentation) -> Result<Vec<Option<usize>>> {
    let iou = iou_matrix(pred, gt)?;
    let (kg, kp) = (gt.num_segments(), pred.num_segments());
    let size = kg.max(kp);
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|g| (0..size).map(|p| if g < kg && p < kp { -iou[g][p] } else { 0.0 }).collect())
        .collect();
    let a = hungarian(&cost);
    Ok((0..kg)
        .map(|g| {
            let p = a[g];
            (p < kp && iou[g][p] > 0.0).then_some(p)
        })
        .collect())
}

pub fn seg_iou(pred: &Segmentation, gt: &Segmentation, assignment: &[Option<usize>]) -> Result<f64> {
    let iou = iou_matrix(pred, gt)?;
    if gt.num_segments() == 0 {
        return Ok(0.0);
    }
    let s: f64 = assignment
        .iter()
        .enumerate()
        .map(|(g, p)| p.map_or(0.0, |p| iou[g][p]))
        .sum();
    Ok(s / gt.num_segments() as f64)
}

pub fn type_iou(pred: &Segmentation, gt: &Segmentation, assignment: &[Option<usize>]) -> f64 {
    if gt.num_segments() == 0 {
        return 0.0;
    }
    let hits = assignment
        .iter()
        .enumerate()
        .filter(|(g, p)| p.is_some_and(|p| pred.segments[p].kind == gt.segments[*g].kind))
        .count();
    hits as f64 / gt.num_segments() as f64
}

/// Mean distance from `samples` points on each ground-truth patch to the
/// matched predicted primitive, summed over matched segments. Returns the sum,
/// per-segment values, and the number of ground-truth segments skipped.
pub fn res_error(
    pred: &Segmentation,
    surfaces: &[Surface],
    assignment: &[Option<usize>],
    samples: usize,
    seed: u64,
) -> (f64, Vec<Option<f64>>, usize) {
    let mut total = 0.0;
    let mut skipped = 0;
    let per: Vec<Option<f64>> = surfaces
        .iter()
        .enumerate()
        .map(|(g, surf)| {
            let prim = assignment
                .get(g)
                .copied()
                .flatten()
                .and_then(|p| pred.segments[p].primitive.as_ref());
            let Some(prim) = prim else {
                skipped += 1;
                return None;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(g as u64));
            let pts = surf.sample(&mut rng, samples);
            let mean = pts.iter().map(|(p, _)| prim.distance(p)).sum::<f64>() / samples.max(1) as f64;
            total += mean;
            Some(mean)
        })
        .collect();
    (total, per, skipped)
}

/// Fraction of points within `eps` of the nearest primitive.
pub fn p_coverage(cloud: &PointCloud, primitives: &[Primitive], eps: f64) -> f64 {
    if primitives.is_empty() || cloud.is_empty() {
        return 0.0;
    }
    let covered = cloud
        .positions()
        .iter()
        .filter(|p| primitives.iter().any(|s| s.distance(p) < eps))
        .count();
    covered as f64 / cloud.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub gt_id: usize,
    pub pred_id: Option<usize>,
    pub iou: f64,
    pub gt_type: PrimitiveType,
    pub pred_type: Option<PrimitiveType>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seg_iou: f64,
    pub type_iou: f64,
    pub res_error: f64,
    pub p_coverage: f64,
    pub unmatched_gt: usize,
    pub res_error_skipped: usize,
    pub segments: Vec<SegmentMetrics>,
}

/// All four metrics; `surfaces` are the ground-truth patches, one per ground-truth segment.
pub fn evaluate(cloud: &PointCloud, pred: &Segmentation, gt: &Segmentation, surfaces: &[Surface]) -> Result<MetricsReport> {
    if cloud.len() != gt.n() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            found: gt.n(),
        });
    }
    if surfaces.len() != gt.num_segments() {
        return Err(Error::LengthMismatch {
            expected: gt.num_segments(),
            found: surfaces.len(),
        });
    }
    let assignment = match_segments(pred, gt)?;
    let iou = iou_matrix(pred, gt)?;
    let (res, per_res, skipped) = res_error(pred, surfaces, &assignment, DEFAULT_RES_SAMPLES, 0);
    let prims: Vec<Primitive> = pred.segments.iter().filter_map(|s| s.primitive.clone()).collect();
    let segments = assignment
        .iter()
        .enumerate()
        .map(|(g, p)| SegmentMetrics {
            gt_id: g,
            pred_id: *p,
            iou: p.map_or(0.0, |p| iou[g][p]),
            gt_type: gt.segments[g].kind,
            pred_type: p.map(|p| pred.segments[p].kind),
            residual: per_res[g],
        })
        .collect();
    Ok(MetricsReport {
        seg_iou: seg_iou(pred, gt, &assignment)?,
        type_iou: type_iou(pred, gt, &assignment),
        res_error: res,
        p_coverage: p_coverage(cloud, &prims, DEFAULT_COVERAGE_EPS),
        unmatched_gt: assignment.iter().filter(|a| a.is_none()).count(),
        res_error_skipped: skipped,
        segments,
    })
}

impl MetricsReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        for (k, v) in [
            ("seg_iou", self.seg_iou),
            ("type_iou", self.type_iou),
            ("res_error", self.res_error),
            ("p_coverage", self.p_coverage),
        ] {
            let _ = writeln!(s, "{k:<12} {v:>10.6}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>5} {:>5} {:>8} {:<15} {:<15} {:>10}", "gt", "pred", "iou", "gt_type", "pred_type", "residual");
        for m in &self.segments {
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:>8.4} {:<15} {:<15} {:>10}",
                m.gt_id,
                m.pred_id.map_or("-".to_string(), |p| p.to_string()),
                m.iou,
                m.gt_type.name(),
                m.pred_type.map_or("-", |t| t.name()),
                m.residual.map_or("-".to_string(), |r| format!("{r:.6}")),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::segmentation::Segment;

    fn seg(labels: Vec<usize>, kinds: &[PrimitiveType]) -> Segmentation {
        let k = kinds.len();
        let mut sizes = vec![0; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        let segments = kinds
            .iter()
            .zip(sizes)
            .map(|(&kind, size)| Segment {
                kind,
                primitive: None,
                size,
                rms_residual: 0.0,
            })
            .collect();
        Segmentation::new(labels, segments).unwrap()
    }

    const P: PrimitiveType = PrimitiveType::Plane;
    const S: PrimitiveType = PrimitiveType::Sphere;

    #[test]
    fn permuted_labels_match_perfectly() {
        let gt = seg(vec![0, 0, 1, 1, 2], &[P, S, P]);
        let pred = seg(vec![2, 2, 0, 0, 1], &[S, P, P]);
        let a = match_segments(&pred, &gt).unwrap();
        assert_eq!(a, vec![Some(2), Some(0), Some(1)]);
        assert_eq!(seg_iou(&pred, &gt, &a).unwrap(), 1.0);
        assert_eq!(type_iou(&pred, &gt, &a), 1.0);
    }

    #[test]
    fn merged_halves() {
        let gt = seg(vec![0, 0, 1, 1], &[P, P]);
        let pred = seg(vec![0, 0, 0, 0], &[P]);
        let a = match_segments(&pred, &gt).unwrap();
        assert_eq!(a.iter().filter(|x| x.is_some()).count(), 1);
        assert!((seg_iou(&pred, &gt, &a).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn extra_predictions_are_unmatched() {
        let gt = seg(vec![0, 0, 0, 0], &[P]);
        let pred = seg(vec![0, 0, 1, 2], &[P, S, S]);
        let a = match_segments(&pred, &gt).unwrap();
        assert_eq!(a, vec![Some(0)]);
        assert!((seg_iou(&pred, &gt, &a).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn type_accuracy_counts() {
        let gt = seg(vec![0, 1, 2, 3], &[P, P, S, S]);
        let pred = seg(vec![0, 1, 2, 3], &[P, S, S, P]);
        let a = match_segments(&pred, &gt).unwrap();
        assert_eq!(type_iou(&pred, &gt, &a), 0.5);
    }

    #[test]
    fn hungarian_small_exact() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn residual_and_coverage_examples() {
        let surf = Surface::Plane {
            origin: [0.0; 3],
            normal: [0.0, 0.0, 1.0],
            u_dir: [1.0, 0.0, 0.0],
            half_extent: [0.5, 0.5],
        };
        let exact = Primitive::Plane {
            normal: Vec3::z(),
            offset: 0.0,
        };
        let shifted = Primitive::Plane {
            normal: Vec3::z(),
            offset: 0.01,
        };
        let mut pred = seg(vec![0; 4], &[P]);
        pred.segments[0].primitive = Some(exact.clone());
        let (r, _, skipped) = res_error(&pred, &[surf.clone()], &[Some(0)], 512, 0);
        assert!(r < 1e-12 && skipped == 0);
        pred.segments[0].primitive = Some(shifted);
        let (r, _, _) = res_error(&pred, &[surf.clone()], &[Some(0)], 512, 0);
        assert!((r - 0.01).abs() < 1e-12);
        let (_, per, skipped) = res_error(&pred, &[surf], &[None], 512, 0);
        assert_eq!((per, skipped), (vec![None], 1));

        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.005), Vec3::new(0.0, 0.0, 0.5)], None).unwrap();
        assert!((p_coverage(&cloud, &[exact.clone()], 0.01) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p_coverage(&cloud, &[exact], 1e-6), 1.0 / 3.0);
    }
}
