use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Above this size the diameter is measured on a farthest-point subsample.
pub const EXACT_DIAMETER_LIMIT: usize = 2048;

/// Positions with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    /// Builds a validated cloud. Normals are renormalized to unit length.
    pub fn new(positions: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        let normals = match normals {
            None => None,
            Some(ns) => {
                if ns.len() != positions.len() {
                    return Err(Error::LengthMismatch {
                        expected: positions.len(),
                        found: ns.len(),
                    });
                }
                let mut out = Vec::with_capacity(ns.len());
                for (i, n) in ns.into_iter().enumerate() {
                    let len = n.norm();
                    if !len.is_finite() || len < 1e-12 {
                        return Err(Error::InvalidCloud(format!("normal {i} is zero or non-finite")));
                    }
                    out.push(n / len);
                }
                Some(out)
            }
        };
        Ok(Self { positions, normals })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn normal(&self, i: usize) -> Option<Vec3> {
        self.normals.as_ref().map(|n| n[i])
    }

    /// Replaces (or attaches) normals, keeping positions.
    pub fn with_normals(self, normals: Vec<Vec3>) -> Result<Self> {
        Self::new(self.positions, Some(normals))
    }

    /// Cloud restricted to `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.positions)
    }

    /// Diameter estimate: exact farthest pair up to [`EXACT_DIAMETER_LIMIT`]
    /// points, otherwise the exact farthest pair of a farthest-point subsample.
    pub fn diameter(&self) -> f64 {
        if self.len() <= EXACT_DIAMETER_LIMIT {
            farthest_pair_distance(&self.positions)
        } else {
            let idx = farthest_point_subsample(&self.positions, EXACT_DIAMETER_LIMIT);
            let sub: Vec<Vec3> = idx.iter().map(|&i| self.positions[i]).collect();
            farthest_pair_distance(&sub)
        }
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// Largest pairwise Euclidean distance, O(n²).
pub fn farthest_pair_distance(points: &[Vec3]) -> f64 {
    let best = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let pi = points[i];
            points[i + 1..]
                .iter()
                .map(|q| (pi - q).norm_squared())
                .fold(0.0f64, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    best.sqrt()
}

/// Deterministic farthest-point sampling. Starts from the point farthest
/// from the centroid; ties resolve to the lower index.
pub fn farthest_point_subsample(points: &[Vec3], m: usize) -> Vec<usize> {
    let n = points.len();
    if m >= n {
        return (0..n).collect();
    }
    if m == 0 {
        return Vec::new();
    }
    let c = centroid(points);
    let mut first = 0;
    let mut best = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d > best {
            best = d;
            first = i;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    chosen.push(first);
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < m {
        let mut next = 0;
        let mut far = -1.0;
        for (i, &d) in dist.iter().enumerate() {
            if d > far {
                far = d;
                next = i;
            }
        }
        chosen.push(next);
        let q = points[next];
        dist.par_iter_mut().zip(points.par_iter()).for_each(|(d, p)| {
            let e = (p - q).norm_squared();
            if e < *d {
                *d = e;
            }
        });
    }
    chosen
}

/// Similarity transform `p' = (p + translation) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub translation: Vec3,
    pub scale: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p + self.translation) * self.scale
    }

    pub fn invert(&self, q: &Vec3) -> Vec3 {
        q / self.scale - self.translation
    }
}

/// Centers the cloud at the origin and scales it to unit diameter.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, Transform)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput);
    }
    let translation = -cloud.centroid();
    let centered: Vec<Vec3> = cloud.positions.iter().map(|p| p + translation).collect();
    let tmp = PointCloud {
        positions: centered,
        normals: None,
    };
    let diameter = tmp.diameter();
    if !(diameter > 1e-300) {
        return Err(Error::DegenerateCloud);
    }
    let transform = Transform {
        translation,
        scale: 1.0 / diameter,
    };
    let positions = cloud.positions.iter().map(|p| transform.apply(p)).collect();
    Ok((
        PointCloud {
            positions,
            normals: cloud.normals.clone(),
        },
        transform,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_diameter(ps: &[Vec3]) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..ps.len() {
            for j in 0..ps.len() {
                d = d.max((ps[i] - ps[j]).norm());
            }
        }
        d
    }

    #[test]
    fn cube_corners_normalize_to_unit_diameter() {
        let mut ps = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    ps.push(Vec3::new(x, y, z));
                }
            }
        }
        let cloud = PointCloud::new(ps, None).unwrap();
        let (out, t) = normalize_cloud(&cloud).unwrap();
        assert!((t.scale - 1.0 / (2.0 * 3f64.sqrt())).abs() < 1e-15);
        assert!(t.translation.norm() < 1e-15);
        assert!((brute_diameter(out.positions()) - 1.0).abs() < 1e-12);
        for p in out.positions() {
            for c in p.iter() {
                assert!((c.abs() - 0.5 / 3f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_point_is_degenerate() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0); 10], None).unwrap();
        assert!(matches!(normalize_cloud(&cloud), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(PointCloud::new(vec![], None), Err(Error::EmptyInput)));
    }

    #[test]
    fn non_finite_rejected() {
        let r = PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], None);
        assert!(matches!(r, Err(Error::InvalidCloud(_))));
    }

    #[test]
    fn normals_are_renormalized() {
        let c = PointCloud::new(vec![Vec3::zeros()], Some(vec![Vec3::new(0.0, 0.0, 3.0)])).unwrap();
        assert!((c.normal(0).unwrap().norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_cloud_mean_and_diameter_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ps: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.random::<f64>() * 3.0, rng.random::<f64>() - 4.0, rng.random::<f64>() * 0.5))
            .collect();
        let cloud = PointCloud::new(ps.clone(), None).unwrap();
        let (out, t) = normalize_cloud(&cloud).unwrap();
        let mean = out.positions().iter().fold(Vec3::zeros(), |a, p| a + p) / 100.0;
        assert!(mean.norm() < 1e-9);
        assert!((brute_diameter(out.positions()) - 1.0).abs() < 1e-6);
        for (p, q) in ps.iter().zip(out.positions()) {
            assert!((t.invert(q) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn subsampled_diameter_is_close_for_large_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps: Vec<Vec3> = (0..5000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cloud = PointCloud::new(ps.clone(), None).unwrap();
        let exact = farthest_pair_distance(&ps);
        let est = cloud.diameter();
        assert!(est <= exact + 1e-12);
        assert!(est > 0.97 * exact);
    }
}
