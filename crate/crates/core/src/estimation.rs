//! Per-point attributes from local surface fitting.
//!
//! Every point gets a descriptor, a distribution over the six primitive types
//! and the parameters of its best local fit. The same data can be loaded from
//! the ASCII interchange format instead.

use std::collections::BinaryHeap;
use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fitting::{covariance, fit_type, sorted_eigen, FitResult};
use crate::geometry::{centroid, NeighborGraph, ParamVector, PointCloud, PrimitiveType, Vec3, PARAM_LEN};

pub const DESCRIPTOR_LEN: usize = 16;
pub const DEFAULT_K_FIT: usize = 64;
pub const DEFAULT_TEMPERATURE: f64 = 0.02;
/// Best analytic rms above which a neighborhood is treated as free-form.
pub const BSPLINE_RMS_THRESHOLD: f64 = 0.02;
/// Descriptor slot value for a type whose fit failed.
const FAILED_RESIDUAL: f64 = 1.0;
/// Free parameters of the plane, sphere, cylinder and cone models.
const MODEL_DOF: [usize; 4] = [3, 4, 5, 6];
/// Multiplier on the BIC complexity term used for model selection.
const MODEL_PENALTY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PointAttributes {
    pub descriptor: Vec<f64>,
    pub type_dist: [f64; 6],
    pub params: ParamVector,
    pub confidence: f64,
}

impl PointAttributes {
    /// Most probable type; ties go to the lower type code.
    pub fn argmax_type(&self) -> PrimitiveType {
        let mut best = 0;
        for k in 1..6 {
            if self.type_dist[k] > self.type_dist[best] {
                best = k;
            }
        }
        PrimitiveType::ALL[best]
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite descriptor".into()));
        }
        check_type_dist(&self.type_dist).map_err(Error::InvalidArgument)?;
        if self.params.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameters".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidArgument("confidence outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn check_type_dist(t: &[f64; 6]) -> std::result::Result<(), String> {
    if t.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err("type distribution entries must be finite and nonnegative".into());
    }
    let s: f64 = t.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(format!("type distribution sums to {s}, not 1"));
    }
    Ok(())
}

/// Softmin over residuals: `exp(-r/τ)` normalized; `None` entries get zero mass.
pub fn softmin(residuals: &[Option<f64>], tau: f64) -> Vec<f64> {
    let best = residuals
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return vec![1.0 / residuals.len() as f64; residuals.len()];
    }
    let w: Vec<f64> = residuals
        .iter()
        .map(|r| r.map_or(0.0, |r| (-(r - best) / tau).exp()))
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn neighborhood(graph: &NeighborGraph, i: usize, k_fit: usize) -> Vec<usize> {
    let nb = graph.neighbors(i);
    let mut idx = Vec::with_capacity(k_fit.min(nb.len()) + 1);
    idx.push(i);
    idx.extend_from_slice(&nb[..k_fit.min(nb.len())]);
    idx
}

#[derive(PartialEq)]
struct Edge(f64, usize, usize);

impl Eq for Edge {}

impl PartialOrd for Edge {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Edge {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .total_cmp(&other.0)
            .then_with(|| other.1.cmp(&self.1))
            .then_with(|| other.2.cmp(&self.2))
    }
}

/// PCA normals over each point's neighborhood, oriented by propagating along a
/// maximum-agreement spanning tree of the neighbor graph. Each tree is seeded
/// by pointing its first normal away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, graph: &NeighborGraph, k: usize) -> Vec<Vec3> {
    let n = cloud.len();
    let pos = cloud.positions();
    let mut normals: Vec<Vec3> = (0..n)
        .into_par_iter()
        .map(|i| {
            let idx = neighborhood(graph, i, k);
            let pts: Vec<Vec3> = idx.iter().map(|&j| pos[j]).collect();
            if pts.len() < 3 {
                return Vec3::z();
            }
            let c = centroid(&pts);
            let (_, vecs) = sorted_eigen(covariance(&pts, &c));
            vecs[0].normalize()
        })
        .collect();
    let center = cloud.centroid();
    let mut visited = vec![false; n];
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        if normals[seed].dot(&(pos[seed] - center)) < 0.0 {
            normals[seed] = -normals[seed];
        }
        visited[seed] = true;
        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Edge>, normals: &[Vec3], visited: &[bool], i: usize| {
            for &j in graph.neighbors(i) {
                if !visited[j] {
                    heap.push(Edge(normals[i].dot(&normals[j]).abs(), i, j));
                }
            }
        };
        push(&mut heap, &normals, &visited, seed);
        while let Some(Edge(_, from, to)) = heap.pop() {
            if visited[to] {
                continue;
            }
            if normals[from].dot(&normals[to]) < 0.0 {
                normals[to] = -normals[to];
            }
            visited[to] = true;
            push(&mut heap, &normals, &visited, to);
        }
    }
    normals
}

/// Fits of the four analytic types on one neighborhood.
struct LocalFits {
    fits: [Option<FitResult>; 4],
    size: usize,
}

impl LocalFits {
    fn compute(pts: &[Vec3], ns: Option<&[Vec3]>) -> Self {
        let fits = PrimitiveType::ANALYTIC.map(|ty| {
            fit_type(ty, pts, ns)
                .ok()
                .filter(|f| f.rms_residual.is_finite())
        });
        LocalFits { fits, size: pts.len() }
    }

    fn residuals(&self) -> [Option<f64>; 4] {
        std::array::from_fn(|k| self.fits[k].as_ref().map(|f| f.rms_residual))
    }

    /// Residuals inflated by a BIC-style factor `n^(dof / 2n)`, so a richer
    /// model only wins when it explains more than the noise it absorbs.
    fn penalized(&self) -> [Option<f64>; 4] {
        let n = self.size.max(2) as f64;
        std::array::from_fn(|k| {
            let dof = MODEL_DOF[k] as f64;
            self.fits[k]
                .as_ref()
                .map(|f| f.rms_residual * (MODEL_PENALTY * dof * n.ln() / (2.0 * n)).exp())
        })
    }

    fn best(&self) -> Option<&FitResult> {
        let pen = self.penalized();
        let mut best: Option<(usize, f64)> = None;
        for (k, r) in pen.iter().enumerate() {
            if let Some(r) = *r {
                if best.is_none_or(|(_, b)| r < b) {
                    best = Some((k, r));
                }
            }
        }
        best.and_then(|(k, _)| self.fits[k].as_ref())
    }
}

/// Whether the neighborhood wraps all the way around its dominant axis:
/// all eight angular sectors around the normal-covariance axis are occupied.
fn wraps_around(pts: &[Vec3], ns: Option<&[Vec3]>) -> bool {
    let Some(ns) = ns else { return false };
    let zero = Vec3::zeros();
    let (_, vecs) = sorted_eigen(covariance(ns, &zero));
    let axis = vecs[0].normalize();
    let (e1, e2) = {
        let a = crate::fitting::any_perpendicular(&axis);
        (a, axis.cross(&a))
    };
    let c = centroid(pts);
    let mut occupied = [false; 8];
    for p in pts {
        let d = p - c;
        let ang = d.dot(&e2).atan2(d.dot(&e1));
        let bin = (((ang + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * 8.0) as usize;
        occupied[bin.min(7)] = true;
    }
    occupied.iter().all(|&o| o)
}

fn normal_variation(ns: Option<&[Vec3]>) -> f64 {
    match ns {
        Some(ns) if ns.len() > 1 => {
            let n0 = ns[0];
            ns[1..].iter().map(|n| 1.0 - n0.dot(n).abs()).sum::<f64>() / (ns.len() - 1) as f64
        }
        _ => 0.0,
    }
}

fn descriptor_from_parts(cloud: &PointCloud, graph: &NeighborGraph, i: usize, pts: &[Vec3], ns: Option<&[Vec3]>, fits: &LocalFits) -> Vec<f64> {
    let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
    let p = cloud.position(i);
    d.extend_from_slice(&[p.x, p.y, p.z]);
    let n = cloud.normal(i).unwrap_or_else(Vec3::zeros);
    d.extend_from_slice(&[n.x, n.y, n.z]);
    let c = centroid(pts);
    let (vals, _) = sorted_eigen(covariance(pts, &c));
    let l1 = vals[2].max(0.0);
    if l1 > 0.0 {
        d.push(vals[1].max(0.0) / l1);
        d.push(vals[0].max(0.0) / l1);
    } else {
        d.extend_from_slice(&[0.0, 0.0]);
    }
    let dists = graph.distances(i);
    d.push(if dists.is_empty() { 0.0 } else { dists.iter().sum::<f64>() / dists.len() as f64 });
    for r in fits.residuals() {
        d.push(r.map_or(FAILED_RESIDUAL, |r| r.min(FAILED_RESIDUAL)));
    }
    d.push(normal_variation(ns));
    d.extend_from_slice(&[0.0, 0.0]);
    debug_assert_eq!(d.len(), DESCRIPTOR_LEN);
    d
}

fn gather(cloud: &PointCloud, idx: &[usize]) -> (Vec<Vec3>, Option<Vec<Vec3>>) {
    let pts = idx.iter().map(|&j| cloud.position(j)).collect();
    let ns = cloud.normals().map(|ns| idx.iter().map(|&j| ns[j]).collect());
    (pts, ns)
}

/// 16-dim handcrafted descriptor of point `i` over its graph neighborhood.
pub fn handcrafted_descriptor(cloud: &PointCloud, graph: &NeighborGraph, i: usize) -> Vec<f64> {
    let idx = neighborhood(graph, i, graph.row_len());
    let (pts, ns) = gather(cloud, &idx);
    let fits = LocalFits::compute(&pts, ns.as_deref());
    descriptor_from_parts(cloud, graph, i, &pts, ns.as_deref(), &fits)
}

/// Local-fit attributes for every point. The cloud should carry normals
/// (see [`estimate_normals`]); without them cylinder and cone fits fail.
pub fn estimate_point_attributes(cloud: &PointCloud, graph: &NeighborGraph, k_fit: usize, tau: f64) -> Vec<PointAttributes> {
    let k_fit = k_fit.min(cloud.len().saturating_sub(1)).max(1);
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let idx = neighborhood(graph, i, k_fit);
            let (pts, ns) = gather(cloud, &idx);
            let fits = LocalFits::compute(&pts, ns.as_deref());
            let descriptor = descriptor_from_parts(cloud, graph, i, &pts, ns.as_deref(), &fits);
            let mut params = ParamVector::default();
            let (type_dist, confidence) = match fits.best() {
                None => ([1.0 / 6.0; 6], 0.0),
                Some(best) => {
                    if let Some(p) = best.params() {
                        params = p;
                    }
                    let conf = best.inlier_fraction(fits.size);
                    if best.rms_residual > BSPLINE_RMS_THRESHOLD {
                        let closed = wraps_around(&pts, ns.as_deref());
                        let (o, c) = if closed { (0.2, 0.8) } else { (0.8, 0.2) };
                        ([0.0, 0.0, 0.0, 0.0, o, c], conf)
                    } else {
                        let sm = softmin(&fits.penalized(), tau);
                        ([sm[0], sm[1], sm[2], sm[3], 0.0, 0.0], conf)
                    }
                }
            };
            PointAttributes {
                descriptor,
                type_dist,
                params: clear_inactive(params, &type_dist),
                confidence,
            }
        })
        .collect()
}

/// Zeroes parameter blocks whose type carries at most 1e-3 mass.
fn clear_inactive(mut params: ParamVector, type_dist: &[f64; 6]) -> ParamVector {
    for ty in PrimitiveType::ANALYTIC {
        if type_dist[ty.code()] <= 1e-3 {
            if let Some(r) = ty.param_block() {
                params.0[r].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    params
}

/// Writes the ASCII interchange format: `n m`, then descriptor rows, type
/// rows and parameter rows.
pub fn write_attributes<W: Write>(attrs: &[PointAttributes], mut w: W) -> std::io::Result<()> {
    let m = attrs.first().map_or(0, |a| a.descriptor.len());
    writeln!(w, "{} {}", attrs.len(), m)?;
    let row = |w: &mut W, xs: &[f64]| -> std::io::Result<()> {
        let s: Vec<String> = xs.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{}", s.join(" "))
    };
    for a in attrs {
        row(&mut w, &a.descriptor)?;
    }
    for a in attrs {
        row(&mut w, &a.type_dist)?;
    }
    for a in attrs {
        row(&mut w, a.params.as_slice())?;
    }
    Ok(())
}

/// Parses the interchange format. Confidence is not stored and loads as 1.
pub fn parse_attributes(text: &str, expected_n: Option<usize>) -> Result<Vec<PointAttributes>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !(l.trim().is_empty() || l.trim_start().starts_with('#')));
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(hl + 1, "header must be `n m`"))?;
    let [n, m] = head[..] else {
        return Err(Error::parse(hl + 1, "header must be `n m`"));
    };
    if m == 0 {
        return Err(Error::parse(hl + 1, "descriptor width must be positive"));
    }
    if let Some(e) = expected_n {
        if e != n {
            return Err(Error::LengthMismatch { expected: e, found: n });
        }
    }
    let mut read_block = |width: usize, what: &str| -> Result<Vec<(usize, Vec<f64>)>> {
        let mut out = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let Some((ln, line)) = lines.next() else {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: out.len(),
                });
            };
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::parse(ln + 1, format!("bad number in {what} row")))?;
            if vals.len() != width {
                return Err(Error::parse(ln + 1, format!("{what} row needs {width} values, found {}", vals.len())));
            }
            out.push((ln + 1, vals));
        }
        Ok(out)
    };
    let desc = read_block(m, "descriptor")?;
    let types = read_block(6, "type")?;
    let params = read_block(PARAM_LEN, "parameter")?;
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln + 1, "trailing rows after parameter block"));
    }
    let mut out = Vec::with_capacity(n);
    for ((d, (tl, t)), (_, p)) in desc.into_iter().zip(types).zip(params) {
        let type_dist: [f64; 6] = t.try_into().expect("width checked");
        check_type_dist(&type_dist).map_err(|msg| Error::parse(tl, msg))?;
        out.push(PointAttributes {
            descriptor: d.1,
            type_dist,
            params: ParamVector::from_slice(&p)?,
            confidence: 1.0,
        });
    }
    Ok(out)
}

pub fn read_attributes(path: &Path, expected_n: Option<usize>) -> Result<Vec<PointAttributes>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_attributes(&text, expected_n).map_err(|e| e.with_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::fit_plane;
    use crate::geometry::knn_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Vec3::new(1.0, 2.0, 2.0).normalize();
        let e1 = crate::fitting::any_perpendicular(&normal);
        let e2 = normal.cross(&e1);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| normal * 0.1 + e1 * (rng.random::<f64>() - 0.5) + e2 * (rng.random::<f64>() - 0.5))
            .collect();
        PointCloud::new(pts, Some(vec![normal; n])).unwrap()
    }

    fn sphere_cloud(n: usize, r: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut ns = Vec::new();
        while pts.len() < n {
            let v = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            if v.norm() > 0.05 && v.norm() < 0.5 {
                let u = v.normalize();
                pts.push(u * r);
                ns.push(u);
            }
        }
        PointCloud::new(pts, Some(ns)).unwrap()
    }

    #[test]
    fn softmin_orders_mass_by_residual() {
        let t = softmin(&[Some(0.01), Some(0.0), None, Some(0.05)], 0.02);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t[1] > t[0] && t[0] > t[3]);
        assert_eq!(t[2], 0.0);
        let u = softmin(&[None, None], 0.02);
        assert_eq!(u, vec![0.5, 0.5]);
    }

    #[test]
    fn plane_cloud_is_typed_plane_with_global_params() {
        let cloud = plane_cloud(600, 1);
        let g = knn_graph(&cloud, 64).unwrap();
        let attrs = estimate_point_attributes(&cloud, &g, 64, DEFAULT_TEMPERATURE);
        let global = fit_plane(cloud.positions(), cloud.normals()).unwrap().params().unwrap();
        for a in &attrs {
            a.validate().unwrap();
            assert_eq!(a.argmax_type(), PrimitiveType::Plane);
            for k in 0..4 {
                assert!((a.params.0[k] - global.0[k]).abs() < 1e-6);
            }
            assert!((a.confidence - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_cloud_is_typed_sphere() {
        let cloud = sphere_cloud(1500, 0.4, 2);
        let g = knn_graph(&cloud, 64).unwrap();
        let attrs = estimate_point_attributes(&cloud, &g, 64, DEFAULT_TEMPERATURE);
        let hits = attrs.iter().filter(|a| a.argmax_type() == PrimitiveType::Sphere).count();
        assert!(hits as f64 >= 0.95 * attrs.len() as f64, "{hits}");
    }

    #[test]
    fn crease_points_have_lower_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        let mut ns = Vec::new();
        for _ in 0..800 {
            pts.push(Vec3::new(rng.random::<f64>() * 0.5, rng.random::<f64>() - 0.5, 0.0));
            ns.push(Vec3::z());
            pts.push(Vec3::new(0.0, rng.random::<f64>() - 0.5, rng.random::<f64>() * 0.5));
            ns.push(Vec3::x());
        }
        let cloud = PointCloud::new(pts, Some(ns)).unwrap();
        let g = knn_graph(&cloud, 64).unwrap();
        let attrs = estimate_point_attributes(&cloud, &g, 64, DEFAULT_TEMPERATURE);
        let mut edge = Vec::new();
        let mut interior = Vec::new();
        for (i, a) in attrs.iter().enumerate() {
            let p = cloud.position(i);
            let dist_to_crease = p.x.max(p.z);
            if p.y.abs() > 0.35 {
                continue;
            }
            if dist_to_crease < 0.01 {
                edge.push(a.confidence);
            } else if dist_to_crease > 0.2 && dist_to_crease < 0.4 {
                assert_eq!(a.argmax_type(), PrimitiveType::Plane);
                interior.push(a.confidence);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!edge.is_empty() && !interior.is_empty());
        assert!(mean(&edge) < mean(&interior), "{} vs {}", mean(&edge), mean(&interior));
    }

    #[test]
    fn descriptor_on_plane_and_noise_ball() {
        let cloud = plane_cloud(400, 4);
        let g = knn_graph(&cloud, 32).unwrap();
        let d = handcrafted_descriptor(&cloud, &g, 0);
        assert_eq!(d.len(), DESCRIPTOR_LEN);
        assert!(d[7] < 1e-12, "λ3/λ1 = {}", d[7]);
        assert!(d[9] < 1e-9, "plane residual {}", d[9]);
        assert_eq!(d, handcrafted_descriptor(&cloud, &g, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ball: Vec<Vec3> = (0..3000)
            .map(|_| {
                let n = rand_distr::StandardNormal;
                Vec3::new(rng.sample(n), rng.sample(n), rng.sample(n))
            })
            .collect();
        let cloud = PointCloud::new(ball, None).unwrap();
        let g = knn_graph(&cloud, 2999).unwrap();
        let d = handcrafted_descriptor(&cloud, &g, 0);
        assert!(d[6] > 0.85 && d[7] > 0.85, "{:?}", &d[6..8]);
        assert!(d.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn estimated_normals_are_consistent_on_sphere() {
        let truth = sphere_cloud(1000, 0.4, 6);
        let bare = PointCloud::new(truth.positions().to_vec(), None).unwrap();
        let g = knn_graph(&bare, 16).unwrap();
        let ns = estimate_normals(&bare, &g, 16);
        for (n, t) in ns.iter().zip(truth.normals().unwrap()) {
            assert!(n.dot(t) > 0.99);
        }
    }

    #[test]
    fn attributes_round_trip_and_validation() {
        let cloud = plane_cloud(50, 7);
        let g = knn_graph(&cloud, 16).unwrap();
        let attrs = estimate_point_attributes(&cloud, &g, 16, DEFAULT_TEMPERATURE);
        let mut buf = Vec::new();
        write_attributes(&attrs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = parse_attributes(&text, Some(50)).unwrap();
        for (a, b) in attrs.iter().zip(&back) {
            for (x, y) in a.descriptor.iter().zip(&b.descriptor) {
                assert!((x - y).abs() < 1e-7);
            }
            assert_eq!(a.type_dist, b.type_dist);
            assert_eq!(a.params, b.params);
        }
        assert!(matches!(parse_attributes(&text, Some(51)), Err(Error::LengthMismatch { .. })));

        let bad = "1 2\n0 0\n0.25 0.25 0 0 0 0\n".to_string() + &vec!["0"; 22].join(" ") + "\n";
        match parse_attributes(&bad, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "2 1\n0\n0\n1 0 0 0 0 0\n";
        assert!(matches!(parse_attributes(short, None), Err(Error::LengthMismatch { .. })));
    }
}
