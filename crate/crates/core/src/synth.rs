//! Synthetic scenes with ground truth: sampled primitive patches, labels,
//! per-point true attributes and the surfaces used by the residual metric.

use nalgebra::{Rotation3, UnitQuaternion};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bspline::BSplinePatch;
use crate::error::{Error, Result};
use crate::estimation::{PointAttributes, DESCRIPTOR_LEN};
use crate::fitting::any_perpendicular;
use crate::geometry::{normalize_cloud, KdTree, ParamVector, PointCloud, Primitive, PrimitiveType, Transform, Vec3};
use crate::segmentation::{Segment, Segmentation, SegmentJson, SegmentationJson};

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr(v: Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// A bounded primitive patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surface {
    /// Rectangle centered at `origin`, spanned by `u_dir` and `normal × u_dir`.
    Plane {
        origin: [f64; 3],
        normal: [f64; 3],
        u_dir: [f64; 3],
        half_extent: [f64; 2],
    },
    Sphere { center: [f64; 3], radius: f64 },
    /// Open tube of height `2·half_height` centered at `center`.
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        half_height: f64,
    },
    /// Lateral surface between heights `heights[0] < heights[1]` above the apex.
    Cone {
        apex: [f64; 3],
        axis: [f64; 3],
        half_angle: f64,
        heights: [f64; 2],
    },
    Bspline { patch: BSplinePatch },
}

impl Surface {
    pub fn kind(&self) -> PrimitiveType {
        self.primitive().kind()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            Surface::Plane { normal, u_dir, half_extent, .. } => {
                let (n, u) = (v3(*normal), v3(*u_dir));
                if n.norm() < 1e-12 || u.norm() < 1e-12 || n.normalize().dot(&u.normalize()).abs() > 1e-6 {
                    return bad("plane needs nonzero, orthogonal normal and u_dir");
                }
                if !(half_extent[0] > 0.0 && half_extent[1] > 0.0) {
                    return bad("plane half extents must be positive");
                }
            }
            Surface::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
            }
            Surface::Cylinder { axis, radius, half_height, .. } => {
                if v3(*axis).norm() < 1e-12 || !(*radius > 0.0) || !(*half_height > 0.0) {
                    return bad("cylinder needs a nonzero axis and positive radius and height");
                }
            }
            Surface::Cone { axis, half_angle, heights, .. } => {
                if v3(*axis).norm() < 1e-12 || !(*half_angle > 0.0 && *half_angle < std::f64::consts::FRAC_PI_2) {
                    return bad("cone needs a nonzero axis and half angle in (0, π/2)");
                }
                if !(heights[0] >= 0.0 && heights[1] > heights[0]) {
                    return bad("cone heights must satisfy 0 <= h0 < h1");
                }
            }
            Surface::Bspline { .. } => {}
        }
        if !self.scalars().iter().all(|x| x.is_finite()) {
            return bad("non-finite surface value");
        }
        Ok(())
    }

    fn scalars(&self) -> Vec<f64> {
        match self {
            Surface::Plane { origin, normal, u_dir, half_extent } => [&origin[..], normal, u_dir, half_extent].concat(),
            Surface::Sphere { center, radius } => [&center[..], &[*radius]].concat(),
            Surface::Cylinder { center, axis, radius, half_height } => [&center[..], axis, &[*radius, *half_height]].concat(),
            Surface::Cone { apex, axis, half_angle, heights } => [&apex[..], axis, &[*half_angle], heights].concat(),
            Surface::Bspline { .. } => Vec::new(),
        }
    }

    /// The unbounded primitive carrying this patch.
    pub fn primitive(&self) -> Primitive {
        match self {
            Surface::Plane { origin, normal, .. } => {
                let n = v3(*normal).normalize();
                Primitive::Plane {
                    normal: n,
                    offset: n.dot(&v3(*origin)),
                }
            }
            Surface::Sphere { center, radius } => Primitive::Sphere {
                center: v3(*center),
                radius: *radius,
            },
            Surface::Cylinder { center, axis, radius, .. } => Primitive::Cylinder {
                axis: v3(*axis).normalize(),
                center: v3(*center),
                radius: *radius,
            },
            Surface::Cone { apex, axis, half_angle, .. } => Primitive::Cone {
                apex: v3(*apex),
                axis: v3(*axis).normalize(),
                half_angle: *half_angle,
            },
            Surface::Bspline { patch } => Primitive::BSpline { patch: patch.clone() },
        }
    }

    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Surface::Plane { half_extent, .. } => 4.0 * half_extent[0] * half_extent[1],
            Surface::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Surface::Cylinder { radius, half_height, .. } => 4.0 * PI * radius * half_height,
            Surface::Cone { half_angle, heights, .. } => {
                PI * half_angle.tan() / half_angle.cos() * (heights[1].powi(2) - heights[0].powi(2))
            }
            Surface::Bspline { patch } => {
                let g = 24;
                let mut a = 0.0;
                for i in 0..g {
                    for j in 0..g {
                        let (_, su, sv) = patch.eval_with_derivs((i as f64 + 0.5) / g as f64, (j as f64 + 0.5) / g as f64);
                        a += su.cross(&sv).norm();
                    }
                }
                a / (g * g) as f64
            }
        }
    }

    /// Area-uniform samples with unit normals (B-splines sample uniformly in parameter space).
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<(Vec3, Vec3)> {
        let mut out = Vec::with_capacity(count);
        match self {
            Surface::Plane { origin, normal, u_dir, half_extent } => {
                let n = v3(*normal).normalize();
                let u = v3(*u_dir).normalize();
                let v = n.cross(&u);
                for _ in 0..count {
                    let a = (rng.random::<f64>() * 2.0 - 1.0) * half_extent[0];
                    let b = (rng.random::<f64>() * 2.0 - 1.0) * half_extent[1];
                    out.push((v3(*origin) + u * a + v * b, n));
                }
            }
            Surface::Sphere { center, radius } => {
                for _ in 0..count {
                    let d = loop {
                        let g = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                        if g.norm() > 1e-9 {
                            break g.normalize();
                        }
                    };
                    out.push((v3(*center) + d * *radius, d));
                }
            }
            Surface::Cylinder { center, axis, radius, half_height } => {
                let a = v3(*axis).normalize();
                let e1 = any_perpendicular(&a);
                let e2 = a.cross(&e1);
                for _ in 0..count {
                    let phi = rng.random::<f64>() * std::f64::consts::TAU;
                    let h = (rng.random::<f64>() * 2.0 - 1.0) * half_height;
                    let radial = e1 * phi.cos() + e2 * phi.sin();
                    out.push((v3(*center) + a * h + radial * *radius, radial));
                }
            }
            Surface::Cone { apex, axis, half_angle, heights } => {
                let a = v3(*axis).normalize();
                let e1 = any_perpendicular(&a);
                let e2 = a.cross(&e1);
                let (h0, h1) = (heights[0], heights[1]);
                let (s, c) = half_angle.sin_cos();
                for _ in 0..count {
                    let phi = rng.random::<f64>() * std::f64::consts::TAU;
                    // Area density grows linearly with height.
                    let h = (h0 * h0 + rng.random::<f64>() * (h1 * h1 - h0 * h0)).sqrt();
                    let radial = e1 * phi.cos() + e2 * phi.sin();
                    let p = v3(*apex) + a * h + radial * (h * half_angle.tan());
                    out.push((p, radial * c - a * s));
                }
            }
            Surface::Bspline { patch } => {
                for _ in 0..count {
                    let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
                    let (p, su, sv) = patch.eval_with_derivs(u, v);
                    let n = su.cross(&sv);
                    let n = if n.norm() > 1e-12 { n.normalize() } else { Vec3::z() };
                    out.push((p, n));
                }
            }
        }
        out
    }

    pub fn map(&self, point: impl Fn(&Vec3) -> Vec3, dir: impl Fn(&Vec3) -> Vec3, scale: f64) -> Surface {
        match self {
            Surface::Plane { origin, normal, u_dir, half_extent } => Surface::Plane {
                origin: arr(point(&v3(*origin))),
                normal: arr(dir(&v3(*normal))),
                u_dir: arr(dir(&v3(*u_dir))),
                half_extent: [half_extent[0] * scale, half_extent[1] * scale],
            },
            Surface::Sphere { center, radius } => Surface::Sphere {
                center: arr(point(&v3(*center))),
                radius: radius * scale,
            },
            Surface::Cylinder { center, axis, radius, half_height } => Surface::Cylinder {
                center: arr(point(&v3(*center))),
                axis: arr(dir(&v3(*axis))),
                radius: radius * scale,
                half_height: half_height * scale,
            },
            Surface::Cone { apex, axis, half_angle, heights } => Surface::Cone {
                apex: arr(point(&v3(*apex))),
                axis: arr(dir(&v3(*axis))),
                half_angle: *half_angle,
                heights: [heights[0] * scale, heights[1] * scale],
            },
            Surface::Bspline { patch } => Surface::Bspline {
                patch: patch.map_points(point),
            },
        }
    }

    pub fn transformed(&self, t: &Transform) -> Surface {
        self.map(|p| t.apply(p), |d| *d, t.scale)
    }

    pub fn rigid(&self, rot: &Rotation3<f64>, shift: &Vec3) -> Surface {
        self.map(|p| rot * p + shift, |d| rot * d, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveSpec {
    pub surface: Surface,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomSceneSpec {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub total_points: usize,
    pub types: Vec<PrimitiveType>,
    /// Fewest points any primitive receives.
    pub min_points: usize,
    /// Smallest allowed distance between samples of different primitives,
    /// in pre-normalization scene units.
    pub gap: f64,
}

impl Default for RandomSceneSpec {
    fn default() -> Self {
        Self {
            min_primitives: 4,
            max_primitives: 8,
            total_points: 2048,
            types: PrimitiveType::ANALYTIC.to_vec(),
            min_points: 120,
            gap: 0.1,
        }
    }
}

/// Scene description. Exactly one of `primitives` and `random` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    #[serde(default)]
    pub noise: f64,
    /// Fraction of points whose true attributes are replaced by another primitive's.
    #[serde(default)]
    pub rho: f64,
    /// Center the scene and scale it to unit diameter before adding noise.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub primitives: Vec<PrimitiveSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomSceneSpec>,
}

fn yes() -> bool {
    true
}

impl SceneSpec {
    pub fn random(seed: u64, noise: f64) -> Self {
        Self {
            seed,
            noise,
            rho: 0.0,
            normalize: true,
            primitives: Vec::new(),
            random: Some(RandomSceneSpec::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        match (&self.random, self.primitives.is_empty()) {
            (Some(_), false) => return bad("give either `primitives` or `random`, not both".into()),
            (None, true) => return bad("scene needs at least one primitive".into()),
            _ => {}
        }
        for (k, p) in self.primitives.iter().enumerate() {
            p.surface.validate().map_err(|e| Error::InvalidArgument(format!("primitive {k}: {e}")))?;
            if p.points == 0 {
                return bad(format!("primitive {k} has no points"));
            }
        }
        if let Some(r) = &self.random {
            if r.min_primitives == 0 || r.min_primitives > r.max_primitives {
                return bad("random scene needs 1 <= min_primitives <= max_primitives".into());
            }
            if r.types.is_empty() {
                return bad("random scene needs at least one type".into());
            }
            if r.min_points * r.max_primitives > r.total_points {
                return bad("total_points cannot give every primitive min_points".into());
            }
            if !(r.gap >= 0.0) {
                return bad("gap must be >= 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub gt: Segmentation,
    pub attrs: Vec<PointAttributes>,
    pub surfaces: Vec<Surface>,
}

/// Ground-truth file: a segmentation plus the surface of every segment.
/// A plain segmentation file parses as one with no surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthJson {
    pub n: usize,
    pub labels: Vec<usize>,
    pub segments: Vec<SegmentJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub surfaces: Vec<Surface>,
}

impl Scene {
    pub fn ground_truth_json(&self) -> GroundTruthJson {
        let SegmentationJson { n, labels, segments } = self.gt.to_json();
        GroundTruthJson {
            n,
            labels,
            segments,
            surfaces: self.surfaces.clone(),
        }
    }
}

/// Parses a ground-truth or segmentation file.
pub fn parse_ground_truth(text: &str) -> Result<(Segmentation, Vec<Surface>)> {
    let j: GroundTruthJson = serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    let seg = Segmentation::from_json(SegmentationJson {
        n: j.n,
        labels: j.labels,
        segments: j.segments,
    })?;
    if !j.surfaces.is_empty() && j.surfaces.len() != seg.num_segments() {
        return Err(Error::LengthMismatch {
            expected: seg.num_segments(),
            found: j.surfaces.len(),
        });
    }
    for s in &j.surfaces {
        s.validate()?;
    }
    Ok((seg, j.surfaces))
}

fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A random patch of the given type, centered near the origin, with extent in [0.2, 0.6].
pub fn random_surface<R: Rng>(rng: &mut R, ty: PrimitiveType) -> Surface {
    let s = uniform(rng, 0.2, 0.6);
    let local = match ty {
        PrimitiveType::Plane => Surface::Plane {
            origin: [0.0; 3],
            normal: [0.0, 0.0, 1.0],
            u_dir: [1.0, 0.0, 0.0],
            half_extent: [s / 2.0, uniform(rng, 0.2, 0.6) / 2.0],
        },
        PrimitiveType::Sphere => Surface::Sphere {
            center: [0.0; 3],
            radius: s / 2.0,
        },
        PrimitiveType::Cylinder => Surface::Cylinder {
            center: [0.0; 3],
            axis: [0.0, 0.0, 1.0],
            radius: uniform(rng, 0.2, 0.4) * s,
            half_height: s / 2.0,
        },
        PrimitiveType::Cone => {
            let theta = uniform(rng, 20f64, 45.0).to_radians();
            let len = s;
            let h0 = uniform(rng, 0.3, 0.6) * len;
            Surface::Cone {
                apex: [0.0, 0.0, -(h0 + len / 2.0)],
                axis: [0.0, 0.0, 1.0],
                half_angle: theta,
                heights: [h0, h0 + len],
            }
        }
        PrimitiveType::BsplineOpen | PrimitiveType::BsplineClosed => {
            let g = 6;
            let closed = ty == PrimitiveType::BsplineClosed;
            let mut ctrl = Vec::with_capacity(g * g);
            let r = s / 3.0;
            for iu in 0..g {
                for iv in 0..g {
                    let t = iv as f64 / (g - 1) as f64 - 0.5;
                    let bump = uniform(rng, -0.08, 0.08) * s;
                    if closed {
                        let ang = iu as f64 / g as f64 * std::f64::consts::TAU;
                        let rr = r + bump;
                        ctrl.push(Vec3::new(rr * ang.cos(), rr * ang.sin(), t * s));
                    } else {
                        let u = iu as f64 / (g - 1) as f64 - 0.5;
                        ctrl.push(Vec3::new(u * s, t * s, bump));
                    }
                }
            }
            Surface::Bspline {
                patch: BSplinePatch::new(g, g, closed, ctrl).expect("6x6 grid"),
            }
        }
    };
    local.rigid(&random_rotation(rng), &Vec3::zeros())
}

/// Largest-remainder split of `total` proportional to `weights`, each at least `floor`.
fn allocate(total: usize, weights: &[f64], floor: usize) -> Vec<usize> {
    let k = weights.len();
    let spare = total - floor * k;
    let wsum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / wsum * spare as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| floor + r.floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> = raw.iter().enumerate().map(|(i, r)| (r - r.floor(), i)).collect();
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - counts.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Places random primitives so that samples of different primitives stay
/// `gap` apart; the placement region grows when a primitive does not fit.
fn random_layout(r: &RandomSceneSpec, rng: &mut ChaCha8Rng) -> Vec<PrimitiveSpec> {
    let count = rng.random_range(r.min_primitives..=r.max_primitives);
    let mut placed: Vec<Surface> = Vec::with_capacity(count);
    let mut proxies: Vec<Vec3> = Vec::new();
    let mut region = 1.0;
    for _ in 0..count {
        let ty = r.types[rng.random_range(0..r.types.len())];
        let local = random_surface(rng, ty);
        let local_proxy: Vec<Vec3> = local.sample(rng, 400).into_iter().map(|(p, _)| p).collect();
        let mut attempts = 0;
        loop {
            let shift = Vec3::new(
                uniform(rng, -region / 2.0, region / 2.0),
                uniform(rng, -region / 2.0, region / 2.0),
                uniform(rng, -region / 2.0, region / 2.0),
            );
            let fits = proxies.is_empty() || {
                let tree = KdTree::new(&proxies);
                local_proxy.iter().all(|p| {
                    let q = p + shift;
                    tree.nearest(&q).is_none_or(|j| (proxies[j] - q).norm() >= r.gap)
                })
            };
            if fits {
                placed.push(local.rigid(&Rotation3::identity(), &shift));
                proxies.extend(local_proxy.iter().map(|p| p + shift));
                break;
            }
            attempts += 1;
            if attempts % 50 == 0 {
                region *= 1.2;
            }
        }
    }
    let areas: Vec<f64> = placed.iter().map(|s| s.area()).collect();
    let counts = allocate(r.total_points, &areas, r.min_points);
    placed
        .into_iter()
        .zip(counts)
        .map(|(surface, points)| PrimitiveSpec { surface, points })
        .collect()
}

/// Ground-truth attributes: one-hot type, true parameters, and a descriptor
/// holding position and normal (remaining slots zero).
fn truth_attributes(p: &Vec3, n: &Vec3, kind: PrimitiveType, params: ParamVector) -> PointAttributes {
    let mut descriptor = vec![0.0; DESCRIPTOR_LEN];
    descriptor[..3].copy_from_slice(&[p.x, p.y, p.z]);
    descriptor[3..6].copy_from_slice(&[n.x, n.y, n.z]);
    let mut type_dist = [0.0; 6];
    type_dist[kind.code()] = 1.0;
    PointAttributes {
        descriptor,
        type_dist,
        params,
        confidence: 1.0,
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prims = match &spec.random {
        Some(r) => random_layout(r, &mut rng),
        None => spec.primitives.clone(),
    };
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for (k, p) in prims.iter().enumerate() {
        for (x, n) in p.surface.sample(&mut rng, p.points) {
            positions.push(x);
            normals.push(n);
            labels.push(k);
        }
    }
    let raw = PointCloud::new(positions, Some(normals))?;
    let (cloud, transform) = if spec.normalize {
        normalize_cloud(&raw)?
    } else {
        (raw, Transform::identity())
    };
    let surfaces: Vec<Surface> = prims.iter().map(|p| p.surface.transformed(&transform)).collect();
    let mut positions = cloud.positions().to_vec();
    if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in positions.iter_mut() {
            *p += Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
        }
    }
    let normals = cloud.normals().expect("generated with normals").to_vec();
    let cloud = PointCloud::new(positions, Some(normals))?;

    let truths: Vec<(Primitive, ParamVector)> = surfaces
        .iter()
        .map(|s| {
            let prim = s.primitive();
            let params = prim.params().unwrap_or_default();
            (prim, params)
        })
        .collect();
    let attrs: Vec<PointAttributes> = (0..cloud.len())
        .map(|i| {
            let k = labels[i];
            truth_attributes(&cloud.position(i), &cloud.normal(i).expect("normals"), truths[k].0.kind(), truths[k].1)
        })
        .collect();
    let attrs = corrupt_params(&attrs, &labels, spec.rho, spec.seed ^ 0xC0FF_EE00)?;

    let segments = prims
        .iter()
        .zip(truths)
        .map(|(p, (prim, _))| Segment {
            kind: prim.kind(),
            primitive: Some(prim),
            size: p.points,
            rms_residual: 0.0,
        })
        .collect();
    let gt = Segmentation::new(labels, segments)?;
    Ok(Scene {
        cloud,
        gt,
        attrs,
        surfaces,
    })
}

/// Replaces the type and parameters of a random `⌊ρn⌋` subset of points with
/// those of a random point from a different primitive.
pub fn corrupt_params(attrs: &[PointAttributes], labels: &[usize], rho: f64, seed: u64) -> Result<Vec<PointAttributes>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1), got {rho}")));
    }
    if attrs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: attrs.len(),
            found: labels.len(),
        });
    }
    let n = attrs.len();
    let m = (rho * n as f64).floor() as usize;
    let mut out = attrs.to_vec();
    if m == 0 {
        return Ok(out);
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument("corruption needs at least two primitives".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, m).into_iter() {
        let j = loop {
            let j = rng.random_range(0..n);
            if labels[j] != labels[i] {
                break j;
            }
        };
        out[i].type_dist = attrs[j].type_dist;
        out[i].params = attrs[j].params;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_spec(points: usize) -> SceneSpec {
        SceneSpec {
            seed: 3,
            noise: 0.0,
            rho: 0.0,
            normalize: false,
            primitives: vec![PrimitiveSpec {
                surface: Surface::Plane {
                    origin: [0.0, 0.0, 0.25],
                    normal: [0.0, 0.0, 1.0],
                    u_dir: [1.0, 0.0, 0.0],
                    half_extent: [0.5, 0.3],
                },
                points,
            }],
            random: None,
        }
    }

    #[test]
    fn single_plane_is_exact() {
        let s = generate_scene(&plane_spec(1000)).unwrap();
        assert_eq!(s.cloud.len(), 1000);
        for i in 0..1000 {
            assert_eq!(s.cloud.position(i).z, 0.25);
            assert_eq!(s.cloud.normal(i).unwrap(), Vec3::z());
        }
    }

    #[test]
    fn samples_lie_on_their_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for ty in PrimitiveType::ALL {
            let surf = random_surface(&mut rng, ty);
            let prim = surf.primitive();
            for (p, n) in surf.sample(&mut rng, 200) {
                assert!(prim.distance(&p) < 1e-9, "{ty}: {}", prim.distance(&p));
                assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn random_scene_counts_and_determinism() {
        let spec = SceneSpec::random(11, 0.0);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.cloud.len(), 2048);
        let k = a.gt.num_segments();
        assert!((4..=8).contains(&k));
        let mut hist = vec![0; k];
        for &l in &a.gt.labels {
            hist[l] += 1;
        }
        for (h, s) in hist.iter().zip(&a.gt.segments) {
            assert_eq!(*h, s.size);
            assert!(*h >= 120);
        }
        assert!((a.cloud.diameter() - 1.0).abs() < 1e-9);
        for (i, &l) in a.gt.labels.iter().enumerate() {
            assert!(a.surfaces[l].primitive().distance(&a.cloud.position(i)) < 1e-9);
        }
    }

    #[test]
    fn corruption_count_and_effect() {
        let mut spec = SceneSpec::random(2, 0.0);
        spec.random.as_mut().unwrap().total_points = 1000;
        let s = generate_scene(&spec).unwrap();
        let c = corrupt_params(&s.attrs, &s.gt.labels, 0.5, 9).unwrap();
        let changed = s.attrs.iter().zip(&c).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 500);
        assert_eq!(corrupt_params(&s.attrs, &s.gt.labels, 0.0, 9).unwrap(), s.attrs);
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let spec = plane_spec(10);
        let text = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let mut bad = spec.clone();
        bad.rho = 1.0;
        assert!(generate_scene(&bad).is_err());
        let mut bad = spec;
        bad.primitives.clear();
        assert!(generate_scene(&bad).is_err());
    }

    #[test]
    fn allocation_is_exact() {
        let c = allocate(100, &[1.0, 2.0, 3.0], 10);
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert!(c.iter().all(|&x| x >= 10));
    }
}
