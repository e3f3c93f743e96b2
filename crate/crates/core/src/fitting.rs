//! Least-squares fitting of planes, spheres, cylinders and cones to point
//! sets, with a guarded Gauss-Newton refinement shared by the curved types.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::bspline::{self, DEFAULT_FIT_DAMPING, DEFAULT_FIT_GRID};
use crate::error::{Error, Result};
use crate::geometry::{centroid, ParamVector, PointCloud, Primitive, PrimitiveType, Vec3};

/// Residual magnitude under which a point counts as an inlier.
pub const INLIER_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
pub struct GaussNewtonOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Stop once the relative decrease of the sum of squares falls below this.
    pub rel_tol: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            max_halvings: 20,
            rel_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussNewtonReport {
    pub x: DVector<f64>,
    /// Sum of squared residuals after each accepted iterate, starting with `x0`.
    pub cost_history: Vec<f64>,
    pub converged: bool,
}

impl GaussNewtonReport {
    pub fn cost(&self) -> f64 {
        *self.cost_history.last().unwrap()
    }
}

/// Least-squares step `-J⁺ r` through the eigendecomposition of `JᵀJ`,
/// dropping directions whose singular value is below `1e-7·σ_max`.
fn truncated_step(jac: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let jtj = jac.tr_mul(jac);
    let jtr = jac.tr_mul(r);
    let eig = SymmetricEigen::new(jtj);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) || !lmax.is_finite() {
        return None;
    }
    let cut = lmax * 1e-14;
    let mut step = DVector::zeros(jac.ncols());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cut {
            let v = eig.eigenvectors.column(k);
            step -= v * (v.dot(&jtr) / l);
        }
    }
    Some(step)
}

/// Gauss-Newton with a central-difference Jacobian, a truncated SVD step
/// (gauge freedoms such as axis scale are cut at relative 1e-7), and step-halving line search.
/// The cost is non-increasing across accepted iterates.
pub fn gauss_newton<F>(residuals: F, m: usize, x0: DVector<f64>, opts: &GaussNewtonOptions) -> GaussNewtonReport
where
    F: Fn(&DVector<f64>, &mut DVector<f64>),
{
    let p = x0.len();
    let mut x = x0;
    let mut r = DVector::zeros(m);
    residuals(&x, &mut r);
    let mut cost = r.norm_squared();
    let mut history = vec![cost];
    if !cost.is_finite() {
        return GaussNewtonReport {
            x,
            cost_history: history,
            converged: false,
        };
    }
    let mut jac = DMatrix::zeros(m, p);
    let mut rp = DVector::zeros(m);
    let mut rm = DVector::zeros(m);
    let mut converged = false;
    for _ in 0..opts.max_iter {
        if cost <= 1e-30 {
            converged = true;
            break;
        }
        for j in 0..p {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            residuals(&xp, &mut rp);
            let mut xm = x.clone();
            xm[j] -= h;
            residuals(&xm, &mut rm);
            let col = (&rp - &rm) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let Some(step) = truncated_step(&jac, &r) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &x + &step * scale;
            residuals(&trial, &mut rp);
            let c = rp.norm_squared();
            if c.is_finite() && c < cost {
                accepted = Some((trial, c, rp.clone()));
                break;
            }
            scale *= 0.5;
        }
        let Some((nx, nc, nr)) = accepted else {
            converged = true;
            break;
        };
        let rel = (cost - nc) / cost.max(1e-300);
        x = nx;
        cost = nc;
        r = nr;
        history.push(cost);
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }
    GaussNewtonReport {
        x,
        cost_history: history,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub kind: PrimitiveType,
    pub primitive: Primitive,
    pub rms_residual: f64,
    pub inlier_count: usize,
    /// False when refinement failed and the initialization was returned.
    pub converged: bool,
}

impl FitResult {
    fn new(primitive: Primitive, points: &[Vec3], converged: bool) -> Self {
        let mut ss = 0.0;
        let mut inliers = 0;
        for p in points {
            let d = primitive.distance(p);
            ss += d * d;
            if d < INLIER_THRESHOLD {
                inliers += 1;
            }
        }
        Self {
            kind: primitive.kind(),
            rms_residual: (ss / points.len() as f64).sqrt(),
            inlier_count: inliers,
            primitive,
            converged,
        }
    }

    pub fn params(&self) -> Option<ParamVector> {
        self.primitive.params()
    }

    pub fn inlier_fraction(&self, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            self.inlier_count as f64 / total as f64
        }
    }
}

/// Eigenvalues ascending with matching eigenvectors.
pub(crate) fn sorted_eigen(m: Matrix3<f64>) -> ([f64; 3], [Vec3; 3]) {
    let e = SymmetricEigen::new(m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    (
        idx.map(|i| e.eigenvalues[i]),
        idx.map(|i| e.eigenvectors.column(i).into_owned()),
    )
}

pub(crate) fn covariance(points: &[Vec3], c: &Vec3) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov / points.len() as f64
}

/// Ascending eigenvalues of the position covariance.
pub fn covariance_eigenvalues(points: &[Vec3]) -> [f64; 3] {
    let c = centroid(points);
    sorted_eigen(covariance(points, &c)).0
}

fn lexicographically_positive(v: Vec3) -> Vec3 {
    for k in 0..3 {
        if v[k].abs() > 1e-12 {
            return if v[k] < 0.0 { -v } else { v };
        }
    }
    v
}

fn require(points: &[Vec3], needed: usize) -> Result<()> {
    if points.len() < needed {
        Err(Error::TooFewPoints {
            needed,
            got: points.len(),
        })
    } else {
        Ok(())
    }
}

fn mean_normal(normals: Option<&[Vec3]>) -> Option<Vec3> {
    normals.map(|ns| ns.iter().fold(Vec3::zeros(), |a, n| a + n))
}

/// Total least-squares plane through the centroid.
pub fn fit_plane(points: &[Vec3], normals: Option<&[Vec3]>) -> Result<FitResult> {
    require(points, 3)?;
    let c = centroid(points);
    let (vals, vecs) = sorted_eigen(covariance(points, &c));
    if !(vals[2] > 0.0) || vals[1] <= 1e-12 * vals[2] {
        return Err(Error::RankDeficient);
    }
    let mut normal = vecs[0].normalize();
    match mean_normal(normals) {
        Some(m) if m.norm() > 1e-12 => {
            if normal.dot(&m) < 0.0 {
                normal = -normal;
            }
        }
        _ => normal = lexicographically_positive(normal),
    }
    let prim = Primitive::Plane {
        normal,
        offset: normal.dot(&c),
    };
    Ok(FitResult::new(prim, points, true))
}

/// Algebraic sphere followed by Gauss-Newton on geometric residuals.
pub fn fit_sphere(points: &[Vec3]) -> Result<FitResult> {
    require(points, 4)?;
    let c = centroid(points);
    let (vals, _) = sorted_eigen(covariance(points, &c));
    if !(vals[2] > 0.0) || vals[0] <= 1e-12 * vals[2] {
        return Err(Error::RankDeficient);
    }
    let scale = vals[2].sqrt();
    // Solve 2 q·x + k = |q|² in centered, scaled coordinates q = (p - c) / scale.
    let m = points.len();
    let mut a = DMatrix::zeros(m, 4);
    let mut b = DVector::zeros(m);
    for (i, p) in points.iter().enumerate() {
        let q = (p - c) / scale;
        a[(i, 0)] = 2.0 * q.x;
        a[(i, 1)] = 2.0 * q.y;
        a[(i, 2)] = 2.0 * q.z;
        a[(i, 3)] = 1.0;
        b[i] = q.norm_squared();
    }
    let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|_| Error::RankDeficient)?;
    let oq = Vec3::new(sol[0], sol[1], sol[2]);
    let r2 = sol[3] + oq.norm_squared();
    if !(r2 > 0.0) || !r2.is_finite() {
        return Err(Error::RankDeficient);
    }
    let center0 = c + oq * scale;
    let radius0 = r2.sqrt() * scale;
    let x0 = DVector::from_vec(vec![center0.x, center0.y, center0.z, radius0]);
    let report = gauss_newton(
        |x, r| {
            let o = Vec3::new(x[0], x[1], x[2]);
            for (i, p) in points.iter().enumerate() {
                r[i] = (p - o).norm() - x[3];
            }
        },
        m,
        x0,
        &GaussNewtonOptions::default(),
    );
    let x = &report.x;
    let prim = Primitive::Sphere {
        center: Vec3::new(x[0], x[1], x[2]),
        radius: x[3].abs(),
    };
    Ok(FitResult::new(prim, points, report.converged))
}

/// Kasa algebraic circle fit in 2-D; returns (center, radius).
fn fit_circle_2d(pts: &[(f64, f64)]) -> Option<((f64, f64), f64)> {
    let m = pts.len();
    let mut a = DMatrix::zeros(m, 3);
    let mut b = DVector::zeros(m);
    for (i, &(x, y)) in pts.iter().enumerate() {
        a[(i, 0)] = 2.0 * x;
        a[(i, 1)] = 2.0 * y;
        a[(i, 2)] = 1.0;
        b[i] = x * x + y * y;
    }
    let sol = a.svd(true, true).solve(&b, 1e-14).ok()?;
    let r2 = sol[2] + sol[0] * sol[0] + sol[1] * sol[1];
    if r2 > 0.0 && r2.is_finite() {
        Some(((sol[0], sol[1]), r2.sqrt()))
    } else {
        None
    }
}

fn orthonormal_frame(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let x = axis.cross(&helper).normalize();
    let y = axis.cross(&x);
    (x, y)
}

fn normals_for(normals: Option<&[Vec3]>, n: usize) -> Result<&[Vec3]> {
    match normals {
        Some(ns) if ns.len() == n => Ok(ns),
        Some(ns) => Err(Error::LengthMismatch {
            expected: n,
            found: ns.len(),
        }),
        None => Err(Error::NormalsRequired),
    }
}

/// Cylinder from the normal-covariance axis, a 2-D circle fit, and
/// Gauss-Newton refinement of axis, center and radius.
pub fn fit_cylinder(points: &[Vec3], normals: Option<&[Vec3]>) -> Result<FitResult> {
    let normals = normals_for(normals, points.len())?;
    require(points, 6)?;
    let mut nc = Matrix3::zeros();
    for n in normals {
        nc += n * n.transpose();
    }
    let (vals, vecs) = sorted_eigen(nc);
    if !(vals[2] > 0.0) || vals[1] <= 1e-6 * vals[2] {
        return Err(Error::DegenerateAxis);
    }
    let axis0 = vecs[0].normalize();
    let c = centroid(points);
    let (ex, ey) = orthonormal_frame(&axis0);
    let proj: Vec<(f64, f64)> = points.iter().map(|p| ((p - c).dot(&ex), (p - c).dot(&ey))).collect();
    let ((cx, cy), r0) = fit_circle_2d(&proj).ok_or(Error::RankDeficient)?;
    let center0 = c + ex * cx + ey * cy;
    let init = Primitive::Cylinder {
        axis: axis0,
        center: center0,
        radius: r0,
    };
    let x0 = DVector::from_vec(vec![
        axis0.x, axis0.y, axis0.z, center0.x, center0.y, center0.z, r0,
    ]);
    let report = gauss_newton(
        |x, r| {
            let a = Vec3::new(x[0], x[1], x[2]);
            let an = a.norm().max(1e-300);
            let a = a / an;
            let o = Vec3::new(x[3], x[4], x[5]);
            for (i, p) in points.iter().enumerate() {
                let v = p - o;
                r[i] = (v - a * a.dot(&v)).norm() - x[6];
            }
        },
        points.len(),
        x0,
        &GaussNewtonOptions::default(),
    );
    let x = &report.x;
    let a = Vec3::new(x[0], x[1], x[2]);
    let radius = x[6];
    if !(a.norm() > 1e-12) || !(radius > 0.0) || !x.iter().all(|v| v.is_finite()) {
        return Ok(FitResult::new(init, points, false));
    }
    let axis = a.normalize();
    let o = Vec3::new(x[3], x[4], x[5]);
    let center = o + axis * axis.dot(&(c - o));
    let prim = Primitive::Cylinder {
        axis,
        center,
        radius,
    };
    Ok(FitResult::new(prim, points, report.converged))
}

/// Apex guess from the least-squares intersection of tangent planes. Poorly
/// conditioned on small patches, where the normals span a thin arc.
fn cone_init_tangent_planes(points: &[Vec3], normals: &[Vec3], c: &Vec3, extent: f64) -> Option<DVector<f64>> {
    let mut m = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for (p, n) in points.iter().zip(normals) {
        let nn = n * n.transpose();
        m += nn;
        b += nn * (p - c);
    }
    let (vals, _) = sorted_eigen(m);
    if !(vals[2] > 0.0) || vals[0] <= 1e-10 * vals[2] {
        return None;
    }
    let apex0 = c + m.try_inverse()? * b;
    if !apex0.iter().all(|v| v.is_finite()) || (apex0 - c).norm() > 1e3 * extent {
        return None;
    }
    let mut dir_sum = Vec3::zeros();
    for p in points {
        let d = p - apex0;
        let len = d.norm();
        if len > 0.0 {
            dir_sum += d / len;
        }
    }
    if !(dir_sum.norm() > 1e-12) {
        return None;
    }
    let axis0 = dir_sum.normalize();
    let mut theta0 = 0.0;
    let mut cnt = 0usize;
    for p in points {
        let d = p - apex0;
        let len = d.norm();
        if len > 0.0 {
            theta0 += (axis0.dot(&d) / len).clamp(-1.0, 1.0).acos();
            cnt += 1;
        }
    }
    theta0 /= cnt.max(1) as f64;
    Some(DVector::from_vec(vec![
        apex0.x, apex0.y, apex0.z, axis0.x, axis0.y, axis0.z, theta0,
    ]))
}

/// Guess from normals alone: on a cone `n·a` is constant, so the axis is the
/// least-variance direction of the centred normals. Projected normal lines
/// meet at the axis, and radius grows linearly with height along it.
fn cone_init_axis(points: &[Vec3], normals: &[Vec3], c: &Vec3) -> Option<DVector<f64>> {
    let nbar = centroid(normals);
    let (vals, vecs) = sorted_eigen(covariance(normals, &nbar));
    if !(vals[2] > 0.0) || vals[1] <= 1e-8 * vals[2] {
        return None;
    }
    let mut axis = vecs[0].normalize();
    let (ex, ey) = orthonormal_frame(&axis);
    // Least-squares meeting point of the projected normal lines.
    let mut m = nalgebra::Matrix2::zeros();
    let mut rhs = nalgebra::Vector2::zeros();
    for (p, n) in points.iter().zip(normals) {
        let d = nalgebra::Vector2::new(n.dot(&ex), n.dot(&ey));
        let len = d.norm();
        if !(len > 1e-9) {
            continue;
        }
        let d = d / len;
        let proj = nalgebra::Matrix2::identity() - d * d.transpose();
        let q = nalgebra::Vector2::new((p - c).dot(&ex), (p - c).dot(&ey));
        m += proj;
        rhs += proj * q;
    }
    let q = m.try_inverse()? * rhs;
    let base = c + ex * q.x + ey * q.y;
    // r = k·h + b by linear least squares.
    let (mut sh, mut sr, mut shh, mut shr) = (0.0, 0.0, 0.0, 0.0);
    for p in points {
        let v = p - base;
        let h = axis.dot(&v);
        let r = (v - axis * h).norm();
        sh += h;
        sr += r;
        shh += h * h;
        shr += h * r;
    }
    let n = points.len() as f64;
    let det = n * shh - sh * sh;
    if !(det.abs() > 1e-300) {
        return None;
    }
    let mut k = (n * shr - sh * sr) / det;
    let b = (sr - k * sh) / n;
    if k < 0.0 {
        axis = -axis;
        k = -k;
    }
    if !(k > 1e-6) || !k.is_finite() {
        return None;
    }
    let apex = base - axis * (b / k);
    let theta = k.atan();
    let x = DVector::from_vec(vec![apex.x, apex.y, apex.z, axis.x, axis.y, axis.z, theta]);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Cone by Gauss-Newton on apex, axis and half-angle, started from two
/// independent guesses; the better converged fit wins.
pub fn fit_cone(points: &[Vec3], normals: Option<&[Vec3]>) -> Result<FitResult> {
    let normals = normals_for(normals, points.len())?;
    require(points, 6)?;
    let c = centroid(points);
    let extent = points.iter().map(|p| (p - c).norm()).fold(0.0f64, f64::max).max(1e-300);
    let starts: Vec<DVector<f64>> = [
        cone_init_tangent_planes(points, normals, &c, extent),
        cone_init_axis(points, normals, &c),
    ]
    .into_iter()
    .flatten()
    .collect();
    let mut best: Option<(f64, FitResult)> = None;
    for x0 in starts {
        let report = gauss_newton(
            |x, r| {
                let o = Vec3::new(x[0], x[1], x[2]);
                let a = Vec3::new(x[3], x[4], x[5]);
                let a = a / a.norm().max(1e-300);
                let (st, ct) = x[6].sin_cos();
                // |v| sin(φ − θ) with φ the angle between v and the axis.
                for (i, p) in points.iter().enumerate() {
                    let v = p - o;
                    r[i] = ct * a.cross(&v).norm() - st * a.dot(&v);
                }
            },
            points.len(),
            x0,
            &GaussNewtonOptions::default(),
        );
        let Some(prim) = canonical_cone(&report.x, &c, extent) else { continue };
        let fit = FitResult::new(prim, points, report.converged);
        if best.as_ref().is_none_or(|(cost, _)| fit.rms_residual < *cost) {
            best = Some((fit.rms_residual, fit));
        }
    }
    best.map(|(_, f)| f).ok_or(Error::ApexAtInfinity)
}

/// Half-angle in (0, π/2), axis pointing into the nappe, apex not at infinity.
fn canonical_cone(x: &DVector<f64>, c: &Vec3, extent: f64) -> Option<Primitive> {
    let mut axis = Vec3::new(x[3], x[4], x[5]);
    let mut theta = x[6];
    if !(axis.norm() > 1e-12) || !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    axis = axis.normalize();
    if theta > std::f64::consts::FRAC_PI_2 {
        theta = std::f64::consts::PI - theta;
        axis = -axis;
    }
    if !(theta > 0.0 && theta < std::f64::consts::FRAC_PI_2) {
        return None;
    }
    let apex = Vec3::new(x[0], x[1], x[2]);
    if (apex - c).norm() > 1e3 * extent {
        return None;
    }
    Some(Primitive::Cone {
        apex,
        axis,
        half_angle: theta,
    })
}

/// Smallest subset size accepted for each type.
pub fn min_points(ty: PrimitiveType) -> usize {
    match ty {
        PrimitiveType::Plane => 3,
        PrimitiveType::Sphere => 4,
        PrimitiveType::Cylinder | PrimitiveType::Cone => 6,
        PrimitiveType::BsplineOpen | PrimitiveType::BsplineClosed => 16,
    }
}

/// Fits one analytic type to a point set.
pub fn fit_type(ty: PrimitiveType, points: &[Vec3], normals: Option<&[Vec3]>) -> Result<FitResult> {
    match ty {
        PrimitiveType::Plane => fit_plane(points, normals),
        PrimitiveType::Sphere => fit_sphere(points),
        PrimitiveType::Cylinder => fit_cylinder(points, normals),
        PrimitiveType::Cone => fit_cone(points, normals),
        PrimitiveType::BsplineOpen | PrimitiveType::BsplineClosed => {
            require(points, min_points(ty))?;
            let patch = bspline::fit_patch(
                points,
                normals,
                DEFAULT_FIT_GRID,
                ty == PrimitiveType::BsplineClosed,
                DEFAULT_FIT_DAMPING,
            )?;
            Ok(FitResult::new(Primitive::BSpline { patch }, points, true))
        }
    }
}

/// Refits a whole segment as the given type.
pub fn refit_segment_primitive(cloud: &PointCloud, indices: &[usize], ty: PrimitiveType) -> Result<FitResult> {
    if indices.len() < min_points(ty) {
        return Err(Error::TooFewPoints {
            needed: min_points(ty),
            got: indices.len(),
        });
    }
    let pts: Vec<Vec3> = indices.iter().map(|&i| cloud.position(i)).collect();
    let ns: Option<Vec<Vec3>> = cloud.normals().map(|ns| indices.iter().map(|&i| ns[i]).collect());
    fit_type(ty, &pts, ns.as_deref())
}

/// Unit vector helper used by tests and the synthetic generator.
pub fn any_perpendicular(v: &Vector3<f64>) -> Vec3 {
    orthonormal_frame(&v.normalize()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sphere_samples(r: &mut ChaCha8Rng, n: usize, center: Vec3, radius: f64, hemi: bool) -> Vec<Vec3> {
        let g = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let mut d = Vec3::new(g.sample(r), g.sample(r), g.sample(r)).normalize();
                if hemi && d.z < 0.0 {
                    d.z = -d.z;
                }
                center + d * radius
            })
            .collect()
    }

    fn cylinder_samples(r: &mut ChaCha8Rng, n: usize, radius: f64, noise: f64) -> (Vec<Vec3>, Vec<Vec3>) {
        let g = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut ps = Vec::new();
        let mut ns = Vec::new();
        for _ in 0..n {
            let t = r.random::<f64>() * std::f64::consts::TAU;
            let h = r.random::<f64>() * 2.0 - 1.0;
            let nrm = Vec3::new(t.cos(), t.sin(), 0.0);
            let mut p = nrm * radius + Vec3::z() * h;
            if noise > 0.0 {
                p += Vec3::new(g.sample(r), g.sample(r), g.sample(r));
            }
            ps.push(p);
            ns.push(nrm);
        }
        (ps, ns)
    }

    fn cone_samples(r: &mut ChaCha8Rng, n: usize, theta: f64, noise: f64) -> (Vec<Vec3>, Vec<Vec3>) {
        let g = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut ps = Vec::new();
        let mut ns = Vec::new();
        for _ in 0..n {
            let t = r.random::<f64>() * std::f64::consts::TAU;
            let h = 0.3 + r.random::<f64>() * 0.7;
            let radial = Vec3::new(t.cos(), t.sin(), 0.0);
            let mut p = Vec3::z() * h + radial * (h * theta.tan());
            let nrm = (radial * theta.cos() - Vec3::z() * theta.sin()).normalize();
            if noise > 0.0 {
                p += Vec3::new(g.sample(r), g.sample(r), g.sample(r));
            }
            ps.push(p);
            ns.push(nrm);
        }
        (ps, ns)
    }

    #[test]
    fn plane_exact() {
        let ps: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i * i % 7) as f64, 0.0)).collect();
        let f = fit_plane(&ps, None).unwrap();
        let Primitive::Plane { normal, offset } = f.primitive else { panic!() };
        assert!((normal.z.abs() - 1.0).abs() < 1e-12);
        assert!(offset.abs() < 1e-12);
        assert!(f.rms_residual < 1e-12);
        let tri = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        let f = fit_plane(&tri, None).unwrap();
        let Primitive::Plane { normal, .. } = f.primitive else { panic!() };
        assert_eq!(normal, Vec3::z());
    }

    #[test]
    fn plane_normal_follows_input_normals() {
        let tri = [Vec3::zeros(), Vec3::x(), Vec3::y()];
        let ns = [-Vec3::z(); 3];
        let f = fit_plane(&tri, Some(&ns)).unwrap();
        let Primitive::Plane { normal, .. } = f.primitive else { panic!() };
        assert_eq!(normal, -Vec3::z());
    }

    #[test]
    fn collinear_plane_is_rank_deficient() {
        let ps: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(fit_plane(&ps, None), Err(Error::RankDeficient)));
    }

    #[test]
    fn noisy_plane() {
        let mut r = rng(3);
        let g = Normal::new(0.0, 0.01).unwrap();
        let ps: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(r.random(), r.random(), g.sample(&mut r)))
            .collect();
        let f = fit_plane(&ps, None).unwrap();
        let Primitive::Plane { normal, .. } = f.primitive else { panic!() };
        assert!(f.rms_residual > 0.005 && f.rms_residual < 0.02);
        assert!(normal.z.abs().acos().to_degrees() < 2.0);
    }

    #[test]
    fn sphere_exact_and_tetrahedron() {
        let mut r = rng(1);
        let ps = sphere_samples(&mut r, 100, Vec3::zeros(), 1.0, false);
        let f = fit_sphere(&ps).unwrap();
        let Primitive::Sphere { center, radius } = f.primitive else { panic!() };
        assert!(center.norm() < 1e-6);
        assert!((radius - 1.0).abs() < 1e-6);

        let s = 1.0 / 3f64.sqrt();
        let tet = [
            Vec3::new(s, s, s),
            Vec3::new(s, -s, -s),
            Vec3::new(-s, s, -s),
            Vec3::new(-s, -s, s),
        ];
        let f = fit_sphere(&tet).unwrap();
        let Primitive::Sphere { radius, .. } = f.primitive else { panic!() };
        assert!((radius - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_from_hemisphere() {
        let mut r = rng(2);
        let ps = sphere_samples(&mut r, 150, Vec3::new(0.3, -0.2, 1.0), 0.5, true);
        let f = fit_sphere(&ps).unwrap();
        let Primitive::Sphere { radius, .. } = f.primitive else { panic!() };
        assert!((radius - 0.5).abs() < 1e-3);
    }

    #[test]
    fn coplanar_sphere_is_rank_deficient() {
        let ps: Vec<Vec3> = (0..8).map(|i| Vec3::new((i as f64).cos(), (i as f64).sin(), 0.0)).collect();
        assert!(matches!(fit_sphere(&ps), Err(Error::RankDeficient)));
    }

    #[test]
    fn cylinder_exact() {
        let mut r = rng(4);
        let (ps, ns) = cylinder_samples(&mut r, 200, 2.0, 0.0);
        let f = fit_cylinder(&ps, Some(&ns)).unwrap();
        let Primitive::Cylinder { axis, radius, .. } = f.primitive else { panic!() };
        assert!((radius - 2.0).abs() < 1e-6);
        assert!(axis.z.abs().clamp(-1.0, 1.0).acos().to_degrees() < 0.1);
    }

    #[test]
    fn cylinder_partial_arc() {
        let mut r = rng(14);
        let mut ps = Vec::new();
        let mut ns = Vec::new();
        for _ in 0..64 {
            let t = r.random::<f64>() * 0.6;
            let n = Vec3::new(t.cos(), t.sin(), 0.0);
            ps.push(n * 0.3 + Vec3::z() * r.random::<f64>() * 0.1);
            ns.push(n);
        }
        let f = fit_cylinder(&ps, Some(&ns)).unwrap();
        assert!(f.rms_residual < 1e-9, "{}", f.rms_residual);
    }

    #[test]
    fn cylinder_needs_normals_and_curvature() {
        let ps: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i % 3) as f64, 0.0)).collect();
        assert!(matches!(fit_cylinder(&ps, None), Err(Error::NormalsRequired)));
        let ns = vec![Vec3::z(); 10];
        assert!(matches!(fit_cylinder(&ps, Some(&ns)), Err(Error::DegenerateAxis)));
    }

    #[test]
    fn cylinder_noisy() {
        let mut r = rng(5);
        let (ps, ns) = cylinder_samples(&mut r, 300, 1.0, 0.005);
        let f = fit_cylinder(&ps, Some(&ns)).unwrap();
        assert!(f.rms_residual <= 0.01, "{}", f.rms_residual);
    }

    #[test]
    fn cone_exact() {
        let mut r = rng(6);
        let theta = 30f64.to_radians();
        let (ps, ns) = cone_samples(&mut r, 200, theta, 0.0);
        let f = fit_cone(&ps, Some(&ns)).unwrap();
        let Primitive::Cone {
            apex, half_angle, axis,
        } = f.primitive
        else {
            panic!()
        };
        assert!((half_angle - theta).abs().to_degrees() < 0.2);
        assert!(apex.norm() < 1e-3);
        assert!(axis.z > 0.999);
    }

    #[test]
    fn cone_rejects_cylinder() {
        let mut r = rng(7);
        let (ps, ns) = cylinder_samples(&mut r, 100, 1.0, 0.0);
        assert!(matches!(fit_cone(&ps, Some(&ns)), Err(Error::ApexAtInfinity)));
    }

    #[test]
    fn cone_noisy() {
        let mut r = rng(8);
        let (ps, ns) = cone_samples(&mut r, 300, 25f64.to_radians(), 0.005);
        let f = fit_cone(&ps, Some(&ns)).unwrap();
        assert!(f.rms_residual <= 0.01, "{}", f.rms_residual);
    }

    #[test]
    fn gauss_newton_cost_is_monotone() {
        let mut r = rng(9);
        let (ps, ns) = cone_samples(&mut r, 100, 0.5, 0.01);
        let report = gauss_newton(
            |x, res| {
                for (i, p) in ps.iter().enumerate() {
                    res[i] = (p - Vec3::new(x[0], x[1], x[2])).norm() - x[3];
                }
            },
            ps.len(),
            DVector::from_vec(vec![0.0, 0.0, 0.0, 0.1]),
            &GaussNewtonOptions::default(),
        );
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let _ = ns;
    }

    #[test]
    fn fits_are_rigidly_equivariant() {
        let mut r = rng(10);
        let (ps, ns) = cylinder_samples(&mut r, 150, 0.7, 0.0);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let shift = Vec3::new(1.0, -2.0, 0.5);
        let ps2: Vec<Vec3> = ps.iter().map(|p| rot * p + shift).collect();
        let ns2: Vec<Vec3> = ns.iter().map(|n| rot * n).collect();
        let a = fit_cylinder(&ps, Some(&ns)).unwrap();
        let b = fit_cylinder(&ps2, Some(&ns2)).unwrap();
        let (
            Primitive::Cylinder {
                axis: a1, radius: r1, center: c1,
            },
            Primitive::Cylinder {
                axis: a2, radius: r2, center: c2,
            },
        ) = (&a.primitive, &b.primitive)
        else {
            panic!()
        };
        assert!((r1 - r2).abs() < 1e-6);
        assert!((rot * a1).dot(a2).abs() > 1.0 - 1e-9);
        assert!((rot * c1 + shift - c2).norm() < 1e-6);
        assert!((a.rms_residual - b.rms_residual).abs() < 1e-6);

        let (cps, cns) = cone_samples(&mut r, 150, 0.4, 0.0);
        let cps2: Vec<Vec3> = cps.iter().map(|p| rot * p + shift).collect();
        let cns2: Vec<Vec3> = cns.iter().map(|n| rot * n).collect();
        let a = fit_cone(&cps, Some(&cns)).unwrap();
        let b = fit_cone(&cps2, Some(&cns2)).unwrap();
        let (
            Primitive::Cone {
                apex: o1, half_angle: t1, ..
            },
            Primitive::Cone {
                apex: o2, half_angle: t2, ..
            },
        ) = (&a.primitive, &b.primitive)
        else {
            panic!()
        };
        assert!((t1 - t2).abs() < 1e-6);
        assert!((rot * o1 + shift - o2).norm() < 1e-6);
    }

    #[test]
    fn refit_bspline_segment() {
        let mut r = rng(12);
        let ps: Vec<Vec3> = (0..200).map(|_| Vec3::new(r.random(), r.random(), 0.25)).collect();
        let cloud = PointCloud::new(ps, None).unwrap();
        let idx: Vec<usize> = (0..200).collect();
        let f = refit_segment_primitive(&cloud, &idx, PrimitiveType::BsplineOpen).unwrap();
        assert_eq!(f.kind, PrimitiveType::BsplineOpen);
        assert!(f.rms_residual < 1e-3);
        assert!(refit_segment_primitive(&cloud, &idx[..2], PrimitiveType::Sphere).is_err());
    }
}
