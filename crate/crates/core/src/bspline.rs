//! Bicubic tensor-product B-spline patches: evaluation, approximate
//! closest-point distance, and least-squares grid fitting.
//!
//! Open directions use clamped uniform knots on `[0, 1]`. A closed `u`
//! direction uses uniform periodic knots, so `u` wraps modulo 1.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, Vec3};

pub const DEGREE: usize = 3;
pub const DEFAULT_SEARCH_GRID: usize = 16;
pub const DEFAULT_FIT_GRID: usize = 20;
pub const DEFAULT_FIT_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PatchRepr", into = "PatchRepr")]
pub struct BSplinePatch {
    grid_u: usize,
    grid_v: usize,
    closed_u: bool,
    /// Row-major: `control[iu * grid_v + iv]`.
    control: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct PatchRepr {
    grid: [usize; 2],
    closed_u: bool,
    control: Vec<[f64; 3]>,
}

impl TryFrom<PatchRepr> for BSplinePatch {
    type Error = Error;

    fn try_from(r: PatchRepr) -> Result<Self> {
        let control = r.control.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        BSplinePatch::new(r.grid[0], r.grid[1], r.closed_u, control)
    }
}

impl From<BSplinePatch> for PatchRepr {
    fn from(p: BSplinePatch) -> Self {
        PatchRepr {
            grid: [p.grid_u, p.grid_v],
            closed_u: p.closed_u,
            control: p.control.iter().map(|c| [c.x, c.y, c.z]).collect(),
        }
    }
}

impl BSplinePatch {
    pub fn new(grid_u: usize, grid_v: usize, closed_u: bool, control: Vec<Vec3>) -> Result<Self> {
        if grid_u < 4 || grid_v < 4 {
            return Err(Error::InvalidArgument(format!(
                "B-spline control grid must be at least 4x4, got {grid_u}x{grid_v}"
            )));
        }
        if control.len() != grid_u * grid_v {
            return Err(Error::LengthMismatch {
                expected: grid_u * grid_v,
                found: control.len(),
            });
        }
        if control.iter().any(|c| !c.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument("non-finite control point".into()));
        }
        Ok(Self {
            grid_u,
            grid_v,
            closed_u,
            control,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_u, self.grid_v)
    }

    pub fn closed_u(&self) -> bool {
        self.closed_u
    }

    pub fn control(&self) -> &[Vec3] {
        &self.control
    }

    pub fn control_point(&self, iu: usize, iv: usize) -> Vec3 {
        self.control[iu * self.grid_v + iv]
    }

    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            control: self.control.iter().map(f).collect(),
            ..self.clone()
        }
    }

    pub fn eval(&self, u: f64, v: f64) -> Vec3 {
        self.eval_with_derivs(u, v).0
    }

    /// Surface point and the partial derivatives with respect to `u` and `v`.
    pub fn eval_with_derivs(&self, u: f64, v: f64) -> (Vec3, Vec3, Vec3) {
        let bu = basis(u, self.grid_u, self.closed_u);
        let bv = basis(v, self.grid_v, false);
        let mut s = Vec3::zeros();
        let mut su = Vec3::zeros();
        let mut sv = Vec3::zeros();
        for a in 0..4 {
            let iu = bu.index[a];
            for b in 0..4 {
                let c = self.control[iu * self.grid_v + bv.index[b]];
                s += c * (bu.value[a] * bv.value[b]);
                su += c * (bu.deriv[a] * bv.value[b]);
                sv += c * (bu.value[a] * bv.deriv[b]);
            }
        }
        (s, su, sv)
    }

    /// Parameter values of a `g`-sample search grid along one direction.
    fn samples(g: usize, closed: bool) -> Vec<f64> {
        if closed {
            (0..g).map(|i| i as f64 / g as f64).collect()
        } else {
            (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
        }
    }
}

/// Four nonzero basis functions at a parameter, with their control indices.
#[derive(Debug, Clone, Copy)]
struct Basis {
    index: [usize; 4],
    value: [f64; 4],
    deriv: [f64; 4],
}

fn basis(t: f64, count: usize, closed: bool) -> Basis {
    if closed {
        periodic_basis(t, count)
    } else {
        clamped_basis(t.clamp(0.0, 1.0), count)
    }
}

/// Uniform periodic cubic basis; `t` wraps into `[0, 1)`.
fn periodic_basis(t: f64, count: usize) -> Basis {
    let g = count as f64;
    let w = t.rem_euclid(1.0) * g;
    let span = (w.floor() as usize).min(count - 1);
    let f = w - span as f64;
    let f2 = f * f;
    let f3 = f2 * f;
    let value = [
        (1.0 - f).powi(3) / 6.0,
        (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
        (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
        f3 / 6.0,
    ];
    let deriv = [
        -g * (1.0 - f).powi(2) / 2.0,
        g * (9.0 * f2 - 12.0 * f) / 6.0,
        g * (-9.0 * f2 + 6.0 * f + 3.0) / 6.0,
        g * f2 / 2.0,
    ];
    let index = [0, 1, 2, 3].map(|j| (span + j) % count);
    Basis { index, value, deriv }
}

/// Knot `i` of the clamped uniform cubic knot vector for `count` control points.
fn clamped_knot(i: usize, count: usize) -> f64 {
    let inner = count - DEGREE; // number of spans
    if i <= DEGREE {
        0.0
    } else if i >= count {
        1.0
    } else {
        (i - DEGREE) as f64 / inner as f64
    }
}

/// Cox-de Boor basis functions and first derivatives on clamped knots.
fn clamped_basis(t: f64, count: usize) -> Basis {
    let spans = count - DEGREE;
    let span = DEGREE + ((t * spans as f64).floor() as usize).min(spans - 1);
    let knot = |i: usize| clamped_knot(i, count);

    // Triangular table of basis values for degrees 0..=3.
    let mut n = [[0.0f64; 4]; 4];
    n[0][0] = 1.0;
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    for j in 1..=DEGREE {
        left[j] = t - knot(span + 1 - j);
        right[j] = knot(span + j) - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[j - 1][r] / denom } else { 0.0 };
            n[j][r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j][j] = saved;
    }
    let value = n[DEGREE];
    let mut deriv = [0.0; 4];
    for r in 0..=DEGREE {
        let i = span - DEGREE + r;
        let lower = |k: usize| -> f64 {
            // degree-2 basis function N_{k,2}, nonzero only for k in span-2..=span
            if k + 2 < span || k > span {
                0.0
            } else {
                n[DEGREE - 1][k + 2 - span]
            }
        };
        let mut d = 0.0;
        let a = knot(i + DEGREE) - knot(i);
        if a > 0.0 && i + 2 >= span {
            d += DEGREE as f64 * lower(i) / a;
        }
        let b = knot(i + DEGREE + 1) - knot(i + 1);
        if b > 0.0 {
            d -= DEGREE as f64 * lower(i + 1) / b;
        }
        deriv[r] = d;
    }
    let index = [0, 1, 2, 3].map(|r| span - DEGREE + r);
    Basis { index, value, deriv }
}

pub fn bspline_eval(patch: &BSplinePatch, u: f64, v: f64) -> Vec3 {
    patch.eval(u, v)
}

/// Approximate point-to-patch distance with the default search grid.
pub fn closest_distance(patch: &BSplinePatch, p: &Vec3) -> f64 {
    closest_point(patch, p, DEFAULT_SEARCH_GRID).2
}

/// Coarse `grid × grid` parameter scan followed by Gauss-Newton refinement
/// from the three best samples. Returns `(u, v, distance)`; the distance never
/// exceeds the coarse-grid minimum.
pub fn closest_point(patch: &BSplinePatch, p: &Vec3, grid: usize) -> (f64, f64, f64) {
    let grid = grid.max(2);
    let us = BSplinePatch::samples(grid, patch.closed_u);
    let vs = BSplinePatch::samples(grid, false);
    let mut coarse: Vec<(f64, f64, f64)> = Vec::with_capacity(grid * grid);
    for &u in &us {
        for &v in &vs {
            coarse.push(((patch.eval(u, v) - p).norm_squared(), u, v));
        }
    }
    coarse.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = (coarse[0].1, coarse[0].2, coarse[0].0);
    for &(d2, u, v) in coarse.iter().take(3) {
        let (ru, rv, rd2) = refine(patch, p, u, v, d2);
        if rd2 < best.2 {
            best = (ru, rv, rd2);
        }
    }
    (best.0, best.1, best.2.sqrt())
}

fn refine(patch: &BSplinePatch, p: &Vec3, mut u: f64, mut v: f64, mut f: f64) -> (f64, f64, f64) {
    let wrap = |u: f64| {
        if patch.closed_u {
            u.rem_euclid(1.0)
        } else {
            u.clamp(0.0, 1.0)
        }
    };
    for _ in 0..30 {
        let (s, su, sv) = patch.eval_with_derivs(u, v);
        let r = s - p;
        let jtj = Matrix2::new(su.dot(&su), su.dot(&sv), su.dot(&sv), sv.dot(&sv));
        let jtr = Vector2::new(su.dot(&r), sv.dot(&r));
        let damp = 1e-12 * (jtj[(0, 0)] + jtj[(1, 1)]).max(1e-300);
        let Some(step) = (jtj + Matrix2::identity() * damp).try_inverse().map(|m| -(m * jtr)) else {
            break;
        };
        if !step.iter().all(|x| x.is_finite()) {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let nu = wrap(u + scale * step.x);
            let nv = (v + scale * step.y).clamp(0.0, 1.0);
            let nf = (patch.eval(nu, nv) - p).norm_squared();
            if nf < f {
                let rel = (f - nf) / f.max(1e-300);
                u = nu;
                v = nv;
                f = nf;
                accepted = true;
                if rel < 1e-12 {
                    return (u, v, f);
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (u, v, f)
}

/// Least-squares bicubic fit of a `grid × grid` patch to `points`, with Tikhonov
/// damping toward a lattice on the principal plane (open) or a fitted tube (closed).
pub fn fit_patch(
    points: &[Vec3],
    normals: Option<&[Vec3]>,
    grid: usize,
    closed_u: bool,
    damping: f64,
) -> Result<BSplinePatch> {
    if points.len() < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    let grid = grid.max(4);
    let c = centroid(points);
    let mut cov = nalgebra::Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let e1: Vec3 = eig.eigenvectors.column(order[0]).into();
    let e2: Vec3 = eig.eigenvectors.column(order[1]).into();

    // Parameterization and the prior lattice.
    let (params, prior): (Vec<(f64, f64)>, Vec<Vec3>) = if !closed_u {
        let a: Vec<f64> = points.iter().map(|p| (p - c).dot(&e1)).collect();
        let b: Vec<f64> = points.iter().map(|p| (p - c).dot(&e2)).collect();
        let (a0, a1) = min_max(&a);
        let (b0, b1) = min_max(&b);
        let (wa, wb) = ((a1 - a0).max(1e-12), (b1 - b0).max(1e-12));
        let params = a.iter().zip(&b).map(|(x, y)| ((x - a0) / wa, (y - b0) / wb)).collect();
        let mut prior = Vec::with_capacity(grid * grid);
        for iu in 0..grid {
            for iv in 0..grid {
                let gu = greville(iu, grid);
                let gv = greville(iv, grid);
                prior.push(c + e1 * (a0 + gu * wa) + e2 * (b0 + gv * wb));
            }
        }
        (params, prior)
    } else {
        let axis = match normals {
            Some(ns) if ns.len() == points.len() => {
                let mut nc = nalgebra::Matrix3::zeros();
                for n in ns {
                    nc += n * n.transpose();
                }
                let ne = SymmetricEigen::new(nc);
                ne.eigenvectors.column(ne.eigenvalues.imin()).into()
            }
            _ => e1,
        };
        let axis: Vec3 = axis;
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let x = axis.cross(&helper).normalize();
        let y = axis.cross(&x);
        let h: Vec<f64> = points.iter().map(|p| (p - c).dot(&axis)).collect();
        let (h0, h1) = min_max(&h);
        let wh = (h1 - h0).max(1e-12);
        let mut radius = 0.0;
        let params = points
            .iter()
            .zip(&h)
            .map(|(p, hh)| {
                let d = p - c;
                let (px, py) = (d.dot(&x), d.dot(&y));
                radius += (px * px + py * py).sqrt();
                let ang = py.atan2(px).rem_euclid(std::f64::consts::TAU);
                (ang / std::f64::consts::TAU, (hh - h0) / wh)
            })
            .collect();
        radius /= points.len() as f64;
        let mut prior = Vec::with_capacity(grid * grid);
        for iu in 0..grid {
            // periodic basis at u peaks at control index span+1
            let ang = ((iu as f64 - 1.0) / grid as f64) * std::f64::consts::TAU;
            for iv in 0..grid {
                let gv = greville(iv, grid);
                prior.push(c + axis * (h0 + gv * wh) + (x * ang.cos() + y * ang.sin()) * radius);
            }
        }
        (params, prior)
    };

    let m = grid * grid;
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DMatrix::<f64>::zeros(m, 3);
    for (p, &(u, v)) in points.iter().zip(&params) {
        let bu = basis(u, grid, closed_u);
        let bv = basis(v, grid, false);
        let mut idx = [0usize; 16];
        let mut w = [0.0f64; 16];
        for a in 0..4 {
            for b in 0..4 {
                idx[a * 4 + b] = bu.index[a] * grid + bv.index[b];
                w[a * 4 + b] = bu.value[a] * bv.value[b];
            }
        }
        for r in 0..16 {
            for s in 0..16 {
                ata[(idx[r], idx[s])] += w[r] * w[s];
            }
            for k in 0..3 {
                atb[(idx[r], k)] += w[r] * p[k];
            }
        }
    }
    for i in 0..m {
        ata[(i, i)] += damping;
        for k in 0..3 {
            atb[(i, k)] += damping * prior[i][k];
        }
    }
    let chol = ata.cholesky().ok_or(Error::RankDeficient)?;
    let sol = chol.solve(&atb);
    let control = (0..m).map(|i| Vec3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)])).collect();
    BSplinePatch::new(grid, grid, closed_u, control)
}

/// Greville abscissa of control point `i` on clamped uniform cubic knots.
fn greville(i: usize, count: usize) -> f64 {
    (1..=DEGREE).map(|k| clamped_knot(i + k, count)).sum::<f64>() / DEGREE as f64
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}
