use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cloud::{Transform, Vec3};
use crate::bspline::BSplinePatch;
use crate::error::{Error, Result};

/// The six surface families, with stable integer codes 0..5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveType {
    Plane,
    Sphere,
    Cylinder,
    Cone,
    BsplineOpen,
    BsplineClosed,
}

impl PrimitiveType {
    pub const ALL: [PrimitiveType; 6] = [
        PrimitiveType::Plane,
        PrimitiveType::Sphere,
        PrimitiveType::Cylinder,
        PrimitiveType::Cone,
        PrimitiveType::BsplineOpen,
        PrimitiveType::BsplineClosed,
    ];

    pub const ANALYTIC: [PrimitiveType; 4] = [
        PrimitiveType::Plane,
        PrimitiveType::Sphere,
        PrimitiveType::Cylinder,
        PrimitiveType::Cone,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn is_bspline(self) -> bool {
        matches!(self, PrimitiveType::BsplineOpen | PrimitiveType::BsplineClosed)
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveType::Plane => "plane",
            PrimitiveType::Sphere => "sphere",
            PrimitiveType::Cylinder => "cylinder",
            PrimitiveType::Cone => "cone",
            PrimitiveType::BsplineOpen => "bspline_open",
            PrimitiveType::BsplineClosed => "bspline_closed",
        }
    }

    /// Slot range of this type's block inside a [`ParamVector`].
    pub fn param_block(self) -> Option<std::ops::Range<usize>> {
        match self {
            PrimitiveType::Plane => Some(0..4),
            PrimitiveType::Sphere => Some(4..8),
            PrimitiveType::Cylinder => Some(8..15),
            PrimitiveType::Cone => Some(15..22),
            _ => None,
        }
    }
}

impl fmt::Display for PrimitiveType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown primitive type {s:?}")))
    }
}

pub const PARAM_LEN: usize = 22;

/// 22 analytic shape parameters:
///
/// | slots  | block    | contents                      |
/// |--------|----------|-------------------------------|
/// | 0..4   | plane    | normal (3), offset d          |
/// | 4..8   | sphere   | center (3), radius            |
/// | 8..15  | cylinder | axis (3), center (3), radius  |
/// | 15..22 | cone     | apex (3), axis (3), half-angle|
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector(pub [f64; PARAM_LEN]);

impl Default for ParamVector {
    fn default() -> Self {
        Self([0.0; PARAM_LEN])
    }
}

impl ParamVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        let arr: [f64; PARAM_LEN] = s
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("expected {PARAM_LEN} parameters, got {}", s.len())))?;
        Ok(Self(arr))
    }

    fn v3(&self, at: usize) -> Vec3 {
        Vec3::new(self.0[at], self.0[at + 1], self.0[at + 2])
    }

    fn set3(&mut self, at: usize, v: &Vec3) {
        self.0[at..at + 3].copy_from_slice(v.as_slice());
    }

    /// Reads the analytic primitive stored in the block for `ty`.
    pub fn primitive(&self, ty: PrimitiveType) -> Option<Primitive> {
        let p = match ty {
            PrimitiveType::Plane => Primitive::Plane {
                normal: self.v3(0),
                offset: self.0[3],
            },
            PrimitiveType::Sphere => Primitive::Sphere {
                center: self.v3(4),
                radius: self.0[7],
            },
            PrimitiveType::Cylinder => Primitive::Cylinder {
                axis: self.v3(8),
                center: self.v3(11),
                radius: self.0[14],
            },
            PrimitiveType::Cone => Primitive::Cone {
                apex: self.v3(15),
                axis: self.v3(18),
                half_angle: self.0[21],
            },
            _ => return None,
        };
        Some(p)
    }

    /// Writes an analytic primitive into its block; other blocks are untouched.
    pub fn set_primitive(&mut self, prim: &Primitive) {
        match *prim {
            Primitive::Plane { normal, offset } => {
                self.set3(0, &normal);
                self.0[3] = offset;
            }
            Primitive::Sphere { center, radius } => {
                self.set3(4, &center);
                self.0[7] = radius;
            }
            Primitive::Cylinder {
                axis,
                center,
                radius,
            } => {
                self.set3(8, &axis);
                self.set3(11, &center);
                self.0[14] = radius;
            }
            Primitive::Cone {
                apex,
                axis,
                half_angle,
            } => {
                self.set3(15, &apex);
                self.set3(18, &axis);
                self.0[21] = half_angle;
            }
            Primitive::BSpline { .. } => {}
        }
    }

    pub fn from_primitive(prim: &Primitive) -> Self {
        let mut p = Self::default();
        p.set_primitive(prim);
        p
    }

    /// True when the block for `ty` is entirely zero.
    pub fn block_is_zero(&self, ty: PrimitiveType) -> bool {
        ty.param_block()
            .map(|r| self.0[r].iter().all(|&x| x == 0.0))
            .unwrap_or(true)
    }
}

/// Which cone distance formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeDistance {
    /// Unsigned perpendicular distance `|‖p−o‖ sin(φ−θ)|`.
    #[default]
    Perpendicular,
    /// `‖p−o‖ cos(φ−θ)` exactly as commonly printed; not zero on the surface.
    Literal,
}

/// A fitted or ground-truth surface.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Plane { normal: Vec3, offset: f64 },
    Sphere { center: Vec3, radius: f64 },
    Cylinder { axis: Vec3, center: Vec3, radius: f64 },
    Cone { apex: Vec3, axis: Vec3, half_angle: f64 },
    BSpline { patch: BSplinePatch },
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveType {
        match self {
            Primitive::Plane { .. } => PrimitiveType::Plane,
            Primitive::Sphere { .. } => PrimitiveType::Sphere,
            Primitive::Cylinder { .. } => PrimitiveType::Cylinder,
            Primitive::Cone { .. } => PrimitiveType::Cone,
            Primitive::BSpline { patch } => {
                if patch.closed_u() {
                    PrimitiveType::BsplineClosed
                } else {
                    PrimitiveType::BsplineOpen
                }
            }
        }
    }

    /// Parameter vector with only this primitive's block filled; `None` for B-splines.
    pub fn params(&self) -> Option<ParamVector> {
        match self {
            Primitive::BSpline { .. } => None,
            p => Some(ParamVector::from_primitive(p)),
        }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.distance_with(p, ConeDistance::Perpendicular)
    }

    /// Point-to-surface distance; B-spline patches use the approximate closest-point search.
    pub fn distance_with(&self, p: &Vec3, cone: ConeDistance) -> f64 {
        match self {
            Primitive::Plane { normal, offset } => (p.dot(normal) - offset).abs(),
            Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Primitive::Cylinder {
                axis,
                center,
                radius,
            } => {
                let v = p - center;
                let radial = v - axis * axis.dot(&v);
                (radial.norm() - radius).abs()
            }
            Primitive::Cone {
                apex,
                axis,
                half_angle,
            } => {
                let v = p - apex;
                let len = v.norm();
                if len == 0.0 {
                    return 0.0;
                }
                let phi = (axis.dot(&v) / len).clamp(-1.0, 1.0).acos();
                match cone {
                    ConeDistance::Perpendicular => (len * (phi - half_angle).sin()).abs(),
                    ConeDistance::Literal => len * (phi - half_angle).cos(),
                }
            }
            Primitive::BSpline { patch } => crate::bspline::closest_distance(patch, p),
        }
    }

    /// Signed residual used by the least-squares fitters (zero on the surface).
    pub fn signed_residual(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Plane { normal, offset } => p.dot(normal) - offset,
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Cylinder {
                axis,
                center,
                radius,
            } => {
                let v = p - center;
                (v - axis * axis.dot(&v)).norm() - radius
            }
            Primitive::Cone {
                apex,
                axis,
                half_angle,
            } => {
                let v = p - apex;
                let len = v.norm();
                if len == 0.0 {
                    return 0.0;
                }
                let phi = (axis.dot(&v) / len).clamp(-1.0, 1.0).acos();
                len * (phi - half_angle).sin()
            }
            Primitive::BSpline { patch } => crate::bspline::closest_distance(patch, p),
        }
    }

    /// Checks the parameter invariants: unit directions, positive radii, cone angle in (0, π/2).
    pub fn validate(&self) -> Result<()> {
        let unit = |v: &Vec3, what: &str| {
            if (v.norm() - 1.0).abs() > 1e-6 {
                Err(Error::InvalidArgument(format!("{what} must be a unit vector")))
            } else {
                Ok(())
            }
        };
        let positive = |r: f64, what: &str| {
            if r > 0.0 && r.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be positive")))
            }
        };
        match self {
            Primitive::Plane { normal, offset } => {
                unit(normal, "plane normal")?;
                if !offset.is_finite() {
                    return Err(Error::InvalidArgument("plane offset must be finite".into()));
                }
                Ok(())
            }
            Primitive::Sphere { radius, .. } => positive(*radius, "sphere radius"),
            Primitive::Cylinder { axis, radius, .. } => {
                unit(axis, "cylinder axis")?;
                positive(*radius, "cylinder radius")
            }
            Primitive::Cone {
                axis, half_angle, ..
            } => {
                unit(axis, "cone axis")?;
                if *half_angle > 0.0 && *half_angle < std::f64::consts::FRAC_PI_2 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("cone half-angle must lie in (0, pi/2)".into()))
                }
            }
            Primitive::BSpline { .. } => Ok(()),
        }
    }

    /// The same surface expressed after mapping space through `t`.
    pub fn transformed(&self, t: &Transform) -> Primitive {
        match self {
            Primitive::Plane { normal, offset } => Primitive::Plane {
                normal: *normal,
                offset: t.scale * (offset + normal.dot(&t.translation)),
            },
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: t.apply(center),
                radius: radius * t.scale,
            },
            Primitive::Cylinder {
                axis,
                center,
                radius,
            } => Primitive::Cylinder {
                axis: *axis,
                center: t.apply(center),
                radius: radius * t.scale,
            },
            Primitive::Cone {
                apex,
                axis,
                half_angle,
            } => Primitive::Cone {
                apex: t.apply(apex),
                axis: *axis,
                half_angle: *half_angle,
            },
            Primitive::BSpline { patch } => Primitive::BSpline {
                patch: patch.map_points(|p| t.apply(p)),
            },
        }
    }

    /// Applies a rigid motion `p ↦ R p + shift`.
    pub fn rigid(&self, rot: &nalgebra::Rotation3<f64>, shift: &Vec3) -> Primitive {
        match self {
            Primitive::Plane { normal, offset } => {
                let n = rot * normal;
                Primitive::Plane {
                    normal: n,
                    offset: offset + n.dot(shift),
                }
            }
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: rot * center + shift,
                radius: *radius,
            },
            Primitive::Cylinder {
                axis,
                center,
                radius,
            } => Primitive::Cylinder {
                axis: rot * axis,
                center: rot * center + shift,
                radius: *radius,
            },
            Primitive::Cone {
                apex,
                axis,
                half_angle,
            } => Primitive::Cone {
                apex: rot * apex + shift,
                axis: rot * axis,
                half_angle: *half_angle,
            },
            Primitive::BSpline { patch } => Primitive::BSpline {
                patch: patch.map_points(|p| rot * p + shift),
            },
        }
    }
}

/// Distance from `p` to the primitive of type `ty` stored in `params`.
/// B-spline types carry no analytic parameters and are rejected here.
pub fn distance_point_primitive(
    p: &Vec3,
    ty: PrimitiveType,
    params: &ParamVector,
    cone: ConeDistance,
) -> Result<f64> {
    let prim = params.primitive(ty).ok_or_else(|| {
        Error::InvalidArgument(format!("{ty} has no analytic parameters; use its B-spline patch"))
    })?;
    Ok(prim.distance_with(p, cone))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, SQRT_2};

    #[test]
    fn codes_are_bijective() {
        for (i, t) in PrimitiveType::ALL.iter().enumerate() {
            assert_eq!(t.code(), i);
            assert_eq!(PrimitiveType::from_code(i), Some(*t));
            assert_eq!(t.name().parse::<PrimitiveType>().unwrap(), *t);
        }
        assert_eq!(PrimitiveType::from_code(6), None);
    }

    #[test]
    fn block_layout_covers_all_slots() {
        let mut seen = [false; PARAM_LEN];
        for t in PrimitiveType::ANALYTIC {
            for s in t.param_block().unwrap() {
                assert!(!seen[s]);
                seen[s] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn worked_distances() {
        let c = ConeDistance::Perpendicular;
        let plane = Primitive::Plane {
            normal: Vec3::z(),
            offset: 1.0,
        };
        assert_eq!(plane.distance(&Vec3::new(0.0, 0.0, 2.0)), 1.0);
        let sphere = Primitive::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
        };
        assert_eq!(sphere.distance(&Vec3::new(3.0, 0.0, 0.0)), 2.0);
        let cyl = Primitive::Cylinder {
            axis: Vec3::z(),
            center: Vec3::zeros(),
            radius: 1.0,
        };
        assert_eq!(cyl.distance(&Vec3::new(2.0, 0.0, 5.0)), 1.0);
        let cone = Primitive::Cone {
            apex: Vec3::zeros(),
            axis: Vec3::z(),
            half_angle: FRAC_PI_4,
        };
        let p = Vec3::new(1.0, 0.0, 1.0);
        assert!(cone.distance_with(&p, c) < 1e-15);
        assert!((cone.distance_with(&p, ConeDistance::Literal) - SQRT_2).abs() < 1e-12);
        assert_eq!(cone.distance(&Vec3::zeros()), 0.0);
    }

    #[test]
    fn param_vector_round_trip() {
        let cone = Primitive::Cone {
            apex: Vec3::new(1.0, 2.0, 3.0),
            axis: Vec3::y(),
            half_angle: 0.3,
        };
        let pv = ParamVector::from_primitive(&cone);
        assert_eq!(pv.primitive(PrimitiveType::Cone).unwrap(), cone);
        assert!(pv.block_is_zero(PrimitiveType::Plane));
        let d = distance_point_primitive(&Vec3::zeros(), PrimitiveType::Cone, &pv, ConeDistance::Perpendicular)
            .unwrap();
        assert!(d > 0.0);
        assert!(distance_point_primitive(&Vec3::zeros(), PrimitiveType::BsplineOpen, &pv, ConeDistance::Perpendicular)
            .is_err());
    }

    #[test]
    fn transform_keeps_on_surface_points() {
        let t = Transform {
            translation: Vec3::new(0.3, -1.0, 2.0),
            scale: 0.25,
        };
        let prims = [
            (
                Primitive::Plane {
                    normal: Vec3::new(0.0, 0.6, 0.8),
                    offset: 2.0,
                },
                Vec3::new(5.0, 0.0, 2.5),
            ),
            (
                Primitive::Cylinder {
                    axis: Vec3::x(),
                    center: Vec3::new(0.0, 1.0, 1.0),
                    radius: 2.0,
                },
                Vec3::new(7.0, 3.0, 1.0),
            ),
        ];
        for (prim, on) in prims {
            assert!(prim.distance(&on) < 1e-12);
            let moved = prim.transformed(&t);
            assert!(moved.distance(&t.apply(&on)) < 1e-12);
        }
    }

    #[test]
    fn validate_rejects_bad_parameters() {
        assert!(Primitive::Sphere {
            center: Vec3::zeros(),
            radius: -1.0
        }
        .validate()
        .is_err());
        assert!(Primitive::Cone {
            apex: Vec3::zeros(),
            axis: Vec3::z(),
            half_angle: 2.0
        }
        .validate()
        .is_err());
        assert!(Primitive::Plane {
            normal: Vec3::new(0.0, 0.0, 2.0),
            offset: 0.0
        }
        .validate()
        .is_err());
    }
}
