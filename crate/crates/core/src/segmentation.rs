//! Segmentation results and their JSON form.

use serde::{Deserialize, Serialize};

use crate::bspline::BSplinePatch;
use crate::error::{Error, Result};
use crate::geometry::{ParamVector, Primitive, PrimitiveType, PARAM_LEN};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: PrimitiveType,
    /// Fitted surface; `None` when the segment could not be fitted.
    pub primitive: Option<Primitive>,
    pub size: usize,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Segmentation {
    pub fn new(labels: Vec<usize>, segments: Vec<Segment>) -> Result<Self> {
        let s = Self { labels, segments };
        s.validate()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.segments.len();
        let mut counts = vec![0usize; k];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidArgument(format!("point {i} has label {l} but there are {k} segments")));
            }
            counts[l] += 1;
        }
        for (id, (seg, c)) in self.segments.iter().zip(&counts).enumerate() {
            if seg.size != *c {
                return Err(Error::InvalidArgument(format!("segment {id} declares size {} but has {c} points", seg.size)));
            }
            if let Some(p) = &seg.primitive {
                if p.kind() != seg.kind {
                    return Err(Error::InvalidArgument(format!("segment {id} is {} but its surface is {}", seg.kind, p.kind())));
                }
            }
        }
        Ok(())
    }

    /// Point indices of every segment.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.segments.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }

    pub fn to_json(&self) -> SegmentationJson {
        SegmentationJson {
            n: self.labels.len(),
            labels: self.labels.clone(),
            segments: self
                .segments
                .iter()
                .enumerate()
                .map(|(id, s)| SegmentJson {
                    id,
                    kind: s.kind,
                    params: s.primitive.as_ref().and_then(|p| p.params()).map(|p| p.0.to_vec()),
                    patch: match &s.primitive {
                        Some(Primitive::BSpline { patch }) => Some(patch.clone()),
                        _ => None,
                    },
                    size: s.size,
                    rms_residual: s.rms_residual,
                })
                .collect(),
        }
    }

    pub fn from_json(j: SegmentationJson) -> Result<Self> {
        if j.labels.len() != j.n {
            return Err(Error::LengthMismatch {
                expected: j.n,
                found: j.labels.len(),
            });
        }
        let mut segments = Vec::with_capacity(j.segments.len());
        for (pos, s) in j.segments.into_iter().enumerate() {
            if s.id != pos {
                return Err(Error::InvalidArgument(format!("segment ids must be contiguous from 0; found {} at position {pos}", s.id)));
            }
            let primitive = match (s.kind.is_bspline(), s.params, s.patch) {
                (true, _, Some(patch)) => Some(Primitive::BSpline { patch }),
                (false, Some(p), _) => {
                    if p.len() != PARAM_LEN {
                        return Err(Error::InvalidArgument(format!("segment {pos}: params need {PARAM_LEN} values")));
                    }
                    let pv = ParamVector::from_slice(&p)?;
                    let prim = pv.primitive(s.kind).expect("analytic type");
                    prim.validate()?;
                    Some(prim)
                }
                _ => None,
            };
            segments.push(Segment {
                kind: s.kind,
                primitive,
                size: s.size,
                rms_residual: s.rms_residual,
            });
        }
        Segmentation::new(j.labels, segments)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentJson {
    pub id: usize,
    #[serde(rename = "type")]
    pub kind: PrimitiveType,
    pub params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<BSplinePatch>,
    pub size: usize,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationJson {
    pub n: usize,
    pub labels: Vec<usize>,
    pub segments: Vec<SegmentJson>,
}

/// Parses segmentation JSON text.
pub fn parse_segmentation(text: &str) -> Result<Segmentation> {
    let j: SegmentationJson = serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    Segmentation::from_json(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn sample() -> Segmentation {
        Segmentation::new(
            vec![0, 1, 1, 0],
            vec![
                Segment {
                    kind: PrimitiveType::Plane,
                    primitive: Some(Primitive::Plane {
                        normal: Vec3::z(),
                        offset: 0.5,
                    }),
                    size: 2,
                    rms_residual: 0.0,
                },
                Segment {
                    kind: PrimitiveType::Sphere,
                    primitive: None,
                    size: 2,
                    rms_residual: 0.1,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let s = sample();
        let text = serde_json::to_string(&s.to_json()).unwrap();
        assert!(text.contains("\"type\":\"plane\""));
        assert_eq!(parse_segmentation(&text).unwrap(), s);
    }

    #[test]
    fn rejects_inconsistent_input() {
        let mut j = sample().to_json();
        j.segments[0].size = 3;
        assert!(Segmentation::from_json(j).is_err());
        let mut j = sample().to_json();
        j.segments[1].id = 5;
        assert!(Segmentation::from_json(j).is_err());
        let mut j = sample().to_json();
        j.n = 7;
        assert!(Segmentation::from_json(j).is_err());
        assert!(parse_segmentation("{\"n\":0,\"labels\":[],\"segments\":[],\"extra\":1}").is_err());
    }
}
