//! End-to-end segmentation: attributes, spectral embeddings, weighted
//! fusion, mean shift, per-segment typing and refitting.

use log::{debug, info};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{assemble_feature_space, compute_weights, mean_shift, median_pairwise_distance, ClusterResult, Feature, FeatureBundle, FeatureRole, WeightVector};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::estimation::{estimate_normals, estimate_point_attributes, PointAttributes, BSPLINE_RMS_THRESHOLD};
use crate::fitting::refit_segment_primitive;
use crate::losses::embedding_loss;
use crate::tuning::HyperParams;
use crate::geometry::{farthest_point_subsample, knn_graph, normalize_cloud, KdTree, NeighborGraph, ParamVector, PointCloud, PrimitiveType, Transform};
use crate::segmentation::{Segment, Segmentation};
use crate::spectral::{adaptive_embedding, build_consistency_matrix, build_smoothness_matrix, SpectralEmbedding};

/// How each feature is scaled before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    /// Divide every feature by its root-mean-square centred row norm.
    #[default]
    Rms,
    /// Use features as produced.
    Raw,
}

/// The hyperparameter-independent part of a run, on the working subsample.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Maps input coordinates to the unit-diameter working frame.
    pub transform: Transform,
    /// Input indices of the working points.
    pub sample: Vec<usize>,
    /// Normalized working cloud, always with normals.
    pub cloud: PointCloud,
    /// Smoothness graph on the working cloud.
    pub graph: NeighborGraph,
    pub attrs: Vec<PointAttributes>,
}

/// Expresses attribute parameters given in input coordinates in the working frame.
pub fn transform_attributes(attrs: &[PointAttributes], t: &Transform) -> Vec<PointAttributes> {
    attrs
        .iter()
        .map(|a| {
            let mut params = ParamVector::default();
            for ty in PrimitiveType::ANALYTIC {
                if a.params.block_is_zero(ty) {
                    continue;
                }
                if let Some(p) = a.params.primitive(ty) {
                    params.set_primitive(&p.transformed(t));
                }
            }
            PointAttributes { params, ..a.clone() }
        })
        .collect()
}

/// Normalizes, subsamples above the dense cap, fills in normals and
/// per-point attributes.
pub fn prepare(cloud: &PointCloud, attrs: Option<&[PointAttributes]>, cfg: &Config) -> Result<Prepared> {
    if let Some(a) = attrs {
        if a.len() != cloud.len() {
            return Err(Error::LengthMismatch {
                expected: cloud.len(),
                found: a.len(),
            }
            .in_stage("input"));
        }
    }
    let (normalized, transform) = normalize_cloud(cloud).map_err(|e| e.in_stage("normalize"))?;
    let sample = if cloud.len() > cfg.dense_cap {
        info!("subsampling {} points to {}", cloud.len(), cfg.dense_cap);
        let mut s = farthest_point_subsample(normalized.positions(), cfg.dense_cap);
        s.sort_unstable();
        s
    } else {
        (0..cloud.len()).collect()
    };
    let mut work = normalized.select(&sample);
    let n = work.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n }.in_stage("normalize"));
    }
    if !work.has_normals() {
        let g = knn_graph(&work, cfg.k_normals.min(n - 1)).map_err(|e| e.in_stage("normals"))?;
        let normals = estimate_normals(&work, &g, cfg.k_normals.min(n - 1));
        work = work.with_normals(normals).map_err(|e| e.in_stage("normals"))?;
    }
    let graph = knn_graph(&work, cfg.k.min(n - 1)).map_err(|e| e.in_stage("graph"))?;
    let attrs = match attrs {
        Some(a) => {
            let picked: Vec<PointAttributes> = sample.iter().map(|&i| a[i].clone()).collect();
            transform_attributes(&picked, &transform)
        }
        None => {
            let k_fit = cfg.k_fit.min(n - 1);
            let g = if k_fit == graph.k() {
                graph.clone()
            } else {
                knn_graph(&work, k_fit).map_err(|e| e.in_stage("attributes"))?
            };
            estimate_point_attributes(&work, &g, k_fit, cfg.temperature)
        }
    };
    Ok(Prepared {
        transform,
        sample,
        cloud: work,
        graph,
        attrs,
    })
}

/// Fused features of a prepared cloud.
#[derive(Debug, Clone)]
pub struct Features {
    pub bundle: FeatureBundle,
    pub weights: WeightVector,
    /// Weighted concatenation, one row per working point.
    pub x: DMatrix<f64>,
    pub consistency: SpectralEmbedding,
    pub smoothness: SpectralEmbedding,
}

fn scaled(m: DMatrix<f64>, scaling: FeatureScaling) -> DMatrix<f64> {
    match scaling {
        FeatureScaling::Raw => m,
        FeatureScaling::Rms => {
            let n = m.nrows() as f64;
            let mean = m.row_mean();
            let mut ss = 0.0;
            for r in m.row_iter() {
                ss += (r - &mean).norm_squared();
            }
            let rms = (ss / n).sqrt();
            if rms > 1e-12 {
                m / rms
            } else {
                m
            }
        }
    }
}

fn semantic_matrix(attrs: &[PointAttributes]) -> DMatrix<f64> {
    let m = attrs[0].descriptor.len();
    DMatrix::from_fn(attrs.len(), m, |i, c| attrs[i].descriptor[c])
}

/// Builds both adjacency matrices, their embeddings and the entropy-weighted
/// feature space.
pub fn build_features(prep: &Prepared, cfg: &Config) -> Result<Features> {
    let hp = &cfg.hyper;
    let a_c = build_consistency_matrix(&prep.cloud, &prep.attrs, &hp.sigma_per_type, cfg.dense_cap, cfg.cone_distance)
        .map_err(|e| e.in_stage("consistency"))?;
    let consistency = adaptive_embedding(&a_c, hp.d_min, hp.d_max, cfg.solver, cfg.seed, cfg.embedding_scale)
        .map_err(|e| e.in_stage("consistency"))?;
    drop(a_c);
    let a_s = build_smoothness_matrix(&prep.cloud, &prep.graph, hp.sigma_e).map_err(|e| e.in_stage("smoothness"))?;
    let smoothness = adaptive_embedding(&a_s, hp.d_min, hp.d_max, cfg.solver, cfg.seed.wrapping_add(1), cfg.embedding_scale)
        .map_err(|e| e.in_stage("smoothness"))?;
    debug!("embedding dims: consistency {}, smoothness {}", consistency.dim(), smoothness.dim());

    let mut features = vec![Feature {
        role: FeatureRole::Semantic,
        matrix: scaled(semantic_matrix(&prep.attrs), cfg.feature_scaling),
        sigma: hp.sigma_semantic,
    }];
    for (emb, role, sigma) in [
        (&consistency, FeatureRole::ConsistencyColumn, hp.sigma_consistency),
        (&smoothness, FeatureRole::SmoothnessColumn, hp.sigma_smoothness),
    ] {
        for col in emb.features.column_iter() {
            features.push(Feature {
                role,
                matrix: scaled(DMatrix::from_column_slice(col.len(), 1, col.as_slice()), cfg.feature_scaling),
                sigma,
            });
        }
    }
    let bundle = FeatureBundle::new(features).map_err(|e| e.in_stage("weighting"))?;
    let weights = compute_weights(&bundle, cfg.max_weight / bundle.n() as f64);
    let x = assemble_feature_space(&bundle, &weights).map_err(|e| e.in_stage("weighting"))?;
    Ok(Features {
        bundle,
        weights,
        x,
        consistency,
        smoothness,
    })
}

/// Mean shift on the fused features.
pub fn cluster(features: &Features, cfg: &Config) -> Result<(ClusterResult, f64)> {
    let h = match cfg.hyper.bandwidth {
        Some(h) => h,
        None => cfg.hyper.bandwidth_factor * median_pairwise_distance(&features.x),
    };
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("feature space collapsed to a point; bandwidth is zero".into()).in_stage("clustering"));
    }
    let res = mean_shift(&features.x, h, &cfg.mean_shift).map_err(|e| e.in_stage("clustering"))?;
    Ok((res, h))
}

/// Type votes of a segment, most votes first, ties to the lower code.
fn vote_order(attrs: &[PointAttributes], members: &[usize]) -> Vec<PrimitiveType> {
    let mut votes = [0usize; 6];
    for &i in members {
        votes[attrs[i].argmax_type().code()] += 1;
    }
    let mut order: Vec<PrimitiveType> = PrimitiveType::ALL.to_vec();
    order.sort_by(|a, b| votes[b.code()].cmp(&votes[a.code()]).then(a.code().cmp(&b.code())));
    order.retain(|t| votes[t.code()] > 0);
    order
}

/// Propagates working labels to every input point and fits each segment.
pub fn finish(cloud: &PointCloud, prep: &Prepared, labels: &[usize]) -> Result<Segmentation> {
    let full_labels: Vec<usize> = if prep.sample.len() == cloud.len() {
        labels.to_vec()
    } else {
        let work_pos: Vec<_> = prep.sample.iter().map(|&i| prep.transform.apply(&cloud.position(i))).collect();
        let tree = KdTree::new(&work_pos);
        cloud
            .positions()
            .iter()
            .map(|p| labels[tree.nearest(&prep.transform.apply(p)).expect("non-empty tree")])
            .collect()
    };
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut full_members = vec![Vec::new(); k];
    for (i, &l) in full_labels.iter().enumerate() {
        full_members[l].push(i);
    }
    let mut work_members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        work_members[l].push(i);
    }
    let mut segments = Vec::with_capacity(k);
    for (wm, fm) in work_members.iter().zip(&full_members) {
        let mut order = vote_order(&prep.attrs, wm);
        if !order.contains(&PrimitiveType::BsplineOpen) {
            order.push(PrimitiveType::BsplineOpen);
        }
        let mut seg = None;
        for ty in order.iter().copied() {
            match refit_segment_primitive(cloud, fm, ty) {
                Ok(fit) => {
                    seg = Some(Segment {
                        kind: ty,
                        primitive: Some(fit.primitive),
                        size: fm.len(),
                        rms_residual: fit.rms_residual,
                    });
                    break;
                }
                Err(e) => debug!("refit as {ty} failed: {e}"),
            }
        }
        segments.push(seg.unwrap_or(Segment {
            kind: order[0],
            primitive: None,
            size: fm.len(),
            rms_residual: 0.0,
        }));
    }
    Segmentation::new(full_labels, segments).map_err(|e| e.in_stage("fitting"))
}

/// Post-clustering merge of adjacent segments that one primitive explains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeOptions {
    pub enabled: bool,
    /// Merge when the union's best analytic rms is at most this multiple of
    /// the worse part's rms.
    pub ratio: f64,
    /// Rms (working frame, unit diameter) below which a union always counts
    /// as one primitive.
    pub floor: f64,
    /// Smoothness-graph edges needed between two segments to call them adjacent.
    pub min_edges: usize,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            ratio: 1.5,
            floor: 1e-3,
            min_edges: 10,
        }
    }
}

/// Lowest rms over the analytic types, or `None` if every fit failed.
fn best_analytic_rms(cloud: &PointCloud, members: &[usize]) -> Option<f64> {
    PrimitiveType::ANALYTIC
        .iter()
        .filter_map(|&ty| refit_segment_primitive(cloud, members, ty).ok())
        .map(|f| f.rms_residual)
        .filter(|r| r.is_finite())
        .min_by(f64::total_cmp)
}

/// Greedily merges the adjacent pair whose union fits best, relative to its
/// parts, until no pair passes `opts`. Only parts that are themselves fit
/// well by an analytic primitive are considered. Returns compact labels.
pub fn merge_segments(prep: &Prepared, labels: &[usize], opts: &MergeOptions) -> Vec<usize> {
    let mut labels = labels.to_vec();
    if !opts.enabled {
        return labels;
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut rms: Vec<Option<f64>> = members.iter().map(|m| best_analytic_rms(&prep.cloud, m)).collect();
    let mut union_cache: std::collections::HashMap<(usize, usize), Option<f64>> = Default::default();
    loop {
        let mut edges: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
        for i in 0..labels.len() {
            for &j in prep.graph.neighbors(i) {
                let (a, b) = (labels[i], labels[j]);
                if a != b {
                    *edges.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (&(a, b), &count) in &edges {
            if count < opts.min_edges {
                continue;
            }
            let (Some(ra), Some(rb)) = (rms[a], rms[b]) else { continue };
            let worse = ra.max(rb);
            if worse > BSPLINE_RMS_THRESHOLD {
                continue;
            }
            let union = *union_cache.entry((a, b)).or_insert_with(|| {
                let mut m = members[a].clone();
                m.extend_from_slice(&members[b]);
                best_analytic_rms(&prep.cloud, &m)
            });
            let Some(ru) = union else { continue };
            if ru > opts.floor.max(opts.ratio * worse) {
                continue;
            }
            let score = ru / worse.max(opts.floor);
            if best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, a, b));
            }
        }
        let Some((_, a, b)) = best else { break };
        debug!("merging segments {a} and {b}");
        let moved = std::mem::take(&mut members[b]);
        for &i in &moved {
            labels[i] = a;
        }
        members[a].extend(moved);
        rms[a] = union_cache.get(&(a, b)).copied().flatten();
        rms[b] = None;
        union_cache.retain(|&(x, y), _| x != a && y != a && x != b && y != b);
    }
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for l in labels.iter_mut() {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
        *l = remap[*l];
    }
    labels
}

/// Everything a run produces, for diagnostics and tuning.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub segmentation: Segmentation,
    pub prepared: Prepared,
    pub features: Features,
    pub clusters: ClusterResult,
    pub bandwidth: f64,
}

pub fn run_pipeline(cloud: &PointCloud, attrs: Option<&[PointAttributes]>, cfg: &Config) -> Result<PipelineOutput> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let prepared = prepare(cloud, attrs, cfg)?;
    let features = build_features(&prepared, cfg)?;
    let (clusters, bandwidth) = cluster(&features, cfg)?;
    let labels = merge_segments(&prepared, &clusters.labels, &cfg.merge);
    let segmentation = finish(cloud, &prepared, &labels)?;
    Ok(PipelineOutput {
        segmentation,
        prepared,
        features,
        clusters,
        bandwidth,
    })
}

/// Segments `cloud`, estimating attributes when none are given.
pub fn segment(cloud: &PointCloud, attrs: Option<&[PointAttributes]>, cfg: &Config) -> Result<Segmentation> {
    run_pipeline(cloud, attrs, cfg).map(|o| o.segmentation)
}

/// A prepared scene with ground-truth labels on its working points.
#[derive(Debug, Clone)]
pub struct ValidationScene {
    pub prepared: Prepared,
    pub labels: Vec<usize>,
}

impl ValidationScene {
    /// `labels` are given for every input point; only the working sample is kept.
    pub fn new(prepared: Prepared, labels: &[usize]) -> Self {
        let labels = prepared.sample.iter().map(|&i| labels[i]).collect();
        Self { prepared, labels }
    }
}

/// Mean embedding loss of the fused features against ground truth, as a
/// function of the hyperparameters. Failures to build features count as
/// rejected trials rather than aborting a tuning run.
pub fn validation_objective<'a>(scenes: &'a [ValidationScene], base: &'a Config) -> impl Fn(&HyperParams) -> Result<f64> + Sync + 'a {
    move |hp: &HyperParams| {
        let cfg = Config {
            hyper: hp.clone(),
            ..base.clone()
        };
        let mut total = 0.0;
        for s in scenes {
            let f = build_features(&s.prepared, &cfg).map_err(|e| Error::Objective(e.to_string()))?;
            let (loss, _) = embedding_loss(&f.x, &s.labels, &cfg.loss)?;
            total += loss;
        }
        Ok(total / scenes.len().max(1) as f64)
    }
}
