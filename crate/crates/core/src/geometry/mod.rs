//! Point-cloud containers, neighborhoods, and point-to-primitive distances.

mod cloud;
mod knn;
mod primitive;

pub use cloud::{
    centroid, farthest_pair_distance, farthest_point_subsample, normalize_cloud, PointCloud, Transform, Vec3,
    EXACT_DIAMETER_LIMIT,
};
pub use knn::{knn_graph, KdTree, NeighborGraph};
pub use primitive::{distance_point_primitive, ConeDistance, ParamVector, Primitive, PrimitiveType, PARAM_LEN};
