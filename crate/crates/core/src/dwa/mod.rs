//! Guidance models, inverse-distance aggregation weights, top-K sparsification and
//! personalized aggregation, plus a reference solver for the full weight problem.

mod guidance;
mod oracle;
mod weights;

pub use guidance::{guidance_model, AdaptBatch, Guidance, GuidanceConfig, GuidanceMode};
pub use oracle::{
    cross_distance_matrix, decompose_distance, oracle_solve_full, project_simplex,
    CrossDistanceMatrix, OracleSolution,
};
pub use weights::{
    aggregate_personalized, compute_weights, top_k, weights_from_sq_dists, WeightMatrix,
    DISTANCE_EPSILON, ROW_SUM_TOLERANCE,
};
