//! SDF shape prior: conditional decoder and sparse-conv encoder, sign
//! regression training, LIDAR-side constraints (ray augmentation, ground
//! removal, symmetry), embedding pooling, marching-cubes extraction, and
//! mesh export.

mod decoder;
mod encoder;
mod fit;
mod marching;
mod mc_tables;
mod mesh;
mod queries;

pub use decoder::{DecoderConfig, DecoderTape, SdfDecoder};
pub use encoder::{EncoderConfig, EncoderTape, ShapeEncoder};
pub use fit::{
    extract_mesh, fit_shape, prior_loss, reconstruct_shape, train_prior, FitConfig,
    FitConstraints, PriorTrainConfig, ReconstructionReport,
};
pub use marching::{marching_cubes, marching_cubes_grid, sample_field_grid};
pub use mesh::{chamfer_distance, write_obj, write_ply, TriangleMesh};
pub use queries::{
    pool_embeddings, pool_embeddings_backward, preprocess_observed, queries_to_tensors,
    ray_augment, sample_prior_queries, surface_queries, SdfQuery,
};

#[cfg(test)]
mod tests;
