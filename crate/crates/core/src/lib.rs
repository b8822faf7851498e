//! Slide-level prototypical distillation over region embeddings.
//!
//! Slides are bags of region feature vectors. Each epoch the regions of
//! every slide are clustered into prototypes, slides are compared through an
//! optimal one-to-one matching of their prototypes, and a student network is
//! trained against an EMA teacher with three cross-entropy objectives: the
//! usual two-view self-distillation, distillation towards the region's own
//! prototype, and distillation towards the matched prototypes of the most
//! similar slides.

pub mod clustering;
pub mod distill;
pub mod eval;
pub mod hungarian;
pub mod store;
pub mod structure;
pub mod trainer;
mod vector;

pub use clustering::{
    global_cluster, kmeans, slide_level_cluster, KMeansConfig, PrototypeSet, SlideClustering,
};
pub use distill::{DistillConfig, DistillState, LossWeights, ModelConfig, PrototypeHead};
pub use eval::{auc, cross_validated_eval, knn_classify, mean_pool, EvalConfig, EvalReport};
pub use store::{
    generate_synthetic, load_dataset, write_dataset, Slide, SlideDataset, SyntheticConfig,
};
pub use structure::{
    optimal_match, similarity_matrix, top_k_neighbors, MatchResult, SlideSimilarityMatrix,
};
pub use trainer::{
    build_epoch_artifacts, train, EpochArtifacts, EpochRecord, TrainConfig, TrainOutput,
};
