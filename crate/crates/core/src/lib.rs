//! Category- and instance-aware pixel embeddings (CIAE) for panoptic
//! segmentation, exercised end-to-end on deterministic synthetic scenes.
//!
//! Every pixel carries a unit embedding vector that encodes both its
//! semantic category and its instance identity. The pipeline stages are:
//!
//! 1. **scene** – synthetic panoptic ground truth: stuff bands plus
//!    occluding thing instances, with a lossless file format.
//! 2. **embedding** – the optimizable H x W x D parameter raster, its
//!    normalized view, and mean segment embeddings.
//! 3. **memory** – per-category query vectors updated with a cubic
//!    momentum ramp.
//! 4. **loss** – margin triplet objective against category and instance
//!    queries, with hard-term selection, box filtering, and exact
//!    gradients.
//! 5. **trainer** – heavy-ball SGD on the raster plus the memory loop.
//! 6. **fusion** – simulated detections, query assembly, and panoptic
//!    assignment by one similarity matrix product.
//! 7. **pq** – panoptic quality and mIoU evaluation.
//!
//! [`linalg`] supplies the dense matrix kernels and the power-iteration
//! PCA used for visualization ([`viz`]); [`checkpoint`] persists trained
//! state.

pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod loss;
pub mod memory;
pub mod pgm;
pub mod pq;
pub mod scene;
pub mod trainer;
pub mod viz;

pub use embedding::{cosine_distance, mean_segment_embeddings, EmbeddingMap, NormalizedView};
pub use error::{Error, Result};
pub use fusion::{
    assign, build_queries, classify_instances_from_embedding, default_min_stuff_area,
    simulate_proposals, InstanceProposal, OobScore, PanopticPrediction, ProposalSimConfig,
    QueryKind, QueryMeta, QuerySet,
};
pub use linalg::{l2_normalize, matmul, pca_project, DenseMatrix, EPS_NORM};
pub use loss::{
    cae_loss, ciae_loss, embedding_loss, iae_loss, triplet_term, CiaeLoss, LossConfig,
    LossValueAndGrad, TopKScope,
};
pub use memory::{momentum, momentum_with_base, MemoryBank};
pub use pq::{compute_miou, compute_pq, evaluate, match_segments, PQReport};
pub use scene::{
    generate_scene, scene_from_files, scene_to_files, BBox, LabelSpace, PanopticScene,
    SceneGenConfig, SegmentRecord, ThingShape, VOID_ID,
};
pub use trainer::{train, TrainConfig, TrainLog, TrainRecord};
