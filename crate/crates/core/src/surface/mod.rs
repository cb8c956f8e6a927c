//! Icosphere geometry, patch partitions and per-vertex surface data.

mod dataset;
mod icosphere;
mod partition;
mod ply;

pub use dataset::{
    compute_stats, load_dataset, manifest_path, normalize_sample, patchify, read_manifest,
    read_sample, save_sample, write_manifest, ChannelStats, Dataset, DatasetManifest, Split,
    SubjectEntry, SurfaceSample,
};
pub use icosphere::{build_icosphere, IcosphereMesh, MAX_ORDER};
pub use partition::{build_partition, PatchPartition};
pub use ply::{ply_string, write_ply, HEMISPHERE_SPACING};
