//! Iterated function systems and fractal pair synthesis.
//!
//! An [`IfsCode`] is a small set of probabilistic 2×2 affine maps. Iterating
//! it traces a point cloud that [`render`] rasterises. [`compose_fps_pair`]
//! paints several codes twice, independently, to form a positive pair for
//! similarity learning, and [`generate_archive`] streams pairs to an `FPSA`
//! file.

mod archive;
mod code;
mod image;
mod pair;
mod render;

pub use archive::{
    generate_archive, record_size, ArchiveHeader, ArchiveReader, ArchiveSummary, ARCHIVE_HEADER_LEN, ARCHIVE_MAGIC,
    ARCHIVE_VERSION,
};
pub use code::{
    iterate_from, iterate_ifs, sample_ifs_code, singular_values, AffineMap, CodePool, IfsCode, SamplingConfig, BURN_IN,
    DIVERGENCE_LIMIT,
};
pub use image::{hue_to_rgb, RgbImage};
pub use pair::{compose_fps_pair, Augmentation, CodesPerImage, FpsPair, FpsParams, Placement};
pub use render::{render, render_weighted, GrayCanvas};
