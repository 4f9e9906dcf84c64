//! Datasets: PPM/PGM files, HPatches-style scene directories, the
//! benchmark modifications and the synthetic generator.

mod assign;
mod modify;
mod pnm;
mod sequence;
mod synth;

pub use assign::{gt_coarse_assignment, gt_targets, CellTarget};
pub use modify::{
    apply_corner_warps, canonical_hw, center_rotation, corner_warp, frame_corners, make_rotated, make_warped,
    resize_canonical, sample_corner_offsets, ModSpec,
};
pub use pnm::{decode_pnm, encode_ppm, quantize, read_pnm, write_ppm};
pub use sequence::{
    format_homography, image_hw, load_dataset, load_sequence, read_homography, read_manifest, save_dataset,
    DatasetManifest, Modification, SceneEntry, Sequence, MANIFEST, VIEWS,
};
pub use synth::{gt_psnr, random_view, scene_seed, splitmix64, synth_dataset, synth_sequence, SynthParams, SynthScene, Texture};
