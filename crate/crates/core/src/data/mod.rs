//! Images, cell centres, patch extraction and synthetic data.

mod image;
mod panel;
mod patches;
mod records;
mod synth;

pub use image::{load_images, MultichannelImage, SegmentationMask};
pub use panel::MarkerPanel;
pub use patches::{cut_patch, extract_all, extract_patches, percentile_normalizer, Extraction, PatchDataset, SkippedCell};
pub use records::{read_centers, read_jsonl, write_centers, write_jsonl, CellRecord};
pub use synth::{default_types, mask_path, t_cell_variant_types, synth_generate, SynthConfig, SynthDataset, SynthType};
