//! Dataset records, the on-disk loader, augmentation and the synthetic
//! thin-lens generator.

pub mod augment;
pub mod loader;
pub mod record;
pub mod synth;

pub use augment::{apply_plan, augment, flip_vertical, resize_record, AugmentConfig, AugmentPlan};
pub use loader::{
    list_images, load_dataset, read_depth, read_manifest, read_mask, read_rgb, write_depth,
    write_gray, write_manifest, write_rgb, LoadOptions, ManifestRow, MaskPolarity, DEPTH_DIR,
    IMAGE_DIR, MASK_DIR,
};
pub use record::{normalize_image, Batch, SampleMeta, SampleRecord, IMAGE_MEAN, IMAGE_STD};
pub use synth::{
    parse_regime, random_layout, synth_dataset, synth_sample, synth_scene, DepthProfile, Layer,
    LayoutSpec, LensParams, Region, SceneStyle, SynthConfig, Texture, MANIFEST_NAME,
};
