//! Geometric and numerical core of a Mask R-CNN style rooftop detector for
//! aerial imagery.
//!
//! The crate covers the parts of the pipeline that need no learned weights:
//! grid tiling of large orthophotos, anchor generation and box regression,
//! proposal filtering with NMS, RoIAlign, mask pasting, and the instance-level
//! evaluation (IoU >= 0.5 matching, precision / recall / F1). The backbone,
//! RPN scorer and head are traits; [`toy`] provides weight-free stand-ins and
//! [`synth`] oracle fixtures for end-to-end checks.
//!
//! ```
//! use rooftop::{iou_box, BBox};
//!
//! let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
//! let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
//! assert!((iou_box(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
//! ```

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heads;
pub mod image;
pub mod io;
pub mod mask;
pub mod overlay;
pub mod proposal;
pub mod roialign;
pub mod synth;
pub mod tiling;
pub mod toy;

pub use error::{Error, Result};
pub use evaluation::{
    aggregate, instances_from_mask, mask_iou, match_detections, pixel_confusion, precision_recall_f1, Counts,
    EvalReport, GroundTruthInstance, IouKind, MatchResult,
};
pub use geometry::{clip_box, iou_box, BBox, Detection, Label};
pub use heads::{paste_mask, run_patch_pipeline, softmax, Backbone, Head, HeadOutputs, PipelineConfig, RpnScorer};
pub use image::ImagePatch;
pub use mask::{rle_decode, rle_encode, BinaryMask, InstanceMask, RleMask};
pub use overlay::render_overlay;
pub use proposal::{
    decode_deltas, encode_deltas, filter_proposals, generate_anchors, nms, AnchorSpec, BoxDelta, ProposalConfig,
};
pub use roialign::{bilinear_sample, roi_align, FeatureMap, RoiAlignConfig};
pub use tiling::{extract_tile, make_grid, split_dataset, stitch, tile_to_global, Tile, TileGrid};
