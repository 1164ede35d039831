//! Anchor-free, center-point object detection for large aerial images.
//!
//! The crate covers the whole detection path on the CPU: a small tensor
//! engine, the asymmetric-convolution backbone with pyramid attention
//! fusion, heatmap target encoding and peak decoding, the training losses,
//! tiled inference with NMS merging, 11-point mAP evaluation, and a
//! synthetic scene generator that closes the loop without real imagery.
//!
//! ```
//! use centerfpa::{encode_targets, extract_peaks, decode_boxes, BBox};
//!
//! let gt = BBox::ground_truth(80.0, 70.0, 120.0, 90.0, 3)?;
//! let t = encode_targets(&[gt], 256, 256, 5, 4)?;
//! let peaks = extract_peaks(&t.heatmap, 1)?;
//! let decoded = decode_boxes(&peaks, &t.wh, &t.offset, 4)?;
//! assert_eq!(decoded.boxes, vec![gt]);
//! # Ok::<(), centerfpa::Error>(())
//! ```

pub mod blocks;
pub mod cli;
pub mod codec;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use blocks::{model_forward, Architecture, ModelParams};
pub use codec::{decode_boxes, encode_targets, extract_peaks, BBox, HeadMaps, Peak, Targets};
pub use config::ModelConfig;
pub use container::Container;
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use pipeline::{infer_large_image, multiscale_infer, nms, split_tiles, DetectionSet, HeadPredictor};
pub use rng::SplitMix64;
pub use tensor::Tensor;

/// Guide chapters compiled as doctests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/targets.md")]
    mod targets {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/tiling.md")]
    mod tiling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
}
