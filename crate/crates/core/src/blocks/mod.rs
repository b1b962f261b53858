//! Encoder stage blocks: the Fused-MBConv convolution block and the
//! efficient transformer block, plus the dense attention they are checked
//! against.

mod attention;
mod mbconv;
mod transformer;

pub use attention::{attention, attention_with_weights, naive_attention, ATTENTION_SCORES_TAG};
pub use mbconv::{ConvVariant, FusedMbConv, SqueezeExcite};
pub use transformer::{DwFfn, Emsa, TransformerBlock};
