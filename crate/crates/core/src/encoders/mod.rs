//! Student vision transformer, frozen teacher and frozen text encoder.

mod teacher;
mod text;
mod vit;

pub use teacher::{TeacherHandle, TeacherMode};
pub use text::{TextEncoder, TextEncoderConfig, TextSlot};
pub use vit::{
    encode_image, encode_image_values, init_head, init_vit, patchify, vit_forward, DualView, DualViewFeatures, VitConfig, HEAD_PREFIX,
    VIT_PREFIX,
};
