//! Networks: modality models, MaskNet, GateNet and specialized teachers.

mod gatenet;
mod masknet;
mod model;
mod teacher;

pub use gatenet::{gatenet_forward, GateNet};
pub use masknet::{masknet_forward, MaskNet, MaskNetConfig};
pub use model::{build_multimodal, build_unimodal, ModalityModel, TapId};
pub use teacher::{specialize, topk_select, SpecializedTeacher, TapLayout, TeacherRegistry};
