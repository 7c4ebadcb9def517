//! Teacher (point cloud) and student (panorama) detectors sharing a
//! center-heatmap head, plus the adaptation modules used for distillation.

mod adapter;
mod head;
mod student;
mod teacher;

pub use adapter::Adapter;
pub use head::{
    encode_maps, head_decode, DecodeConfig, regress_target, Detection, DetectionMaps, Head, MapsGrad, LOGIT_CLAMP,
    REGRESS_CHANNELS,
};
pub use student::{
    panorama_input, softmax_channels, AdaptTarget, AdapterSpec, LiftTable, Student, StudentConfig, StudentOutput,
};
pub use teacher::{lidar_bev, Teacher, TeacherConfig, TeacherOutput, LIDAR_INPUT_CHANNELS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DetectorError {
    #[error("expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("student has no {0:?} adapter")]
    MissingAdapter(AdaptTarget),
}
