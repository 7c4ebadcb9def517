pub mod bevgrid;
pub mod detectors;
pub mod distill;
pub mod evalkit;
pub mod labelenc;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synthworld;
pub mod train;

pub use scalar::Scalar;

pub type Teacher32 = detectors::Teacher<f32>;
pub type Teacher64 = detectors::Teacher<f64>;
pub type Student32 = detectors::Student<f32>;
pub type Student64 = detectors::Student<f64>;
pub type LabelEncoder32 = labelenc::LabelEncoder<f32>;
pub type LabelEncoder64 = labelenc::LabelEncoder<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Corpus32 = pipeline::Corpus<f32>;
pub type Workbench32 = pipeline::Workbench<f32>;
