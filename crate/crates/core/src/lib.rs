//! Statement-level vulnerability detection trained from function-level labels.

pub mod corpus;
pub mod encoder;
pub mod head;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod segmenter;
pub mod tensor;
pub mod trainer;
