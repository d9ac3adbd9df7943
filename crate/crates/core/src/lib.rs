//! Building blocks for measuring how debiasing and differential privacy
//! interact when fine-tuning a small autoregressive language model.

pub mod bias;
pub mod cda;
pub mod corpus;
pub mod data;
pub mod experiment;
pub mod mia;
pub mod model;
pub mod trainer;
pub mod utility;
