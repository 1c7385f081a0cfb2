//! Hallucination filtering for black-box vision-language models by
//! discrete semantic entropy over repeated sampled answers.

pub mod clustering;
pub mod corpus;
pub mod entropy;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod pool;
