pub mod par;
pub mod tensor;
pub mod corpus;
pub mod tokenizer;
pub mod model;
pub mod training;
pub mod decoding;
pub mod evaluation;
