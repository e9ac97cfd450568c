pub mod codebook;
pub mod eval;
pub mod llm;
pub mod numerics;
pub mod protocol;
pub mod quantizer;
pub mod tokenizer;
