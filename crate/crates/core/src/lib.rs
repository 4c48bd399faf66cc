pub mod augment;
pub mod convnets;
pub mod data;
pub mod decode;
pub mod evalkit;
pub mod imaging;
pub mod normalize;
pub mod seq2seq;
pub mod tensor;
pub mod train;
