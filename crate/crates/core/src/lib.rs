pub mod attention;
pub mod cluster;
pub mod codec;
pub mod l2g;
pub mod pipeline;
pub mod qhvae;
pub mod tensor;
