//! Comparison classifiers: Fisherfaces, a modified LeNet-5 and a small
//! residual network.

mod fisher;
mod lenet;
mod resnet;

pub use fisher::{pca_basis, FisherfaceModel, DEFAULT_COMPONENTS};
pub use lenet::{LeNet, LeNetConfig, LeNetTrace};
pub use resnet::{Phase, ResidualBlock, TinyResNet, TinyResNetConfig, BN_EPS, BN_MOMENTUM};
