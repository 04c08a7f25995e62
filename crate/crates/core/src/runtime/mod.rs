//! A small f64 neural-network runtime for dense/batch-norm/ReLU stacks:
//! synthetic data, forward and backward passes, SGD training and evaluation.

mod arch;
mod data;
mod net;
mod train;

pub use arch::{ArchSpec, BoundLayer, HiddenGroup, LayerSpec};
pub use data::{generate_domain, AffineTransform, Dataset, SyntheticDomain};
pub use net::{evaluate, evaluate_network, forward, BatchStats, Evaluation, Mode, Network, BN_EPS};
pub use train::{train, train_from, Init, StatsWindow, TrainConfig};
