//! Differentiable components with hand-written gradients: per-subgraph
//! forecasters, the global bridging layer and their training loops.

mod data;
mod global;
mod params;
mod submodel;

pub use data::{DataReader, Ledger, LedgerEntry, NodeScaler, Split};
pub use global::{fuse, ggb_loss, ggb_objective, train_global, GlobalConfig, GlobalLayer, GlobalParams, GlobalSample, MetaLayout};
pub use params::{descend, gradcheck, init_mat, ParamBlocks};
pub use submodel::{
    encode, encode_and_predict, normalized_adjacency, sub_objective, train_submodel, SubArch, SubModel, SubModelSpec, SubParams,
    TrainConfig,
};
