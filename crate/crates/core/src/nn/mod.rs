//! Dense numerics: tensors on a reverse-mode tape, the two desk-scale
//! models, SGD and the probability primitives.

pub mod model;
pub mod tape;

use indexmap::IndexMap;

use crate::tensor::Tensor;

pub use model::{
    accuracy, build_model, cross_entropy, forward, sgd_step, softmax, BoundModel, ForwardOutput,
    ForwardVars, ModelKind, ModelParams, ModelSpec, ParamEntry, ParamRole,
};
pub use tape::{Gradients, Tape, Var, PROB_EPS};

/// Parameter-shaped tensors keyed by parameter name, in model order.
pub type TensorMap = IndexMap<String, Tensor>;
