//! Desk-scale fine-tuning laboratory.
//!
//! The crate pairs a small pre-norm transformer encoder with an instrumented
//! reverse-mode autodiff engine, then wires in four parameter-efficient
//! fine-tuning baselines (Adapter, LoRA, AdaLoRA, BitFit) and three
//! memory-efficient side-network methods (LST, UniPT, SHERL). The engine
//! measures — and the test suite property-checks — retained-activation
//! memory, backward work, and trainable-parameter ratios for every method.

pub mod backbone;
pub mod engine;
pub mod gradcheck;
pub mod method;
pub mod params;
pub mod peft;
pub mod scalar;
pub mod tensor;

pub use backbone::{LayerTaps, ModelConfig};
pub use engine::{BackwardStats, Engine, EngineError, Owner, PrimOp};
pub use method::MethodSpec;
pub use params::{ParamRole, ParamStore};
pub use scalar::Scalar;
pub use tensor::{NodeId, Provenance, Tensor};
