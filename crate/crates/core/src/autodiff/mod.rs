//! A small tape-based reverse-mode engine with exactly the layers the tagger
//! needs. Every value is a dense row-major matrix; vectors are `1 × n`.
//!
//! Ops are recorded on a [`Tape`] in execution order, so reverse insertion
//! order is a valid reverse topological order and [`Tape::backward`] visits
//! each node once.

mod adam;
mod gradcheck;
mod ops;
mod tape;

pub use adam::{AdamState, StepInfo, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use gradcheck::{grad_check, CoordCheck, GradCheckConfig, GradCheckReport, TensorCheck};
pub use ops::{LstmVars, StepMask};
pub use tape::{Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable float")
    }
}

impl Real for f32 {}
impl Real for f64 {}
