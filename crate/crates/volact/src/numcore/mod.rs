//! Numerics core: fixed-size linear algebra, forward-mode jets, the flat
//! parameter store, the layer-granularity gradient tape, and the
//! finite-difference gradient oracle.

pub mod fdcheck;
pub mod jet;
pub mod linalg;
pub mod nn;
pub mod param;
pub mod tape;

pub use fdcheck::finite_diff_check;
pub use jet::{Jet3, Real};
pub use linalg::{solve3, Mat3, Transform, Vec3};
pub use param::ParamStore;
pub use tape::{ActKind, NodeId, Tape};
