//! Minimal tensor-network toolkit: explicit forward passes that return the
//! caches their matching backward passes need. No autograd, no graph — each
//! layer owns its parameters and accumulates gradients into them.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod norm;
pub mod ops;

pub use adam::Adam;
pub use conv::Conv2d;
pub use init::Init;
pub use norm::{BatchNorm2d, BnCache};

use ndarray::{ArrayD, IxDyn};
use num_traits::{Float, NumAssignOps, NumCast};

/// Element type the kernels are generic over. Production paths run `f32`;
/// gradient verification runs `f64` so central differences resolve cleanly.
pub trait Scalar:
    Float
    + NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or accumulator.
    #[inline]
    fn fl(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("scalar conversion")
    }

    /// Widen to `f64` for accumulation and reporting.
    #[inline]
    fn dbl(self) -> f64 {
        self.to_f64().expect("scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that exposes parameters (and optionally non-trainable buffers)
/// for optimizers, checkpointing and diagnostics. Visitation order must be
/// stable across runs — optimizer state and archives index by it.
pub trait Module<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    /// Non-trainable state that still belongs in a checkpoint
    /// (batch-norm running statistics).
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {}
}

/// Clear every gradient accumulator in the module tree.
pub fn zero_grads<F: Scalar, M: Module<F> + ?Sized>(m: &mut M) {
    m.visit_params("", &mut |_, p| p.zero_grad());
}

/// Total number of trainable elements.
pub fn param_count<F: Scalar, M: Module<F> + ?Sized>(m: &mut M) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, p| n += p.numel());
    n
}

/// Join a visitation prefix with a leaf name (`"a.b"`, or just `"b"` at the root).
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Clone all parameter values followed by all buffers, in visitation order.
/// Pairs with [`load_state_vector`] for cheap in-memory snapshots.
pub fn state_vector<F: Scalar, M: Module<F> + ?Sized>(m: &mut M) -> Vec<ArrayD<F>> {
    let mut state = Vec::new();
    m.visit_params("", &mut |_, p| state.push(p.value.clone()));
    m.visit_buffers("", &mut |_, b| state.push(b.clone()));
    state
}

/// Restore a snapshot taken by [`state_vector`] on a structurally identical
/// module. Mismatched structure is a programming error, hence panics.
pub fn load_state_vector<F: Scalar, M: Module<F> + ?Sized>(m: &mut M, state: &[ArrayD<F>]) {
    let mut i = 0;
    m.visit_params("", &mut |name, p| {
        let s = &state[i];
        assert_eq!(s.shape(), p.value.shape(), "snapshot shape drift at {name}");
        p.value.assign(s);
        i += 1;
    });
    m.visit_buffers("", &mut |name, b| {
        let s = &state[i];
        assert_eq!(s.shape(), b.shape(), "snapshot shape drift at {name}");
        b.assign(s);
        i += 1;
    });
    assert_eq!(i, state.len(), "snapshot length drift");
}

/// All parameters and buffers with their visitation names — the flat form
/// checkpoints serialize. Buffer entries keep their own names; the two
/// namespaces never collide because buffers carry `running_` leaf names.
pub fn named_state<F: Scalar, M: Module<F> + ?Sized>(m: &mut M) -> Vec<(String, ArrayD<F>)> {
    let mut state = Vec::new();
    m.visit_params("", &mut |name, p| state.push((name.to_string(), p.value.clone())));
    m.visit_buffers("", &mut |name, b| state.push((name.to_string(), b.clone())));
    state
}
