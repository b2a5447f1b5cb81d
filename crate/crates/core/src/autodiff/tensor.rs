use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{CastError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the operation's inputs and the upstream gradient and
/// must express every input gradient with differentiable tensor operations,
/// so that running it on grad-tracking values records a graph of its own.
pub(crate) trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input, `None` where `needs[i]` is false.
    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool])
        -> Result<Vec<Option<Tensor>>>;
}

pub(crate) struct Node {
    pub(crate) op: Box<dyn Backward>,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<[f32]>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense row-major `f32` array that may participate in a computation graph.
///
/// Cloning is cheap: values are shared and never mutated once built.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CastError::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::raw(shape.to_vec(), data.into(), false, None))
    }

    pub fn from_slice(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    pub fn scalar(value: f32) -> Self {
        Self::raw(Vec::new(), vec![value].into(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; n].into(), false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n].into(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    fn raw(shape: Vec<usize>, data: Arc<[f32]>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Result of an operation: grad-tracking iff any input is.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: Vec<Tensor>,
        op: impl Backward + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op: Box::new(op),
            inputs,
        });
        Self::raw(shape, data.into(), requires_grad, node)
    }

    /// A fresh graph leaf with the same values whose gradient can be requested.
    pub fn requires_grad_leaf(&self) -> Tensor {
        Self::raw(self.inner.shape.clone(), self.inner.data.clone(), true, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(CastError::NonScalar(self.shape().to_vec()));
        }
        Ok(self.inner.data[0])
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// Name of the operation that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node().map(|n| n.op.name())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
