//! Dense row-major tensors (rank 1 or 2) with an optional tape handle.
//!
//! A `Tensor` owns its values through a shared buffer; primitives never
//! mutate data in place, so retaining a buffer for the backward pass is a
//! reference-count bump, while the accounting still charges its full byte
//! size. A tensor with `node == None` is a constant: it participates in no
//! backward pass.

use crate::scalar::Scalar;
use std::rc::Rc;

/// Index of a recorded node on an engine's tape.
pub type NodeId = usize;

/// Where a tensor's buffer came from, for the retention accounting:
/// parameter buffers are alive in their store regardless of the tape, so
/// retaining them is free; everything else is charged at full byte size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Constant or op output: retaining it keeps bytes alive.
    Activation,
    /// Parameter value owned by a `ParamStore`.
    Param,
}

#[derive(Clone, Debug)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
    node: Option<NodeId>,
    provenance: Provenance,
}

impl<F: Scalar> Tensor<F> {
    /// Constant tensor from raw data. Panics if the element count does not
    /// match the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
            provenance: Provenance::Activation,
        }
    }

    pub fn from_shared(shape: Vec<usize>, data: Rc<Vec<F>>, provenance: Provenance) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            node: None,
            provenance,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![F::zero(); n])
    }

    pub fn scalar(x: F) -> Self {
        Tensor::from_vec(vec![1], vec![x])
    }

    pub fn row(values: Vec<F>) -> Self {
        Tensor::from_vec(vec![1, values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rank-{} tensor has no row/col view", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("rank-{} tensor has no row/col view", self.shape.len()),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn shared(&self) -> Rc<Vec<F>> {
        Rc::clone(&self.data)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Bytes this buffer occupies at the engine precision.
    pub fn byte_size(&self) -> u64 {
        self.numel() as u64 * F::BYTES
    }

    pub fn is_const(&self) -> bool {
        self.node.is_none()
    }

    /// Single element of a scalar-shaped tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Same buffer, no tape handle: how taps leave a detached scope.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
            provenance: self.provenance,
        }
    }
}

/// Row-major index helper for rank-2 data.
#[inline]
pub fn at(cols: usize, r: usize, c: usize) -> usize {
    r * cols + c
}
