use ndarray::{Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Scalar type the network substrate is generic over. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Default
    + std::iter::Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A named state tensor. Trainable parameters carry a gradient accumulator;
/// buffers such as running normalisation statistics do not.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: Option<ArrayD<F>>,
}

impl<F: Float> Param<F> {
    pub fn trainable(value: ArrayD<F>) -> Self {
        let grad = Some(ArrayD::zeros(value.raw_dim()));
        Self { value, grad }
    }

    pub fn buffer(value: ArrayD<F>) -> Self {
        Self { value, grad: None }
    }

    pub fn zeros(shape: &[usize], trainable: bool) -> Self {
        let v = ArrayD::zeros(shape);
        if trainable {
            Self::trainable(v)
        } else {
            Self::buffer(v)
        }
    }

    pub fn filled(shape: &[usize], value: F, trainable: bool) -> Self {
        let v = ArrayD::from_elem(shape, value);
        if trainable {
            Self::trainable(v)
        } else {
            Self::buffer(v)
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }

    pub fn mat(&self) -> ArrayView2<'_, F> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    pub fn vec(&self) -> ArrayView1<'_, F> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    pub fn vec_mut(&mut self) -> ArrayViewMut1<'_, F> {
        self.value.view_mut().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    pub fn grad_mat(&mut self) -> ArrayViewMut2<'_, F> {
        self.grad
            .as_mut()
            .expect("trainable parameter")
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    pub fn grad_vec(&mut self) -> ArrayViewMut1<'_, F> {
        self.grad
            .as_mut()
            .expect("trainable parameter")
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d parameter")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(F::zero());
        }
    }

    pub fn cast<G: Float>(&self) -> Param<G> {
        Param {
            value: self.value.mapv(|v| G::of(v.as_f64())),
            grad: self.grad.as_ref().map(|g| g.mapv(|v| G::of(v.as_f64()))),
        }
    }
}

/// A dense `f32` tensor as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_array<F: Float>(a: &ArrayD<F>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_array<F: Float>(&self) -> ArrayD<F> {
        ArrayD::from_shape_vec(self.shape.clone(), self.data.iter().map(|&v| F::of(v as f64)).collect())
            .expect("tensor shape matches data")
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// `(n, h, w, c)` → `(n·h·w, c)` without copying when already contiguous.
pub(crate) fn flatten_nhwc<F: Float>(a: Array4<F>) -> Array2<F> {
    let (n, h, w, c) = a.dim();
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order((n * h * w, c)).expect("contiguous")
}

pub(crate) fn unflatten_nhwc<F: Float>(a: Array2<F>, n: usize, h: usize, w: usize) -> Array4<F> {
    let c = a.ncols();
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order((n, h, w, c)).expect("contiguous")
}

pub(crate) fn standard<F: Float>(a: Array2<F>) -> Array2<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
