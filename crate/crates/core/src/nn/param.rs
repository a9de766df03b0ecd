use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, IxDyn};

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn from_value(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn view4(&self) -> ArrayView4<'_, f32> {
        self.value.view().into_dimensionality().expect("4-d param")
    }

    pub fn view2(&self) -> ArrayView2<'_, f32> {
        self.value.view().into_dimensionality().expect("2-d param")
    }

    pub fn view1(&self) -> ArrayView1<'_, f32> {
        self.value.view().into_dimensionality().expect("1-d param")
    }
}
