//! Small dense networks with hand-written backpropagation and Adam.
//!
//! Networks are generic over the float type: training runs in `f32`,
//! gradient checks run in `f64`.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;

pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + LinalgScalar + ScalarOperand + Debug + Send + Sync + Default + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

/// Named view of one parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// A set of parameter tensors with a fixed order.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    fn set_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

pub fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// ELU derivative expressed through its output.
fn elu_grad_from_output<T: Scalar>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`, so a batch maps as `X · W + b`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }

    /// Uniform ±1/√fan_in initialization, weights scaled by `gain`.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = Array2::from_shape_fn((inputs, outputs), |_| cast(gain * rng.gen_range(-bound..bound)));
        let b = Array1::from_shape_fn(outputs, |_| cast(rng.gen_range(-bound..bound)));
        Self { w, b }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }
}

/// Multilayer perceptron: ELU on hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Activations kept for the backward pass: `inputs[l]` feeds layer `l`.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub inputs: Vec<Array2<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [in, hidden.., out]`; the output layer weights are scaled by `out_gain`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                Linear::init(sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs(), l.outputs())).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs()];
        s.extend(self.layers.iter().map(|l| l.outputs()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs()).unwrap_or(0)
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut h = self.layers[0].forward(&x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(elu);
            h = layer.forward(&h.view());
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, T>) -> (Array2<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let mut h = self.layers[0].forward(&x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(elu);
            let next = layer.forward(&h.view());
            inputs.push(h);
            h = next;
        }
        (h, MlpCache { inputs })
    }

    /// Accumulates parameter gradients into `grads` and returns ∂L/∂input.
    pub fn backward(&self, cache: &MlpCache<T>, grad_out: Array2<T>, grads: &mut Mlp<T>) -> Array2<T> {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            let x = &cache.inputs[l];
            grads.layers[l].w += &x.t().dot(&g);
            grads.layers[l].b += &g.sum_axis(Axis(0));
            let mut gx = g.dot(&self.layers[l].w.t());
            if l > 0 {
                gx.zip_mut_with(x, |d, &y| *d = *d * elu_grad_from_output(y));
            }
            g = gx;
        }
        g
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    w: l.w.mapv(|x| cast(x.to_f64().unwrap())),
                    b: l.b.mapv(|x| cast(x.to_f64().unwrap())),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.w.mapv_inplace(|x| x * s);
            l.b.mapv_inplace(|x| x * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    pub fn prefixed_tensors(&self, prefix: &str) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(TensorRef {
                name: format!("{prefix}.{i}.w"),
                shape: l.w.shape().to_vec(),
                data: l.w.as_slice().expect("standard layout"),
            });
            out.push(TensorRef {
                name: format!("{prefix}.{i}.b"),
                shape: l.b.shape().to_vec(),
                data: l.b.as_slice().expect("standard layout"),
            });
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        self.prefixed_tensors("mlp")
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.slices_mut()
    }
}

/// Rescales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s: T = cast(max_norm / (norm + 1e-6));
        grad.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
        }
    }

    /// One descent step on the flat parameter vector.
    pub fn update_flat(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (cast::<T>(self.beta1), cast::<T>(self.beta2));
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size: T = cast(self.lr * c2.sqrt() / c1);
        let eps: T = cast(self.eps * c2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] = params[i] - step_size * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }

    pub fn update<P: Parameters<T> + ?Sized>(&mut self, model: &mut P, grad: &[T]) {
        let mut flat = model.to_flat();
        self.update_flat(&mut flat, grad);
        model.set_flat(&flat);
    }
}

pub mod gradcheck {
    /// Max relative error between analytic and central-difference gradients
    /// over the given coordinates.
    pub fn max_rel_error(
        f: &mut dyn FnMut(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
        coords: impl Iterator<Item = usize>,
        h: f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        let mut xp = x.to_vec();
        for i in coords {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((numeric - analytic[i]).abs() / denom);
        }
        worst
    }
}
