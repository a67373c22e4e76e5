//! Elementwise operations, restricted broadcasting, and reductions.

use std::rc::Rc;

use super::{ensure_finite, GradFn, Result, Scalar, Tensor, TensorError};

/// Division guard: any denominator element smaller than this in magnitude is
/// reported as a singularity rather than evaluated.
pub const DIV_EPS: f64 = 1e-12;

/// The two sanctioned broadcast forms, plus the trivial same-shape case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Left operand is a one-element tensor.
    ScalarLhs,
    /// Right operand is a one-element tensor.
    ScalarRhs,
    /// Left operand is `[C]`, right is `[N, C, H, W]`.
    ChannelLhs,
    /// Right operand is `[C]`, left is `[N, C, H, W]`.
    ChannelRhs,
}

fn channel_matches(vec_dims: &[usize], nchw: &[usize]) -> bool {
    vec_dims.len() == 1 && nchw.len() == 4 && vec_dims[0] == nchw[1]
}

fn resolve_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let a_len: usize = a.iter().product();
    let b_len: usize = b.iter().product();
    if a_len == 1 {
        return Ok(Broadcast::ScalarLhs);
    }
    if b_len == 1 {
        return Ok(Broadcast::ScalarRhs);
    }
    if channel_matches(a, b) {
        return Ok(Broadcast::ChannelLhs);
    }
    if channel_matches(b, a) {
        return Ok(Broadcast::ChannelRhs);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Iterate a binary op over the broadcast pair, producing the output buffer.
fn zip_broadcast<T: Scalar>(
    bc: Broadcast,
    a: &[T],
    b: &[T],
    a_dims: &[usize],
    b_dims: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    match bc {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::ScalarLhs => {
            let s = a[0];
            b.iter().map(|&y| f(s, y)).collect()
        }
        Broadcast::ScalarRhs => {
            let s = b[0];
            a.iter().map(|&x| f(x, s)).collect()
        }
        Broadcast::ChannelLhs => {
            let plane = b_dims[2] * b_dims[3];
            let channels = b_dims[1];
            let mut out = Vec::with_capacity(b.len());
            for (i, &y) in b.iter().enumerate() {
                let c = (i / plane) % channels;
                out.push(f(a[c], y));
            }
            out
        }
        Broadcast::ChannelRhs => {
            let plane = a_dims[2] * a_dims[3];
            let channels = a_dims[1];
            let mut out = Vec::with_capacity(a.len());
            for (i, &x) in a.iter().enumerate() {
                let c = (i / plane) % channels;
                out.push(f(x, b[c]));
            }
            out
        }
    }
}

fn out_dims(bc: Broadcast, a: &[usize], b: &[usize]) -> Vec<usize> {
    match bc {
        Broadcast::Same | Broadcast::ScalarRhs | Broadcast::ChannelRhs => a.to_vec(),
        Broadcast::ScalarLhs | Broadcast::ChannelLhs => b.to_vec(),
    }
}

/// Reduce a full-shape gradient down to the broadcast operand's shape.
fn reduce_for<T: Scalar>(side_dims: &[usize], full_dims: &[usize], grad: &[T]) -> Vec<T> {
    let side_len: usize = side_dims.iter().product();
    if side_len == grad.len() {
        return grad.to_vec();
    }
    if side_len == 1 {
        let mut acc = T::zero();
        for &g in grad {
            acc = acc + g;
        }
        return vec![acc];
    }
    // per-channel: sum over N, H, W
    let channels = full_dims[1];
    let plane = full_dims[2] * full_dims[3];
    let mut acc = vec![T::zero(); channels];
    for (i, &g) in grad.iter().enumerate() {
        let c = (i / plane) % channels;
        acc[c] = acc[c] + g;
    }
    acc
}

struct BinaryGrad<T: Scalar> {
    a: Tensor<T>,
    b: Tensor<T>,
    kind: BinaryKind,
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expand an operand's values onto the full output shape under the resolved
/// broadcast (identity when the operand already has the full shape).
fn expand_to_full<T: Scalar>(values: &[T], full_dims: &[usize], full_len: usize) -> Vec<T> {
    if values.len() == full_len {
        return values.to_vec();
    }
    if values.len() == 1 {
        return vec![values[0]; full_len];
    }
    let plane = full_dims[2] * full_dims[3];
    let channels = full_dims[1];
    (0..full_len)
        .map(|i| values[(i / plane) % channels])
        .collect()
}

impl<T: Scalar> GradFn<T> for BinaryGrad<T> {
    fn backward(&self, grad_out: &[T]) {
        let a_dims = self.a.dims().to_vec();
        let b_dims = self.b.dims().to_vec();
        let bc = resolve_broadcast("binary", &a_dims, &b_dims).expect("validated in forward");
        let full_dims = out_dims(bc, &a_dims, &b_dims);
        let n = grad_out.len();

        let (da, db): (Vec<T>, Vec<T>) = {
            let av = self.a.data();
            let bv = self.b.data();
            match self.kind {
                BinaryKind::Add => (grad_out.to_vec(), grad_out.to_vec()),
                BinaryKind::Sub => (
                    grad_out.to_vec(),
                    grad_out.iter().map(|&g| T::zero() - g).collect(),
                ),
                BinaryKind::Mul => {
                    let a_full = expand_to_full(&av, &full_dims, n);
                    let b_full = expand_to_full(&bv, &full_dims, n);
                    let da = grad_out.iter().zip(&b_full).map(|(&g, &y)| g * y).collect();
                    let db = grad_out.iter().zip(&a_full).map(|(&g, &x)| g * x).collect();
                    (da, db)
                }
                BinaryKind::Div => {
                    let a_full = expand_to_full(&av, &full_dims, n);
                    let b_full = expand_to_full(&bv, &full_dims, n);
                    let da = grad_out.iter().zip(&b_full).map(|(&g, &y)| g / y).collect();
                    let db = grad_out
                        .iter()
                        .zip(a_full.iter().zip(&b_full))
                        .map(|(&g, (&x, &y))| T::zero() - g * x / (y * y))
                        .collect();
                    (da, db)
                }
            }
        };

        if self.a.needs_grad() {
            self.a.accumulate_grad(&reduce_for(&a_dims, &full_dims, &da));
        }
        if self.b.needs_grad() {
            self.b.accumulate_grad(&reduce_for(&b_dims, &full_dims, &db));
        }
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }
}

fn binary<T: Scalar>(
    op: &'static str,
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let bc = resolve_broadcast(op, a.dims(), b.dims())?;
    if let BinaryKind::Div = kind {
        let threshold = T::from_f64(DIV_EPS);
        let bv = b.data();
        for (i, &y) in bv.iter().enumerate() {
            if y.abs() < threshold {
                return Err(TensorError::Singularity {
                    op,
                    index: i,
                    threshold: DIV_EPS,
                });
            }
        }
    }
    let data = {
        let av = a.data();
        let bv = b.data();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        zip_broadcast(bc, &av, &bv, a.dims(), b.dims(), f)
    };
    ensure_finite(op, &data)?;
    let dims = out_dims(bc, a.dims(), b.dims());
    let grad_fn: Option<Rc<dyn GradFn<T>>> = if a.needs_grad() || b.needs_grad() {
        Some(Rc::new(BinaryGrad {
            a: a.clone(),
            b: b.clone(),
            kind,
        }))
    } else {
        None
    };
    Ok(Tensor::make(dims, data, grad_fn))
}

struct UnaryGrad<T: Scalar> {
    input: Tensor<T>,
    /// Saved forward output, for rules written in terms of the output
    /// (exp, sigmoid). Empty otherwise.
    saved_out: Vec<T>,
    kind: UnaryKind<T>,
}

#[derive(Clone, Copy)]
enum UnaryKind<T> {
    Abs,
    Exp,
    Sigmoid,
    AddScalar,
    MulScalar(T),
}

impl<T: Scalar> GradFn<T> for UnaryGrad<T> {
    fn backward(&self, grad_out: &[T]) {
        if !self.input.needs_grad() {
            return;
        }
        let delta: Vec<T> = match self.kind {
            UnaryKind::Abs => {
                // subgradient at 0 is 0
                let x = self.input.data();
                grad_out
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            T::zero() - g
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            }
            UnaryKind::Exp => grad_out
                .iter()
                .zip(&self.saved_out)
                .map(|(&g, &e)| g * e)
                .collect(),
            UnaryKind::Sigmoid => grad_out
                .iter()
                .zip(&self.saved_out)
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect(),
            UnaryKind::AddScalar => grad_out.to_vec(),
            UnaryKind::MulScalar(k) => grad_out.iter().map(|&g| g * k).collect(),
        };
        self.input.accumulate_grad(&delta);
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }
}

fn unary<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kind: UnaryKind<T>,
    f: impl Fn(T) -> T,
) -> Result<Tensor<T>> {
    let data: Vec<T> = input.data().iter().map(|&x| f(x)).collect();
    ensure_finite(op, &data)?;
    let grad_fn: Option<Rc<dyn GradFn<T>>> = if input.needs_grad() {
        let saved_out = match kind {
            UnaryKind::Exp | UnaryKind::Sigmoid => data.clone(),
            _ => Vec::new(),
        };
        Some(Rc::new(UnaryGrad {
            input: input.clone(),
            saved_out,
            kind,
        }))
    } else {
        None
    };
    Ok(Tensor::make(input.dims().to_vec(), data, grad_fn))
}

struct ReduceGrad<T: Scalar> {
    input: Tensor<T>,
    scale: T,
}

impl<T: Scalar> GradFn<T> for ReduceGrad<T> {
    fn backward(&self, grad_out: &[T]) {
        if !self.input.needs_grad() {
            return;
        }
        let g = grad_out[0] * self.scale;
        self.input.accumulate_grad(&vec![g; self.input.len()]);
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (T::zero() - x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", BinaryKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", BinaryKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", BinaryKind::Mul, self, other)
    }

    /// Elementwise quotient. Any denominator with magnitude below
    /// [`DIV_EPS`] is a singularity error carrying the flat index.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("div", BinaryKind::Div, self, other)
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        unary("abs", self, UnaryKind::Abs, |x| x.abs())
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary("exp", self, UnaryKind::Exp, |x| x.exp())
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary("sigmoid", self, UnaryKind::Sigmoid, sigmoid_stable)
    }

    pub fn add_scalar(&self, k: T) -> Result<Tensor<T>> {
        unary("add_scalar", self, UnaryKind::AddScalar, |x| x + k)
    }

    pub fn mul_scalar(&self, k: T) -> Result<Tensor<T>> {
        unary("mul_scalar", self, UnaryKind::MulScalar(k), |x| x * k)
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.mul_scalar(T::zero() - T::one())
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc + v;
        }
        ensure_finite("sum", &[acc])?;
        let grad_fn: Option<Rc<dyn GradFn<T>>> = if self.needs_grad() {
            Some(Rc::new(ReduceGrad {
                input: self.clone(),
                scale: T::one(),
            }))
        } else {
            None
        };
        Ok(Tensor::make(vec![1], vec![acc], grad_fn))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = T::from_f64(self.len() as f64);
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc + v;
        }
        let m = acc / n;
        ensure_finite("mean", &[m])?;
        let grad_fn: Option<Rc<dyn GradFn<T>>> = if self.needs_grad() {
            Some(Rc::new(ReduceGrad {
                input: self.clone(),
                scale: T::one() / n,
            }))
        } else {
            None
        };
        Ok(Tensor::make(vec![1], vec![m], grad_fn))
    }
}

/// Test fixtures with deliberately wrong rules, used as negative controls
/// for the gradient checker.
#[doc(hidden)]
pub mod testing {
    use super::*;

    struct BuggyGrad<T: Scalar> {
        input: Tensor<T>,
    }

    impl<T: Scalar> GradFn<T> for BuggyGrad<T> {
        fn backward(&self, grad_out: &[T]) {
            if !self.input.needs_grad() {
                return;
            }
            // wrong on purpose: forward doubles, backward claims triple
            let three = T::from_f64(3.0);
            let delta: Vec<T> = grad_out.iter().map(|&g| g * three).collect();
            self.input.accumulate_grad(&delta);
        }

        fn parents(&self) -> Vec<Tensor<T>> {
            vec![self.input.clone()]
        }
    }

    /// Forward computes `2·x`; the recorded backward rule is intentionally
    /// corrupted (claims a factor of 3).
    pub fn double_with_corrupt_backward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let two = T::from_f64(2.0);
        let data: Vec<T> = x.data().iter().map(|&v| v * two).collect();
        ensure_finite("double_with_corrupt_backward", &data)?;
        let grad_fn: Option<Rc<dyn GradFn<T>>> = if x.needs_grad() {
            Some(Rc::new(BuggyGrad { input: x.clone() }))
        } else {
            None
        };
        Ok(Tensor::make(x.dims().to_vec(), data, grad_fn))
    }
}

#[cfg(test)]
mod tests {
    use super::super::backward;
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Tensor::<f64>::from_vec(vec![1], vec![0.0]).unwrap();
        let y = x.sigmoid().unwrap();
        assert_eq!(y.item().unwrap(), 0.5);
    }

    #[test]
    fn add_broadcast_scalar() {
        let a = Tensor::<f32>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = Tensor::<f32>::scalar(10.0);
        let y = a.add(&s).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 12.0, 13.0, 14.0]);
        let y2 = s.add(&a).unwrap();
        assert_eq!(y2.to_vec(), vec![11.0, 12.0, 13.0, 14.0]);
    }

    #[test]
    fn channel_broadcast_add() {
        // N=1, C=2, H=1, W=2
        let x = Tensor::<f64>::from_vec(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bias = Tensor::<f64>::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        let y = x.add(&bias).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 12.0, 23.0, 24.0]);
    }

    #[test]
    fn channel_broadcast_backward_sums_plane() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .requires_grad(true);
        let bias = Tensor::<f64>::from_vec(vec![2], vec![0.5, 0.25])
            .unwrap()
            .requires_grad(true);
        let loss = x.add(&bias).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(bias.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn mul_scalar_tensor_backward() {
        let a = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .requires_grad(true);
        let s = Tensor::<f64>::scalar(2.0).requires_grad(true);
        let loss = a.mul(&s).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        // d/ds sum(a*s) = sum(a) = 6
        assert_eq!(s.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 2]);
        let err = a.add(&b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn div_near_zero_is_singularity_with_index() {
        let a = Tensor::<f64>::from_vec(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3], vec![1.0, 1e-13, 1.0]).unwrap();
        match a.div(&b).unwrap_err() {
            TensorError::Singularity { index, .. } => assert_eq!(index, 1),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn div_backward_quotient_rule() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![1.0, 4.0])
            .unwrap()
            .requires_grad(true);
        let b = Tensor::<f64>::from_vec(vec![2], vec![2.0, 8.0])
            .unwrap()
            .requires_grad(true);
        let loss = a.div(&b).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.5, 0.125]);
        assert_eq!(b.grad().unwrap(), vec![-0.25, -0.0625]);
    }

    #[test]
    fn abs_backward_subgradient_zero_at_zero() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![-2.0, 0.0, 3.0])
            .unwrap()
            .requires_grad(true);
        let loss = x.abs().unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn exp_overflow_is_non_finite_error() {
        let x = Tensor::<f32>::from_vec(vec![1], vec![200.0]).unwrap();
        assert!(matches!(
            x.exp().unwrap_err(),
            TensorError::NonFinite { op: "exp", .. }
        ));
    }

    #[test]
    fn mean_backward_uniform() {
        // loss = mean(x^2) at x = 2 everywhere: grad = 2*2/n = 4/n
        let n = 5usize;
        let x = Tensor::<f64>::from_vec(vec![n], vec![2.0; n])
            .unwrap()
            .requires_grad(true);
        let loss = x.mul(&x).unwrap().mean().unwrap();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        for gi in g {
            assert!((gi - 4.0 / n as f64).abs() < 1e-15);
        }
    }
}
