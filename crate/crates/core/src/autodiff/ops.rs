//! Elementwise, reduction, matrix and channel-layout operations.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor, Transpose};

use super::{BackwardCtx, Cost, CostKind, Operation, Stackable, Tape, Var};

fn same_shapes(name: &str, inputs: &[&Shape]) -> Result<Shape> {
    let first = inputs[0];
    for s in &inputs[1..] {
        if *s != first {
            return Err(Error::shape(format!("{name}: {first} vs {s}")));
        }
    }
    Ok(first.clone())
}

fn arity(name: &str, inputs: &[&Shape], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::contract(format!(
            "{name} takes {n} operands, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

macro_rules! binary_op {
    ($ty:ident, $name:literal, |$a:ident, $b:ident| $fwd:expr, |$ga:ident, $gb:ident, $g:ident, $x:ident, $y:ident| $bwd:block) => {
        #[derive(Debug, Clone, Copy)]
        pub struct $ty;

        impl<T: Scalar> Operation<T> for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
                Stackable::All
            }

            fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
                arity($name, inputs, 2)?;
                same_shapes($name, inputs)
            }

            fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
                inputs[0]
                    .zip_map(inputs[1], |$a, $b| $fwd)
                    .expect("validated shapes")
            }

            fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
                let $g = ctx.grad;
                let $x = ctx.inputs[0];
                let $y = ctx.inputs[1];
                let ($ga, $gb): (Option<Tensor<T>>, Option<Tensor<T>>) = $bwd;
                let _ = ($x, $y);
                vec![$ga.filter(|_| ctx.needs[0]), $gb.filter(|_| ctx.needs[1])]
            }
        }
    };
}

binary_op!(Add, "add", |a, b| a + b, |ga, gb, g, x, y| {
    (Some(g.clone()), Some(g.clone()))
});

binary_op!(Sub, "sub", |a, b| a - b, |ga, gb, g, x, y| {
    (Some(g.clone()), Some(g.map(|v| -v)))
});

binary_op!(Mul, "mul", |a, b| a * b, |ga, gb, g, x, y| {
    (
        Some(g.zip_map(y, |g, y| g * y).expect("shape")),
        Some(g.zip_map(x, |g, x| g * x).expect("shape")),
    )
});

macro_rules! unary_op {
    ($ty:ident $(($($field:ident: $fty:ty),*))?, $name:literal, |$s:ident, $x:ident| $fwd:expr, |$s2:ident, $gx:ident, $y:ident, $g:ident| $bwd:expr) => {
        #[derive(Debug, Clone, Copy)]
        pub struct $ty<T = f64> { $($(pub $field: $fty,)*)? _t: std::marker::PhantomData<T> }

        impl<T: Scalar> Operation<T> for $ty<T> {
            fn name(&self) -> &'static str {
                $name
            }

            fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
                Stackable::First
            }

            fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
                arity($name, inputs, 1)?;
                Ok(inputs[0].clone())
            }

            fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
                let $s = self;
                let _ = $s;
                inputs[0].map(|$x| $fwd)
            }

            fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
                let $s2 = self;
                let _ = $s2;
                let x = ctx.inputs[0];
                let out = ctx.output;
                let data: Vec<T> = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(ctx.grad.data())
                    .map(|((&$gx, &$y), &$g)| $bwd)
                    .collect();
                vec![Some(Tensor::from_shape(x.shape().clone(), data).expect("shape"))]
            }
        }
    };
}

unary_op!(Relu, "relu", |s, x| if x > T::zero() { x } else { T::zero() }, |s, x, y, g| {
    let _ = y;
    if x > T::zero() { g } else { T::zero() }
});

unary_op!(Scale(factor: T), "scale", |s, x| x * s.factor, |s, x, y, g| {
    let _ = (x, y);
    g * s.factor
});

unary_op!(AddScalar(offset: T), "add_scalar", |s, x| x + s.offset, |s, x, y, g| {
    let _ = (x, y);
    g
});

unary_op!(Square, "square", |s, x| x * x, |s, x, y, g| {
    let _ = y;
    g * (x + x)
});

unary_op!(Sqrt, "sqrt", |s, x| x.sqrt(), |s, x, y, g| {
    let _ = x;
    g / (y + y)
});

unary_op!(Abs, "abs", |s, x| x.abs(), |s, x, y, g| {
    let _ = y;
    if x > T::zero() {
        g
    } else if x < T::zero() {
        -g
    } else {
        T::zero()
    }
});

unary_op!(Charbonnier(eps: T), "charbonnier", |s, x| (x * x + s.eps * s.eps).sqrt(), |s, x, y, g| {
    g * x / y
});

impl<T: Scalar> Scale<T> {
    pub fn new(factor: T) -> Self {
        Scale { factor, _t: std::marker::PhantomData }
    }
}

impl<T: Scalar> AddScalar<T> {
    pub fn new(offset: T) -> Self {
        AddScalar { offset, _t: std::marker::PhantomData }
    }
}

impl<T: Scalar> Charbonnier<T> {
    pub fn new(eps: T) -> Self {
        Charbonnier { eps, _t: std::marker::PhantomData }
    }
}

macro_rules! plain_ctor {
    ($($ty:ident),*) => {$(
        impl<T: Scalar> $ty<T> {
            pub fn new() -> Self {
                $ty { _t: std::marker::PhantomData }
            }
        }

        impl<T: Scalar> Default for $ty<T> {
            fn default() -> Self {
                Self::new()
            }
        }
    )*};
}

plain_ctor!(Relu, Square, Sqrt, Abs);

/// Sum of all elements into a one-element tensor.
#[derive(Debug, Clone, Copy)]
pub struct Sum;

impl<T: Scalar> Operation<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("sum", inputs, 1)?;
        Shape::new(&[1])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        Tensor::scalar(inputs[0].sum())
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.data()[0];
        vec![Some(Tensor::filled(ctx.inputs[0].shape().clone(), g))]
    }
}

/// Mean of all elements into a one-element tensor.
#[derive(Debug, Clone, Copy)]
pub struct Mean;

impl<T: Scalar> Operation<T> for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("mean", inputs, 1)?;
        Shape::new(&[1])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        Tensor::scalar(inputs[0].mean())
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let n = T::lit(ctx.inputs[0].numel() as f64);
        let g = ctx.grad.data()[0] / n;
        vec![Some(Tensor::filled(ctx.inputs[0].shape().clone(), g))]
    }
}

/// `[M,K] x [K,N]`, or batched `[B,M,K] x [B,K,N]`.
#[derive(Debug, Clone, Copy)]
pub struct MatMul;

fn batch_mkn(a: &Shape, b: &Shape) -> Result<(usize, usize, usize, usize)> {
    match (a.dims(), b.dims()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        _ => Err(Error::shape(format!("matmul: incompatible shapes {a} and {b}"))),
    }
}

impl<T: Scalar> Operation<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn stackable(&self, inputs: &[&Shape]) -> Stackable {
        if inputs[0].rank() == 3 {
            Stackable::All
        } else {
            Stackable::None
        }
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("matmul", inputs, 2)?;
        let (batch, m, _, n) = batch_mkn(inputs[0], inputs[1])?;
        if inputs[0].rank() == 2 {
            Shape::new(&[m, n])
        } else {
            Shape::new(&[batch, m, n])
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let (batch, m, k, n) = batch_mkn(a.shape(), b.shape()).expect("validated");
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                Transpose::No,
                &b.data()[i * k * n..(i + 1) * k * n],
                Transpose::No,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = <Self as Operation<T>>::output_shape(self, &[a.shape(), b.shape()]).expect("validated");
        Tensor::from_shape(shape, out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let (batch, m, k, n) = batch_mkn(a.shape(), b.shape()).expect("validated");
        let da = ctx.needs[0].then(|| {
            let mut da = vec![T::zero(); batch * m * k];
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    Transpose::No,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    Transpose::Yes,
                    T::zero(),
                    &mut da[i * m * k..(i + 1) * m * k],
                );
            }
            Tensor::from_shape(a.shape().clone(), da).expect("shape")
        });
        let db = ctx.needs[1].then(|| {
            let mut db = vec![T::zero(); batch * k * n];
            for i in 0..batch {
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    Transpose::Yes,
                    &g[i * m * n..(i + 1) * m * n],
                    Transpose::No,
                    T::zero(),
                    &mut db[i * k * n..(i + 1) * k * n],
                );
            }
            Tensor::from_shape(b.shape().clone(), db).expect("shape")
        });
        vec![da, db]
    }

    fn cost(&self, inputs: &[&Shape], _output: &Shape) -> Cost {
        let (batch, m, k, n) = batch_mkn(inputs[0], inputs[1]).expect("validated");
        Cost {
            kind: CostKind::MatMul,
            macs: (batch * m * k * n) as u64,
        }
    }
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
#[derive(Debug, Clone, Copy)]
pub struct TransposeLast2;

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let dims = x.dims();
    let (batch, r, c) = match *dims {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => unreachable!("validated rank"),
    };
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let mut new_dims = dims.to_vec();
    let len = new_dims.len();
    new_dims.swap(len - 1, len - 2);
    Tensor::new(&new_dims, out).expect("shape")
}

impl<T: Scalar> Operation<T> for TransposeLast2 {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn stackable(&self, inputs: &[&Shape]) -> Stackable {
        if inputs[0].rank() >= 3 {
            Stackable::First
        } else {
            Stackable::None
        }
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("transpose", inputs, 1)?;
        let mut d = inputs[0].dims().to_vec();
        if !(2..=3).contains(&d.len()) {
            return Err(Error::shape(format!("transpose needs rank 2 or 3, got {}", inputs[0])));
        }
        let len = d.len();
        d.swap(len - 1, len - 2);
        Shape::new(&d)
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        transpose_last2(inputs[0])
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(transpose_last2(ctx.grad))]
    }
}

/// Softmax over the last axis, stabilised by subtracting the row maximum.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxRows;

impl<T: Scalar> Operation<T> for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("softmax_rows", inputs, 1)?;
        Ok(inputs[0].clone())
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (_, cols) = x.shape().rows_cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::from_shape(x.shape().clone(), out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let y = ctx.output;
        let (_, cols) = y.shape().rows_cols();
        let mut dx = vec![T::zero(); y.numel()];
        for ((yr, gr), dr) in y
            .data()
            .chunks(cols)
            .zip(ctx.grad.data().chunks(cols))
            .zip(dx.chunks_mut(cols))
        {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - dot);
            }
        }
        vec![Some(Tensor::from_shape(y.shape().clone(), dx).expect("shape"))]
    }
}

/// Same data, new extents.
#[derive(Debug, Clone)]
pub struct Reshape(pub Vec<usize>);

impl<T: Scalar> Operation<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("reshape", inputs, 1)?;
        let s = Shape::new(&self.0)?;
        if s.numel() != inputs[0].numel() {
            return Err(Error::shape(format!("cannot reshape {} into {s}", inputs[0])));
        }
        Ok(s)
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let mut dims = self.0.clone();
        let items = inputs[0].numel() / dims.iter().product::<usize>().max(1);
        if items > 1 && !dims.is_empty() {
            // several stacked items: see `Operation::stackable`
            dims[0] *= items;
        }
        inputs[0].reshape(&dims).expect("validated")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.reshape(ctx.inputs[0].dims()).expect("validated"))]
    }
}

/// Concatenation of NCHW tensors along the channel axis.
#[derive(Debug, Clone, Copy)]
pub struct ConcatChannels;

impl<T: Scalar> Operation<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::All
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        if inputs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let (n, _, h, w) = inputs[0].nchw()?;
        let mut c_total = 0;
        for s in inputs {
            let (n2, c, h2, w2) = s.nchw()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: {} vs {}",
                    inputs[0], s
                )));
            }
            c_total += c;
        }
        Shape::new(&[n, c_total, h, w])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let shapes: Vec<&Shape> = inputs.iter().map(|t| t.shape()).collect();
        let out_shape = <Self as Operation<T>>::output_shape(self, &shapes).expect("validated");
        let (n, c_total, h, w) = out_shape.nchw().expect("nchw");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for t in inputs {
                let c = t.dims()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Tensor::from_shape(out_shape, out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, c_total, h, w) = ctx.grad.shape().nchw().expect("nchw");
        let plane = h * w;
        let g = ctx.grad.data();
        let mut offset = 0;
        ctx.inputs
            .iter()
            .zip(ctx.needs)
            .map(|(t, &need)| {
                let c = t.dims()[1];
                let start = offset;
                offset += c;
                need.then(|| {
                    let mut out = Vec::with_capacity(t.numel());
                    for b in 0..n {
                        let base = (b * c_total + start) * plane;
                        out.extend_from_slice(&g[base..base + c * plane]);
                    }
                    Tensor::from_shape(t.shape().clone(), out).expect("shape")
                })
            })
            .collect()
    }
}

/// Channels `start..start+len` of an NCHW tensor.
#[derive(Debug, Clone, Copy)]
pub struct SliceChannels {
    pub start: usize,
    pub len: usize,
}

impl<T: Scalar> Operation<T> for SliceChannels {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("slice_channels", inputs, 1)?;
        let (n, c, h, w) = inputs[0].nchw()?;
        if self.len == 0 || self.start + self.len > c {
            return Err(Error::shape(format!(
                "slice_channels {}..{} out of {c}",
                self.start,
                self.start + self.len
            )));
        }
        Shape::new(&[n, self.len, h, w])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (n, c, h, w) = x.shape().nchw().expect("nchw");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * self.len * plane);
        for b in 0..n {
            let base = (b * c + self.start) * plane;
            out.extend_from_slice(&x.data()[base..base + self.len * plane]);
        }
        Tensor::new(&[n, self.len, h, w], out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let (n, c, h, w) = x.shape().nchw().expect("nchw");
        let plane = h * w;
        let mut dx = Tensor::zeros_like(x);
        let g = ctx.grad.data();
        for b in 0..n {
            let base = (b * c + self.start) * plane;
            dx.data_mut()[base..base + self.len * plane]
                .copy_from_slice(&g[b * self.len * plane..(b + 1) * self.len * plane]);
        }
        vec![Some(dx)]
    }
}

/// `x * w` with `w` of length C broadcast over N, H, W.
#[derive(Debug, Clone, Copy)]
pub struct ChannelScale;

impl<T: Scalar> Operation<T> for ChannelScale {
    fn name(&self) -> &'static str {
        "channel_scale"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        arity("channel_scale", inputs, 2)?;
        let (_, c, _, _) = inputs[0].nchw()?;
        if inputs[1].dims() != [c] {
            return Err(Error::shape(format!(
                "channel_scale: weight {} does not match {c} channels",
                inputs[1]
            )));
        }
        Ok(inputs[0].clone())
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, w) = (inputs[0], inputs[1]);
        let (_, c, h, wd) = x.shape().nchw().expect("nchw");
        let plane = h * wd;
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let s = w.data()[i % c];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Tensor::from_shape(x.shape().clone(), out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (_, c, h, wd) = x.shape().nchw().expect("nchw");
        let plane = h * wd;
        let g = ctx.grad.data();
        let dx = ctx.needs[0].then(|| {
            let mut dx = g.to_vec();
            for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                let s = w.data()[i % c];
                chunk.iter_mut().for_each(|v| *v *= s);
            }
            Tensor::from_shape(x.shape().clone(), dx).expect("shape")
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![T::zero(); c];
            for (i, (gc, xc)) in g.chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                dw[i % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
            }
            Tensor::new(&[c], dw).expect("shape")
        });
        vec![dx, dw]
    }
}

/// Convenience wrappers so model code reads as plain calls.
impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(Add, &[a, b])
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(Sub, &[a, b])
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(Mul, &[a, b])
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Relu::new(), &[x])
    }

    pub fn scale(&mut self, x: &Var<T>, factor: T) -> Result<Var<T>> {
        self.apply(Scale::new(factor), &[x])
    }

    pub fn add_scalar(&mut self, x: &Var<T>, offset: T) -> Result<Var<T>> {
        self.apply(AddScalar::new(offset), &[x])
    }

    pub fn square(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Square::new(), &[x])
    }

    pub fn sqrt(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Sqrt::new(), &[x])
    }

    pub fn abs(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Abs::new(), &[x])
    }

    /// Elementwise `sqrt(x^2 + eps^2)`.
    pub fn charbonnier(&mut self, x: &Var<T>, eps: T) -> Result<Var<T>> {
        self.apply(Charbonnier::new(eps), &[x])
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Sum, &[x])
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Mean, &[x])
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(MatMul, &[a, b])
    }

    pub fn transpose(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(TransposeLast2, &[x])
    }

    pub fn softmax_rows(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(SoftmaxRows, &[x])
    }

    pub fn reshape(&mut self, x: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        self.apply(Reshape(dims.to_vec()), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[&Var<T>]) -> Result<Var<T>> {
        if xs.len() == 1 {
            xs[0].shape().nchw()?;
            return Ok(xs[0].clone());
        }
        self.apply(ConcatChannels, xs)
    }

    pub fn slice_channels(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        self.apply(SliceChannels { start, len }, &[x])
    }

    /// Splits along channels into pieces of the given sizes.
    pub fn split_channels(&mut self, x: &Var<T>, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        let (_, c, _, _) = x.shape().nchw()?;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not add up to {c} channels"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn channel_scale(&mut self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        self.apply(ChannelScale, &[x, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, grad_close};

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::record();
        let i2 = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(&i2, &b).unwrap();
        assert_eq!(c.tensor().unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.input(t(&[1, 1], &[2.0]));
        let b = tape.input(t(&[1, 1], &[3.0]));
        assert_eq!(tape.matmul(&a, &b).unwrap().tensor().unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::record();
        let a = tape.input(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.input(Tensor::zeros(&[2, 3]).unwrap());
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2x3]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum_against_identity() {
        let mut tape = Tape::<f64>::record();
        let a = tape.input_with_grad(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(&a, &b).unwrap();
        let s = tape.sum(&c).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.wrt(&a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        let fd = finite_diff(
            |x| {
                let mut tp = Tape::<f64>::inference();
                let a = tp.input(x.clone());
                let b = tp.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
                let c = tp.matmul(&a, &b).unwrap();
                c.tensor().unwrap().sum()
            },
            &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            1e-6,
        );
        for v in fd.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.input(t(&[2, 2], &[0.0, 0.0, 1f64.ln(), 3f64.ln()]));
        let y = tape.softmax_rows(&x).unwrap();
        let d = y.tensor().unwrap().data().to_vec();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.25).abs() < 1e-15 && (d[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f64>::record();
        let x = tape.input_with_grad(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.tensor().unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        // zero gradient exactly at the kink
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::<f64>::record();
        let x = tape.input_with_grad(t(&[2], &[3.0, -3.0]));
        let y = tape.relu(&x).unwrap();
        let s = tape.sum(&y).unwrap();
        assert_eq!(tape.backward(&s).unwrap().wrt(&x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn mean_of_constant() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.input(Tensor::full(&[2, 3], 1.25).unwrap());
        assert_eq!(tape.mean(&x).unwrap().tensor().unwrap().data(), &[1.25]);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut tape = Tape::<f64>::record();
        let a = tape.input(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let b = tape.input(t(&[1, 3, 1, 1], &[3.0, 4.0, 5.0]));
        let c = tape.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[1, 5, 1, 1]);
        let parts = tape.split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0].tensor().unwrap(), a.tensor().unwrap());
        assert_eq!(parts[1].tensor().unwrap(), b.tensor().unwrap());
        let single = tape.concat_channels(&[&a]).unwrap();
        assert_eq!(single.tensor().unwrap(), a.tensor().unwrap());
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut tape = Tape::<f64>::record();
        let a = tape.input(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        let b = tape.input(Tensor::zeros(&[1, 2, 3, 2]).unwrap());
        assert!(matches!(tape.concat_channels(&[&a, &b]), Err(Error::Shape(_))));
        assert!(tape.split_channels(&a, &[1, 2]).is_err());
    }

    #[test]
    fn concat_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::record();
        let a = tape.input_with_grad(Tensor::from_fn(&[2, 2, 2, 1], |i| i as f64).unwrap());
        let b = tape.input_with_grad(Tensor::from_fn(&[2, 1, 2, 1], |i| -(i as f64)).unwrap());
        let c = tape.concat_channels(&[&a, &b]).unwrap();
        let s = tape.sum(&c).unwrap();
        let g = tape.backward(&s).unwrap();
        assert!(g.wrt(&a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.wrt(&b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_scale_grad_matches_fd() {
        let x0 = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.7).sin()).unwrap();
        let w0 = t(&[3], &[0.3, -1.2, 2.0]);
        let mut tape = Tape::<f64>::record();
        let x = tape.input_with_grad(x0.clone());
        let w = tape.input_with_grad(w0.clone());
        let y = tape.channel_scale(&x, &w).unwrap();
        let sq = tape.square(&y).unwrap();
        let s = tape.sum(&sq).unwrap();
        let g = tape.backward(&s).unwrap();
        let fd = finite_diff(
            |wv| {
                let mut tp = Tape::<f64>::inference();
                let x = tp.input(x0.clone());
                let w = tp.input(wv.clone());
                let y = tp.channel_scale(&x, &w).unwrap();
                y.tensor().unwrap().data().iter().map(|v| v * v).sum()
            },
            &w0,
            1e-6,
        );
        for (a, n) in g.wrt(&w).unwrap().data().iter().zip(fd.data()) {
            assert!(grad_close(*a, *n, 1e-6, 1e-9), "{a} vs {n}");
        }
    }
}
