//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation goes through [`Tape::apply`], which validates shapes,
//! books the operation's multiply-accumulate cost under the current scope,
//! and then, depending on the [`Mode`]:
//!
//! * `Record` evaluates and appends a node (parents always precede
//!   children, so the node list is a topological order);
//! * `Inference` evaluates without keeping history;
//! * `Meta` propagates shapes and costs only, no data at all.
//!
//! Gradients from several use sites of one value are summed.

mod ops;
mod params;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub use ops::{
    Abs, Add, AddScalar, ChannelScale, Charbonnier, ConcatChannels, MatMul, Mean, Mul, Relu,
    Reshape, Scale, SliceChannels, SoftmaxRows, Sqrt, Square, Sub, Sum, TransposeLast2,
};
pub use params::{path_has_prefix, ParamId, ParamStore, Parameter};

/// What the multiply-accumulates of an operation are spent on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostKind {
    None,
    Conv,
    ConvTranspose,
    MatMul,
}

/// Multiply-accumulate count of one operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub kind: CostKind,
    pub macs: u64,
}

impl Cost {
    pub const FREE: Cost = Cost {
        kind: CostKind::None,
        macs: 0,
    };
}

/// Per-scope MAC totals split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub conv: u64,
    pub conv_transpose: u64,
    pub matmul: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.conv + self.conv_transpose + self.matmul
    }

    fn add(&mut self, cost: Cost) {
        match cost.kind {
            CostKind::None => {}
            CostKind::Conv => self.conv += cost.macs,
            CostKind::ConvTranspose => self.conv_transpose += cost.macs,
            CostKind::MatMul => self.matmul += cost.macs,
        }
    }

    pub fn merge(&mut self, other: &MacCounts) {
        self.conv += other.conv;
        self.conv_transpose += other.conv_transpose;
        self.matmul += other.matmul;
    }
}

/// Inputs handed to [`Operation::backward`].
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Which inputs need a gradient; others may be returned as `None`.
    pub needs: &'a [bool],
}

/// A differentiable operation. Implementations must be pure functions of
/// their inputs so that a tape can be replayed.
pub trait Operation<T: Scalar>: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Validates input shapes and returns the output shape.
    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape>;

    /// Evaluates the operation; shapes were already validated.
    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T>;

    /// Vector-Jacobian product: one entry per input.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;

    fn cost(&self, _inputs: &[&Shape], _output: &Shape) -> Cost {
        Cost::FREE
    }

    /// Which operands may carry several independent items stacked along
    /// the leading axis, given the recorded (single item) shapes.
    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::None
    }
}

/// See [`Operation::stackable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stackable {
    None,
    First,
    All,
}

impl Stackable {
    fn allows(self, position: usize) -> bool {
        match self {
            Stackable::None => false,
            Stackable::First => position == 0,
            Stackable::All => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Keep every node for backward and replay.
    Record,
    /// Evaluate only; intermediate values are freed as soon as unused.
    Inference,
    /// Shapes and costs only.
    Meta,
}

/// Handle to a value produced on a tape.
#[derive(Clone)]
pub struct Var<T> {
    tape: u64,
    node: Option<usize>,
    shape: Shape,
    value: Option<Arc<Tensor<T>>>,
    requires_grad: bool,
}

impl<T: Scalar> Var<T> {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    /// The evaluated value; `None` on a meta tape.
    pub fn value(&self) -> Option<&Tensor<T>> {
        self.value.as_deref()
    }

    /// The evaluated value, or a contract error on a meta tape.
    pub fn tensor(&self) -> Result<&Tensor<T>> {
        self.value()
            .ok_or_else(|| Error::contract("value requested from a meta tape"))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(node={:?}, shape={})", self.node, self.shape)
    }
}

enum Source<T> {
    Input,
    Param(ParamId),
    Op(Box<dyn Operation<T>>),
}

struct Node<T> {
    source: Source<T>,
    parents: Vec<usize>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Records operations for one forward pass.
pub struct Tape<T> {
    id: u64,
    mode: Mode,
    nodes: Vec<Node<T>>,
    scope: String,
    costs: BTreeMap<String, MacCounts>,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: Vec::new(),
            scope: String::new(),
            costs: BTreeMap::new(),
        }
    }

    pub fn record() -> Self {
        Self::new(Mode::Record)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn meta() -> Self {
        Self::new(Mode::Meta)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Runs `f` with `scope` as the current cost scope (a full dotted path).
    pub fn within<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = std::mem::replace(&mut self.scope, scope.to_string());
        let out = f(self);
        self.scope = saved;
        out
    }

    pub fn current_scope(&self) -> &str {
        &self.scope
    }

    /// MAC counts booked per scope.
    pub fn costs(&self) -> &BTreeMap<String, MacCounts> {
        &self.costs
    }

    /// Sum of MAC counts over every scope under `prefix`.
    pub fn costs_under(&self, prefix: &str) -> MacCounts {
        let mut total = MacCounts::default();
        for (scope, c) in &self.costs {
            if path_has_prefix(scope, prefix) {
                total.merge(c);
            }
        }
        total
    }

    pub fn total_macs(&self) -> u64 {
        self.costs.values().map(MacCounts::total).sum()
    }

    fn leaf(&mut self, value: Tensor<T>, source: Source<T>, requires_grad: bool) -> Var<T> {
        let shape = value.shape().clone();
        match self.mode {
            Mode::Meta => Var {
                tape: self.id,
                node: None,
                shape,
                value: None,
                requires_grad,
            },
            Mode::Inference => Var {
                tape: self.id,
                node: None,
                shape,
                value: Some(Arc::new(value)),
                requires_grad: false,
            },
            Mode::Record => {
                let value = Arc::new(value);
                self.push_node(source, Vec::new(), value, requires_grad, shape)
            }
        }
    }

    fn push_node(
        &mut self,
        source: Source<T>,
        parents: Vec<usize>,
        value: Arc<Tensor<T>>,
        requires_grad: bool,
        shape: Shape,
    ) -> Var<T> {
        let id = self.nodes.len();
        self.nodes.push(Node {
            source,
            parents,
            value: value.clone(),
            requires_grad,
        });
        Var {
            tape: self.id,
            node: Some(id),
            shape,
            value: Some(value),
            requires_grad,
        }
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, Source::Input, false)
    }

    /// An input whose gradient is wanted (see [`Gradients::wrt`]).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, Source::Input, true)
    }

    /// Places a shape-only placeholder on a meta tape.
    pub fn placeholder(&mut self, dims: &[usize]) -> Result<Var<T>> {
        let shape = Shape::new(dims)?;
        if self.mode != Mode::Meta {
            return Err(Error::contract("placeholders exist only on meta tapes"));
        }
        Ok(Var {
            tape: self.id,
            node: None,
            shape,
            value: None,
            requires_grad: false,
        })
    }

    /// Reads a parameter onto the tape without copying its data.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let value = store.get(id).shared_value().clone();
        let shape = value.shape().clone();
        match self.mode {
            Mode::Meta => Var {
                tape: self.id,
                node: None,
                shape,
                value: None,
                requires_grad: true,
            },
            Mode::Inference => Var {
                tape: self.id,
                node: None,
                shape,
                value: Some(value),
                requires_grad: false,
            },
            Mode::Record => self.push_node(Source::Param(id), Vec::new(), value, true, shape),
        }
    }

    /// Applies `op` to `inputs`, recording it according to the tape mode.
    pub fn apply<O: Operation<T> + 'static>(&mut self, op: O, inputs: &[&Var<T>]) -> Result<Var<T>> {
        for v in inputs {
            if v.tape != self.id {
                return Err(Error::contract(format!(
                    "{}: operand belongs to another tape",
                    op.name()
                )));
            }
        }
        let shapes: Vec<&Shape> = inputs.iter().map(|v| &v.shape).collect();
        let out_shape = op.output_shape(&shapes)?;
        let cost = op.cost(&shapes, &out_shape);
        if cost.kind != CostKind::None {
            self.costs.entry(self.scope.clone()).or_default().add(cost);
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        if self.mode == Mode::Meta {
            return Ok(Var {
                tape: self.id,
                node: None,
                shape: out_shape,
                value: None,
                requires_grad,
            });
        }
        let values: Vec<&Tensor<T>> = inputs
            .iter()
            .map(|v| v.value.as_deref().expect("evaluated operand"))
            .collect();
        let out = op.forward(&values);
        debug_assert_eq!(out.shape(), &out_shape, "{} shape", op.name());
        let out = Arc::new(out);
        match self.mode {
            Mode::Record => {
                let parents = inputs
                    .iter()
                    .map(|v| v.node.expect("recorded operand"))
                    .collect();
                Ok(self.push_node(Source::Op(Box::new(op)), parents, out, requires_grad, out_shape))
            }
            _ => Ok(Var {
                tape: self.id,
                node: None,
                shape: out_shape,
                value: Some(out),
                requires_grad: false,
            }),
        }
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if self.mode != Mode::Record {
            return Err(Error::contract("backward needs a recording tape"));
        }
        if root.tape != self.id {
            return Err(Error::contract("backward root belongs to another tape"));
        }
        if root.shape.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must have one element, got {}",
                root.shape
            )));
        }
        let root_id = root.node.expect("recorded root");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root_id + 1);
        grads.resize_with(root_id + 1, || None);
        grads[root_id] = Some(Tensor::filled(root.shape.clone(), T::one()));

        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.source {
                Source::Param(pid) => accumulate(out.params.entry(*pid), g),
                Source::Input => {
                    out.leaves.insert(id, g);
                }
                Source::Op(op) => {
                    let inputs: Vec<&Tensor<T>> = node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].value.as_ref())
                        .collect();
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect();
                    let ctx = BackwardCtx {
                        inputs: &inputs,
                        output: &node.value,
                        grad: &g,
                        needs: &needs,
                    };
                    let parent_grads = op.backward(&ctx);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        if let (Some(pg), true) = (pg, *need) {
                            debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "{}", op.name());
                            match &mut grads[p] {
                                Some(acc) => acc.add_assign(&pg).expect("gradient shape"),
                                slot @ None => *slot = Some(pg),
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Re-evaluates every recorded node from its parents' replayed values.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        if self.mode != Mode::Record {
            return Err(Error::contract("replay needs a recording tape"));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.source {
                Source::Input | Source::Param(_) => (*node.value).clone(),
                Source::Op(op) => {
                    let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &values[p]).collect();
                    op.forward(&inputs)
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Prepares cheap re-evaluations of `root` with parameter `param`
    /// replaced; only nodes between the two are recomputed.
    pub fn probe(&self, root: &Var<T>, param: ParamId) -> Result<Probe<'_, T>> {
        if self.mode != Mode::Record || root.tape != self.id {
            return Err(Error::contract("probe needs the recording tape of its root"));
        }
        if root.shape.numel() != 1 {
            return Err(Error::contract(format!("probe root must have one element, got {}", root.shape)));
        }
        let root_id = root.node.expect("recorded root");
        let mut needed = vec![false; root_id + 1];
        needed[root_id] = true;
        for id in (0..=root_id).rev() {
            if needed[id] {
                for &p in &self.nodes[id].parents {
                    needed[p] = true;
                }
            }
        }
        let mut dirty = vec![false; root_id + 1];
        let mut leaves = Vec::new();
        let mut order = Vec::new();
        for id in 0..=root_id {
            let node = &self.nodes[id];
            dirty[id] = match &node.source {
                Source::Param(pid) if *pid == param => {
                    leaves.push(id);
                    true
                }
                _ => node.parents.iter().any(|&p| dirty[p]),
            };
            if dirty[id] && needed[id] && matches!(node.source, Source::Op(_)) {
                order.push(id);
            }
        }
        let mut last_use = vec![usize::MAX; root_id + 1];
        for (k, &id) in order.iter().enumerate() {
            for &p in &self.nodes[id].parents {
                last_use[p] = k;
            }
        }
        Ok(Probe {
            tape: self,
            root: root_id,
            leaves,
            order,
            last_use,
            scratch: HashMap::new(),
            repeated: HashMap::new(),
        })
    }

    /// The recorded value of node `id`.
    pub fn recorded(&self, id: usize) -> Option<&Tensor<T>> {
        self.nodes.get(id).map(|n| n.value.as_ref())
    }

    /// Checks the topological-order invariant.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.parents.iter().all(|&p| p < i))
    }
}

/// See [`Tape::probe`].
pub struct Probe<'t, T> {
    tape: &'t Tape<T>,
    root: usize,
    leaves: Vec<usize>,
    order: Vec<usize>,
    /// Position in `order` of the last consumer of each node.
    last_use: Vec<usize>,
    scratch: HashMap<usize, Tensor<T>>,
    /// Clean operands tiled per batch size.
    repeated: HashMap<(usize, usize), Tensor<T>>,
}

fn stacked_shape(item: &Shape, batch: usize) -> Shape {
    let mut dims = item.dims().to_vec();
    match dims.first_mut() {
        Some(d) => *d *= batch,
        None => dims.push(batch),
    }
    Shape::new(&dims).expect("stacked shape")
}

fn tile<T: Scalar>(t: &Tensor<T>, batch: usize) -> Tensor<T> {
    let data = t.data().repeat(batch);
    Tensor::from_shape(stacked_shape(t.shape(), batch), data).expect("tiled shape")
}

impl<T: Scalar> Probe<'_, T> {
    /// Whether the parameter reaches the root at all.
    pub fn reaches_root(&self) -> bool {
        !self.leaves.is_empty() && (self.order.last() == Some(&self.root) || self.leaves.contains(&self.root))
    }

    /// Nodes recomputed per evaluation.
    pub fn cost(&self) -> usize {
        self.order.len()
    }

    /// The root's value with the parameter set to `value`.
    pub fn eval(&mut self, value: &Tensor<T>) -> T {
        if !self.reaches_root() {
            return self.tape.nodes[self.root].value.data()[0];
        }
        self.scratch.clear();
        for &leaf in &self.leaves {
            self.scratch.insert(leaf, value.clone());
        }
        for &id in &self.order {
            let node = &self.tape.nodes[id];
            let Source::Op(op) = &node.source else { unreachable!() };
            let out = {
                let inputs: Vec<&Tensor<T>> = node
                    .parents
                    .iter()
                    .map(|p| self.scratch.get(p).unwrap_or(&self.tape.nodes[*p].value))
                    .collect();
                op.forward(&inputs)
            };
            self.scratch.insert(id, out);
        }
        self.scratch[&self.root].data()[0]
    }

    /// [`Probe::eval`] for several parameter values at once.
    ///
    /// Values travel through the graph stacked along the leading axis.
    /// Operations that cannot take stacked operands run once per item.
    pub fn eval_batch(&mut self, values: &[Tensor<T>]) -> Vec<T> {
        let batch = values.len();
        if !self.reaches_root() {
            return vec![self.tape.nodes[self.root].value.data()[0]; batch];
        }
        if batch <= 1 {
            return values.iter().map(|v| self.eval(v)).collect();
        }
        let nodes = &self.tape.nodes;
        let item_shape = nodes[self.leaves[0]].value.shape();
        let mut data = Vec::with_capacity(batch * item_shape.numel());
        for v in values {
            assert_eq!(v.shape(), item_shape, "probe value shape");
            data.extend_from_slice(v.data());
        }
        let stacked = Tensor::from_shape(stacked_shape(item_shape, batch), data).expect("stacked shape");
        let mut live: Vec<Option<Tensor<T>>> = (0..=self.root).map(|_| None).collect();
        for &leaf in &self.leaves {
            live[leaf] = Some(stacked.clone());
        }
        for (k, &id) in self.order.iter().enumerate() {
            let node = &nodes[id];
            let Source::Op(op) = &node.source else { unreachable!() };
            let shapes: Vec<&Shape> = node.parents.iter().map(|&p| nodes[p].value.shape()).collect();
            let mode = op.stackable(&shapes);
            let direct = node
                .parents
                .iter()
                .enumerate()
                .all(|(pos, &p)| live[p].is_none() || mode.allows(pos));
            let out = if direct {
                for (pos, &p) in node.parents.iter().enumerate() {
                    if live[p].is_none() && mode.allows(pos) {
                        self.repeated.entry((p, batch)).or_insert_with(|| tile(&nodes[p].value, batch));
                    }
                }
                let inputs: Vec<&Tensor<T>> = node
                    .parents
                    .iter()
                    .enumerate()
                    .map(|(pos, &p)| match &live[p] {
                        Some(t) => t,
                        None if mode.allows(pos) => &self.repeated[&(p, batch)],
                        None => nodes[p].value.as_ref(),
                    })
                    .collect();
                op.forward(&inputs)
            } else {
                let mut data = Vec::with_capacity(batch * node.value.numel());
                for i in 0..batch {
                    let items: Vec<Option<Tensor<T>>> = node
                        .parents
                        .iter()
                        .map(|&p| {
                            live[p].as_ref().map(|t| {
                                let n = nodes[p].value.numel();
                                Tensor::from_shape(nodes[p].value.shape().clone(), t.data()[i * n..(i + 1) * n].to_vec())
                                    .expect("item shape")
                            })
                        })
                        .collect();
                    let inputs: Vec<&Tensor<T>> = node
                        .parents
                        .iter()
                        .zip(&items)
                        .map(|(&p, item)| item.as_ref().unwrap_or(&nodes[p].value))
                        .collect();
                    data.extend_from_slice(op.forward(&inputs).data());
                }
                Tensor::from_shape(stacked_shape(node.value.shape(), batch), data).expect("stacked shape")
            };
            debug_assert_eq!(out.numel(), batch * node.value.numel(), "{}", op.name());
            for &p in &node.parents {
                if self.last_use[p] == k {
                    live[p] = None;
                }
            }
            live[id] = Some(out);
        }
        live[self.root].take().expect("root value").data().to_vec()
    }
}

fn accumulate<T: Scalar>(entry: std::collections::hash_map::Entry<'_, ParamId, Tensor<T>>, g: Tensor<T>) {
    use std::collections::hash_map::Entry;
    match entry {
        Entry::Occupied(mut e) => e.get_mut().add_assign(&g).expect("gradient shape"),
        Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to an input created by [`Tape::input_with_grad`].
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.leaves.get(&n))
    }

    pub fn reached_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

/// Central finite differences of a scalar function, in `f64`.
///
/// Each element `i` gets `(f(x + h e_i) - f(x - h e_i)) / 2h`. This never
/// touches the tape, so it serves as an independent gradient oracle.
pub fn finite_diff(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    assert!(h > 0.0, "finite_diff step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// [`finite_diff`] with the function evaluated on `batch` points at a time.
pub fn finite_diff_batched(
    mut f: impl FnMut(&[Tensor<f64>]) -> Vec<f64>,
    x: &Tensor<f64>,
    h: f64,
    batch: usize,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite_diff step must be positive");
    let per = (batch / 2).max(1);
    let mut out = Tensor::zeros_like(x);
    let mut start = 0;
    while start < x.numel() {
        let end = (start + per).min(x.numel());
        let mut points = Vec::with_capacity(2 * (end - start));
        for i in start..end {
            for step in [h, -h] {
                let mut p = x.clone();
                p.data_mut()[i] += step;
                points.push(p);
            }
        }
        let values = f(&points);
        for (i, pair) in (start..end).zip(values.chunks(2)) {
            out.data_mut()[i] = (pair[0] - pair[1]) / (2.0 * h);
        }
        start = end;
    }
    out
}

/// Relative error with an absolute floor: pairs closer than `abs_floor`
/// count as equal.
pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

/// Relative error used in reports.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
