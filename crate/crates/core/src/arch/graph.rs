//! Layer tree, forward interpreter and reverse-mode backward pass.
//!
//! A network is a sequence of [`Node`]s. Composite nodes (`Concat`,
//! `Residual`) own parallel branches, each itself a node sequence. Parameters
//! live in one flat, ordered list and nodes refer to them by index, so the
//! enumeration order is the construction order: input to output, branches
//! left to right, a block's projection after its branches, and within a layer
//! `kernel`, `bias`, `gamma`, `beta`.

use crate::error::{Error, Result};
use crate::nn::{self, BnCache, BnState, Mode, Padding};
use crate::tensor::{s, Scalar, Tensor};

pub type ParamId = usize;

/// One named parameter tensor with its gradient buffer and freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Ordinal of the parameterized layer owning this tensor, counted from
    /// the input starting at 0.
    pub layer: usize,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, layer: usize) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            layer,
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            trainable: self.trainable,
            layer: self.layer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnRef {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the model's running-statistics list.
    pub state: usize,
}

/// Convolution, optionally followed by batch normalization and ReLU. Counts
/// as a single parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BnRef>,
    pub relu: bool,
    pub stride: usize,
    pub padding: Padding,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseUnit {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Fixed affine map `x·scale + shift` (maps [0,1] pixels to [-1,1]).
    Affine {
        name: String,
        scale: f64,
        shift: f64,
    },
    Conv(ConvUnit),
    MaxPool {
        name: String,
        window: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        name: String,
        window: usize,
        stride: usize,
        padding: Padding,
    },
    /// Parallel branches joined by channel concatenation.
    Concat {
        name: String,
        branches: Vec<Vec<Node>>,
    },
    /// `relu(x + scale · projection(concat(branches(x))))`.
    Residual {
        name: String,
        branches: Vec<Vec<Node>>,
        projection: ConvUnit,
        scale: f64,
    },
    GlobalAvgPool {
        name: String,
    },
}

impl Node {
    pub fn name(&self) -> &str {
        match self {
            Node::Affine { name, .. }
            | Node::MaxPool { name, .. }
            | Node::AvgPool { name, .. }
            | Node::Concat { name, .. }
            | Node::Residual { name, .. }
            | Node::GlobalAvgPool { name } => name,
            Node::Conv(u) => &u.name,
        }
    }

    /// Highest parameterized-layer ordinal inside this node.
    pub fn last_layer(&self) -> Option<usize> {
        match self {
            Node::Conv(u) => Some(u.layer),
            Node::Concat { branches, .. } => branches.iter().flatten().filter_map(Node::last_layer).max(),
            Node::Residual { projection, .. } => Some(projection.layer),
            _ => None,
        }
    }
}

/// Per-node record kept by a recording forward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Affine,
    Conv {
        input: Tensor<T>,
        bn: Option<BnCache<T>>,
        output: Tensor<T>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Tensor<T>,
    },
    Concat {
        widths: Vec<usize>,
        branches: Vec<Vec<Cache<T>>>,
    },
    Residual {
        widths: Vec<usize>,
        branches: Vec<Vec<Cache<T>>>,
        projection: Box<Cache<T>>,
        output: Tensor<T>,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
}

/// Read-only forward context.
pub(crate) struct Forward<'a, T> {
    pub params: &'a [LayerParams<T>],
    pub bn_states: &'a [BnState<T>],
    pub mode: Mode,
    pub record: bool,
    /// New running statistics produced by train-mode batch normalization.
    pub bn_updates: Vec<(usize, BnState<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(params: &'a [LayerParams<T>], bn_states: &'a [BnState<T>], mode: Mode, record: bool) -> Self {
        Self {
            params,
            bn_states,
            mode,
            record,
            bn_updates: Vec::new(),
        }
    }

    pub fn run_seq(&mut self, nodes: &[Node], mut x: Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::new();
        for node in nodes {
            let (y, cache) = self.run(node, x)?;
            if let Some(c) = cache {
                caches.push(c);
            }
            x = y;
        }
        Ok((x, caches))
    }

    fn keep(&self, c: Cache<T>) -> Option<Cache<T>> {
        self.record.then_some(c)
    }

    fn run(&mut self, node: &Node, x: Tensor<T>) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        match node {
            Node::Affine { scale, shift, .. } => {
                let (a, b) = (s::<T>(*scale), s::<T>(*shift));
                Ok((x.map(|v| v * a + b), self.keep(Cache::Affine)))
            }
            Node::Conv(unit) => self.conv(unit, x),
            Node::MaxPool {
                window,
                stride,
                padding,
                ..
            } => {
                let (y, argmax) = nn::maxpool2d(&x, *window, *stride, *padding)?;
                let cache = self.keep(Cache::MaxPool {
                    input_shape: x.shape().to_vec(),
                    argmax,
                });
                Ok((y, cache))
            }
            Node::AvgPool {
                window,
                stride,
                padding,
                ..
            } => {
                let y = nn::avgpool2d(&x, *window, *stride, *padding)?;
                Ok((y, self.keep(Cache::AvgPool { input: x })))
            }
            Node::Concat { branches, .. } => {
                let (y, widths, caches) = self.branches(branches, &x)?;
                Ok((
                    y,
                    self.keep(Cache::Concat {
                        widths,
                        branches: caches,
                    }),
                ))
            }
            Node::Residual {
                branches,
                projection,
                scale,
                ..
            } => {
                let (mixed, widths, caches) = self.branches(branches, &x)?;
                let (up, proj_cache) = self.conv(projection, mixed)?;
                let sum = nn::residual_add_scaled(&x, &up, s(*scale))?;
                let y = nn::relu(&sum);
                let cache = self.record.then(|| Cache::Residual {
                    widths,
                    branches: caches,
                    projection: Box::new(proj_cache.expect("recording")),
                    output: y.clone(),
                });
                Ok((y, cache))
            }
            Node::GlobalAvgPool { .. } => {
                let y = nn::global_avgpool(&x)?;
                Ok((
                    y,
                    self.keep(Cache::GlobalAvgPool {
                        input_shape: x.shape().to_vec(),
                    }),
                ))
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn branches(
        &mut self,
        branches: &[Vec<Node>],
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<usize>, Vec<Vec<Cache<T>>>)> {
        let mut outs = Vec::with_capacity(branches.len());
        let mut caches = Vec::with_capacity(branches.len());
        for branch in branches {
            let (y, c) = self.run_seq(branch, x.clone())?;
            outs.push(y);
            caches.push(c);
        }
        let widths = outs.iter().map(|t| *t.shape().last().unwrap()).collect();
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        Ok((nn::concat_channels(&refs)?, widths, caches))
    }

    fn conv(&mut self, unit: &ConvUnit, x: Tensor<T>) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let p = self.params;
        let bias = unit.bias.map(|b| &p[b].value);
        let mut y = nn::conv2d(&x, &p[unit.kernel].value, bias, unit.stride, unit.padding)?;
        let mut bn_cache = None;
        if let Some(bn) = unit.bn {
            // A frozen layer normalizes with its running statistics and leaves
            // them untouched, even during training.
            let mode = if p[bn.gamma].trainable { self.mode } else { Mode::Eval };
            let (out, state, cache) = nn::batchnorm(
                &y,
                &p[bn.gamma].value,
                &p[bn.beta].value,
                mode,
                &self.bn_states[bn.state],
            )?;
            if mode == Mode::Train {
                self.bn_updates.push((bn.state, state));
            }
            y = out;
            bn_cache = Some(cache);
        }
        if unit.relu {
            y = nn::relu(&y);
        }
        let cache = self.record.then(|| Cache::Conv {
            input: x,
            bn: bn_cache,
            output: y.clone(),
        });
        Ok((y, cache))
    }
}

/// Backward context. `first_trainable` is the lowest layer ordinal whose
/// parameters receive gradients; nothing below it is differentiated.
pub(crate) struct Backward<'a, T> {
    pub params: &'a [LayerParams<T>],
    pub grads: Vec<Option<Tensor<T>>>,
    pub first_trainable: usize,
}

impl<'a, T: Scalar> Backward<'a, T> {
    pub fn new(params: &'a [LayerParams<T>]) -> Self {
        let first_trainable = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.layer)
            .min()
            .unwrap_or(usize::MAX);
        Self {
            params,
            grads: vec![None; params.len()],
            first_trainable,
        }
    }

    fn needs_input_grad(&self, upstream: Option<usize>) -> bool {
        upstream.is_some_and(|l| l >= self.first_trainable)
    }

    /// `upstream` is the highest layer ordinal feeding this sequence's input.
    /// Returns the gradient with respect to the input when some trainable
    /// layer lies upstream, `None` otherwise.
    pub fn run_seq(
        &mut self,
        nodes: &[Node],
        caches: &[Cache<T>],
        grad: Tensor<T>,
        upstream: Option<usize>,
    ) -> Result<Option<Tensor<T>>> {
        // upstream layer of each node's input
        let mut ups = Vec::with_capacity(nodes.len());
        let mut u = upstream;
        for node in nodes {
            ups.push(u);
            u = u.max(node.last_layer());
        }
        let mut g = grad;
        for i in (0..nodes.len()).rev() {
            let touches_params = nodes[i].last_layer().is_some_and(|l| l >= self.first_trainable);
            if !touches_params && !self.needs_input_grad(ups[i]) {
                return Ok(None);
            }
            match self.run(&nodes[i], &caches[i], g, ups[i])? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    fn run(
        &mut self,
        node: &Node,
        cache: &Cache<T>,
        grad: Tensor<T>,
        upstream: Option<usize>,
    ) -> Result<Option<Tensor<T>>> {
        let want_input = self.needs_input_grad(upstream);
        match (node, cache) {
            (Node::Affine { scale, .. }, Cache::Affine) => {
                let a = s::<T>(*scale);
                Ok(want_input.then(|| grad.map(|g| g * a)))
            }
            (Node::Conv(unit), c @ Cache::Conv { .. }) => self.conv(unit, c, grad, want_input),
            (Node::MaxPool { .. }, Cache::MaxPool { input_shape, argmax }) => {
                Ok(Some(nn::maxpool2d_backward(input_shape, argmax, &grad)?))
            }
            (
                Node::AvgPool {
                    window,
                    stride,
                    padding,
                    ..
                },
                Cache::AvgPool { input },
            ) => Ok(Some(nn::avgpool2d_backward(input, *window, *stride, *padding, &grad)?)),
            (
                Node::Concat { branches, .. },
                Cache::Concat {
                    widths,
                    branches: caches,
                },
            ) => self.branches(branches, caches, widths, &grad, upstream),
            (
                Node::Residual {
                    branches,
                    projection,
                    scale,
                    ..
                },
                Cache::Residual {
                    widths,
                    branches: caches,
                    projection: proj_cache,
                    output,
                },
            ) => {
                let d = nn::relu_backward(output, &grad)?;
                let (d_short, d_up) = nn::residual_add_scaled_backward(&d, s(*scale));
                let branch_top = branches.iter().flatten().filter_map(Node::last_layer).max();
                let proj_upstream = upstream.max(branch_top);
                let want_mixed = self.needs_input_grad(proj_upstream);
                let d_mixed = self.conv(projection, proj_cache, d_up, want_mixed)?;
                let d_branches = match d_mixed {
                    Some(dm) => self.branches(branches, caches, widths, &dm, upstream)?,
                    None => None,
                };
                if !want_input {
                    return Ok(None);
                }
                Ok(Some(match d_branches {
                    Some(mut db) => {
                        db.add_assign(&d_short)?;
                        db
                    }
                    None => d_short,
                }))
            }
            (Node::GlobalAvgPool { .. }, Cache::GlobalAvgPool { input_shape }) => {
                Ok(Some(nn::global_avgpool_backward(input_shape, &grad)?))
            }
            _ => Err(Error::invalid(
                "backward",
                format!("cache does not match node `{}`", node.name()),
            )),
        }
    }

    fn branches(
        &mut self,
        branches: &[Vec<Node>],
        caches: &[Vec<Cache<T>>],
        widths: &[usize],
        grad: &Tensor<T>,
        upstream: Option<usize>,
    ) -> Result<Option<Tensor<T>>> {
        let parts = nn::split_channels(grad, widths)?;
        let mut total: Option<Tensor<T>> = None;
        for ((branch, cache), part) in branches.iter().zip(caches).zip(parts) {
            if let Some(dx) = self.run_seq(branch, cache, part, upstream)? {
                match total.as_mut() {
                    Some(t) => t.add_assign(&dx)?,
                    None => total = Some(dx),
                }
            }
        }
        Ok(total.filter(|_| self.needs_input_grad(upstream)))
    }

    fn conv(
        &mut self,
        unit: &ConvUnit,
        cache: &Cache<T>,
        grad: Tensor<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let Cache::Conv { input, bn, output } = cache else {
            return Err(Error::invalid(
                "backward",
                format!("cache does not match `{}`", unit.name),
            ));
        };
        let p = self.params;
        let trainable = unit.layer >= self.first_trainable;
        let mut g = grad;
        if unit.relu {
            g = nn::relu_backward(output, &g)?;
        }
        if let (Some(bn), Some(bn_cache)) = (unit.bn, bn) {
            let bg = nn::batchnorm_backward(bn_cache, &p[bn.gamma].value, &g)?;
            if trainable {
                self.grads[bn.gamma] = Some(bg.gamma);
                self.grads[bn.beta] = Some(bg.beta);
            }
            g = bg.input;
        }
        let cg = nn::conv2d_backward(
            input,
            &p[unit.kernel].value,
            unit.stride,
            unit.padding,
            &g,
            want_input,
            trainable,
        )?;
        if trainable {
            self.grads[unit.kernel] = cg.kernel;
            if let Some(b) = unit.bias {
                self.grads[b] = Some(cg.bias);
            }
        }
        Ok(cg.input)
    }
}
