//! Inception-ResNet-v2 assembly, execution and freeze policy.

mod builder;
pub mod config;
pub mod graph;

use std::fmt::Write as _;

pub use builder::INIT_SIGMA;
pub use config::ModelConfig;
pub use graph::{BnRef, Cache, ConvUnit, DenseUnit, LayerParams, Node, ParamId};

use crate::error::{Error, Result};
use crate::nn::{self, window_geometry, BnState, Mode};
use crate::tensor::{Scalar, Tensor};
use builder::{init_kernel, Builder};
use graph::{Backward, Forward};

/// Assembled network: layer tree, parameters in enumeration order and
/// batch-normalization running statistics.
#[derive(Clone, Debug)]
pub struct ModelGraph<T = f32> {
    config: ModelConfig,
    body: Vec<Node>,
    head: DenseUnit,
    features: usize,
    params: Vec<LayerParams<T>>,
    bn_states: Vec<BnState<T>>,
    bn_names: Vec<String>,
    layers: usize,
}

/// Everything a backward pass needs from one recording forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T = f32> {
    body: Vec<Cache<T>>,
    dropout_mask: Vec<T>,
    head_input: Tensor<T>,
    bn_updates: Vec<(usize, BnState<T>)>,
}

/// One line of the per-layer shape table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub name: String,
    pub kind: String,
    /// Per-sample output shape.
    pub shape: Vec<usize>,
    pub params: usize,
}

/// Builds the float32 network described by `cfg`.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelGraph> {
    ModelGraph::build(cfg)
}

impl<T: Scalar> ModelGraph<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::<T>::new(cfg);
        let (body, head, features) = b.network();
        let model = Self {
            config: cfg.clone(),
            body,
            head,
            features,
            params: b.params,
            bn_states: b.bn_states,
            bn_names: b.bn_names,
            layers: b.layers,
        };
        model.shape_table()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn body(&self) -> &[Node] {
        &self.body
    }

    pub fn head(&self) -> &DenseUnit {
        &self.head
    }

    /// Width of the pooled feature vector feeding the classifier head.
    pub fn feature_width(&self) -> usize {
        self.features
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&LayerParams<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn_states
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn_states
    }

    /// Name of the layer owning each running-statistics entry.
    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    /// Number of parameterized layers (a convolution with its batch
    /// normalization counts once; the head counts once).
    pub fn layer_count(&self) -> usize {
        self.layers
    }

    /// Layer ordinal of every parameter tensor, in enumeration order.
    pub fn param_layer_index(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.layer).collect()
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Makes exactly the last `trainable_layers` parameterized layers
    /// trainable and freezes the rest.
    pub fn apply_freeze(&mut self, trainable_layers: usize) -> Result<()> {
        if trainable_layers > self.layers {
            return Err(Error::TooManyTrainableLayers {
                requested: trainable_layers,
                available: self.layers,
            });
        }
        let cutoff = self.layers - trainable_layers;
        for p in &mut self.params {
            p.trainable = p.layer >= cutoff;
        }
        Ok(())
    }

    /// Overrides the head's dropout rate.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {rate}")));
        }
        self.config.dropout_rate = rate;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config.clone(),
            body: self.body.clone(),
            head: self.head.clone(),
            features: self.features,
            params: self.params.iter().map(LayerParams::cast).collect(),
            bn_states: self.bn_states.iter().map(BnState::cast).collect(),
            bn_names: self.bn_names.clone(),
            layers: self.layers,
        }
    }

    /// Replaces the classifier head with a freshly initialized
    /// `features × num_classes` layer. Nothing else is touched.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let (w, b) = (self.head.weight, self.head.bias);
        let trainable = self.params[w].trainable;
        let wname = self.params[w].name.clone();
        let bname = self.params[b].name.clone();
        let layer = self.head.layer;
        self.params[w] = LayerParams::new(
            wname.clone(),
            init_kernel(vec![self.features, num_classes], seed, &wname),
            layer,
        );
        self.params[b] = LayerParams::new(bname, Tensor::zeros(vec![num_classes]), layer);
        self.params[w].trainable = trainable;
        self.params[b].trainable = trainable;
        self.config.num_classes = num_classes;
        Ok(())
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.input_size, c.input_size, c.input_channels];
        if batch.rank() != 4 || batch.shape()[1..] != want {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected input (B, {}, {}, {}), got {:?}",
                    want[0],
                    want[1],
                    want[2],
                    batch.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Pooled feature vectors (eval mode), the input of the classifier head.
    pub fn features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut fwd = Forward::new(&self.params, &self.bn_states, Mode::Eval, false);
        Ok(fwd.run_seq(&self.body, batch.clone())?.0)
    }

    /// Eval-mode logits.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(batch)?;
        nn::dense(
            &f,
            &self.params[self.head.weight].value,
            &self.params[self.head.bias].value,
        )
    }

    /// Recording forward pass; nothing in the model changes. Dropout is
    /// applied in train mode only, drawn from `dropout_seed`.
    pub fn forward_tape(&self, batch: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(batch)?;
        let mut fwd = Forward::new(&self.params, &self.bn_states, mode, true);
        let (features, body) = fwd.run_seq(&self.body, batch.clone())?;
        let bn_updates = std::mem::take(&mut fwd.bn_updates);
        let (head_input, dropout_mask) = match mode {
            Mode::Train => nn::dropout(&features, self.config.dropout_rate, dropout_seed),
            Mode::Eval => {
                let n = features.len();
                (features, vec![T::one(); n])
            }
        };
        let logits = nn::dense(
            &head_input,
            &self.params[self.head.weight].value,
            &self.params[self.head.bias].value,
        )?;
        Ok((
            logits,
            Tape {
                body,
                dropout_mask,
                head_input,
                bn_updates,
            },
        ))
    }

    /// Forward pass that also advances the running statistics in train mode.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        let (logits, tape) = self.forward_tape(batch, mode, dropout_seed)?;
        self.commit_running_stats(&tape);
        Ok(logits)
    }

    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        for (i, state) in &tape.bn_updates {
            self.bn_states[*i] = state.clone();
        }
    }

    /// Back-propagates `grad_logits` and overwrites every parameter's `grad`.
    /// Frozen parameters get a zero gradient and layers below the lowest
    /// trainable one are not differentiated at all.
    pub fn backward(&mut self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<()> {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        let mut bwd = Backward::new(&self.params);
        if bwd.first_trainable == usize::MAX {
            return Ok(());
        }
        let head = &self.head;
        let dg = nn::dense_backward(&tape.head_input, &self.params[head.weight].value, grad_logits)?;
        if head.layer >= bwd.first_trainable {
            bwd.grads[head.weight] = Some(dg.weight);
            bwd.grads[head.bias] = Some(dg.bias);
        }
        if bwd.first_trainable < head.layer {
            let d_features = nn::dropout_backward(&tape.dropout_mask, &dg.input);
            bwd.run_seq(&self.body, &tape.body, d_features, None)?;
        }
        let grads = bwd.grads;
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                if p.trainable {
                    p.grad = g;
                }
            }
        }
        Ok(())
    }

    /// Train-mode forward, mean softmax cross-entropy and backward in one
    /// step. Running statistics are advanced. Returns the batch loss.
    pub fn loss_and_grads(&mut self, batch: &Tensor<T>, labels: &[usize], dropout_seed: u64) -> Result<T> {
        let (logits, tape) = self.forward_tape(batch, Mode::Train, dropout_seed)?;
        let (loss, grad) = nn::softmax_cross_entropy(&logits, labels)?;
        self.backward(&tape, &grad)?;
        self.commit_running_stats(&tape);
        Ok(loss)
    }

    /// Per-layer shape table for one sample. Fails with
    /// [`Error::SpatialUnderflow`] naming the first stage whose output would
    /// be empty.
    pub fn shape_table(&self) -> Result<Vec<ShapeRow>> {
        let c = &self.config;
        let mut rows = vec![ShapeRow {
            name: "input".into(),
            kind: "input".into(),
            shape: vec![c.input_size, c.input_size, c.input_channels],
            params: 0,
        }];
        let dims = (c.input_size, c.input_size, c.input_channels);
        let (h, w, ch) = walk(&self.body, &self.params, dims, &mut rows)?;
        debug_assert_eq!((h, w), (1, 1));
        rows.push(ShapeRow {
            name: "head/dropout".into(),
            kind: format!("dropout {}", c.dropout_rate),
            shape: vec![ch],
            params: 0,
        });
        rows.push(ShapeRow {
            name: self.head.name.clone(),
            kind: "dense".into(),
            shape: vec![c.num_classes],
            params: self.params[self.head.weight].value.len() + self.params[self.head.bias].value.len(),
        });
        Ok(rows)
    }
}

fn kind_padding(p: nn::Padding) -> &'static str {
    match p {
        nn::Padding::Same => "same",
        nn::Padding::Valid => "valid",
    }
}

type Dims = (usize, usize, usize);

fn underflow(stage: &str, e: Error) -> Error {
    Error::SpatialUnderflow {
        stage: stage.to_string(),
        detail: e.to_string(),
    }
}

fn walk<T: Scalar>(nodes: &[Node], params: &[LayerParams<T>], mut d: Dims, rows: &mut Vec<ShapeRow>) -> Result<Dims> {
    for node in nodes {
        d = walk_node(node, params, d, rows)?;
    }
    Ok(d)
}

fn walk_conv<T: Scalar>(
    u: &ConvUnit,
    params: &[LayerParams<T>],
    (h, w, c): Dims,
    rows: &mut Vec<ShapeRow>,
) -> Result<Dims> {
    let k = params[u.kernel].value.shape();
    let (kh, kw, cin, cout) = (k[0], k[1], k[2], k[3]);
    if cin != c {
        return Err(Error::shape(
            "build",
            format!("`{}` expects {cin} channels, gets {c}", u.name),
        ));
    }
    let (oh, _) = window_geometry("conv2d", h, kh, u.stride, u.padding).map_err(|e| underflow(&u.name, e))?;
    let (ow, _) = window_geometry("conv2d", w, kw, u.stride, u.padding).map_err(|e| underflow(&u.name, e))?;
    let mut count = params[u.kernel].value.len();
    count += u.bias.map_or(0, |b| params[b].value.len());
    if let Some(bn) = u.bn {
        count += params[bn.gamma].value.len() + params[bn.beta].value.len();
    }
    let suffix = if u.bn.is_some() { "+bn+relu" } else { "" };
    rows.push(ShapeRow {
        name: u.name.clone(),
        kind: format!("conv {kh}x{kw}/{} {}{suffix}", u.stride, kind_padding(u.padding)),
        shape: vec![oh, ow, cout],
        params: count,
    });
    Ok((oh, ow, cout))
}

fn walk_branches<T: Scalar>(
    branches: &[Vec<Node>],
    params: &[LayerParams<T>],
    d: Dims,
    rows: &mut Vec<ShapeRow>,
    stage: &str,
) -> Result<Dims> {
    let mut out: Option<Dims> = None;
    for branch in branches {
        let (h, w, c) = walk(branch, params, d, rows)?;
        out = match out {
            None => Some((h, w, c)),
            Some((oh, ow, oc)) if (oh, ow) == (h, w) => Some((oh, ow, oc + c)),
            Some((oh, ow, _)) => {
                return Err(Error::shape(
                    "build",
                    format!("`{stage}` branches disagree: {oh}x{ow} vs {h}x{w}"),
                ))
            }
        };
    }
    out.ok_or(Error::Empty("concat"))
}

fn walk_node<T: Scalar>(node: &Node, params: &[LayerParams<T>], d: Dims, rows: &mut Vec<ShapeRow>) -> Result<Dims> {
    let (h, w, c) = d;
    let pooled = |name: &str, kind: &str, window, stride, padding| -> Result<(Dims, ShapeRow)> {
        let (oh, _) = window_geometry("pool", h, window, stride, padding).map_err(|e| underflow(name, e))?;
        let (ow, _) = window_geometry("pool", w, window, stride, padding).map_err(|e| underflow(name, e))?;
        let row = ShapeRow {
            name: name.to_string(),
            kind: format!("{kind} {window}x{window}/{stride} {}", kind_padding(padding)),
            shape: vec![oh, ow, c],
            params: 0,
        };
        Ok(((oh, ow, c), row))
    };
    let out = match node {
        Node::Affine { name, scale, shift } => {
            rows.push(ShapeRow {
                name: name.clone(),
                kind: format!("affine x*{scale}{shift:+}"),
                shape: vec![h, w, c],
                params: 0,
            });
            d
        }
        Node::Conv(u) => walk_conv(u, params, d, rows)?,
        Node::MaxPool {
            name,
            window,
            stride,
            padding,
        } => {
            let (d, row) = pooled(name, "maxpool", *window, *stride, *padding)?;
            rows.push(row);
            d
        }
        Node::AvgPool {
            name,
            window,
            stride,
            padding,
        } => {
            let (d, row) = pooled(name, "avgpool", *window, *stride, *padding)?;
            rows.push(row);
            d
        }
        Node::Concat { name, branches } => {
            let out = walk_branches(branches, params, d, rows, name)?;
            rows.push(ShapeRow {
                name: name.clone(),
                kind: "concat".into(),
                shape: vec![out.0, out.1, out.2],
                params: 0,
            });
            out
        }
        Node::Residual {
            name,
            branches,
            projection,
            scale,
        } => {
            let mixed = walk_branches(branches, params, d, rows, name)?;
            let (ph, pw, pc) = walk_conv(projection, params, mixed, rows)?;
            if (ph, pw, pc) != d {
                return Err(Error::shape(
                    "build",
                    format!("`{name}` projection {ph}x{pw}x{pc} vs shortcut {h}x{w}x{c}"),
                ));
            }
            rows.push(ShapeRow {
                name: name.clone(),
                kind: format!("residual x+{scale}*f(x), relu"),
                shape: vec![h, w, c],
                params: 0,
            });
            d
        }
        Node::GlobalAvgPool { name } => {
            rows.push(ShapeRow {
                name: name.clone(),
                kind: format!("global avgpool {h}x{w}"),
                shape: vec![c],
                params: 0,
            });
            (1, 1, c)
        }
    };
    Ok(out)
}

/// Renders the shape table as aligned plain text, one layer per line.
pub fn render_shape_table(rows: &[ShapeRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:<28} {:<16} {:>10}", "layer", "type", "output", "params");
    for r in rows {
        let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(out, "{:<28} {:<28} {:<16} {:>10}", r.name, r.kind, shape, r.params);
    }
    let total: usize = rows.iter().map(|r| r.params).sum();
    let _ = writeln!(out, "{:<28} {:<28} {:<16} {:>10}", "total", "", "", total);
    out
}

/// Minimal interface the training and evaluation loops need from a model.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Eval-mode logits `(B, num_classes)`.
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;

    /// Train-mode forward and backward on one batch; fills every parameter's
    /// gradient and returns the mean loss with the train-mode logits.
    fn train_batch(&mut self, batch: &Tensor, labels: &[usize], seed: u64) -> Result<(f32, Tensor)>;

    fn parameters(&self) -> &[LayerParams];

    fn parameters_mut(&mut self) -> &mut [LayerParams];
}

impl Classifier for ModelGraph<f32> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.predict(batch)
    }

    fn train_batch(&mut self, batch: &Tensor, labels: &[usize], seed: u64) -> Result<(f32, Tensor)> {
        let (logits, tape) = self.forward_tape(batch, Mode::Train, seed)?;
        let (loss, grad) = nn::softmax_cross_entropy(&logits, labels)?;
        self.backward(&tape, &grad)?;
        self.commit_running_stats(&tape);
        Ok((loss, logits))
    }

    fn parameters(&self) -> &[LayerParams] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_block(scale: f64) -> (Tensor<f64>, Tensor<f64>) {
        let cfg = ModelConfig {
            residual_scale: scale,
            ..ModelConfig::desk()
        };
        let model = ModelGraph::<f64>::build(&cfg).unwrap();
        let block = model.body.iter().find(|n| n.name() == "block_a1").unwrap();
        // Block inputs come out of a ReLU, so they are non-negative.
        let x = Tensor::<f64>::from_fn(vec![2, 7, 7, 48], |i| ((i * 37) % 11) as f64 / 11.0);
        let mut fwd = Forward::new(&model.params, &model.bn_states, Mode::Eval, false);
        let (y, _) = fwd.run_seq(std::slice::from_ref(block), x.clone()).unwrap();
        (x, y)
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn residual_block_reduces_to_shortcut_as_scale_vanishes() {
        let (x, y) = run_block(1e-12);
        assert!(max_diff(&x, &y) < 1e-12);
        let (x, y) = run_block(1.0);
        assert!(max_diff(&x, &y) > 1e-3);
    }
}
