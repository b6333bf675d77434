//! Inception-ResNet-v2 topology.
//!
//! Filter counts are the full-size ones, scaled by
//! [`ModelConfig::filters`]. Every convolution except a residual block's
//! linear 1×1 projection is followed by batch normalization and ReLU.

use crate::arch::config::ModelConfig;
use crate::arch::graph::{BnRef, ConvUnit, DenseUnit, LayerParams, Node};
use crate::nn::{BnState, Padding};
use crate::rng::{stream, truncated_normal};
use crate::tensor::{s, Scalar, Tensor};

/// Standard deviation of the truncated-normal kernel initializer.
pub const INIT_SIGMA: f64 = 0.05;

use Padding::{Same, Valid};

type ConvSpec<'a> = (&'a str, usize, (usize, usize), usize, Padding);

pub(crate) struct Builder<'a, T> {
    cfg: &'a ModelConfig,
    pub params: Vec<LayerParams<T>>,
    pub bn_states: Vec<BnState<T>>,
    /// Owning unit of each running-statistics entry.
    pub bn_names: Vec<String>,
    pub layers: usize,
}

/// Kernel initialized from the `(seed, name)` stream.
pub(crate) fn init_kernel<T: Scalar>(shape: Vec<usize>, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = stream(seed, name);
    Tensor::from_fn(shape, |_| s(truncated_normal(&mut rng, INIT_SIGMA)))
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(cfg: &'a ModelConfig) -> Self {
        Self {
            cfg,
            params: Vec::new(),
            bn_states: Vec::new(),
            bn_names: Vec::new(),
            layers: 0,
        }
    }

    fn f(&self, base: usize) -> usize {
        self.cfg.filters(base)
    }

    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(LayerParams::new(name, value, self.layers));
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn unit(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        padding: Padding,
        normalized: bool,
    ) -> ConvUnit {
        let kname = format!("{name}/kernel");
        let kernel = init_kernel(vec![kh, kw, cin, cout], self.cfg.seed, &kname);
        let kernel = self.param(kname, kernel);
        let (bias, bn) = if normalized {
            let gamma = self.param(format!("{name}/gamma"), Tensor::full(vec![cout], T::one()));
            let beta = self.param(format!("{name}/beta"), Tensor::zeros(vec![cout]));
            self.bn_states.push(BnState::new(cout));
            self.bn_names.push(name.to_string());
            let state = self.bn_states.len() - 1;
            (None, Some(BnRef { gamma, beta, state }))
        } else {
            (
                Some(self.param(format!("{name}/bias"), Tensor::zeros(vec![cout]))),
                None,
            )
        };
        let unit = ConvUnit {
            name: name.to_string(),
            kernel,
            bias,
            bn,
            relu: normalized,
            stride,
            padding,
            layer: self.layers,
        };
        self.layers += 1;
        unit
    }

    /// Conv + BN + ReLU with a scaled filter count; returns the node and its
    /// output channel count.
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        base: usize,
        k: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> (Node, usize) {
        let cout = self.f(base);
        (Node::Conv(self.unit(name, cin, cout, k, stride, padding, true)), cout)
    }

    /// A chain of convolutions, each `(suffix, base filters, kernel, stride, padding)`.
    fn chain(&mut self, prefix: &str, cin: usize, spec: &[ConvSpec]) -> (Vec<Node>, usize) {
        let mut c = cin;
        let mut nodes = Vec::with_capacity(spec.len());
        for &(suffix, base, k, stride, padding) in spec {
            let (node, cout) = self.conv(&format!("{prefix}/{suffix}"), c, base, k, stride, padding);
            nodes.push(node);
            c = cout;
        }
        (nodes, c)
    }

    fn pool(name: String) -> Node {
        Node::MaxPool {
            name,
            window: 3,
            stride: 2,
            padding: Valid,
        }
    }

    pub fn stem(&mut self, nodes: &mut Vec<Node>) -> usize {
        nodes.push(Node::Affine {
            name: "stem/input_shift".into(),
            scale: 2.0,
            shift: -1.0,
        });
        let (convs, c) = self.chain(
            "stem",
            self.cfg.input_channels,
            &[
                ("conv1", 32, (3, 3), 2, Valid),
                ("conv2", 32, (3, 3), 1, Valid),
                ("conv3", 64, (3, 3), 1, Same),
            ],
        );
        nodes.extend(convs);

        let (b1, c1) = self.chain("stem/split1", c, &[("b1_conv", 96, (3, 3), 2, Valid)]);
        nodes.push(Node::Concat {
            name: "stem/split1".into(),
            branches: vec![vec![Self::pool("stem/split1/b0_pool".into())], b1],
        });
        let c = c + c1;

        let (b0, c0) = self.chain(
            "stem/split2",
            c,
            &[("b0_conv1", 64, (1, 1), 1, Same), ("b0_conv2", 96, (3, 3), 1, Valid)],
        );
        let (b1, c1) = self.chain(
            "stem/split2",
            c,
            &[
                ("b1_conv1", 64, (1, 1), 1, Same),
                ("b1_conv2", 64, (7, 1), 1, Same),
                ("b1_conv3", 64, (1, 7), 1, Same),
                ("b1_conv4", 96, (3, 3), 1, Valid),
            ],
        );
        nodes.push(Node::Concat {
            name: "stem/split2".into(),
            branches: vec![b0, b1],
        });
        let c = c0 + c1;

        let (b0, c0) = self.chain("stem/split3", c, &[("b0_conv", 192, (3, 3), 2, Valid)]);
        nodes.push(Node::Concat {
            name: "stem/split3".into(),
            branches: vec![b0, vec![Self::pool("stem/split3/b1_pool".into())]],
        });
        c0 + c
    }

    fn residual(&mut self, name: String, cin: usize, branches: Vec<(Vec<Node>, usize)>) -> Node {
        let mixed: usize = branches.iter().map(|b| b.1).sum();
        let projection = self.unit(&format!("{name}/proj"), mixed, cin, (1, 1), 1, Same, false);
        Node::Residual {
            name,
            branches: branches.into_iter().map(|b| b.0).collect(),
            projection,
            scale: self.cfg.residual_scale,
        }
    }

    pub fn block_a(&mut self, i: usize, cin: usize) -> Node {
        let p = format!("block_a{i}");
        let b0 = self.chain(&p, cin, &[("b0_conv1", 32, (1, 1), 1, Same)]);
        let b1 = self.chain(
            &p,
            cin,
            &[("b1_conv1", 32, (1, 1), 1, Same), ("b1_conv2", 32, (3, 3), 1, Same)],
        );
        let b2 = self.chain(
            &p,
            cin,
            &[
                ("b2_conv1", 32, (1, 1), 1, Same),
                ("b2_conv2", 48, (3, 3), 1, Same),
                ("b2_conv3", 64, (3, 3), 1, Same),
            ],
        );
        self.residual(p, cin, vec![b0, b1, b2])
    }

    pub fn reduction_a(&mut self, cin: usize) -> (Node, usize) {
        let p = "reduction_a";
        let (b1, c1) = self.chain(p, cin, &[("b1_conv", 384, (3, 3), 2, Valid)]);
        let (b2, c2) = self.chain(
            p,
            cin,
            &[
                ("b2_conv1", 256, (1, 1), 1, Same),
                ("b2_conv2", 256, (3, 3), 1, Same),
                ("b2_conv3", 384, (3, 3), 2, Valid),
            ],
        );
        let node = Node::Concat {
            name: p.into(),
            branches: vec![vec![Self::pool(format!("{p}/b0_pool"))], b1, b2],
        };
        (node, cin + c1 + c2)
    }

    pub fn block_b(&mut self, i: usize, cin: usize) -> Node {
        let p = format!("block_b{i}");
        let b0 = self.chain(&p, cin, &[("b0_conv1", 192, (1, 1), 1, Same)]);
        let b1 = self.chain(
            &p,
            cin,
            &[
                ("b1_conv1", 128, (1, 1), 1, Same),
                ("b1_conv2", 160, (1, 7), 1, Same),
                ("b1_conv3", 192, (7, 1), 1, Same),
            ],
        );
        self.residual(p, cin, vec![b0, b1])
    }

    pub fn reduction_b(&mut self, cin: usize) -> (Node, usize) {
        let p = "reduction_b";
        let (b1, c1) = self.chain(
            p,
            cin,
            &[("b1_conv1", 256, (1, 1), 1, Same), ("b1_conv2", 384, (3, 3), 2, Valid)],
        );
        let (b2, c2) = self.chain(
            p,
            cin,
            &[("b2_conv1", 256, (1, 1), 1, Same), ("b2_conv2", 288, (3, 3), 2, Valid)],
        );
        let (b3, c3) = self.chain(
            p,
            cin,
            &[
                ("b3_conv1", 256, (1, 1), 1, Same),
                ("b3_conv2", 288, (3, 3), 1, Same),
                ("b3_conv3", 320, (3, 3), 2, Valid),
            ],
        );
        let node = Node::Concat {
            name: p.into(),
            branches: vec![vec![Self::pool(format!("{p}/b0_pool"))], b1, b2, b3],
        };
        (node, cin + c1 + c2 + c3)
    }

    pub fn block_c(&mut self, i: usize, cin: usize) -> Node {
        let p = format!("block_c{i}");
        let b0 = self.chain(&p, cin, &[("b0_conv1", 192, (1, 1), 1, Same)]);
        let b1 = self.chain(
            &p,
            cin,
            &[
                ("b1_conv1", 192, (1, 1), 1, Same),
                ("b1_conv2", 224, (1, 3), 1, Same),
                ("b1_conv3", 256, (3, 1), 1, Same),
            ],
        );
        self.residual(p, cin, vec![b0, b1])
    }

    pub fn head(&mut self, features: usize, classes: usize, seed: u64) -> DenseUnit {
        let name = "head/dense".to_string();
        let wname = format!("{name}/kernel");
        let w = init_kernel(vec![features, classes], seed, &wname);
        let weight = self.param(wname, w);
        let bias = self.param(format!("{name}/bias"), Tensor::zeros(vec![classes]));
        let unit = DenseUnit {
            name,
            weight,
            bias,
            layer: self.layers,
        };
        self.layers += 1;
        unit
    }

    /// Whole network: body nodes, head, and the feature width feeding it.
    pub fn network(&mut self) -> (Vec<Node>, DenseUnit, usize) {
        let [na, nb, nc] = self.cfg.block_counts;
        let mut body = Vec::new();
        let mut c = self.stem(&mut body);
        for i in 1..=na {
            body.push(self.block_a(i, c));
        }
        let (node, next) = self.reduction_a(c);
        body.push(node);
        c = next;
        for i in 1..=nb {
            body.push(self.block_b(i, c));
        }
        let (node, next) = self.reduction_b(c);
        body.push(node);
        c = next;
        for i in 1..=nc {
            body.push(self.block_c(i, c));
        }
        body.push(Node::GlobalAvgPool { name: "pool".into() });
        let head = self.head(c, self.cfg.num_classes, self.cfg.seed);
        (body, head, c)
    }
}
