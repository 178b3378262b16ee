//! A small U-Net style encoder-decoder and the two-network pair trained
//! by cross supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first encoder stage; doubled at every downsampling.
    pub base_width: usize,
    /// Number of downsampling stages.
    pub depth: usize,
    /// Instance normalization after every hidden convolution.
    pub instance_norm: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            base_width: 16,
            depth: 3,
            instance_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            errs.push("in_channels must be positive".to_string());
        }
        if self.base_width == 0 {
            errs.push("base_width must be positive".to_string());
        }
        if self.depth > 8 {
            errs.push(format!("depth {} is unreasonably large", self.depth));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Parameter tensors in declaration order.
    pub fn layout(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push(ParamShape {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
            });
            out.push(ParamShape {
                name: format!("{name}.bias"),
                shape: vec![cout],
            });
        };
        let mut cin = self.in_channels;
        for level in 0..self.depth {
            let w = self.width(level);
            conv(format!("enc{level}.conv1"), cin, w, 3);
            conv(format!("enc{level}.conv2"), w, w, 3);
            cin = w;
        }
        let wb = self.width(self.depth);
        conv("bottleneck.conv1".into(), cin, wb, 3);
        conv("bottleneck.conv2".into(), wb, wb, 3);
        let mut below = wb;
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            conv(format!("dec{level}.conv1"), below + w, w, 3);
            conv(format!("dec{level}.conv2"), w, w, 3);
            below = w;
        }
        conv("head".into(), below, self.num_classes, 1);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

/// One network's parameters, in [`NetSpec::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub tensors: Vec<Tensor>,
}

impl NetParams {
    /// Kaiming-uniform kernels (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .layout()
            .into_iter()
            .map(|p| {
                if p.shape.len() == 1 {
                    Tensor::zeros(&p.shape)
                } else {
                    let fan_in: usize = p.shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = p.shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(p.shape, data).expect("layout shape")
                }
            })
            .collect();
        Self { tensors }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn check_layout(&self, spec: &NetSpec) -> Result<()> {
        let layout = spec.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (p, t) in layout.iter().zip(&self.tensors) {
            if p.shape != t.shape() {
                return Err(Error::shape("parameter layout", &p.shape, t.shape()));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &NetParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Two identically shaped, independently initialized networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPair {
    pub spec: NetSpec,
    pub nets: [NetParams; 2],
    pub seeds: (u64, u64),
}

pub fn init_pair(spec: NetSpec, seed1: u64, seed2: u64) -> Result<NetworkPair> {
    spec.validate()?;
    if seed1 == seed2 {
        return Err(Error::invalid(
            "the two networks need distinct initialization seeds",
        ));
    }
    Ok(NetworkPair {
        spec,
        nets: [NetParams::init(&spec, seed1), NetParams::init(&spec, seed2)],
        seeds: (seed1, seed2),
    })
}

fn conv_block(
    g: &mut Graph,
    spec: &NetSpec,
    params: &[Var],
    next: &mut usize,
    input: Var,
) -> Result<Var> {
    let mut x = input;
    for _ in 0..2 {
        let (w, b) = (params[*next], params[*next + 1]);
        *next += 2;
        x = g.conv2d(x, w, Some(b), 1, 1)?;
        if spec.instance_norm {
            x = g.instance_norm(x)?;
        }
        x = g.relu(x)?;
    }
    Ok(x)
}

/// Per-pixel class logits for `input [N, C_in, H, W]`.
pub fn forward_logits(g: &mut Graph, spec: &NetSpec, params: &[Var], input: Var) -> Result<Var> {
    let layout_len = spec.layout().len();
    if params.len() != layout_len {
        return Err(Error::invalid(format!(
            "network expects {} parameter tensors, got {}",
            layout_len,
            params.len()
        )));
    }
    let (_, c, h, w) = g.value(input).dims4("segnet forward")?;
    if c != spec.in_channels {
        return Err(Error::shape("segnet forward", g.shape(input), &[0, spec.in_channels, h, w]));
    }
    let m = spec.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} is not divisible by {m} (depth {})",
            spec.depth
        )));
    }
    let mut next = 0;
    let mut skips = Vec::with_capacity(spec.depth);
    let mut x = input;
    for _ in 0..spec.depth {
        x = conv_block(g, spec, params, &mut next, x)?;
        skips.push(x);
        x = g.max_pool2d(x)?;
    }
    x = conv_block(g, spec, params, &mut next, x)?;
    for skip in skips.into_iter().rev() {
        let up = g.upsample_nearest2(x)?;
        let cat = g.concat_channels(up, skip)?;
        x = conv_block(g, spec, params, &mut next, cat)?;
    }
    g.conv2d(x, params[next], Some(params[next + 1]), 1, 0)
}

/// Per-pixel class probabilities.
pub fn forward(g: &mut Graph, spec: &NetSpec, params: &[Var], input: Var) -> Result<Var> {
    let logits = forward_logits(g, spec, params, input)?;
    g.softmax_channels(logits)
}

/// Probabilities without recording gradients for the parameters.
pub fn predict(spec: &NetSpec, params: &NetParams, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let x = g.constant(images.clone());
    let p = forward(&mut g, spec, &vars, x)?;
    Ok(g.value(p).clone())
}
