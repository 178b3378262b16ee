//! Finite-difference verification of every differentiable op and of the
//! composed training objective on small 2-class instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    cacps_loss, cross_entropy_map, dice_loss, ensemble, kl_variance, supervised_loss, total_loss,
    CacpsOptions, PredictionSet,
};
use crate::segnet::{forward, NetParams, NetSpec};
use crate::tensor::gradcheck::{check, check_piecewise, GradCheckReport, FD_STEP};
use crate::tensor::{Graph, Tensor, Var};

/// Acceptance threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.0.random_range(lo..hi)).collect()).expect("shape")
    }

    /// Values bounded away from zero so relu and clamps stay off their kinks.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v = self.0.random_range(0.2..1.5);
                if self.0.random_bool(0.5) {
                    -v
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// Per-pixel probability maps via a stored softmax of random logits.
    fn probs(&mut self, shape: &[usize]) -> Tensor {
        let logits = self.uniform(shape, -2.0, 2.0);
        let mut g = Graph::new();
        let v = g.constant(logits);
        let p = g.softmax_channels(v).expect("valid logits");
        g.value(p).clone()
    }

    fn one_hot(&mut self, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; n * c * h * w];
        for i in 0..n {
            for p in 0..h * w {
                let k = self.0.random_range(0..c);
                data[(i * c + k) * h * w + p] = 1.0;
            }
        }
        Tensor::new(vec![n, c, h, w], data).expect("shape")
    }
}

/// `Σ weights ⊙ x` with fixed random weights, so every output element
/// contributes a distinct amount.
fn weighted(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w)?;
    g.sum(p, None)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn elementwise(name: &'static str, s: usize, gen: &mut Gen, unary: bool, positive: bool, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> (String, Vec<Tensor>, Build) {
    let shape = [1, 2, s, s];
    let a = if positive { gen.uniform(&shape, 0.3, 2.0) } else { gen.away_from_zero(&shape) };
    let b = if positive { gen.uniform(&shape, 0.3, 2.0) } else { gen.away_from_zero(&shape) };
    let w = gen.uniform(&shape, -1.0, 1.0);
    let inputs = if unary { vec![a] } else { vec![a, b] };
    let build: Build = Box::new(move |g, v| {
        let y = f(g, v[0], *v.get(1).unwrap_or(&v[0]))?;
        weighted(g, y, &w)
    });
    (name.to_string(), inputs, build)
}

fn cases(seed: u64, s: usize) -> Vec<(String, Vec<Tensor>, Build)> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<(String, Vec<Tensor>, Build)> = vec![
        elementwise("add", s, &mut gen, false, false, |g, a, b| g.add(a, b)),
        elementwise("sub", s, &mut gen, false, false, |g, a, b| g.sub(a, b)),
        elementwise("mul", s, &mut gen, false, false, |g, a, b| g.mul(a, b)),
        elementwise("div", s, &mut gen, false, true, |g, a, b| g.div(a, b)),
        elementwise("add_const", s, &mut gen, true, false, |g, a, _| g.add_const(a, 0.7)),
        elementwise("scale", s, &mut gen, true, false, |g, a, _| g.scale(a, -1.3)),
        elementwise("neg", s, &mut gen, true, false, |g, a, _| g.neg(a)),
        elementwise("exp", s, &mut gen, true, false, |g, a, _| g.exp(a)),
        elementwise("log", s, &mut gen, true, true, |g, a, _| g.log(a)),
        elementwise("relu", s, &mut gen, true, false, |g, a, _| g.relu(a)),
    ];

    let shape = [2, 2, s, s];
    {
        let x = gen.uniform(&shape, -1.0, 1.0);
        let factor = gen.uniform(&[1], 0.5, 1.5);
        let w = gen.uniform(&shape, -1.0, 1.0);
        out.push((
            "scalar_broadcast".into(),
            vec![x, factor],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, axes) in [("sum_spatial", Some(vec![2, 3])), ("sum_channels", Some(vec![1])), ("sum_all", None)] {
        let x = gen.uniform(&shape, -1.0, 1.0);
        let w_shape: Vec<usize> = match &axes {
            Some(a) => shape.iter().enumerate().map(|(i, &d)| if a.contains(&i) { 1 } else { d }).collect(),
            None => vec![],
        };
        let w = if w_shape.is_empty() { Tensor::scalar(0.8) } else { gen.uniform(&w_shape, -1.0, 1.0) };
        out.push((
            name.into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.sum(v[0], axes.as_deref())?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = gen.uniform(&shape, -1.0, 1.0);
        let w = gen.uniform(&[2, 1, s, s], -1.0, 1.0);
        out.push((
            "mean".into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.mean(v[0], Some(&[1]))?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = gen.uniform(&shape, -2.0, 2.0);
        let w = gen.uniform(&shape, -1.0, 1.0);
        out.push((
            "softmax_channels".into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.softmax_channels(v[0])?;
                weighted(g, y, &w)
            }),
        ));
    }
    for (name, size, stride, padding, k) in [
        ("conv2d", s, 1, 1, 3),
        ("conv2d_stride2", s + 1, 2, 1, 3),
        ("conv2d_1x1", s, 1, 0, 1),
    ] {
        let x = gen.uniform(&[2, 2, size, size], -1.0, 1.0);
        let kernel = gen.uniform(&[3, 2, k, k], -0.5, 0.5);
        let bias = gen.uniform(&[3], -0.5, 0.5);
        let o = (size + 2 * padding - k) / stride + 1;
        let w = gen.uniform(&[2, 3, o, o], -1.0, 1.0);
        out.push((
            name.into(),
            vec![x, kernel, bias],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        // distinct values keep every pooling window's maximum unique
        let mut vals: Vec<f64> = (0..2 * 2 * s * s).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            let j = gen.0.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::new(shape.to_vec(), vals).expect("shape");
        let w = gen.uniform(&[2, 2, s / 2, s / 2], -1.0, 1.0);
        out.push((
            "max_pool2d".into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.max_pool2d(v[0])?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = gen.uniform(&[2, 2, s / 2, s / 2], -1.0, 1.0);
        let w = gen.uniform(&shape, -1.0, 1.0);
        out.push((
            "upsample_nearest2".into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.upsample_nearest2(v[0])?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let a = gen.uniform(&shape, -1.0, 1.0);
        let b = gen.uniform(&[2, 1, s, s], -1.0, 1.0);
        let w = gen.uniform(&[2, 3, s, s], -1.0, 1.0);
        out.push((
            "concat_channels".into(),
            vec![a, b],
            Box::new(move |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = gen.uniform(&[3, 2, s, s], -1.0, 1.0);
        let w = gen.uniform(&[3, 2, s, s], -1.0, 1.0);
        out.push((
            "select_items".into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.select_items(v[0], &[2, 0, 2])?;
                weighted(g, y, &w)
            }),
        ));
    }
    {
        let x = gen.uniform(&shape, -1.0, 1.0);
        let w = gen.uniform(&shape, -1.0, 1.0);
        out.push((
            "instance_norm".into(),
            vec![x],
            Box::new(move |g, v| {
                let y = g.instance_norm(v[0])?;
                weighted(g, y, &w)
            }),
        ));
    }

    // losses on probability maps produced inside the graph from logits, so the
    // perturbations stay on the simplex
    let logits = |gen: &mut Gen| gen.uniform(&shape, -2.0, 2.0);
    {
        let target = gen.one_hot(2, 2, s, s);
        out.push((
            "dice_loss".into(),
            vec![logits(&mut gen)],
            Box::new(move |g, v| {
                let p = g.softmax_channels(v[0])?;
                let t = g.constant(target.clone());
                dice_loss(g, p, t)
            }),
        ));
    }
    {
        let w = gen.uniform(&[2, 1, s, s], -1.0, 1.0);
        out.push((
            "kl_variance".into(),
            vec![logits(&mut gen), logits(&mut gen)],
            Box::new(move |g, v| {
                let pf = g.softmax_channels(v[0])?;
                let po = g.softmax_channels(v[1])?;
                let kl = kl_variance(g, pf, po)?;
                weighted(g, kl, &w)
            }),
        ));
    }
    {
        let target = gen.one_hot(2, 2, s, s);
        let w = gen.uniform(&[2, 1, s, s], -1.0, 1.0);
        out.push((
            "cross_entropy".into(),
            vec![logits(&mut gen)],
            Box::new(move |g, v| {
                let p = g.softmax_channels(v[0])?;
                let t = g.constant(target.clone());
                let ce = cross_entropy_map(g, p, t)?;
                weighted(g, ce, &w)
            }),
        ));
    }
    {
        let a = gen.probs(&shape);
        let b = gen.probs(&shape);
        let w = gen.uniform(&shape, -1.0, 1.0);
        out.push((
            "ensemble".into(),
            vec![a, b],
            Box::new(move |g, v| {
                let e = ensemble(g, v[0], v[1])?;
                weighted(g, e, &w)
            }),
        ));
    }

    let composed = |opts: CacpsOptions, beta: f64, scope: Option<Vec<usize>>, gen: &mut Gen| -> (Vec<Tensor>, Build) {
        let inputs: Vec<Tensor> = (0..4).map(|_| gen.uniform(&shape, -2.0, 2.0)).collect();
        let target = gen.one_hot(1, 2, s, s);
        let build: Build = Box::new(move |g, v| {
            let p: Vec<Var> = v.iter().map(|&x| g.softmax_channels(x)).collect::<Result<_>>()?;
            let mut preds = PredictionSet::build(g, p[0], p[1], p[2], p[3])?;
            if let Some(items) = &scope {
                preds = preds.select(g, items)?;
            }
            let (l_a, l_b) = cacps_loss(g, &preds, opts)?;
            let l_c = g.add(l_a, l_b)?;
            let o1 = g.select_items(p[0], &[0])?;
            let o2 = g.select_items(p[2], &[0])?;
            let t = g.constant(target.clone());
            let l_s = supervised_loss(g, o1, o2, t)?;
            total_loss(g, l_s, l_c, beta)
        });
        (inputs, build)
    };
    let plain = CacpsOptions {
        confidence: false,
        detach_weight: false,
    };
    for (name, opts, beta, scope) in [
        ("total_loss", CacpsOptions::default(), 3.0, None),
        ("total_loss_unlabeled_only", CacpsOptions::default(), 1.5, Some(vec![1])),
        ("total_loss_plain_cps", plain, 3.0, None),
    ] {
        let (inputs, build) = composed(opts, beta, scope, &mut gen);
        out.push((name.into(), inputs, build));
    }

    // the objective through two tiny networks, with respect to their weights
    {
        let spec = NetSpec {
            in_channels: 1,
            num_classes: 2,
            base_width: 2,
            depth: 1,
            instance_norm: true,
        };
        // zero-initialized biases can leave every pixel at an exact class tie,
        // where the argmax pseudo-labels flip under any perturbation
        let mut nets = Vec::new();
        for _ in 0..2 {
            let mut p = NetParams::init(&spec, gen.0.random());
            for t in &mut p.tensors {
                if t.ndim() == 1 {
                    *t = gen.uniform(t.shape(), -0.3, 0.3);
                }
            }
            nets.push(p);
        }
        let (n1, n2) = (nets[0].clone(), nets[1].clone());
        let k = n1.tensors.len();
        let x = gen.uniform(&[2, 1, s, s], 0.0, 1.0);
        let z = gen.uniform(&[2, 1, s, s], 0.0, 1.0);
        let target = gen.one_hot(1, 2, s, s);
        let mut inputs = n1.tensors.clone();
        inputs.extend(n2.tensors.iter().cloned());
        out.push((
            "total_loss_through_networks".into(),
            inputs,
            Box::new(move |g, v| {
                let xv = g.constant(x.clone());
                let zv = g.constant(z.clone());
                let (p1, p2) = v.split_at(k);
                let p_o1 = forward(g, &spec, p1, xv)?;
                let p_f1 = forward(g, &spec, p1, zv)?;
                let p_o2 = forward(g, &spec, p2, xv)?;
                let p_f2 = forward(g, &spec, p2, zv)?;
                let preds = PredictionSet::build(g, p_o1, p_f1, p_o2, p_f2)?;
                let (l_a, l_b) = cacps_loss(g, &preds, CacpsOptions::default())?;
                let l_c = g.add(l_a, l_b)?;
                let o1 = g.select_items(p_o1, &[0])?;
                let o2 = g.select_items(p_o2, &[0])?;
                let t = g.constant(target.clone());
                let l_s = supervised_loss(g, o1, o2, t)?;
                total_loss(g, l_s, l_c, 3.0)
            }),
        ));
    }
    out
}

/// Cases whose random instance may put a probe across a relu or pooling kink.
const PIECEWISE: &[&str] = &["total_loss_through_networks"];

/// Largest share of partials a piecewise case may skip.
pub const MAX_SKIPPED_SHARE: f64 = 0.02;

/// Default spatial size of the check instances.
pub const GRADCHECK_SIZE: usize = 8;

/// Runs every check on `size`×`size` 2-class instances; reports are in a
/// fixed order.
pub fn gradcheck_suite(seed: u64, size: usize) -> Result<Vec<GradCheckReport>> {
    if size < 2 || size % 2 != 0 || size > 32 {
        return Err(Error::invalid(format!("gradcheck size {size} must be even and in 2..=32")));
    }
    cases(seed, size)
        .into_iter()
        .map(|(name, inputs, build)| {
            if PIECEWISE.contains(&name.as_str()) {
                check_piecewise(&name, &inputs, FD_STEP, build)
            } else {
                check(&name, &inputs, FD_STEP, build)
            }
        })
        .collect()
}

/// Error within tolerance and few enough partials skipped at kinks.
pub fn passes(report: &GradCheckReport, tolerance: f64) -> bool {
    let total = report.checked + report.skipped;
    report.passes(tolerance) && (report.skipped as f64) <= MAX_SKIPPED_SHARE * total as f64
}

pub fn report_csv(reports: &[GradCheckReport], tolerance: f64) -> String {
    let mut s = String::from("check,partials,skipped,max_rel_error,pass\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_error,
            passes(r, tolerance)
        ));
    }
    s
}
