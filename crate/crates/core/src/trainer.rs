//! The two-network training loop, ensemble inference and evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{sample_view, AugmentFlags, BatchStream, Sample, SegBatch, TrainSample};
use crate::error::{Error, Result};
use crate::fourier::{augment, MixConfig, MixMode};
use crate::losses::{cacps_loss, supervised_loss, total_loss, CacpsOptions, LossBreakdown, PredictionSet};
use crate::metrics::{aggregate, hausdorff, MetricRow, Summary};
use crate::optim::{adamw_update, OptimizerState};
use crate::raster::{Image, LabelMap};
use crate::segnet::{forward, init_pair, predict, NetSpec, NetworkPair};
use crate::tensor::{one_hot_argmax, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub mix: MixConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub data_seed: u64,
    pub net1_seed: u64,
    pub net2_seed: u64,
    pub crop: usize,
    pub cacps_on_labeled: bool,
    pub detach_weight: bool,
    /// `false` drops the `e^{−V}` weighting and the `V` term.
    pub confidence: bool,
    pub augment: AugmentFlags,
    /// Leading epochs trained with β = 0 (supervised term only).
    pub warmup_epochs: u64,
}

impl TrainConfig {
    /// M&Ms-style settings: β = 3, λ = 1, batch 32, 20 epochs.
    pub fn mnms() -> Self {
        Self {
            beta: 3.0,
            mix: MixConfig {
                lambda: 1.0,
                alpha: 0.1,
                mode: MixMode::Rectified,
            },
            lr: 1e-4,
            weight_decay: 0.1,
            epochs: 20,
            batch_size: 32,
            labeled_fraction: 0.2,
            data_seed: 0,
            net1_seed: 1,
            net2_seed: 2,
            crop: 64,
            cacps_on_labeled: true,
            detach_weight: false,
            confidence: true,
            augment: AugmentFlags::ALL,
            warmup_epochs: 0,
        }
    }

    /// SCGM-style settings: β = 1.5, λ = 0.8, batch 8, 50 epochs.
    pub fn scgm() -> Self {
        Self {
            beta: 1.5,
            mix: MixConfig {
                lambda: 0.8,
                ..Self::mnms().mix
            },
            batch_size: 8,
            epochs: 50,
            ..Self::mnms()
        }
    }

    /// β in effect during epoch `epoch` (0-based).
    pub fn beta_at(&self, epoch: u64) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            self.beta
        }
    }

    /// Settings used for the desk-scale ablation on the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            beta: 0.5,
            lr: 1e-2,
            weight_decay: 0.01,
            batch_size: 5,
            warmup_epochs: 5,
            ..Self::mnms()
        }
    }

    pub fn desk_net() -> NetSpec {
        NetSpec {
            base_width: 8,
            instance_norm: true,
            ..NetSpec::default()
        }
    }

    pub fn cacps_options(&self) -> CacpsOptions {
        CacpsOptions {
            confidence: self.confidence,
            detach_weight: self.detach_weight,
        }
    }

    /// Every violated constraint, in field order.
    pub fn problems(&self, net: &NetSpec) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            errs.push(format!("beta must be a finite non-negative number, got {}", self.beta));
        }
        if let Err(e) = self.mix.validate() {
            errs.push(e.to_string());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            errs.push(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            ));
        }
        if self.net1_seed == self.net2_seed {
            errs.push("net1_seed and net2_seed must differ".to_string());
        }
        let m = net.size_multiple();
        if self.crop == 0 || self.crop % m != 0 {
            errs.push(format!("crop {} must be a positive multiple of {m}", self.crop));
        }
        errs
    }

    pub fn validate(&self, net: &NetSpec) -> Result<()> {
        let errs = self.problems(net);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::mnms()
    }
}

/// Aggregates of one epoch; losses are means over optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub steps: usize,
    pub l_s: f64,
    pub l_a: f64,
    pub l_b: f64,
    pub total: f64,
    pub mean_variance: f64,
    pub labeled: usize,
    pub unlabeled: usize,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,steps,l_s,l_a,l_b,total,mean_variance,labeled,unlabeled";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.steps,
            self.l_s,
            self.l_a,
            self.l_b,
            self.total,
            self.mean_variance,
            self.labeled,
            self.unlabeled
        )
    }
}

/// Per-class evaluation summary recorded after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub epoch: u64,
    pub class_id: u8,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hausdorff_mean: Option<f64>,
    pub hausdorff_std: Option<f64>,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "epoch,class_id,dice_mean,dice_std,hausdorff_mean,hausdorff_std";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.class_id,
            self.dice_mean,
            self.dice_std,
            opt(self.hausdorff_mean),
            opt(self.hausdorff_std)
        )
    }

    pub fn from_summary(epoch: u64, summary: &Summary) -> Vec<Self> {
        summary
            .per_class
            .iter()
            .map(|c| Self {
                epoch,
                class_id: c.class_id,
                dice_mean: c.dice.mean,
                dice_std: c.dice.std,
                hausdorff_mean: c.hausdorff.map(|h| h.mean),
                hausdorff_std: c.hausdorff.map(|h| h.std),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub evals: Vec<EvalRow>,
}

impl TrainReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = format!("{}\n", EpochRow::CSV_HEADER);
        for r in &self.epochs {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = format!("{}\n", EvalRow::CSV_HEADER);
        for r in &self.evals {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

fn item_image(images: &Tensor, i: usize) -> Result<Image> {
    let (_, c, h, w) = images.dims4("batch item")?;
    let len = c * h * w;
    Image::new(c, h, w, images.data()[i * len..(i + 1) * len].to_vec())
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item().expect("scalar loss")
}

/// Training state that fully determines the continuation of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pair: NetworkPair,
    pub optimizers: [OptimizerState; 2],
    /// Epochs completed so far.
    pub epoch: u64,
    /// Draws augmentation partners; carried across epochs.
    pub partner_rng: ChaCha8Rng,
}

const PARTNER_STREAM: u64 = 0x7061_7274;

impl Trainer {
    pub fn new(cfg: TrainConfig, net: NetSpec) -> Result<Self> {
        net.validate()?;
        cfg.validate(&net)?;
        let pair = init_pair(net, cfg.net1_seed, cfg.net2_seed)?;
        let optimizers = [
            OptimizerState::new(&pair.nets[0].tensors),
            OptimizerState::new(&pair.nets[1].tensors),
        ];
        let mut partner_rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
        partner_rng.set_stream(PARTNER_STREAM);
        Ok(Self {
            cfg,
            pair,
            optimizers,
            epoch: 0,
            partner_rng,
        })
    }

    /// One joint update of both networks on `batch`; augmentation partners
    /// come from `pool`.
    pub fn train_step(&mut self, batch: &SegBatch, pool: &[TrainSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if pool.is_empty() {
            return Err(Error::invalid("empty partner pool"));
        }
        let cfg = self.cfg;
        let beta = cfg.beta_at(self.epoch);
        let spec = self.pair.spec;
        let (n, _, s, _) = batch.images.dims4("train_step")?;

        // partners are drawn for every item so the stream does not depend on the arm
        let mut partners = Vec::with_capacity(n);
        for _ in 0..n {
            let j = self.partner_rng.random_range(0..pool.len());
            let (img, _) = sample_view(&pool[j], s, AugmentFlags::NONE, &mut self.partner_rng)?;
            partners.push(img);
        }

        let labeled = batch.labeled_items();
        let unsupervised = beta > 0.0;
        let items: Vec<usize> = if unsupervised { (0..n).collect() } else { labeled.clone() };
        let mut breakdown = LossBreakdown {
            l_s: 0.0,
            l_a: 0.0,
            l_b: 0.0,
            l_cacps: 0.0,
            total: 0.0,
            beta,
            mean_variance: 0.0,
            supervised_present: !labeled.is_empty(),
        };
        if items.is_empty() {
            return Ok(breakdown);
        }

        let mut g = Graph::new();
        let p1 = self.pair.nets[0].register(&mut g, true);
        let p2 = self.pair.nets[1].register(&mut g, true);
        let images = if items.len() == n {
            batch.images.clone()
        } else {
            let imgs: Vec<Image> = items.iter().map(|&i| item_image(&batch.images, i)).collect::<Result<_>>()?;
            Image::stack(&imgs.iter().collect::<Vec<_>>())?
        };
        let x = g.constant(images);
        let p_o1 = forward(&mut g, &spec, &p1, x)?;
        let p_o2 = forward(&mut g, &spec, &p2, x)?;

        let mut cacps_term = None;
        if unsupervised {
            let (p_f1, p_f2) = if cfg.mix.is_identity() {
                (p_o1, p_o2)
            } else {
                let z: Vec<Image> = (0..n)
                    .into_par_iter()
                    .map(|i| augment(&item_image(&batch.images, i)?, &partners[i], &cfg.mix))
                    .collect::<Result<_>>()?;
                let z = g.constant(Image::stack(&z.iter().collect::<Vec<_>>())?);
                (forward(&mut g, &spec, &p1, z)?, forward(&mut g, &spec, &p2, z)?)
            };
            let preds = PredictionSet::build(&mut g, p_o1, p_f1, p_o2, p_f2)?;
            let mv1 = g.value(preds.v1).data().iter().sum::<f64>();
            let mv2 = g.value(preds.v2).data().iter().sum::<f64>();
            breakdown.mean_variance = (mv1 + mv2) / (2 * g.value(preds.v1).len()) as f64;
            let scope: Vec<usize> = if cfg.cacps_on_labeled {
                (0..n).collect()
            } else {
                (0..n).filter(|i| batch.masks[*i].is_none()).collect()
            };
            if !scope.is_empty() {
                let preds = if scope.len() == n { preds } else { preds.select(&mut g, &scope)? };
                let (l_a, l_b) = cacps_loss(&mut g, &preds, cfg.cacps_options())?;
                breakdown.l_a = value(&g, l_a);
                breakdown.l_b = value(&g, l_b);
                cacps_term = Some(g.add(l_a, l_b)?);
            }
        }

        let sup_term = match batch.labeled_targets(spec.num_classes)? {
            Some(target) => {
                // positions of the labeled items among the forwarded ones
                let pos: Vec<usize> = labeled
                    .iter()
                    .map(|i| items.iter().position(|j| j == i).expect("labeled item forwarded"))
                    .collect();
                let (o1, o2) = if pos.len() == items.len() {
                    (p_o1, p_o2)
                } else {
                    (g.select_items(p_o1, &pos)?, g.select_items(p_o2, &pos)?)
                };
                let t = g.constant(target);
                Some(supervised_loss(&mut g, o1, o2, t)?)
            }
            None => None,
        };

        let zero = || Tensor::scalar(0.0);
        let l_s = match sup_term {
            Some(v) => v,
            None => g.constant(zero()),
        };
        let l_c = match cacps_term {
            Some(v) => v,
            None => g.constant(zero()),
        };
        let total = total_loss(&mut g, l_s, l_c, beta)?;
        breakdown.l_s = value(&g, l_s);
        breakdown.l_cacps = value(&g, l_c);
        breakdown.total = value(&g, total);
        if !g.requires_grad(total) {
            return Ok(breakdown);
        }
        g.backward(total)?;

        let layout = spec.layout();
        for (k, vars) in [p1, p2].iter().enumerate() {
            let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();
            let names: Vec<String> = layout.iter().map(|p| format!("net{}.{}", k + 1, p.name)).collect();
            adamw_update(
                &mut self.pair.nets[k].tensors,
                &grads,
                &names,
                &mut self.optimizers[k],
                cfg.lr,
                cfg.weight_decay,
            )?;
        }
        Ok(breakdown)
    }

    /// Runs the next epoch over `pool`.
    pub fn train_epoch(&mut self, pool: &[TrainSample]) -> Result<EpochRow> {
        let stream = BatchStream::new(
            pool,
            self.cfg.batch_size,
            self.cfg.crop,
            self.cfg.augment,
            self.cfg.data_seed,
            self.epoch,
        )?;
        let mut row = EpochRow {
            epoch: self.epoch + 1,
            steps: 0,
            l_s: 0.0,
            l_a: 0.0,
            l_b: 0.0,
            total: 0.0,
            mean_variance: 0.0,
            labeled: 0,
            unlabeled: 0,
        };
        for batch in stream {
            let labeled = batch.labeled_items().len();
            row.labeled += labeled;
            row.unlabeled += batch.len() - labeled;
            let b = self.train_step(&batch, pool)?;
            row.steps += 1;
            row.l_s += b.l_s;
            row.l_a += b.l_a;
            row.l_b += b.l_b;
            row.total += b.total;
            row.mean_variance += b.mean_variance;
        }
        let k = row.steps.max(1) as f64;
        row.l_s /= k;
        row.l_a /= k;
        row.l_b /= k;
        row.total /= k;
        row.mean_variance /= k;
        self.epoch += 1;
        log::info!(
            "epoch {} total {:.5} l_s {:.5} l_a {:.5} l_b {:.5} V {:.3e}",
            row.epoch,
            row.total,
            row.l_s,
            row.l_a,
            row.l_b,
            row.mean_variance
        );
        Ok(row)
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn run(&mut self, pool: &[TrainSample]) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.epoch < self.cfg.epochs {
            report.epochs.push(self.train_epoch(pool)?);
        }
        Ok(report)
    }
}

/// `(f1(x) + f2(x)) / 2` on the unaugmented images, and its per-pixel
/// argmax (ties to the lowest class).
pub fn infer_ensemble(pair: &NetworkPair, images: &Tensor) -> Result<(Tensor, Vec<LabelMap>)> {
    let a = predict(&pair.spec, &pair.nets[0], images)?;
    let b = predict(&pair.spec, &pair.nets[1], images)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
    let probs = Tensor::new(a.shape().to_vec(), data)?;
    let labels = argmax_labels(&probs)?;
    Ok((probs, labels))
}

/// Per-pixel argmax maps of an `[N, C, H, W]` tensor.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, c, h, w) = probs.dims4("argmax_labels")?;
    let hot = one_hot_argmax(probs)?;
    let plane = h * w;
    (0..n)
        .map(|i| {
            let labels = (0..plane)
                .map(|p| {
                    (0..c)
                        .find(|&k| hot.data()[(i * c + k) * plane + p] == 1.0)
                        .unwrap_or(0) as u8
                })
                .collect();
            LabelMap::new(h, w, labels)
        })
        .collect()
}

/// Per-subject metrics for one predicted label map per sample.
///
/// Slices of one subject are pooled: Dice over all their pixels, Hausdorff as
/// the largest defined per-slice distance. Only foreground classes
/// `1..num_classes` are reported.
pub fn score(
    predictions: &[LabelMap],
    samples: &[Sample],
    num_classes: usize,
) -> Result<Vec<MetricRow>> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.mask.is_none() {
            return Err(Error::invalid(format!("subject {} has no ground truth", s.subject_id)));
        }
        by_subject.entry(s.subject_id).or_default().push(i);
    }
    let mut rows = Vec::new();
    for (subject_id, idx) in by_subject {
        for class in 1..num_classes as u8 {
            let (mut inter, mut total) = (0usize, 0usize);
            let mut hd: Option<f64> = None;
            let mut any_hd = false;
            for &i in &idx {
                let p = predictions[i].binary(class);
                let gt = samples[i].mask.as_ref().expect("checked").binary(class);
                if (p.height(), p.width()) != (gt.height(), gt.width()) {
                    return Err(Error::shape("score", &[p.height(), p.width()], &[gt.height(), gt.width()]));
                }
                total += p.count() + gt.count();
                inter += p.data().iter().zip(gt.data()).filter(|(a, b)| **a && **b).count();
                if let Some(h) = hausdorff(&p, &gt)? {
                    any_hd = true;
                    hd = Some(hd.map_or(h, |x: f64| x.max(h)));
                }
            }
            let dice = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
            rows.push(MetricRow {
                subject_id,
                class_id: class,
                dice,
                hausdorff: if any_hd { hd } else { None },
            });
        }
    }
    Ok(rows)
}

/// Ensemble predictions on full images, scored per subject and aggregated.
pub fn evaluate(pair: &NetworkPair, samples: &[Sample]) -> Result<(Vec<MetricRow>, Summary)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let predictions: Vec<LabelMap> = samples
        .par_iter()
        .map(|s| {
            let x = Image::stack(&[&s.image])?;
            Ok(infer_ensemble(pair, &x)?.1.remove(0))
        })
        .collect::<Result<_>>()?;
    let rows = score(&predictions, samples, pair.spec.num_classes)?;
    let summary = aggregate(&rows)?;
    Ok((rows, summary))
}
