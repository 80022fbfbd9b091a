//! Cross-validation splits, the optimisation loop and checkpoint retention.

use log::{debug, info};
use rand::seq::SliceRandom;
use voxelfill_tensor::rng::stream;
use voxelfill_tensor::{adam_step, AdamConfig, AdamState, Graph, Mode, Tensor, Var};

use crate::augment::{apply_augment, sample_augment, Interpolation};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_triple, KeyValues};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::maskgen::MaskGenParams;
use crate::patch::{check_divisible, make_training_pair, TrainingPair};
use crate::unet::{forward, UNetConfig, UNetParams};
use crate::volume::{Dims, Label, LabelMask, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub folds: usize,
    pub n_best: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub unet: UNetConfig,
    pub patch: Dims,
    pub masks_per_scan: usize,
    /// Redraw mirror/rotation of each healthy mask every epoch.
    pub augment: bool,
    pub maskgen: MaskGenParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            folds: 5,
            n_best: 5,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            batch_size: 1,
            seed: 0,
            unet: UNetConfig::default(),
            patch: crate::patch::DEFAULT_PATCH,
            masks_per_scan: 5,
            augment: true,
            maskgen: MaskGenParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.n_best == 0 {
            return bad("n_best must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.masks_per_scan == 0 {
            return bad("masks_per_scan must be at least 1");
        }
        let a = &self.adam;
        if !(a.lr >= 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return bad("invalid optimizer settings");
        }
        self.unet.validate()?;
        self.loss.validate()?;
        self.maskgen.validate()?;
        check_divisible(self.patch, &self.unet)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.unet.to_kv();
        kv.push("epochs", self.epochs);
        kv.push("folds", self.folds);
        kv.push("n_best", self.n_best);
        kv.push("lr", self.adam.lr);
        kv.push("beta1", self.adam.beta1);
        kv.push("beta2", self.adam.beta2);
        kv.push("adam_eps", self.adam.eps);
        self.loss.write_kv(&mut kv);
        kv.push("batch_size", self.batch_size);
        kv.push("seed", self.seed);
        let p = self.patch;
        kv.push("patch", format!("{},{},{}", p.nx, p.ny, p.nz));
        kv.push("masks_per_scan", self.masks_per_scan);
        kv.push("augment", self.augment);
        self.maskgen.write_kv(&mut kv);
        kv
    }

    /// Reads a `key = value` config; absent keys keep the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<String> = Self::default().to_kv().keys().map(str::to_string).collect();
        if let Some(k) = kv.keys().find(|k| !known.iter().any(|n| n == k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let d = Self::default();
        let cfg = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            folds: kv.get_or("folds", d.folds)?,
            n_best: kv.get_or("n_best", d.n_best)?,
            adam: AdamConfig {
                lr: kv.get_or("lr", d.adam.lr)?,
                beta1: kv.get_or("beta1", d.adam.beta1)?,
                beta2: kv.get_or("beta2", d.adam.beta2)?,
                eps: kv.get_or("adam_eps", d.adam.eps)?,
            },
            loss: LossConfig::from_kv(kv)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            unet: UNetConfig::from_kv(kv)?,
            patch: kv
                .get("patch")
                .map_or(Ok(d.patch), |s| parse_triple(s).map(Dims::from))?,
            masks_per_scan: kv.get_or("masks_per_scan", d.masks_per_scan)?,
            augment: kv.get_or("augment", d.augment)?,
            maskgen: MaskGenParams::from_kv(kv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
}

/// Shuffles `items` with `seed` and deals them into `k` validation folds
/// whose sizes differ by at most one.
pub fn kfold_split<T: Clone>(items: &[T], k: usize, seed: u64) -> Result<Vec<Split<T>>> {
    if k < 2 || items.len() < k {
        return Err(Error::Split {
            items: items.len(),
            folds: k,
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut stream(seed, "kfold", 0));
    let (q, r) = (items.len() / k, items.len() % k);
    let mut start = 0;
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let len = q + usize::from(f < r);
        let val_idx = &order[start..start + len];
        let mut in_val = vec![false; items.len()];
        for &i in val_idx {
            in_val[i] = true;
        }
        out.push(Split {
            train: order
                .iter()
                .filter(|&&i| !in_val[i])
                .map(|&i| items[i].clone())
                .collect(),
            val: val_idx.iter().map(|&i| items[i].clone()).collect(),
        });
        start += len;
    }
    Ok(out)
}

/// Keeps the `n` lowest losses seen so far; on ties the earlier epoch stays.
#[derive(Clone, Debug)]
pub struct Retention<T> {
    capacity: usize,
    kept: Vec<(f64, usize, T)>,
}

impl<T> Retention<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            kept: Vec::with_capacity(capacity + 1),
        }
    }

    /// Returns whether the entry was kept.
    pub fn offer(&mut self, loss: f64, epoch: usize, item: T) -> bool {
        if self.kept.len() == self.capacity {
            match self.kept.last() {
                Some(&(worst, _, _)) if loss < worst => {
                    self.kept.pop();
                }
                _ => return false,
            }
        }
        let at = self
            .kept
            .partition_point(|&(l, e, _)| l < loss || (l == loss && e < epoch));
        self.kept.insert(at, (loss, epoch, item));
        true
    }

    /// Best first.
    pub fn entries(&self) -> impl Iterator<Item = (f64, usize, &T)> {
        self.kept.iter().map(|(l, e, t)| (*l, *e, t))
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.kept.iter().map(|k| k.1).collect()
    }

    pub fn into_items(self) -> Vec<T> {
        self.kept.into_iter().map(|k| k.2).collect()
    }
}

/// Supplies the training examples of each epoch.
pub trait PairSource {
    fn epoch_pairs(&self, epoch: usize) -> Result<Vec<TrainingPair>>;
}

impl PairSource for [TrainingPair] {
    fn epoch_pairs(&self, _: usize) -> Result<Vec<TrainingPair>> {
        Ok(self.to_vec())
    }
}

impl PairSource for Vec<TrainingPair> {
    fn epoch_pairs(&self, _: usize) -> Result<Vec<TrainingPair>> {
        Ok(self.clone())
    }
}

/// A scan with its generated healthy masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub id: String,
    pub t1n: Volume,
    pub brain: LabelMask,
    pub unhealthy: LabelMask,
    pub healthy_masks: Vec<LabelMask>,
}

impl ScanRecord {
    /// Training pairs with the masks as generated.
    pub fn pairs(&self, patch: Dims) -> Result<Vec<TrainingPair>> {
        self.healthy_masks
            .iter()
            .map(|h| make_training_pair(&self.t1n, h, &self.unhealthy, patch))
            .collect()
    }
}

/// Scans whose healthy masks are mirrored and rotated afresh each epoch.
/// The augmented mask is clipped to the brain and kept off the tumour; the
/// image is re-voided from it. A mask that augments to nothing is used
/// unchanged.
pub struct AugmentedScans<'a> {
    pub scans: &'a [ScanRecord],
    pub patch: Dims,
    pub seed: u64,
    pub augment: bool,
}

impl PairSource for AugmentedScans<'_> {
    fn epoch_pairs(&self, epoch: usize) -> Result<Vec<TrainingPair>> {
        let mut out = Vec::new();
        for scan in self.scans {
            let n = scan.healthy_masks.len();
            for (k, mask) in scan.healthy_masks.iter().enumerate() {
                let mask = if self.augment {
                    let key = format!("epoch-augment/{}", scan.id);
                    let spec = sample_augment(&mut stream(self.seed, &key, (epoch * n + k) as u64));
                    let moved = apply_augment(mask, &spec, Interpolation::Nearest)?;
                    let clipped = LabelMask::from_fn(mask.dims(), |x, y, z| {
                        let ok = moved.get(x, y, z) == Label::Healthy
                            && scan.brain.get(x, y, z).is_masked()
                            && !scan.unhealthy.get(x, y, z).is_masked();
                        if ok {
                            Label::Healthy
                        } else {
                            Label::Background
                        }
                    });
                    if clipped.count(Label::Healthy) > 0 {
                        clipped
                    } else {
                        mask.clone()
                    }
                } else {
                    mask.clone()
                };
                out.push(make_training_pair(
                    &scan.t1n,
                    &mask,
                    &scan.unhealthy,
                    self.patch,
                )?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Loss of every optimiser step, in order.
    pub step_loss: Vec<f64>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation loss per epoch (training loss when there is no
    /// validation data).
    pub val_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: UNetParams,
    /// Best first.
    pub retained: Vec<Checkpoint>,
    pub history: History,
}

fn loss_and_grads(
    params: &UNetParams,
    cfg: &TrainConfig,
    pair: &TrainingPair,
    mode: Mode,
    dropout_key: u64,
    want_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = if want_grads {
        params.bind(&mut g)
    } else {
        params
            .tensors()
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect()
    };
    let x = g.constant(pair.input.clone());
    let y = g.constant(pair.target.clone());
    let mut rng = stream(cfg.seed, "dropout", dropout_key);
    let out = forward(&mut g, &vars, &cfg.unet, x, mode, &mut rng)?;
    let loss = combined_loss(&mut g, out, y, &pair.healthy, &cfg.loss)?;
    let value = g.value(loss).item().expect("scalar loss");
    if !want_grads || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("parameters have gradients"))
        .collect();
    Ok((value, grads))
}

/// Mean eval-mode loss over `pairs`.
pub fn evaluate_loss(
    params: &UNetParams,
    cfg: &TrainConfig,
    pairs: &[TrainingPair],
) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        total += loss_and_grads(params, cfg, p, Mode::Eval, 0, false)?.0;
    }
    Ok(total / pairs.len() as f64)
}

/// Runs `cfg.epochs` epochs of Adam on the combined loss.
///
/// Each epoch visits the source's pairs in a seeded order, in batches whose
/// gradients are averaged. Checkpoints with the `n_best` lowest validation
/// losses are retained.
pub fn train_loop<S: PairSource + ?Sized>(
    init: UNetParams,
    train: &S,
    val: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.check_against(&cfg.unet)?;
    let mut params = init;
    let mut state = AdamState::new(cfg.adam, params.tensors());
    let mut history = History::default();
    let mut keep = Retention::new(cfg.n_best);
    let echo = cfg.to_kv();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut pairs = train.epoch_pairs(epoch)?;
        if pairs.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        pairs.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));
        let mut epoch_total = 0.0;
        for batch in pairs.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for pair in batch {
                let (loss, grads) = loss_and_grads(&params, cfg, pair, Mode::Train, step, true)?;
                step += 1;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        loss,
                        history: history.train_loss,
                    });
                }
                batch_loss += loss;
                sum = Some(match sum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = sum.expect("batch is non-empty");
            let inv = 1.0 / batch.len() as f64;
            if batch.len() > 1 {
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x *= inv);
                }
            }
            adam_step(params.tensors_mut(), &grads, &mut state)?;
            history.step_loss.push(batch_loss * inv);
            epoch_total += batch_loss;
        }
        let train_mean = epoch_total / pairs.len() as f64;
        let val_loss = if val.is_empty() {
            train_mean
        } else {
            evaluate_loss(&params, cfg, val)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: val_loss,
                history: history.train_loss,
            });
        }
        history.train_loss.push(train_mean);
        history.val_loss.push(val_loss);
        info!("epoch {epoch}: train {train_mean:.6} val {val_loss:.6}");
        if keep.offer(val_loss, epoch, params.clone()) {
            debug!("epoch {epoch} retained");
        }
    }
    let retained = keep
        .entries()
        .map(|(l, e, p)| Checkpoint {
            config: echo.clone(),
            epoch: e,
            val_loss: l,
            params: p.clone(),
        })
        .collect();
    Ok(TrainOutcome {
        params,
        retained,
        history,
    })
}
