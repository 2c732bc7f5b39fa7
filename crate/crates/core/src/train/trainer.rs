use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{fnv1a64, KvConfig};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::graph::Graph;
use crate::optim::{lr_at, AdamWConfig, OptimizerState};
use crate::params::ParamGrads;
use crate::tabular::TabTConfig;
use crate::vision::{sample_mask_with, vision_loss, MaskPlan};

use super::data::{RegionInput, TrainData};
use super::model::JointModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Regions drawn per epoch, cycling through a fresh shuffle of the
    /// training regions.
    pub regions_per_epoch: usize,
    pub batch_size: usize,
    pub vis_mask_ratio: f64,
    pub tab_mask_ratio: f64,
    /// Tabular loss weight.
    pub lambda: f64,
    /// Cosine term weight in the vision loss.
    pub beta: f64,
    pub seed: u64,
    pub freeze_vit: bool,
    /// Validation regions scored before and after training (0 = all).
    pub val_regions: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            vis_mask_ratio: 0.75,
            beta: 1.0,
            ..Self::joint()
        }
    }

    pub fn joint() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.04,
            warmup_epochs: 2,
            epochs: 50,
            regions_per_epoch: 500,
            batch_size: 16,
            vis_mask_ratio: 0.5,
            tab_mask_ratio: TabTConfig::default().mask_ratio,
            lambda: 1.0,
            beta: 0.0,
            seed: 0,
            freeze_vit: true,
            val_regions: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = |r: f64| r > 0.0 && r < 1.0;
        if !ratio(self.vis_mask_ratio) || !ratio(self.tab_mask_ratio) {
            return Err(Error::config(format!(
                "mask ratios {} / {} outside (0, 1)",
                self.vis_mask_ratio, self.tab_mask_ratio
            )));
        }
        if self.lambda < 0.0 || self.beta < 0.0 || !(self.lr >= 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("lambda, beta, lr and weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.regions_per_epoch == 0 {
            return Err(Error::config("batch size and regions per epoch must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.regions_per_epoch.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        self.steps_per_epoch() * self.warmup_epochs as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.lr, self.warmup_steps(), self.total_steps())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn from_kv(kv: &KvConfig, prefix: &str, base: Self) -> Result<Self> {
        let mut c = base;
        let k = |s: &str| format!("{prefix}.{s}");
        kv.read(&k("lr"), &mut c.lr)?;
        kv.read(&k("beta1"), &mut c.beta1)?;
        kv.read(&k("beta2"), &mut c.beta2)?;
        kv.read(&k("weight_decay"), &mut c.weight_decay)?;
        kv.read(&k("warmup_epochs"), &mut c.warmup_epochs)?;
        kv.read(&k("epochs"), &mut c.epochs)?;
        kv.read(&k("regions_per_epoch"), &mut c.regions_per_epoch)?;
        kv.read(&k("batch_size"), &mut c.batch_size)?;
        kv.read(&k("vis_mask_ratio"), &mut c.vis_mask_ratio)?;
        kv.read(&k("tab_mask_ratio"), &mut c.tab_mask_ratio)?;
        kv.read(&k("lambda"), &mut c.lambda)?;
        kv.read(&k("beta"), &mut c.beta)?;
        kv.read(&k("seed"), &mut c.seed)?;
        kv.read(&k("freeze_vit"), &mut c.freeze_vit)?;
        kv.read(&k("val_regions"), &mut c.val_regions)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self, kv: &mut KvConfig, prefix: &str) {
        let k = |s: &str| format!("{prefix}.{s}");
        kv.set(k("lr"), self.lr);
        kv.set(k("beta1"), self.beta1);
        kv.set(k("beta2"), self.beta2);
        kv.set(k("weight_decay"), self.weight_decay);
        kv.set(k("warmup_epochs"), self.warmup_epochs);
        kv.set(k("epochs"), self.epochs);
        kv.set(k("regions_per_epoch"), self.regions_per_epoch);
        kv.set(k("batch_size"), self.batch_size);
        kv.set(k("vis_mask_ratio"), self.vis_mask_ratio);
        kv.set(k("tab_mask_ratio"), self.tab_mask_ratio);
        kv.set(k("lambda"), self.lambda);
        kv.set(k("beta"), self.beta);
        kv.set(k("seed"), self.seed);
        kv.set(k("freeze_vit"), self.freeze_vit);
        kv.set(k("val_regions"), self.val_regions);
    }

    pub fn hash(&self) -> u64 {
        let mut kv = KvConfig::new();
        self.to_kv(&mut kv, "t");
        fnv1a64(kv.to_text().as_bytes())
    }
}

/// Which loss a run minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Vision MAE alone: masked MSE plus `beta` times the cosine distance.
    Pretrain,
    Joint,
}

impl Objective {
    fn tag(self) -> u64 {
        match self {
            Objective::Pretrain => 1,
            Objective::Joint => 2,
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub vis: f64,
    pub tab: f64,
    pub joint: f64,
}

pub const LOG_HEADER: &str = "step\tlr\tL_vis\tL_tab\tL_joint";

impl LogRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:e}\t{:?}\t{:?}\t{:?}",
            self.step, self.lr, self.vis, self.tab, self.joint
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub vis: f64,
    pub tab: f64,
    pub joint: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train: LossSummary,
    pub val: LossSummary,
}

/// Optimizer state and position; together with the parameters this is
/// everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub objective: Objective,
    pub step: u64,
    pub seed: u64,
    pub optimizer: OptimizerState,
    pub train_hash: u64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochRow>,
    pub init_val: LossSummary,
    pub final_val: LossSummary,
    /// Samples skipped because a mask left no visible or no masked rows.
    pub skipped: usize,
    pub state: TrainState,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub resume: Option<TrainState>,
    /// Receives the header and one line per optimizer step.
    pub log: Option<&'a mut dyn Write>,
    /// Stop after this many optimizer steps in this call.
    pub max_steps: Option<u64>,
    /// Skip the before/after validation passes.
    pub skip_validation: bool,
    /// Score the validation regions after every epoch, not just the last.
    pub epoch_validation: bool,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for one `(seed, a, b)` coordinate.
pub fn derived_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ a) ^ b))
}

pub struct SampleResult {
    pub vis: f64,
    pub tab: f64,
    pub joint: f64,
    pub grads: Option<ParamGrads>,
}

/// Draws the vision and tabular plans independently.
pub fn draw_plans(input: &RegionInput, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(MaskPlan, MaskPlan)> {
    let v = sample_mask_with(input.n_patches(), cfg.vis_mask_ratio, rng)?;
    let t = sample_mask_with(input.n_tracts(), cfg.tab_mask_ratio, rng)?;
    Ok((v, t))
}

/// Loss (and optionally gradients) of one region under given plans.
pub fn sample_loss(
    model: &JointModel,
    objective: Objective,
    input: &RegionInput,
    plans: &(MaskPlan, MaskPlan),
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<SampleResult> {
    let mut g = Graph::new(&model.store);
    let (total, vis, tab) = match objective {
        Objective::Pretrain => {
            let pred = model.vit_forward(&mut g, input, &plans.0)?;
            let l = vision_loss(&mut g, pred, &input.tokens, &plans.0, cfg.beta)?;
            (l, g.value(l).data()[0], 0.0)
        }
        Objective::Joint => {
            let out = model.joint_forward(&mut g, input, &plans.0, &plans.1)?;
            let l = model.joint_loss(&mut g, &out, input, &plans.0, &plans.1, cfg.lambda, cfg.beta)?;
            (l.total, g.value(l.vis).data()[0], g.value(l.tab).data()[0])
        }
    };
    let joint = g.value(total).data()[0];
    let grads = if with_grads {
        Some(g.backward(total)?.into_params())
    } else {
        None
    };
    Ok(SampleResult { vis, tab, joint, grads })
}

/// Mean losses over validation regions with masks fixed by the seed, so
/// scores before and after training compare the same tokens.
pub fn evaluate(
    model: &JointModel,
    objective: Objective,
    regions: &[RegionInput],
    cfg: &TrainConfig,
) -> Result<LossSummary> {
    let n = if cfg.val_regions == 0 {
        regions.len()
    } else {
        cfg.val_regions.min(regions.len())
    };
    let results = map_indexed(n, |i| -> Result<Option<SampleResult>> {
        let mut rng = derived_rng(cfg.seed, u64::MAX - objective.tag(), i as u64);
        let plans = match draw_plans(&regions[i], cfg, &mut rng) {
            Ok(p) => p,
            Err(Error::DegenerateSplit { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        sample_loss(model, objective, &regions[i], &plans, cfg, false).map(Some)
    });
    let mut s = LossSummary::default();
    let mut m = 0usize;
    for r in results {
        if let Some(r) = r? {
            s.vis += r.vis;
            s.tab += r.tab;
            s.joint += r.joint;
            m += 1;
        }
    }
    if m == 0 {
        return Err(Error::config("no scorable validation regions"));
    }
    let m = m as f64;
    Ok(LossSummary {
        vis: s.vis / m,
        tab: s.tab / m,
        joint: s.joint / m,
    })
}

/// MAE pretraining of the ViT alone; every other parameter is left
/// untouched.
pub fn pretrain_vit(
    model: &mut JointModel,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: RunOptions,
) -> Result<TrainReport> {
    model.train_only(&["vit."]);
    model.freeze_vit = false;
    run(model, data, cfg, Objective::Pretrain, opts)
}

/// Joint masked autoencoding, with the ViT frozen when `cfg.freeze_vit`.
pub fn joint_train(
    model: &mut JointModel,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: RunOptions,
) -> Result<TrainReport> {
    model.train_only(&[""]);
    model.set_freeze_vit(cfg.freeze_vit);
    run(model, data, cfg, Objective::Joint, opts)
}

fn run(
    model: &mut JointModel,
    data: &TrainData,
    cfg: &TrainConfig,
    objective: Objective,
    mut opts: RunOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("no training regions"));
    }
    let train_hash = cfg.hash();
    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.train_hash != train_hash {
                return Err(Error::ConfigHash {
                    checkpoint: s.train_hash,
                    current: train_hash,
                });
            }
            if s.objective != objective {
                return Err(Error::config("checkpoint was written by a different objective"));
            }
            s
        }
        None => TrainState {
            objective,
            step: 0,
            seed: cfg.seed,
            optimizer: OptimizerState::new(&model.store, cfg.adamw()),
            train_hash,
        },
    };
    if state.step == 0 {
        if let Some(w) = opts.log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
    }
    let val_set = if data.val.is_empty() { &data.train } else { &data.val };
    let init_val = if opts.skip_validation {
        LossSummary::default()
    } else {
        evaluate(model, objective, val_set, cfg)?
    };

    let spe = cfg.steps_per_epoch();
    let total = cfg.total_steps();
    let stop = opts.max_steps.map_or(total, |m| (state.step + m).min(total));
    let b = cfg.batch_size;
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut skipped = 0usize;
    let mut epoch_acc = (LossSummary::default(), 0usize);
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;

    while state.step < stop {
        let step = state.step;
        let epoch = step / spe;
        if epoch != order_epoch {
            order = (0..data.train.len()).collect();
            order.shuffle(&mut derived_rng(cfg.seed, objective.tag(), epoch | 1 << 63));
            order_epoch = epoch;
        }
        let first = ((step % spe) as usize) * b;
        let count = b.min(cfg.regions_per_epoch - first);
        let results = map_indexed(count, |i| -> Result<Option<SampleResult>> {
            let s = first + i;
            let input = &data.train[order[s % order.len()]];
            let mut rng = derived_rng(cfg.seed, objective.tag() << 56 ^ step, i as u64);
            let plans = match draw_plans(input, cfg, &mut rng) {
                Ok(p) => p,
                Err(Error::DegenerateSplit { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            sample_loss(model, objective, input, &plans, cfg, true).map(Some)
        });
        let mut used = Vec::with_capacity(count);
        for r in results {
            match r? {
                Some(r) => used.push(r),
                None => skipped += 1,
            }
        }
        if used.is_empty() {
            state.step += 1;
            continue;
        }
        let scale = 1.0 / used.len() as f64;
        let mut row = LogRow {
            step,
            lr: cfg.lr_at(step),
            vis: 0.0,
            tab: 0.0,
            joint: 0.0,
        };
        for (i, r) in used.iter().enumerate() {
            if !r.joint.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step}, sample {i}: L_vis={} L_tab={} L_joint={}",
                    r.vis, r.tab, r.joint
                )));
            }
            row.vis += r.vis * scale;
            row.tab += r.tab * scale;
            row.joint += r.joint * scale;
        }
        for r in &used {
            model.store.accumulate(r.grads.as_ref().expect("requested"), scale);
        }
        state.optimizer.step(&mut model.store, row.lr);
        state.step += 1;
        if let Some(w) = opts.log.as_deref_mut() {
            writeln!(w, "{}", row.to_line())?;
        }
        log.push(row);
        epoch_acc.0.vis += row.vis;
        epoch_acc.0.tab += row.tab;
        epoch_acc.0.joint += row.joint;
        epoch_acc.1 += 1;
        if state.step % spe == 0 {
            let n = epoch_acc.1 as f64;
            let train = LossSummary {
                vis: epoch_acc.0.vis / n,
                tab: epoch_acc.0.tab / n,
                joint: epoch_acc.0.joint / n,
            };
            let val = if opts.skip_validation || (!opts.epoch_validation && state.step < total) {
                LossSummary::default()
            } else {
                evaluate(model, objective, val_set, cfg)?
            };
            epochs.push(EpochRow {
                epoch: epoch as usize,
                train,
                val,
            });
            epoch_acc = (LossSummary::default(), 0);
        }
    }
    let final_val = if opts.skip_validation {
        LossSummary::default()
    } else {
        match epochs.last() {
            Some(e) if state.step == total && e.val != LossSummary::default() => e.val,
            _ => evaluate(model, objective, val_set, cfg)?,
        }
    };
    Ok(TrainReport {
        log,
        epochs,
        init_val,
        final_val,
        skipped,
        state,
    })
}
