//! Ablation runner: train each variant with shared seeds and probe it.

use crate::data::SyntheticWorld;
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::train::{
    joint_train, pretrain_vit, EncodingMode, JointModel, ModelConfig, RunOptions, TrainConfig, TrainData,
};

use super::embed::{extract_embeddings, ExtractConfig};
use super::probe::{fit_probe, ProbeSplit, Ridge};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    TabDim,
    Encodings,
    FusionCapacity,
    TabMask,
    RowAttn,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        Self::TabDim,
        Self::Encodings,
        Self::FusionCapacity,
        Self::TabMask,
        Self::RowAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TabDim => "tab_dim",
            Self::Encodings => "encodings",
            Self::FusionCapacity => "fusion_capacity",
            Self::TabMask => "tab_mask",
            Self::RowAttn => "row_attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}`")))
    }

    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::TabDim => &["32", "64", "128"],
            Self::Encodings => &["none", "geom_loc", "geom_loc_bias"],
            Self::FusionCapacity => &["4H1L", "4H2L", "8H1L", "8H2L"],
            Self::TabMask => &["0.25", "0.5", "0.75"],
            Self::RowAttn => &["no", "yes"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Applies one grid value to the configurations.
    pub fn apply(self, value: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
        let bad = || Error::config(format!("`{value}` is not a valid {} value", self.name()));
        match self {
            Self::TabDim => model.tab.row_dim = value.parse().map_err(|_| bad())?,
            Self::Encodings => model.encodings = EncodingMode::parse(value)?,
            Self::FusionCapacity => {
                let (h, l) = value.trim_end_matches('L').split_once('H').ok_or_else(bad)?;
                model.fusion.heads_tab_from_vis = h.parse().map_err(|_| bad())?;
                model.fusion.layers = l.parse().map_err(|_| bad())?;
            }
            Self::TabMask => train.tab_mask_ratio = value.parse().map_err(|_| bad())?,
            Self::RowAttn => {
                model.tab.row_attention = match value {
                    "yes" => true,
                    "no" => false,
                    _ => return Err(bad()),
                }
            }
        }
        model.validate()?;
        train.validate()
    }
}

/// Shared settings for every variant of a study.
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub model: ModelConfig,
    /// ViT pretraining, run once per seed and shared by the variants.
    pub pretrain: Option<TrainConfig>,
    pub joint: TrainConfig,
    pub test_fraction: f64,
    pub ridge: Ridge,
}

/// Copies of `model`/`train` re-seeded for one replicate.
pub fn seeded(model: &ModelConfig, train: &TrainConfig, seed: u64) -> (ModelConfig, TrainConfig) {
    let mut m = model.clone();
    m.init_seed = seed;
    let t = TrainConfig { seed, ..train.clone() };
    (m, t)
}

/// Pretrains the ViT of a fresh model for one seed.
pub fn pretrain_for_seed(data: &TrainData, study: &StudyConfig, seed: u64) -> Result<Option<JointModel>> {
    let Some(cfg) = &study.pretrain else {
        return Ok(None);
    };
    let (m, t) = seeded(&study.model, cfg, seed);
    let mut model = JointModel::new(m)?;
    pretrain_vit(&mut model, data, &t, RunOptions::default())?;
    Ok(Some(model))
}

/// Trains one variant on top of an optional pretrained ViT.
pub fn train_variant(
    data: &TrainData,
    model: ModelConfig,
    joint: &TrainConfig,
    pretrained: Option<&JointModel>,
) -> Result<JointModel> {
    let mut m = JointModel::new(model)?;
    if let Some(p) = pretrained {
        m.copy_prefix(p, "vit.")?;
    }
    joint_train(&mut m, data, joint, RunOptions::default())?;
    Ok(m)
}

/// Held-out R² of the model's tract embeddings on the planted target.
pub fn probe_model(model: &JointModel, world: &SyntheticWorld, split: &ProbeSplit, ridge: Ridge) -> Result<f64> {
    let table = extract_embeddings(model, world, &ExtractConfig::default())?;
    Ok(fit_probe(&table.values, &world.target, split, ridge)?.r2_test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// `r2[value][seed]`
    pub r2: Vec<Vec<f64>>,
}

impl AblationReport {
    pub fn median(&self, value: usize) -> f64 {
        median(&self.r2[value])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# ablation axis={}\n{}", self.axis.name(), self.axis.name());
        for seed in &self.seeds {
            s.push_str(&format!("\tseed_{seed}"));
        }
        s.push_str("\tmedian\n");
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(v);
            for r in &self.r2[i] {
                s.push_str(&format!("\t{r:.6}"));
            }
            s.push_str(&format!("\t{:.6}\n", self.median(i)));
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains and probes every grid value for every seed on a random tract
/// holdout. Grid points run in parallel; the report is in grid order.
pub fn run_ablation(
    world: &SyntheticWorld,
    data: &TrainData,
    study: &StudyConfig,
    axis: AblationAxis,
    grid: &[String],
    seeds: &[u64],
) -> Result<AblationReport> {
    for v in grid {
        axis.apply(v, &mut study.model.clone(), &mut study.joint.clone())?;
    }
    let mut r2 = vec![Vec::with_capacity(seeds.len()); grid.len()];
    for &seed in seeds {
        let pretrained = pretrain_for_seed(data, study, seed)?;
        let split = ProbeSplit::random(world.n_tracts(), study.test_fraction, seed)?;
        let scores: Vec<Result<f64>> = map_indexed(grid.len(), |i| {
            let (mut m, mut t) = seeded(&study.model, &study.joint, seed);
            axis.apply(&grid[i], &mut m, &mut t)?;
            let model = train_variant(data, m, &t, pretrained.as_ref())?;
            probe_model(&model, world, &split, study.ridge)
        });
        for (i, s) in scores.into_iter().enumerate() {
            r2[i].push(s?);
        }
    }
    Ok(AblationReport {
        axis,
        values: grid.to_vec(),
        seeds: seeds.to_vec(),
        r2,
    })
}
