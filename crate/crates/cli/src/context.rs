use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use geotab_core::config::KvConfig;
use geotab_core::data::{DatasetManifest, SplitConfig, SyntheticWorld, WorldConfig};
use geotab_core::eval::{ExtractConfig, Ridge};
use geotab_core::train::{ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 600 km world, 80 km regions, desk-scale training.
    Default,
    /// 200 km world, 20 km regions and a few training steps.
    Tiny,
}

#[derive(Clone, Debug)]
pub struct Settings {
    pub world: WorldConfig,
    pub seed: u64,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub test_fraction: f64,
    pub probe_seed: u64,
    pub ridge: Ridge,
    pub extract: ExtractConfig,
}

fn preset_kv(preset: Preset) -> KvConfig {
    let mut kv = KvConfig::new();
    let (world, split, model, pretrain, train) = match preset {
        Preset::Default => (
            WorldConfig::default(),
            SplitConfig::default(),
            ModelConfig::default(),
            TrainConfig::pretrain(),
            TrainConfig::joint(),
        ),
        Preset::Tiny => {
            let short = |base: TrainConfig| TrainConfig {
                epochs: 2,
                warmup_epochs: 1,
                regions_per_epoch: 16,
                batch_size: 4,
                ..base
            };
            (
                WorldConfig::tiny(),
                SplitConfig {
                    regions: 40,
                    region_km: 20.0,
                    holdout_regions: 4,
                    ..SplitConfig::default()
                },
                ModelConfig::tiny(),
                short(TrainConfig::pretrain()),
                short(TrainConfig::joint()),
            )
        }
    };
    world.to_kv(&mut kv);
    kv.set("world.seed", 0);
    split.to_kv(&mut kv);
    model.to_kv(&mut kv);
    pretrain.to_kv(&mut kv, "pretrain");
    train.to_kv(&mut kv, "train");
    kv.set("probe.test_fraction", 0.2);
    kv.set("probe.seed", 0);
    kv.set("probe.ridge", "auto");
    kv.set("eval.average_covering", false);
    kv
}

impl Settings {
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = preset_kv(preset);
        if let Some(f) = file {
            let user = KvConfig::load(f).with_context(|| format!("reading config {}", f.display()))?;
            kv.merge(&user);
        }
        for o in overrides {
            if !o.contains('=') {
                bail!("override `{o}` is not key=value");
            }
            kv.merge(&KvConfig::parse(o)?);
        }
        let world = WorldConfig::from_kv(&kv)?;
        let seed = kv.get("world.seed")?.unwrap_or(0);
        let split = SplitConfig::from_kv(&kv, SplitConfig::default())?;
        let model = ModelConfig::from_kv(&kv)?;
        let pretrain = TrainConfig::from_kv(&kv, "pretrain", TrainConfig::pretrain())?;
        let train = TrainConfig::from_kv(&kv, "train", TrainConfig::joint())?;
        let test_fraction = kv.get("probe.test_fraction")?.unwrap_or(0.2);
        let probe_seed = kv.get("probe.seed")?.unwrap_or(0);
        let ridge = match kv.raw("probe.ridge").unwrap_or("auto") {
            "auto" => Ridge::Auto,
            v => Ridge::Fixed(v.parse().map_err(|_| anyhow!("probe.ridge: cannot parse `{v}`"))?),
        };
        let extract = ExtractConfig {
            average_covering: kv.get("eval.average_covering")?.unwrap_or(false),
        };
        kv.ensure_all_used()?;
        Ok(Self {
            world,
            seed,
            split,
            model,
            pretrain,
            train,
            test_fraction,
            probe_seed,
            ridge,
            extract,
        })
    }
}

/// Paths under the run directory.
pub struct Run {
    pub dir: PathBuf,
}

impl Run {
    pub fn data(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn ensure(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    /// The world recorded by `generate`, rebuilt from its configuration.
    pub fn world(&self) -> Result<SyntheticWorld> {
        let path = self.data().join("world.cfg");
        if !path.exists() {
            bail!("no dataset at {}; run `geotab generate` first", self.data().display());
        }
        let kv = KvConfig::load(&path)?;
        let cfg = WorldConfig::from_kv(&kv)?;
        let seed = kv.get("world.seed")?.unwrap_or(0);
        Ok(SyntheticWorld::generate(&cfg, seed)?)
    }

    pub fn manifest(&self, world: &SyntheticWorld) -> Result<DatasetManifest> {
        let m = DatasetManifest::load(&self.data().join("manifest.txt"))?;
        m.check(world)?;
        Ok(m)
    }
}
