//! Train/validation/holdout region assignment and its text format.
//!
//! ```text
//! format = geotab-manifest-1
//! seed = 7
//! world_hash = 0123456789abcdef
//! region_km = 80
//! holdout_km = 120,120,300,300
//! region.00000 = train -100.31 40.12
//! region.00001 = val -99.87 39.55
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{join, KvConfig};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::geometry::{intersects_box, BoxKm};

use super::region::box_around;
use super::world::SyntheticWorld;

const FORMAT: &str = "geotab-manifest-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Holdout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Holdout => "holdout",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "holdout" => Ok(Split::Holdout),
            _ => Err(Error::Parse(format!("split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionEntry {
    pub split: Split,
    pub center: GeoPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    /// Train plus validation regions.
    pub regions: usize,
    pub val_fraction: f64,
    pub region_km: f64,
    /// Extra clearance between train/val boxes and the holdout box.
    pub margin_km: f64,
    pub holdout_regions: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            regions: 500,
            val_fraction: 0.1,
            region_km: 80.0,
            margin_km: 0.0,
            holdout_regions: 20,
        }
    }
}

impl SplitConfig {
    pub fn from_kv(kv: &KvConfig, base: Self) -> Result<Self> {
        let mut c = base;
        kv.read("split.regions", &mut c.regions)?;
        kv.read("split.val_fraction", &mut c.val_fraction)?;
        kv.read("split.region_km", &mut c.region_km)?;
        kv.read("split.margin_km", &mut c.margin_km)?;
        kv.read("split.holdout_regions", &mut c.holdout_regions)?;
        Ok(c)
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("split.regions", self.regions);
        kv.set("split.val_fraction", self.val_fraction);
        kv.set("split.region_km", self.region_km);
        kv.set("split.margin_km", self.margin_km);
        kv.set("split.holdout_regions", self.holdout_regions);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub world_hash: u64,
    pub region_km: f64,
    pub holdout_km: BoxKm,
    pub regions: Vec<RegionEntry>,
}

impl DatasetManifest {
    pub fn centers(&self, split: Split) -> Vec<GeoPoint> {
        self.regions
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.center)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.regions.iter().filter(|r| r.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvConfig::new();
        kv.set("format", FORMAT);
        kv.set("seed", self.seed);
        kv.set("world_hash", format!("{:016x}", self.world_hash));
        kv.set("region_km", self.region_km);
        kv.set("holdout_km", join(&self.holdout_km));
        for (i, r) in self.regions.iter().enumerate() {
            kv.set(
                format!("region.{i:05}"),
                format!("{} {:?} {:?}", r.split.name(), r.center.lon, r.center.lat),
            );
        }
        kv.to_text()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        let req = |k: &str| kv.raw(k).ok_or_else(|| Error::Parse(format!("manifest missing `{k}`")));
        if req("format")? != FORMAT {
            return Err(Error::Parse(format!("manifest format `{}`", req("format")?)));
        }
        let world_hash =
            u64::from_str_radix(req("world_hash")?, 16).map_err(|_| Error::Parse("manifest world_hash".into()))?;
        let holdout: Vec<f64> = kv.get_list("holdout_km")?.unwrap_or_default();
        let holdout_km = holdout
            .try_into()
            .map_err(|_| Error::Parse("manifest holdout_km needs 4 values".into()))?;
        let mut regions = Vec::new();
        for (k, v) in kv.iter().filter(|(k, _)| k.starts_with("region.")) {
            let parts: Vec<&str> = v.split_whitespace().collect();
            let [s, lon, lat] = parts[..] else {
                return Err(Error::Parse(format!("{k}: expected `split lon lat`")));
            };
            let num = |x: &str| x.parse::<f64>().map_err(|_| Error::Parse(format!("{k}: `{x}`")));
            regions.push(RegionEntry {
                split: Split::parse(s)?,
                center: GeoPoint::new(num(lon)?, num(lat)?)?,
            });
        }
        Ok(Self {
            seed: kv
                .get("seed")?
                .ok_or_else(|| Error::Parse("manifest missing `seed`".into()))?,
            world_hash,
            region_km: kv
                .get("region_km")?
                .ok_or_else(|| Error::Parse("manifest missing `region_km`".into()))?,
            holdout_km,
            regions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Errors if the manifest was made for a different world, or if any
    /// train/val region touches a holdout tract.
    pub fn check(&self, world: &SyntheticWorld) -> Result<()> {
        if self.world_hash != world.hash() {
            return Err(Error::ConfigHash {
                checkpoint: self.world_hash,
                current: world.hash(),
            });
        }
        for r in &self.regions {
            if r.split != Split::Holdout
                && touches_holdout(world, box_around(world.frame.to_km(r.center), self.region_km))
            {
                return Err(Error::config(format!(
                    "{} region at ({}, {}) overlaps a holdout tract",
                    r.split.name(),
                    r.center.lon,
                    r.center.lat
                )));
            }
        }
        Ok(())
    }
}

fn overlaps(a: BoxKm, b: BoxKm) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn touches_holdout(world: &SyntheticWorld, bx: BoxKm) -> bool {
    world.tracts.iter().filter(|t| t.holdout).any(|t| {
        let b = t.bbox;
        !(b[2] < bx[0] || b[0] > bx[2] || b[3] < bx[1] || b[1] > bx[3]) && intersects_box(&t.planar, bx)
    })
}

/// Draws region centres: holdout regions inside the holdout box, train and
/// validation regions whose boxes clear both the holdout box and every
/// holdout tract, split 9:1 by default.
pub fn make_splits(world: &SyntheticWorld, cfg: &SplitConfig, seed: u64) -> Result<DatasetManifest> {
    let wc = &world.config;
    wc.validate()?;
    let r = cfg.region_km;
    if !(0.0..1.0).contains(&cfg.val_fraction) || !(r > 0.0) || r > wc.extent_km || cfg.regions == 0 {
        return Err(Error::config(format!(
            "split config: {} regions, val fraction {}, {} km",
            cfg.regions, cfg.val_fraction, r
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(20);
    let lim = wc.half() - r / 2.0;
    let hb = wc.holdout_km;
    let guard = [
        hb[0] - cfg.margin_km,
        hb[1] - cfg.margin_km,
        hb[2] + cfg.margin_km,
        hb[3] + cfg.margin_km,
    ];

    let mut regions = Vec::with_capacity(cfg.regions + cfg.holdout_regions);
    let mut attempts = 0usize;
    while regions.len() < cfg.regions {
        attempts += 1;
        if attempts > 1000 * cfg.regions.max(10) {
            return Err(Error::config("could not place train regions outside the holdout box"));
        }
        let c = [rng.gen_range(-lim..=lim), rng.gen_range(-lim..=lim)];
        let bx = box_around(c, r);
        if overlaps(bx, guard) || touches_holdout(world, bx) {
            continue;
        }
        regions.push(c);
    }
    let n_val = (cfg.val_fraction * cfg.regions as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.regions).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::Train; cfg.regions];
    order[..n_val].iter().for_each(|&i| split[i] = Split::Val);

    let mut entries: Vec<RegionEntry> = regions
        .iter()
        .zip(split)
        .map(|(c, s)| RegionEntry {
            split: s,
            center: world.frame.to_geo(c[0], c[1]),
        })
        .collect();
    // holdout centres: inside the holdout box, boxes kept within the world
    for _ in 0..cfg.holdout_regions {
        let x = rng.gen_range(hb[0]..=hb[2]).clamp(-lim, lim);
        let y = rng.gen_range(hb[1]..=hb[3]).clamp(-lim, lim);
        entries.push(RegionEntry {
            split: Split::Holdout,
            center: world.frame.to_geo(x, y),
        });
    }
    Ok(DatasetManifest {
        seed,
        world_hash: world.hash(),
        region_km: r,
        holdout_km: hb,
        regions: entries,
    })
}
