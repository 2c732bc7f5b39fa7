//! Synthetic co-registered world: smooth latent fields, a multichannel
//! raster derived from them, jittered-grid tracts with tabular features
//! and a planted per-tract target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{fnv1a64, join, KvConfig};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, LocalFrame};
use crate::geometry::{centroid, contains, BoxKm, Pt, TractPolygon};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRole {
    /// Drives the raster only.
    Vision,
    /// Drives tabular features only.
    Tabular,
    Shared,
}

impl LatentRole {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Self::Vision),
            "tabular" => Ok(Self::Tabular),
            "shared" => Ok(Self::Shared),
            _ => Err(Error::Parse(format!("latent role `{s}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Vision => "vision",
            Self::Tabular => "tabular",
            Self::Shared => "shared",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentSpec {
    pub length_km: f64,
    pub role: LatentRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub ref_lon: f64,
    pub ref_lat: f64,
    /// Side of the square world (km); the frame is centred on the reference point.
    pub extent_km: f64,
    pub cell_km: f64,
    pub channels: usize,
    pub features: usize,
    pub tracts_per_side: usize,
    /// Corner jitter as a fraction of the tract spacing.
    pub corner_jitter: f64,
    /// Edge-midpoint jitter as a fraction of the tract spacing.
    pub edge_jitter: f64,
    pub rep_jitter_km: f64,
    pub latents: Vec<LatentSpec>,
    /// Bumps per squared length scale.
    pub bump_density: f64,
    pub pixel_noise: f64,
    /// Noise on the tract-level observation of the tabular latent.
    pub tab_latent_noise: f64,
    pub feature_noise: f64,
    pub missing_rate: f64,
    pub target_noise: f64,
    pub neighbor_sigma_km: f64,
    /// Held-out sub-box in frame km.
    pub holdout_km: BoxKm,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            ref_lon: -100.0,
            ref_lat: 40.0,
            extent_km: 600.0,
            cell_km: 1.25,
            channels: 8,
            features: 12,
            tracts_per_side: 45,
            corner_jitter: 0.15,
            edge_jitter: 0.1,
            rep_jitter_km: 0.0,
            latents: vec![
                LatentSpec {
                    length_km: 40.0,
                    role: LatentRole::Vision,
                },
                LatentSpec {
                    length_km: 10.0,
                    role: LatentRole::Tabular,
                },
                LatentSpec {
                    length_km: 40.0,
                    role: LatentRole::Shared,
                },
                LatentSpec {
                    length_km: 8.0,
                    role: LatentRole::Shared,
                },
            ],
            bump_density: 1.0,
            pixel_noise: 0.1,
            tab_latent_noise: 1.0,
            feature_noise: 0.1,
            missing_rate: 0.0,
            target_noise: 0.2,
            neighbor_sigma_km: 15.0,
            holdout_km: [120.0, 120.0, 300.0, 300.0],
        }
    }
}

impl WorldConfig {
    /// A 200 km world of 225 tracts.
    pub fn tiny() -> Self {
        Self {
            extent_km: 200.0,
            tracts_per_side: 15,
            holdout_km: [40.0, 40.0, 100.0, 100.0],
            ..Self::default()
        }
    }

    pub fn n_cells(&self) -> usize {
        (self.extent_km / self.cell_km).round() as usize
    }

    pub fn tract_spacing(&self) -> f64 {
        self.extent_km / self.tracts_per_side as f64
    }

    pub fn half(&self) -> f64 {
        self.extent_km / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.channels == 0 || self.features == 0 || self.tracts_per_side == 0 {
            return bad("world needs channels, features and tracts".into());
        }
        if !(self.extent_km > 0.0 && self.cell_km > 0.0) {
            return bad(format!("extent {} / cell {}", self.extent_km, self.cell_km));
        }
        let n = self.extent_km / self.cell_km;
        if (n - n.round()).abs() > 1e-9 {
            return bad(format!(
                "extent {} not a multiple of cell {}",
                self.extent_km, self.cell_km
            ));
        }
        if self.latents.len() < 2
            || !self.latents.iter().any(|l| l.role == LatentRole::Vision)
            || !self.latents.iter().any(|l| l.role == LatentRole::Tabular)
        {
            return bad("need at least one vision and one tabular latent".into());
        }
        if self.latents.iter().any(|l| !(l.length_km > 0.0)) {
            return bad("latent length scales must be positive".into());
        }
        if !(0.0..0.25).contains(&self.corner_jitter) || !(0.0..0.25).contains(&self.edge_jitter) {
            return bad("jitter must be in [0, 0.25)".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate {}", self.missing_rate));
        }
        let [x0, y0, x1, y1] = self.holdout_km;
        let h = self.half();
        if !(x0 < x1 && y0 < y1) || x0 < -h || y0 < -h || x1 > h || y1 > h {
            return bad(format!("holdout box {:?} outside the world", self.holdout_km));
        }
        if (x1 - x0) * (y1 - y0) > 0.5 * self.extent_km * self.extent_km {
            return bad("holdout box covers more than half the world".into());
        }
        if !(self.bump_density > 0.0 && self.neighbor_sigma_km > 0.0) {
            return bad("bump density and neighbour sigma must be positive".into());
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.read("world.ref_lon", &mut c.ref_lon)?;
        kv.read("world.ref_lat", &mut c.ref_lat)?;
        kv.read("world.extent_km", &mut c.extent_km)?;
        kv.read("world.cell_km", &mut c.cell_km)?;
        kv.read("world.channels", &mut c.channels)?;
        kv.read("world.features", &mut c.features)?;
        kv.read("world.tracts_per_side", &mut c.tracts_per_side)?;
        kv.read("world.corner_jitter", &mut c.corner_jitter)?;
        kv.read("world.edge_jitter", &mut c.edge_jitter)?;
        kv.read("world.rep_jitter_km", &mut c.rep_jitter_km)?;
        kv.read("world.bump_density", &mut c.bump_density)?;
        kv.read("world.pixel_noise", &mut c.pixel_noise)?;
        kv.read("world.tab_latent_noise", &mut c.tab_latent_noise)?;
        kv.read("world.feature_noise", &mut c.feature_noise)?;
        kv.read("world.missing_rate", &mut c.missing_rate)?;
        kv.read("world.target_noise", &mut c.target_noise)?;
        kv.read("world.neighbor_sigma_km", &mut c.neighbor_sigma_km)?;
        if let Some(b) = kv.get_list::<f64>("world.holdout_km")? {
            c.holdout_km = b
                .try_into()
                .map_err(|_| Error::Parse("world.holdout_km needs 4 values".into()))?;
        }
        let lengths = kv.get_list::<f64>("world.latent_lengths_km")?;
        let roles = kv.get_list::<String>("world.latent_roles")?;
        match (lengths, roles) {
            (None, None) => {}
            (Some(l), Some(r)) if l.len() == r.len() => {
                c.latents = l
                    .into_iter()
                    .zip(r)
                    .map(|(length_km, r)| {
                        Ok(LatentSpec {
                            length_km,
                            role: LatentRole::parse(&r)?,
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            _ => {
                return Err(Error::config(
                    "latent lengths and roles must be given together with equal counts",
                ))
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("world.ref_lon", self.ref_lon);
        kv.set("world.ref_lat", self.ref_lat);
        kv.set("world.extent_km", self.extent_km);
        kv.set("world.cell_km", self.cell_km);
        kv.set("world.channels", self.channels);
        kv.set("world.features", self.features);
        kv.set("world.tracts_per_side", self.tracts_per_side);
        kv.set("world.corner_jitter", self.corner_jitter);
        kv.set("world.edge_jitter", self.edge_jitter);
        kv.set("world.rep_jitter_km", self.rep_jitter_km);
        kv.set("world.bump_density", self.bump_density);
        kv.set("world.pixel_noise", self.pixel_noise);
        kv.set("world.tab_latent_noise", self.tab_latent_noise);
        kv.set("world.feature_noise", self.feature_noise);
        kv.set("world.missing_rate", self.missing_rate);
        kv.set("world.target_noise", self.target_noise);
        kv.set("world.neighbor_sigma_km", self.neighbor_sigma_km);
        kv.set("world.holdout_km", join(&self.holdout_km));
        let lengths: Vec<f64> = self.latents.iter().map(|l| l.length_km).collect();
        let roles: Vec<&str> = self.latents.iter().map(|l| l.role.name()).collect();
        kv.set("world.latent_lengths_km", join(&lengths));
        kv.set("world.latent_roles", roles.join(","));
    }

    /// Stable hash of the configuration and seed.
    pub fn hash(&self, seed: u64) -> u64 {
        let mut kv = KvConfig::new();
        self.to_kv(&mut kv);
        kv.set("world.seed", seed);
        fnv1a64(kv.to_text().as_bytes())
    }
}

/// Truncation radius in length scales.
const CUTOFF: f64 = 4.0;

/// Sum of isotropic Gaussian bumps, truncated at `CUTOFF` length scales and
/// shifted so each bump is continuous at the cutoff; standardized over the
/// world raster.
#[derive(Clone, Debug)]
pub struct LatentField {
    pub spec: LatentSpec,
    centers: Vec<Pt>,
    amps: Vec<f64>,
    lo: f64,
    bucket: f64,
    nb: usize,
    buckets: Vec<Vec<u32>>,
    mean: f64,
    std: f64,
}

impl LatentField {
    fn generate(spec: LatentSpec, half: f64, density: f64, rng: &mut impl Rng) -> Self {
        let l = spec.length_km;
        let reach = CUTOFF * l;
        let lo = -half - reach;
        let side = 2.0 * (half + reach);
        let n = ((density * side * side / (l * l)).round() as usize).max(1);
        let mut centers = Vec::with_capacity(n);
        let mut amps = Vec::with_capacity(n);
        for _ in 0..n {
            centers.push([lo + rng.gen::<f64>() * side, lo + rng.gen::<f64>() * side]);
            amps.push(StandardNormal.sample(rng));
        }
        let nb = (side / reach).ceil() as usize;
        let mut buckets = vec![Vec::new(); nb * nb];
        for (i, c) in centers.iter().enumerate() {
            let bx = (((c[0] - lo) / reach) as usize).min(nb - 1);
            let by = (((c[1] - lo) / reach) as usize).min(nb - 1);
            buckets[by * nb + bx].push(i as u32);
        }
        Self {
            spec,
            centers,
            amps,
            lo,
            bucket: reach,
            nb,
            buckets,
            mean: 0.0,
            std: 1.0,
        }
    }

    fn neighborhood(&self, p: Pt) -> impl Iterator<Item = usize> + '_ {
        let bx = ((p[0] - self.lo) / self.bucket).floor() as isize;
        let by = ((p[1] - self.lo) / self.bucket).floor() as isize;
        let nb = self.nb as isize;
        (by - 1..=by + 1)
            .flat_map(move |y| (bx - 1..=bx + 1).map(move |x| (x, y)))
            .filter(move |&(x, y)| x >= 0 && y >= 0 && x < nb && y < nb)
            .flat_map(move |(x, y)| self.buckets[(y * nb + x) as usize].iter().map(|&i| i as usize))
    }

    fn raw(&self, p: Pt) -> f64 {
        let l = self.spec.length_km;
        let inv = 1.0 / (2.0 * l * l);
        let r2max = (CUTOFF * l).powi(2);
        let floor = (-r2max * inv).exp();
        let mut s = 0.0;
        for i in self.neighborhood(p) {
            let c = self.centers[i];
            let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if r2 < r2max {
                s += self.amps[i] * ((-r2 * inv).exp() - floor);
            }
        }
        s
    }

    /// Standardized field value at a frame-km point.
    pub fn eval(&self, p: Pt) -> f64 {
        (self.raw(p) - self.mean) / self.std
    }

    /// Global Lipschitz constant (per km): each bump's slope is at most
    /// `exp(-1/2) / l` times its amplitude, and any point only sees bumps
    /// from its 3x3 bucket neighbourhood.
    pub fn lipschitz(&self) -> f64 {
        let nb = self.nb as isize;
        let mut worst = 0.0f64;
        for by in 0..nb {
            for bx in 0..nb {
                let mut s = 0.0;
                for y in (by - 1).max(0)..=(by + 1).min(nb - 1) {
                    for x in (bx - 1).max(0)..=(bx + 1).min(nb - 1) {
                        s += self.buckets[(y * nb + x) as usize]
                            .iter()
                            .map(|&i| self.amps[i as usize].abs())
                            .sum::<f64>();
                    }
                }
                worst = worst.max(s);
            }
        }
        worst * (-0.5f64).exp() / (self.spec.length_km * self.std)
    }
}

#[derive(Clone, Debug)]
pub struct Tract {
    /// Equal to the tract's index in [`SyntheticWorld::tracts`].
    pub id: u64,
    pub polygon: TractPolygon,
    /// Ring in frame km.
    pub planar: Vec<Pt>,
    pub bbox: BoxKm,
    pub rep_point: GeoPoint,
    pub rep_km: Pt,
    /// Raster cells whose centres fall inside the polygon (`row * n + col`).
    pub cells: Vec<u32>,
    /// True when the polygon had no cell centre and the nearest cell was used.
    pub nearest_cell_fallback: bool,
    pub holdout: bool,
}

/// Per-feature statistics from the training tracts.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub median: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub frame: LocalFrame,
    pub n_cells: usize,
    pub latents: Vec<LatentField>,
    /// Vision mixture weights: linear `[channels, K]`, tanh input `[channels, K]`,
    /// tanh gain and offset `[channels]`.
    mix_linear: Vec<f64>,
    mix_inner: Vec<f64>,
    mix_gain: Vec<f64>,
    mix_offset: Vec<f64>,
    /// `n * n * channels`, standardized per channel.
    pub raster: Vec<f64>,
    pixel_noise: Vec<f64>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub tracts: Vec<Tract>,
    /// Tract-averaged standardized latents, `[n_tracts, K]`.
    pub tract_latents: Tensor,
    /// Raw features (NaN where missing), `[n_tracts, F]`.
    pub raw_features: Tensor,
    /// Imputed, standardized features, `[n_tracts, F]`.
    pub features: Tensor,
    pub feature_stats: FeatureStats,
    /// Neighbourhood average of the tabular latent.
    pub neighbor_tab_latent: Vec<f64>,
    pub target: Vec<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn in_box(p: Pt, b: BoxKm) -> bool {
    p[0] >= b[0] && p[0] <= b[2] && p[1] >= b[1] && p[1] <= b[3]
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let n = cfg.n_cells();
        let half = cfg.half();
        let k = cfg.latents.len();
        let c = cfg.channels;

        let mut latents: Vec<LatentField> = cfg
            .latents
            .iter()
            .enumerate()
            .map(|(i, s)| LatentField::generate(*s, half, cfg.bump_density, &mut rng_for(seed, 10 + i as u64)))
            .collect();

        let cell_center = |r: usize, col: usize| -> Pt {
            [
                -half + (col as f64 + 0.5) * cfg.cell_km,
                -half + (r as f64 + 0.5) * cfg.cell_km,
            ]
        };
        // standardize each latent over the cell centres
        let mut lat_raster = vec![0.0; n * n * k];
        for (li, f) in latents.iter_mut().enumerate() {
            let vals: Vec<f64> = (0..n * n).map(|i| f.raw(cell_center(i / n, i % n))).collect();
            let (m, s) = mean_std(vals.iter().copied());
            f.mean = m;
            f.std = if s > 0.0 { s } else { 1.0 };
            for (i, v) in vals.iter().enumerate() {
                lat_raster[i * k + li] = (v - f.mean) / f.std;
            }
        }

        // vision mixtures: no weight on tabular-only latents
        let mut rng = rng_for(seed, 1);
        let allowed = |l: usize| cfg.latents[l].role != LatentRole::Tabular;
        let mut mix_linear = vec![0.0; c * k];
        let mut mix_inner = vec![0.0; c * k];
        for ch in 0..c {
            for l in 0..k {
                if allowed(l) {
                    mix_linear[ch * k + l] = normal(&mut rng);
                    mix_inner[ch * k + l] = normal(&mut rng);
                }
            }
        }
        let mix_gain: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
        let mix_offset: Vec<f64> = (0..c).map(|_| 0.5 * normal(&mut rng)).collect();
        let mut noise_rng = rng_for(seed, 2);
        let pixel_noise: Vec<f64> = (0..n * n * c)
            .map(|_| cfg.pixel_noise * normal(&mut noise_rng))
            .collect();

        let mut world = Self {
            frame: LocalFrame::new(GeoPoint::new(cfg.ref_lon, cfg.ref_lat)?),
            n_cells: n,
            latents,
            mix_linear,
            mix_inner,
            mix_gain,
            mix_offset,
            raster: vec![0.0; n * n * c],
            pixel_noise,
            channel_mean: vec![0.0; c],
            channel_std: vec![1.0; c],
            tracts: Vec::new(),
            tract_latents: Tensor::zeros(&[0, k]),
            raw_features: Tensor::zeros(&[0, cfg.features]),
            features: Tensor::zeros(&[0, cfg.features]),
            feature_stats: FeatureStats {
                median: vec![],
                mean: vec![],
                std: vec![],
            },
            neighbor_tab_latent: vec![],
            target: vec![],
            config: cfg,
            seed,
        };

        let mut raw = vec![0.0; n * n * c];
        for i in 0..n * n {
            let lv = &lat_raster[i * k..(i + 1) * k];
            world.mix(lv, &world.pixel_noise[i * c..(i + 1) * c], &mut raw[i * c..(i + 1) * c]);
        }
        for ch in 0..c {
            let (m, s) = mean_std((0..n * n).map(|i| raw[i * c + ch]));
            world.channel_mean[ch] = m;
            world.channel_std[ch] = if s > 0.0 { s } else { 1.0 };
        }
        for i in 0..n * n {
            for ch in 0..c {
                world.raster[i * c + ch] = (raw[i * c + ch] - world.channel_mean[ch]) / world.channel_std[ch];
            }
        }

        world.tracts = world.build_tracts(&mut rng_for(seed, 3))?;
        let nt = world.tracts.len();
        let mut tl = vec![0.0; nt * k];
        for (t, tract) in world.tracts.iter().enumerate() {
            for &cell in &tract.cells {
                for l in 0..k {
                    tl[t * k + l] += lat_raster[cell as usize * k + l];
                }
            }
            let m = tract.cells.len() as f64;
            tl[t * k..(t + 1) * k].iter_mut().for_each(|v| *v /= m);
        }
        world.tract_latents = Tensor::from_vec(&[nt, k], tl);
        world.build_features(&mut rng_for(seed, 4))?;
        world.build_target(&mut rng_for(seed, 5));
        Ok(world)
    }

    fn mix(&self, lat: &[f64], noise: &[f64], out: &mut [f64]) {
        let k = lat.len();
        for (ch, o) in out.iter_mut().enumerate() {
            let lin: f64 = (0..k).map(|l| self.mix_linear[ch * k + l] * lat[l]).sum();
            let inner: f64 = (0..k).map(|l| self.mix_inner[ch * k + l] * lat[l]).sum();
            *o = lin + self.mix_gain[ch] * (inner + self.mix_offset[ch]).tanh() + noise[ch];
        }
    }

    /// Standardized vision value at a frame-km point, with the pixel noise
    /// of the cell that contains it.
    pub fn vision_at(&self, p: Pt) -> Result<Vec<f64>> {
        let (r, col) = self.cell_of(p)?;
        let lat: Vec<f64> = self.latents.iter().map(|f| f.eval(p)).collect();
        let c = self.config.channels;
        let i = r * self.n_cells + col;
        let mut out = vec![0.0; c];
        self.mix(&lat, &self.pixel_noise[i * c..(i + 1) * c], &mut out);
        for ch in 0..c {
            out[ch] = (out[ch] - self.channel_mean[ch]) / self.channel_std[ch];
        }
        Ok(out)
    }

    pub fn cell_of(&self, p: Pt) -> Result<(usize, usize)> {
        let h = self.config.half();
        let col = ((p[0] + h) / self.config.cell_km).floor();
        let row = ((p[1] + h) / self.config.cell_km).floor();
        let n = self.n_cells as f64;
        if !(0.0..n).contains(&col) || !(0.0..n).contains(&row) {
            return Err(Error::OutsideExtent(format!("({:.3}, {:.3}) km", p[0], p[1])));
        }
        Ok((row as usize, col as usize))
    }

    pub fn cell_center(&self, r: usize, col: usize) -> Pt {
        let h = self.config.half();
        [
            -h + (col as f64 + 0.5) * self.config.cell_km,
            -h + (r as f64 + 0.5) * self.config.cell_km,
        ]
    }

    pub fn cell(&self, r: usize, col: usize) -> &[f64] {
        let c = self.config.channels;
        let i = (r * self.n_cells + col) * c;
        &self.raster[i..i + c]
    }

    fn build_tracts(&self, rng: &mut impl Rng) -> Result<Vec<Tract>> {
        let cfg = &self.config;
        let m = cfg.tracts_per_side;
        let s = cfg.tract_spacing();
        let h = cfg.half();
        let jit = |rng: &mut dyn rand::RngCore, on: bool, amount: f64| {
            if on && amount > 0.0 {
                rng.gen_range(-amount..amount) * s
            } else {
                0.0
            }
        };
        let mut corners = vec![[0.0; 2]; (m + 1) * (m + 1)];
        for j in 0..=m {
            for i in 0..=m {
                let dx = jit(rng, i > 0 && i < m, cfg.corner_jitter);
                let dy = jit(rng, j > 0 && j < m, cfg.corner_jitter);
                corners[j * (m + 1) + i] = [-h + i as f64 * s + dx, -h + j as f64 * s + dy];
            }
        }
        let corner = |i: usize, j: usize| corners[j * (m + 1) + i];
        // horizontal edge (i, j)-(i+1, j) and vertical edge (i, j)-(i, j+1)
        let mut hmid = vec![[0.0; 2]; m * (m + 1)];
        for j in 0..=m {
            for i in 0..m {
                let (a, b) = (corner(i, j), corner(i + 1, j));
                let dy = jit(rng, j > 0 && j < m, cfg.edge_jitter);
                hmid[j * m + i] = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0 + dy];
            }
        }
        let mut vmid = vec![[0.0; 2]; (m + 1) * m];
        for j in 0..m {
            for i in 0..=m {
                let (a, b) = (corner(i, j), corner(i, j + 1));
                let dx = jit(rng, i > 0 && i < m, cfg.edge_jitter);
                vmid[j * (m + 1) + i] = [(a[0] + b[0]) / 2.0 + dx, (a[1] + b[1]) / 2.0];
            }
        }
        let n = self.n_cells;
        let mut tracts = Vec::with_capacity(m * m);
        for j in 0..m {
            for i in 0..m {
                let planar = vec![
                    corner(i, j),
                    hmid[j * m + i],
                    corner(i + 1, j),
                    vmid[j * (m + 1) + i + 1],
                    corner(i + 1, j + 1),
                    hmid[(j + 1) * m + i],
                    corner(i, j + 1),
                    vmid[j * (m + 1) + i],
                ];
                let geo: Vec<GeoPoint> = planar.iter().map(|p| self.frame.to_geo(p[0], p[1])).collect();
                let polygon = TractPolygon::new(geo)?;
                let bbox = planar.iter().fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |b, p| {
                    [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
                });
                let mut rep = centroid(&planar);
                if cfg.rep_jitter_km > 0.0 {
                    for _ in 0..16 {
                        let a = rng.gen_range(0.0..std::f64::consts::TAU);
                        let r = cfg.rep_jitter_km * rng.gen::<f64>().sqrt();
                        let cand = [rep[0] + r * a.cos(), rep[1] + r * a.sin()];
                        if contains(&planar, cand) {
                            rep = cand;
                            break;
                        }
                    }
                }
                let mut cells = Vec::new();
                let (r0, c0) = self.cell_of(clamp_pt([bbox[0], bbox[1]], h))?;
                let (r1, c1) = self.cell_of(clamp_pt([bbox[2], bbox[3]], h))?;
                for r in r0..=r1 {
                    for col in c0..=c1 {
                        if contains(&planar, self.cell_center(r, col)) {
                            cells.push((r * n + col) as u32);
                        }
                    }
                }
                let fallback = cells.is_empty();
                if fallback {
                    let (r, col) = self.cell_of(rep)?;
                    cells.push((r * n + col) as u32);
                }
                tracts.push(Tract {
                    id: tracts.len() as u64,
                    polygon,
                    planar,
                    bbox,
                    rep_point: self.frame.to_geo(rep[0], rep[1]),
                    rep_km: rep,
                    cells,
                    nearest_cell_fallback: fallback,
                    holdout: in_box(rep, cfg.holdout_km),
                });
            }
        }
        Ok(tracts)
    }

    fn build_features(&mut self, rng: &mut impl Rng) -> Result<()> {
        let cfg = &self.config;
        let (nt, k, f) = (self.tracts.len(), cfg.latents.len(), cfg.features);
        let mut load = vec![0.0; f * k];
        for j in 0..f {
            for l in 0..k {
                if cfg.latents[l].role != LatentRole::Vision {
                    load[j * k + l] = normal(rng);
                }
            }
        }
        let mut raw = vec![0.0; nt * f];
        for t in 0..nt {
            let lat = self.tract_latents.row(t);
            let obs: Vec<f64> = (0..k)
                .map(|l| match cfg.latents[l].role {
                    LatentRole::Tabular => lat[l] + cfg.tab_latent_noise * normal(rng),
                    _ => lat[l],
                })
                .collect();
            for j in 0..f {
                let v: f64 = (0..k).map(|l| load[j * k + l] * obs[l]).sum::<f64>() + cfg.feature_noise * normal(rng);
                raw[t * f + j] = if cfg.missing_rate > 0.0 && rng.gen::<f64>() < cfg.missing_rate {
                    f64::NAN
                } else {
                    v
                };
            }
        }
        let train: Vec<usize> = (0..nt).filter(|&t| !self.tracts[t].holdout).collect();
        let mut stats = FeatureStats {
            median: vec![0.0; f],
            mean: vec![0.0; f],
            std: vec![1.0; f],
        };
        for j in 0..f {
            let mut col: Vec<f64> = train.iter().map(|&t| raw[t * f + j]).filter(|v| !v.is_nan()).collect();
            if col.is_empty() {
                return Err(Error::config(format!("feature {j} missing on every training tract")));
            }
            col.sort_by(f64::total_cmp);
            let mid = col.len() / 2;
            stats.median[j] = if col.len() % 2 == 1 {
                col[mid]
            } else {
                0.5 * (col[mid - 1] + col[mid])
            };
            let imputed = train.iter().map(|&t| {
                let v = raw[t * f + j];
                if v.is_nan() {
                    stats.median[j]
                } else {
                    v
                }
            });
            let (m, s) = mean_std(imputed);
            stats.mean[j] = m;
            stats.std[j] = if s > 0.0 { s } else { 1.0 };
        }
        let std = standardize(&raw, f, &stats);
        self.raw_features = Tensor::from_vec(&[nt, f], raw);
        self.features = Tensor::from_vec(&[nt, f], std);
        self.feature_stats = stats;
        Ok(())
    }

    fn build_target(&mut self, rng: &mut impl Rng) {
        let cfg = &self.config;
        let vis = cfg
            .latents
            .iter()
            .position(|l| l.role == LatentRole::Vision)
            .expect("validated");
        let tab = cfg
            .latents
            .iter()
            .position(|l| l.role == LatentRole::Tabular)
            .expect("validated");
        let nt = self.tracts.len();
        let sigma = cfg.neighbor_sigma_km;
        let reach = 3.0 * sigma;
        let s = cfg.tract_spacing();
        let m = cfg.tracts_per_side as isize;
        let span = (reach / s).ceil() as isize + 1;
        let mut nbr = vec![0.0; nt];
        for t in 0..nt {
            let (ti, tj) = ((t as isize) % m, (t as isize) / m);
            let p = self.tracts[t].rep_km;
            let (mut num, mut den) = (0.0, 0.0);
            for j in (tj - span).max(0)..=(tj + span).min(m - 1) {
                for i in (ti - span).max(0)..=(ti + span).min(m - 1) {
                    let u = (j * m + i) as usize;
                    let q = self.tracts[u].rep_km;
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if d2 <= reach * reach {
                        let w = (-d2 / (2.0 * sigma * sigma)).exp();
                        num += w * self.tract_latents.get2(u, tab);
                        den += w;
                    }
                }
            }
            nbr[t] = num / den;
        }
        let z = |xs: &[f64]| -> Vec<f64> {
            let (m, s) = mean_std(xs.iter().copied());
            xs.iter().map(|x| (x - m) / s.max(1e-12)).collect()
        };
        let own: Vec<f64> = (0..nt).map(|t| self.tract_latents.get2(t, vis)).collect();
        let (a, b) = (z(&own), z(&nbr));
        self.target = (0..nt).map(|t| a[t] + b[t] + cfg.target_noise * normal(rng)).collect();
        self.neighbor_tab_latent = nbr;
    }

    pub fn n_tracts(&self) -> usize {
        self.tracts.len()
    }

    /// Channel means over each tract's cells, `[n_tracts, channels]`.
    pub fn vision_means(&self) -> Tensor {
        let c = self.config.channels;
        let mut out = vec![0.0; self.tracts.len() * c];
        for (t, tract) in self.tracts.iter().enumerate() {
            for &cell in &tract.cells {
                let px = &self.raster[cell as usize * c..(cell as usize + 1) * c];
                for ch in 0..c {
                    out[t * c + ch] += px[ch];
                }
            }
            let m = tract.cells.len() as f64;
            out[t * c..(t + 1) * c].iter_mut().for_each(|v| *v /= m);
        }
        Tensor::from_vec(&[self.tracts.len(), c], out)
    }

    /// Whether a frame-km box lies inside the world.
    pub fn contains_box(&self, b: BoxKm) -> bool {
        let h = self.config.half() + 1e-9;
        b[0] >= -h && b[1] >= -h && b[2] <= h && b[3] <= h
    }

    pub fn hash(&self) -> u64 {
        self.config.hash(self.seed)
    }
}

fn clamp_pt(p: Pt, h: f64) -> Pt {
    let e = h - 1e-9;
    [p[0].clamp(-e, e), p[1].clamp(-e, e)]
}

/// Median imputation followed by z-scoring.
pub fn standardize(raw: &[f64], f: usize, stats: &FeatureStats) -> Vec<f64> {
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % f;
            let v = if v.is_nan() { stats.median[j] } else { v };
            (v - stats.mean[j]) / stats.std[j]
        })
        .collect()
}
