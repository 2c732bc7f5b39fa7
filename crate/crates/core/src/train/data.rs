use crate::data::{sample_region, DatasetManifest, Region, Split, SyntheticWorld};
use crate::error::{Error, Result};
use crate::fusion::build_bias;
use crate::geo::{location_offset, pairwise_distance_km, GeoPoint, LocationOffset};
use crate::geometry::{geometry_summary, TractSummary};
use crate::tensor::Tensor;
use crate::vision::patchify;

use super::model::ModelConfig;

/// Everything a forward pass needs from one region, precomputed.
#[derive(Clone, Debug)]
pub struct RegionInput {
    pub center: GeoPoint,
    /// `[n_patches, p * p * c]`
    pub tokens: Tensor,
    pub patch_centers: Vec<GeoPoint>,
    /// `f_vis` inputs `[n_patches, 2]`.
    pub vis_pos: Tensor,
    /// `[n_tracts, features]`
    pub features: Tensor,
    /// `f_tab` inputs `[n_tracts, 5]`.
    pub tract_pos: Tensor,
    pub tract_ids: Vec<u64>,
    pub rep_points: Vec<GeoPoint>,
    /// Distance bias `[n_patches, n_tracts]`.
    pub phi: Tensor,
    /// Tract-to-patch distances in km, `[n_tracts, n_patches]`.
    pub distances: Tensor,
}

impl RegionInput {
    pub fn new(region: &Region, cfg: &ModelConfig) -> Result<Self> {
        let g = &region.vision;
        if g.c != cfg.vit.channels || g.h != cfg.vit.grid || g.w != cfg.vit.grid {
            return Err(Error::shape(format!(
                "region grid {}x{}x{} vs model {}x{}x{}",
                g.h, g.w, g.c, cfg.vit.grid, cfg.vit.grid, cfg.vit.channels
            )));
        }
        let tracts = &region.tracts;
        tracts.validate()?;
        let features = tracts.feature_matrix();
        if features.cols() != cfg.tab.features {
            return Err(Error::shape(format!(
                "{} tract features vs model {}",
                features.cols(),
                cfg.tab.features
            )));
        }
        let seq = patchify(g, cfg.vit.patch)?;
        let origin = region.center;
        let scale = cfg.posenc.offset_scale;
        let offsets: Vec<LocationOffset> = seq.centers.iter().map(|&c| location_offset(c, origin)).collect();
        let vis_pos = Tensor::from_vec(
            &[offsets.len(), 2],
            offsets.iter().flat_map(|o| [o.0[0] * scale, o.0[1] * scale]).collect(),
        );
        let mut tp = Vec::with_capacity(tracts.len() * 5);
        for r in &tracts.records {
            let s = TractSummary::new(
                location_offset(r.rep_point, origin),
                &geometry_summary(&r.polygon, origin)?,
            );
            let u = s.0;
            tp.extend_from_slice(&[u[0] * scale, u[1] * scale, u[2], u[3], u[4]]);
        }
        let rep_points = tracts.rep_points();
        let lat0 = origin.lat;
        Ok(Self {
            center: origin,
            phi: build_bias(&seq.centers, &rep_points, lat0, &cfg.fusion.bias),
            distances: pairwise_distance_km(&rep_points, &seq.centers, lat0),
            tokens: seq.tokens,
            patch_centers: seq.centers,
            vis_pos,
            features,
            tract_pos: Tensor::from_vec(&[tracts.len(), 5], tp),
            tract_ids: tracts.records.iter().map(|r| r.id).collect(),
            rep_points,
        })
    }

    pub fn n_tracts(&self) -> usize {
        self.tract_ids.len()
    }

    pub fn n_patches(&self) -> usize {
        self.tokens.rows()
    }
}

/// Region inputs for the train and validation splits of a manifest.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<RegionInput>,
    pub val: Vec<RegionInput>,
    /// Manifest regions skipped because they held fewer than two tracts.
    pub skipped: usize,
}

impl TrainData {
    pub fn build(world: &SyntheticWorld, manifest: &DatasetManifest, cfg: &ModelConfig) -> Result<Self> {
        manifest.check(world)?;
        if (manifest.region_km - cfg.region_km).abs() > 1e-9 {
            return Err(Error::config(format!(
                "manifest regions of {} km, model expects {} km",
                manifest.region_km, cfg.region_km
            )));
        }
        let mut out = Self::default();
        for r in &manifest.regions {
            let dst = match r.split {
                Split::Train => &mut out.train,
                Split::Val => &mut out.val,
                Split::Holdout => continue,
            };
            match sample_region(world, r.center, manifest.region_km, cfg.vit.grid) {
                Ok(region) => dst.push(RegionInput::new(&region, cfg)?),
                Err(Error::TooFewTracts(_)) => out.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if out.train.is_empty() || out.val.is_empty() {
            return Err(Error::config("manifest yields no usable train or validation regions"));
        }
        Ok(out)
    }
}
