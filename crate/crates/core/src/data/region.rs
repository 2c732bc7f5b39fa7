use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::geometry::{intersects_box, BoxKm, Pt, TractPolygon};
use crate::tensor::Tensor;
use crate::vision::VisionGrid;

use super::world::SyntheticWorld;

#[derive(Clone, Debug, PartialEq)]
pub struct TractRecord {
    pub id: u64,
    pub features: Vec<f64>,
    pub rep_point: GeoPoint,
    pub polygon: TractPolygon,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TractTable {
    pub records: Vec<TractRecord>,
}

impl TractTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() < 2 {
            return Err(Error::TooFewTracts(self.records.len()));
        }
        let f = self.records[0].features.len();
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate tract id"));
        }
        for r in &self.records {
            if r.features.len() != f {
                return Err(Error::shape("ragged tract features"));
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of tract {}", r.id)));
            }
        }
        Ok(())
    }

    /// Features as `[n, F]`.
    pub fn feature_matrix(&self) -> Tensor {
        let f = self.records.first().map_or(0, |r| r.features.len());
        let data = self.records.iter().flat_map(|r| r.features.iter().copied()).collect();
        Tensor::from_vec(&[self.records.len(), f], data)
    }

    pub fn rep_points(&self) -> Vec<GeoPoint> {
        self.records.iter().map(|r| r.rep_point).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub center: GeoPoint,
    pub size_km: f64,
    pub vision: VisionGrid,
    pub tracts: TractTable,
}

impl Region {
    /// Index of a tract within this region's table.
    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.tracts.records.iter().position(|r| r.id == id)
    }
}

/// Frame-km box of side `r` centred at `c`.
pub fn box_around(c: Pt, r: f64) -> BoxKm {
    [c[0] - r / 2.0, c[1] - r / 2.0, c[0] + r / 2.0, c[1] + r / 2.0]
}

/// Crops an `r x r` km box centred at `p0`, resampled to `grid x grid`, and
/// collects every tract whose polygon intersects the box.
///
/// The centre snaps to the raster so the crop covers whole cells. With
/// `r / cell_km == grid` the crop copies cells verbatim; an integer multiple
/// block-averages; anything else takes the nearest cell.
pub fn sample_region(world: &SyntheticWorld, p0: GeoPoint, r: f64, grid: usize) -> Result<Region> {
    let cfg = &world.config;
    if !(r > 0.0) || grid == 0 {
        return Err(Error::config(format!("region size {r} km on a {grid} grid")));
    }
    let n = (r / cfg.cell_km).round() as usize;
    if n == 0 || ((r / cfg.cell_km) - n as f64).abs() > 1e-9 {
        return Err(Error::config(format!(
            "region size {r} km is not a multiple of the cell size"
        )));
    }
    let c = world.frame.to_km(p0);
    let h = cfg.half();
    // lower-left cell of the crop
    let col0 = ((c[0] + h) / cfg.cell_km - n as f64 / 2.0).round();
    let row0 = ((c[1] + h) / cfg.cell_km - n as f64 / 2.0).round();
    let total = world.n_cells as f64;
    if col0 < 0.0 || row0 < 0.0 || col0 + n as f64 > total || row0 + n as f64 > total {
        return Err(Error::OutsideExtent(format!(
            "{r} km box at ({:.3}, {:.3})",
            p0.lon, p0.lat
        )));
    }
    let (col0, row0) = (col0 as usize, row0 as usize);
    let x0 = -h + col0 as f64 * cfg.cell_km;
    let y0 = -h + row0 as f64 * cfg.cell_km;
    let bx = [x0, y0, x0 + r, y0 + r];

    let ch = cfg.channels;
    let mut data = vec![0.0; grid * grid * ch];
    if n.is_multiple_of(grid) {
        let k = n / grid;
        let w = 1.0 / (k * k) as f64;
        for gr in 0..grid {
            for gc in 0..grid {
                let out = &mut data[(gr * grid + gc) * ch..(gr * grid + gc + 1) * ch];
                for dr in 0..k {
                    for dc in 0..k {
                        let px = world.cell(row0 + gr * k + dr, col0 + gc * k + dc);
                        if k == 1 {
                            out.copy_from_slice(px);
                        } else {
                            out.iter_mut().zip(px).for_each(|(o, v)| *o += w * v);
                        }
                    }
                }
            }
        }
    } else {
        let s = n as f64 / grid as f64;
        for gr in 0..grid {
            for gc in 0..grid {
                let sr = (((gr as f64 + 0.5) * s) as usize).min(n - 1);
                let sc = (((gc as f64 + 0.5) * s) as usize).min(n - 1);
                data[(gr * grid + gc) * ch..(gr * grid + gc + 1) * ch]
                    .copy_from_slice(world.cell(row0 + sr, col0 + sc));
            }
        }
    }
    let vision = VisionGrid::new(
        grid,
        grid,
        ch,
        data,
        world.frame.to_geo(x0, y0),
        r / grid as f64,
        cfg.ref_lat,
    )?;

    let mut records = Vec::new();
    for (t, tract) in world.tracts.iter().enumerate() {
        let b = tract.bbox;
        if b[2] < bx[0] || b[0] > bx[2] || b[3] < bx[1] || b[1] > bx[3] {
            continue;
        }
        if intersects_box(&tract.planar, bx) {
            records.push(TractRecord {
                id: tract.id,
                features: world.features.row(t).to_vec(),
                rep_point: tract.rep_point,
                polygon: tract.polygon.clone(),
            });
        }
    }
    if records.len() < 2 {
        return Err(Error::TooFewTracts(records.len()));
    }
    Ok(Region {
        center: world.frame.to_geo(x0 + r / 2.0, y0 + r / 2.0),
        size_km: r,
        vision,
        tracts: TractTable { records },
    })
}

/// Region centred as close to a tract's representative point as the world
/// extent allows.
pub fn region_for_tract(world: &SyntheticWorld, tract: usize, r: f64, grid: usize) -> Result<Region> {
    let p = world.tracts[tract].rep_km;
    let lim = world.config.half() - r / 2.0;
    if lim < 0.0 {
        return Err(Error::config(format!("region {r} km larger than the world")));
    }
    let c = [p[0].clamp(-lim, lim), p[1].clamp(-lim, lim)];
    sample_region(world, world.frame.to_geo(c[0], c[1]), r, grid)
}
