//! Attention locality, perturbation response and reconstruction grids.

use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::fusion::mean_head_weights;
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::train::{JointModel, RegionInput};
use crate::vision::{unpatchify, MaskPlan, PatchSequence};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityStats {
    pub radius_km: f64,
    /// Mean tab-from-vis attention mass on patches within the radius.
    pub mass: f64,
    /// The same mass under uniform attention.
    pub uniform: f64,
    pub rows: usize,
}

impl LocalityStats {
    pub fn ratio(&self) -> f64 {
        self.mass / self.uniform
    }

    pub fn to_text(&self) -> String {
        format!(
            "radius_km = {}\nrows = {}\nmass = {}\nuniform_mass = {}\nratio = {}\n",
            self.radius_km,
            self.rows,
            self.mass,
            self.uniform,
            self.ratio()
        )
    }
}

/// Head-averaged weights of the last fusion layer's tab-from-vis attention
/// on an unmasked region, `[n_tracts, n_patches]`.
pub fn tab_from_vis_weights(model: &JointModel, input: &RegionInput) -> Result<Tensor> {
    let vp = MaskPlan::all_visible(input.n_patches());
    let tp = MaskPlan::all_visible(input.n_tracts());
    let mut g = Graph::new(&model.store);
    let out = model.joint_forward(&mut g, input, &vp, &tp)?;
    let node = *out
        .attn_tab_from_vis
        .last()
        .ok_or_else(|| Error::config("model has no fusion layers"))?;
    mean_head_weights(&g, node).ok_or_else(|| Error::config("fusion node carries no attention weights"))
}

/// Attention mass near each tract against the uniform baseline, pooled over
/// every tract row of every input.
pub fn attention_locality(model: &JointModel, inputs: &[RegionInput], radius_km: f64) -> Result<LocalityStats> {
    let per: Vec<Result<(f64, f64, usize)>> = map_indexed(inputs.len(), |i| {
        let input = &inputs[i];
        let w = tab_from_vis_weights(model, input)?;
        let (mut mass, mut uniform) = (0.0, 0.0);
        for r in 0..w.rows() {
            let near: Vec<bool> = input.distances.row(r).iter().map(|d| *d <= radius_km).collect();
            mass += w
                .row(r)
                .iter()
                .zip(&near)
                .filter(|(_, n)| **n)
                .map(|(v, _)| v)
                .sum::<f64>();
            uniform += near.iter().filter(|n| **n).count() as f64 / near.len() as f64;
        }
        Ok((mass, uniform, w.rows()))
    });
    let (mut mass, mut uniform, mut rows) = (0.0, 0.0, 0);
    for p in per {
        let (m, u, r) = p?;
        mass += m;
        uniform += u;
        rows += r;
    }
    if rows == 0 || uniform == 0.0 {
        return Err(Error::config(format!("no patches within {radius_km} km of any tract")));
    }
    Ok(LocalityStats {
        radius_km,
        mass: mass / rows as f64,
        uniform: uniform / rows as f64,
        rows,
    })
}

/// Change in one tract's fused embedding when a near and a far patch are
/// shifted by `delta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationResponse {
    pub near_km: f64,
    pub far_km: f64,
    pub near_change: f64,
    pub far_change: f64,
}

/// Perturbs the patch nearest to the tract and the farthest one.
pub fn perturbation_response(
    model: &JointModel,
    input: &RegionInput,
    tract: u64,
    delta: f64,
) -> Result<PerturbationResponse> {
    let row = input
        .tract_ids
        .iter()
        .position(|&t| t == tract)
        .ok_or_else(|| Error::config(format!("tract {tract} not in region")))?;
    let d = input.distances.row(row);
    let near = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("patches");
    let far = (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).expect("patches");
    let embed = |inp: &RegionInput| -> Result<Vec<f64>> {
        let vp = MaskPlan::all_visible(inp.n_patches());
        let tp = MaskPlan::all_visible(inp.n_tracts());
        let mut g = Graph::new(&model.store);
        let out = model.joint_forward(&mut g, inp, &vp, &tp)?;
        Ok(g.value(out.z_tab).row(row).to_vec())
    };
    let base = embed(input)?;
    let change = |patch: usize| -> Result<f64> {
        let mut p = input.clone();
        p.tokens.row_mut(patch).iter_mut().for_each(|v| *v += delta);
        let e = embed(&p)?;
        Ok(e.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    };
    Ok(PerturbationResponse {
        near_km: d[near],
        far_km: d[far],
        near_change: change(near)?,
        far_change: change(far)?,
    })
}

/// Input, masked input (NaN where masked) and reconstruction, each
/// `h * w * c` with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionGrids {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub input: Vec<f64>,
    pub masked: Vec<f64>,
    pub recon: Vec<f64>,
}

impl ReconstructionGrids {
    /// One line per (channel, row): the input, masked and reconstructed
    /// rows side by side.
    pub fn to_text(&self) -> String {
        let mut s = String::from("channel\trow");
        for panel in ["input", "masked", "recon"] {
            for x in 0..self.w {
                s.push_str(&format!("\t{panel}_{x}"));
            }
        }
        s.push('\n');
        for ch in 0..self.c {
            for y in 0..self.h {
                s.push_str(&format!("{ch}\t{y}"));
                for grid in [&self.input, &self.masked, &self.recon] {
                    for x in 0..self.w {
                        s.push_str(&format!("\t{}", grid[(y * self.w + x) * self.c + ch]));
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

pub fn reconstruct(
    model: &JointModel,
    input: &RegionInput,
    vis_plan: &MaskPlan,
    tab_plan: &MaskPlan,
) -> Result<ReconstructionGrids> {
    let mut g = Graph::new(&model.store);
    let out = model.joint_forward(&mut g, input, vis_plan, tab_plan)?;
    let v = &model.cfg.vit;
    let grid = |tokens: Tensor| -> Result<Vec<f64>> {
        let seq = PatchSequence {
            tokens,
            centers: input.patch_centers.clone(),
            patch: v.patch,
            origin: input.center,
            cell_km: model.cfg.region_km / v.grid as f64,
            scale_lat: input.center.lat,
        };
        Ok(unpatchify(&seq, v.grid, v.grid, v.channels, v.patch)?.data)
    };
    let mut masked = input.tokens.clone();
    for &i in &vis_plan.masked {
        masked.row_mut(i).fill(f64::NAN);
    }
    Ok(ReconstructionGrids {
        h: v.grid,
        w: v.grid,
        c: v.channels,
        input: grid(input.tokens.clone())?,
        masked: grid(masked)?,
        recon: grid(g.value(out.vis_pred).clone())?,
    })
}
