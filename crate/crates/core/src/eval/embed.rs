//! Per-tract embedding tables: model embeddings and the baselines.

use std::path::Path;

use crate::data::{region_for_tract, sample_region, SyntheticWorld};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::train::{JointModel, RegionInput};
use crate::vision::MaskPlan;

/// One vector per tract, rows in tract order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub tag: String,
    pub ids: Vec<u64>,
    /// `[n_tracts, dim]`
    pub values: Tensor,
    /// Tracts whose entry relied on a fallback (nearest vision cell).
    pub flagged: Vec<u64>,
}

impl EmbeddingTable {
    pub fn new(tag: impl Into<String>, ids: Vec<u64>, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != ids.len() {
            return Err(Error::shape(format!(
                "{} ids for table {:?}",
                ids.len(),
                values.shape()
            )));
        }
        Ok(Self {
            tag: tag.into(),
            ids,
            values,
            flagged: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Column-wise concatenation of two tables over the same tracts.
    pub fn concat(&self, other: &EmbeddingTable, tag: &str) -> Result<Self> {
        if self.ids != other.ids {
            return Err(Error::shape("concatenating tables over different tracts".to_string()));
        }
        let (a, b) = (self.dim(), other.dim());
        let mut data = Vec::with_capacity(self.len() * (a + b));
        for i in 0..self.len() {
            data.extend_from_slice(self.values.row(i));
            data.extend_from_slice(other.values.row(i));
        }
        let mut flagged = self.flagged.clone();
        flagged.extend(other.flagged.iter().filter(|f| !self.flagged.contains(f)));
        flagged.sort_unstable();
        Ok(Self {
            tag: tag.to_string(),
            ids: self.ids.clone(),
            values: Tensor::from_vec(&[self.len(), a + b], data),
            flagged,
        })
    }

    /// Tab-delimited text: a `#` line with the tag, a header, one row per tract.
    pub fn to_text(&self) -> String {
        let mut s = format!("# geotab-embeddings-1 tag={}\n", self.tag);
        s.push_str("tract");
        for j in 0..self.dim() {
            s.push_str(&format!("\te{j}"));
        }
        s.push_str("\tflag\n");
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(&id.to_string());
            for v in self.values.row(i) {
                s.push_str(&format!("\t{v:e}"));
            }
            s.push_str(if self.flagged.contains(id) { "\t1\n" } else { "\t0\n" });
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let tag = lines
            .next()
            .and_then(|l| l.strip_prefix("# geotab-embeddings-1 tag="))
            .ok_or_else(|| Error::Parse("missing embedding table header".into()))?
            .to_string();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing column header".into()))?;
        let dim = header.split('\t').count().saturating_sub(2);
        let (mut ids, mut data, mut flagged) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != dim + 2 {
                return Err(Error::Parse(format!(
                    "row {n}: {} fields, expected {}",
                    f.len(),
                    dim + 2
                )));
            }
            let bad = |_| Error::Parse(format!("row {n}: bad number"));
            let id: u64 = f[0]
                .parse()
                .map_err(|_| Error::Parse(format!("row {n}: bad tract id")))?;
            for v in &f[1..=dim] {
                data.push(v.parse::<f64>().map_err(bad)?);
            }
            if f[dim + 1] == "1" {
                flagged.push(id);
            }
            ids.push(id);
        }
        let mut t = Self::new(tag, ids.clone(), Tensor::from_vec(&[ids.len(), dim], data))?;
        t.flagged = flagged;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ExtractConfig {
    /// Also run the four regions shifted by a quarter region width and
    /// average every covering region's row for the tract.
    pub average_covering: bool,
}

/// Fused tabular tokens of `tract` from one unmasked region, or `None` when
/// the region does not contain the tract.
fn tract_row(model: &JointModel, input: &RegionInput, id: u64) -> Result<Option<Vec<f64>>> {
    let Some(pos) = input.tract_ids.iter().position(|&t| t == id) else {
        return Ok(None);
    };
    let mut g = Graph::new(&model.store);
    let z = encode_unmasked(model, &mut g, input)?;
    Ok(Some(g.value(z).row(pos).to_vec()))
}

fn encode_unmasked(model: &JointModel, g: &mut Graph, input: &RegionInput) -> Result<crate::graph::Var> {
    let vp = MaskPlan::all_visible(input.n_patches());
    let tp = MaskPlan::all_visible(input.n_tracts());
    let e_vis = model.e_vis(g, input)?;
    let e_tab = model.e_tab(g, input)?;
    let zv = model.vit.encode_visible(g, &input.tokens, &vp, e_vis)?;
    let zt = model.tab.encode(g, &input.features, &tp, e_tab)?;
    match &model.fusion {
        Some(f) => Ok(f.forward(g, zv, zt, &input.phi)?.z_tab),
        None => Ok(zt),
    }
}

/// Unmasked region input centred (as far as the extent allows) at a tract.
pub fn tract_input(model: &JointModel, world: &SyntheticWorld, tract: usize) -> Result<RegionInput> {
    let region = region_for_tract(world, tract, model.cfg.region_km, model.cfg.vit.grid)?;
    RegionInput::new(&region, &model.cfg)
}

/// `Z'_tab` for every tract of the world.
pub fn extract_embeddings(model: &JointModel, world: &SyntheticWorld, cfg: &ExtractConfig) -> Result<EmbeddingTable> {
    let r = model.cfg.region_km;
    let rows: Vec<Result<Vec<f64>>> = map_indexed(world.n_tracts(), |t| {
        let id = world.tracts[t].id;
        let input = tract_input(model, world, t)?;
        let mut acc = tract_row(model, &input, id)?
            .ok_or_else(|| Error::OutsideExtent(format!("tract {id} missing from its own region")))?;
        if cfg.average_covering {
            let mut n = 1.0;
            let c = input.center;
            let p = world.frame.to_km(c);
            for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let q = world.frame.to_geo(p[0] + dx * r / 4.0, p[1] + dy * r / 4.0);
                let region = match sample_region(world, q, r, model.cfg.vit.grid) {
                    Ok(reg) => reg,
                    Err(Error::OutsideExtent(_) | Error::TooFewTracts(_)) => continue,
                    Err(e) => return Err(e),
                };
                if let Some(row) = tract_row(model, &RegionInput::new(&region, &model.cfg)?, id)? {
                    acc.iter_mut().zip(&row).for_each(|(a, b)| *a += b);
                    n += 1.0;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
        }
        Ok(acc)
    });
    let mut data = Vec::new();
    for row in rows {
        data.extend(row?);
    }
    let dim = model.cfg.tab.row_dim;
    let tag = if model.fusion.is_some() { "model" } else { "tabular_mae" };
    EmbeddingTable::new(
        tag,
        world.tracts.iter().map(|t| t.id).collect(),
        Tensor::from_vec(&[world.n_tracts(), dim], data),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Tab,
    VisMean,
    Concat,
    LateFusion,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::Tab, Self::VisMean, Self::Concat, Self::LateFusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tab => "tab",
            Self::VisMean => "vis_mean",
            Self::Concat => "concat",
            Self::LateFusion => "late_fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown baseline `{s}`")))
    }
}

/// Baseline tables. `LateFusion` needs a tabular-only model (no fusion).
pub fn baseline_embeddings(
    world: &SyntheticWorld,
    kind: BaselineKind,
    tabular_mae: Option<&JointModel>,
) -> Result<EmbeddingTable> {
    let ids: Vec<u64> = world.tracts.iter().map(|t| t.id).collect();
    let vis = || -> Result<EmbeddingTable> {
        let mut t = EmbeddingTable::new("vis_mean", ids.clone(), world.vision_means())?;
        t.flagged = world
            .tracts
            .iter()
            .filter(|t| t.nearest_cell_fallback)
            .map(|t| t.id)
            .collect();
        Ok(t)
    };
    match kind {
        BaselineKind::Tab => EmbeddingTable::new("tab", ids, world.features.clone()),
        BaselineKind::VisMean => vis(),
        BaselineKind::Concat => baseline_embeddings(world, BaselineKind::Tab, None)?.concat(&vis()?, "concat"),
        BaselineKind::LateFusion => {
            let m = tabular_mae.ok_or_else(|| Error::config("late fusion needs a tabular-only checkpoint"))?;
            if m.fusion.is_some() {
                return Err(Error::config("late fusion needs a model trained without fusion"));
            }
            vis()?.concat(&extract_embeddings(m, world, &ExtractConfig::default())?, "late_fusion")
        }
    }
}

/// Mean of table rows per group label, labels in ascending order.
pub fn group_mean(table: &EmbeddingTable, groups: &[u64]) -> Result<(Vec<u64>, Tensor)> {
    if groups.len() != table.len() {
        return Err(Error::shape(format!(
            "{} group labels for {} rows",
            groups.len(),
            table.len()
        )));
    }
    let mut labels: Vec<u64> = groups.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let d = table.dim();
    let mut sums = vec![0.0; labels.len() * d];
    let mut counts = vec![0.0; labels.len()];
    for (i, g) in groups.iter().enumerate() {
        let k = labels.binary_search(g).expect("label present");
        counts[k] += 1.0;
        sums[k * d..(k + 1) * d]
            .iter_mut()
            .zip(table.values.row(i))
            .for_each(|(s, v)| *s += v);
    }
    for (k, c) in counts.iter().enumerate() {
        sums[k * d..(k + 1) * d].iter_mut().for_each(|s| *s /= c);
    }
    Ok((labels.clone(), Tensor::from_vec(&[labels.len(), d], sums)))
}
