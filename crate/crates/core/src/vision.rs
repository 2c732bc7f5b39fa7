//! Vision pathway: patching, random patch masking and the masked
//! autoencoder (ViT encoder over visible tokens, light decoder).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, KM_PER_DEG};
use crate::graph::{Graph, Var};
use crate::nn::{run_blocks, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::posenc::{PosEncConfig, PositionalEncoder};
use crate::tensor::Tensor;

/// Multichannel raster. Cell `(r, c)` covers
/// `[c, c+1] x [r, r+1]` cells east and north of `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// `h * w * c`, row-major with channels innermost.
    pub data: Vec<f64>,
    /// South-west corner.
    pub origin: GeoPoint,
    pub cell_km: f64,
    /// Latitude whose cosine fixes the east-west extent of a cell.
    pub scale_lat: f64,
}

impl VisionGrid {
    pub fn new(
        h: usize,
        w: usize,
        c: usize,
        data: Vec<f64>,
        origin: GeoPoint,
        cell_km: f64,
        scale_lat: f64,
    ) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(format!("grid {h}x{w}x{c} with {} values", data.len())));
        }
        if !(cell_km > 0.0) {
            return Err(Error::config(format!("cell size {cell_km}")));
        }
        Ok(Self {
            h,
            w,
            c,
            data,
            origin,
            cell_km,
            scale_lat,
        })
    }

    pub fn pixel(&self, r: usize, col: usize) -> &[f64] {
        let i = (r * self.w + col) * self.c;
        &self.data[i..i + self.c]
    }

    /// Geographic position of a point `x_km` east and `y_km` north of the origin.
    pub fn point_at(&self, x_km: f64, y_km: f64) -> GeoPoint {
        GeoPoint {
            lon: self.origin.lon + x_km / (KM_PER_DEG * self.scale_lat.to_radians().cos()),
            lat: self.origin.lat + y_km / KM_PER_DEG,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `[n_patches, p * p * c]`.
    pub tokens: Tensor,
    pub centers: Vec<GeoPoint>,
    pub patch: usize,
    pub origin: GeoPoint,
    pub cell_km: f64,
    pub scale_lat: f64,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same geometry, different token values.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        if tokens.shape() != self.tokens.shape() {
            return Err(Error::shape(format!(
                "tokens {:?} vs sequence {:?}",
                tokens.shape(),
                self.tokens.shape()
            )));
        }
        Ok(Self { tokens, ..self.clone() })
    }
}

/// Row-major patches; inside a patch, row-major pixels then channels.
pub fn patchify(grid: &VisionGrid, p: usize) -> Result<PatchSequence> {
    if p == 0 || !grid.h.is_multiple_of(p) || !grid.w.is_multiple_of(p) {
        return Err(Error::shape(format!(
            "grid {}x{} not divisible by patch {p}",
            grid.h, grid.w
        )));
    }
    let (ph, pw, c) = (grid.h / p, grid.w / p, grid.c);
    let dim = p * p * c;
    let mut data = Vec::with_capacity(ph * pw * dim);
    let mut centers = Vec::with_capacity(ph * pw);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..p {
                let row = pr * p + r;
                let start = (row * grid.w + pc * p) * c;
                data.extend_from_slice(&grid.data[start..start + p * c]);
            }
            let half = p as f64 / 2.0;
            centers.push(grid.point_at(
                (pc as f64 * p as f64 + half) * grid.cell_km,
                (pr as f64 * p as f64 + half) * grid.cell_km,
            ));
        }
    }
    Ok(PatchSequence {
        tokens: Tensor::from_vec(&[ph * pw, dim], data),
        centers,
        patch: p,
        origin: grid.origin,
        cell_km: grid.cell_km,
        scale_lat: grid.scale_lat,
    })
}

pub fn unpatchify(seq: &PatchSequence, h: usize, w: usize, c: usize, p: usize) -> Result<VisionGrid> {
    let t = &seq.tokens;
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || t.shape() != [(h / p) * (w / p), p * p * c] {
        return Err(Error::shape(format!(
            "cannot unpatchify {:?} into {h}x{w}x{c} with patch {p}",
            t.shape()
        )));
    }
    let pw = w / p;
    let mut data = vec![0.0; h * w * c];
    for (i, tok) in t.data().chunks(p * p * c).enumerate() {
        let (pr, pc) = (i / pw, i % pw);
        for r in 0..p {
            let start = ((pr * p + r) * w + pc * p) * c;
            data[start..start + p * c].copy_from_slice(&tok[r * p * c..(r + 1) * p * c]);
        }
    }
    VisionGrid::new(h, w, c, data, seq.origin, seq.cell_km, seq.scale_lat)
}

/// Visible and masked token indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    /// Everything visible; used for inference.
    pub fn all_visible(n: usize) -> Self {
        Self {
            visible: (0..n).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// For token `i`, its position in `visible ++ masked`.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut pos = vec![0; self.len()];
        for (k, &i) in self.visible.iter().chain(&self.masked).enumerate() {
            pos[i] = k;
        }
        pos
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Uniform random subset of `floor(ratio * n)` masked indices.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(n, ratio, &mut rng)
}

pub fn sample_mask_with(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n_masked = (ratio * n as f64).floor() as usize;
    let n_visible = n - n_masked;
    if n_masked == 0 || n_visible == 0 {
        return Err(Error::DegenerateSplit {
            visible: n_visible,
            masked: n_masked,
            total: n,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut masked = perm[..n_masked].to_vec();
    let mut visible = perm[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { visible, masked, ratio })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VitConfig {
    pub patch: usize,
    pub channels: usize,
    /// Grid size in cells (square).
    pub grid: usize,
    pub dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub dec_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 8,
            grid: 64,
            dim: 64,
            enc_blocks: 4,
            dec_blocks: 2,
            dec_dim: 48,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.grid.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "grid {} not divisible by patch {}",
                self.grid, self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dec_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dims {}/{} not divisible by {} heads",
                self.dim, self.dec_dim, self.heads
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("channels and mlp ratio must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct VisionMae {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub f_vis: PositionalEncoder,
    pub encoder: Vec<TransformerBlock>,
    pub enc_norm: LayerNorm,
    pub dec_embed: Linear,
    pub mask_token: ParamId,
    pub dec_pos: ParamId,
    /// Maps `e_vis` into the decoder width.
    pub dec_geo: Linear,
    pub decoder: Vec<TransformerBlock>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}

impl VisionMae {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: VitConfig,
        pe: PosEncConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_patches();
        let encoder = (0..cfg.enc_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{name}.enc{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let decoder = (0..cfg.dec_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.dec{i}"),
                    cfg.dec_dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            patch_embed: Linear::new(store, &format!("{name}.patch"), cfg.token_dim(), cfg.dim, rng),
            pos_embed: store.normal(format!("{name}.pos"), &[n, cfg.dim], 0.02, false, rng),
            f_vis: PositionalEncoder::new(store, &format!("{name}.f_vis"), 2, cfg.dim, pe, rng),
            encoder,
            enc_norm: LayerNorm::new(store, &format!("{name}.enc_norm"), cfg.dim),
            dec_embed: Linear::new(store, &format!("{name}.dec_embed"), cfg.dim, cfg.dec_dim, rng),
            mask_token: store.normal(format!("{name}.mask_token"), &[cfg.dec_dim], 0.02, false, rng),
            dec_pos: store.normal(format!("{name}.dec_pos"), &[n, cfg.dec_dim], 0.02, false, rng),
            dec_geo: Linear::new(store, &format!("{name}.dec_geo"), cfg.dim, cfg.dec_dim, rng),
            decoder,
            dec_norm: LayerNorm::new(store, &format!("{name}.dec_norm"), cfg.dec_dim),
            head: Linear::new(store, &format!("{name}.head"), cfg.dec_dim, cfg.token_dim(), rng),
            cfg,
        })
    }

    fn check_tokens(&self, tokens: &Tensor, plan: &MaskPlan) -> Result<()> {
        let n = self.cfg.num_patches();
        if tokens.shape() != [n, self.cfg.token_dim()] || plan.len() != n {
            return Err(Error::shape(format!(
                "vision tokens {:?} / plan of {} vs {} patches of width {}",
                tokens.shape(),
                plan.len(),
                n,
                self.cfg.token_dim()
            )));
        }
        Ok(())
    }

    /// Encoder over the visible tokens only; masked token values never
    /// enter the graph.
    pub fn encode_visible(&self, g: &mut Graph, tokens: &Tensor, plan: &MaskPlan, e_vis: Var) -> Result<Var> {
        self.check_tokens(tokens, plan)?;
        let x = g.constant(tokens.select_rows(&plan.visible));
        let x = self.patch_embed.forward(g, x)?;
        let pos = g.param(self.pos_embed);
        let pos = g.gather_rows(pos, &plan.visible)?;
        let geo = g.gather_rows(e_vis, &plan.visible)?;
        let x = g.add(x, pos)?;
        let x = g.add(x, geo)?;
        let x = run_blocks(g, &self.encoder, x, 1)?;
        self.enc_norm.forward(g, x)
    }

    /// `[n_patches, p * p * c]` pixel predictions for every token.
    pub fn decode(&self, g: &mut Graph, fused: Var, plan: &MaskPlan, e_vis: Var) -> Result<Var> {
        let n = self.cfg.num_patches();
        if plan.len() != n || g.value(fused).shape() != [plan.visible.len(), self.cfg.dim] {
            return Err(Error::shape(format!(
                "decoder input {:?} for {} visible of {n}",
                g.value(fused).shape(),
                plan.visible.len()
            )));
        }
        let y = self.dec_embed.forward(g, fused)?;
        let seq = if plan.masked.is_empty() {
            y
        } else {
            let m = g.param(self.mask_token);
            let m = g.broadcast_row(m, plan.masked.len());
            g.concat_rows(&[y, m])?
        };
        let x = g.gather_rows(seq, &plan.restore_order())?;
        let pos = g.param(self.dec_pos);
        let x = g.add(x, pos)?;
        let geo = self.dec_geo.forward(g, e_vis)?;
        let x = g.add(x, geo)?;
        let x = run_blocks(g, &self.decoder, x, 1)?;
        let x = self.dec_norm.forward(g, x)?;
        self.head.forward(g, x)
    }
}

/// Masked MSE plus `beta` times the cosine distance, both over masked tokens.
pub fn vision_loss(g: &mut Graph, pred: Var, target: &Tensor, plan: &MaskPlan, beta: f64) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::config(format!("cosine weight {beta} < 0")));
    }
    let mse = g.masked_mse(pred, target, &plan.masked)?;
    if beta == 0.0 {
        return Ok(mse);
    }
    let cos = g.masked_cosine(pred, target, &plan.masked)?;
    let cos = g.scale(cos, beta);
    g.add(mse, cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocationOffset;
    use crate::gradcheck;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn grid(h: usize, w: usize, c: usize, seed: u64) -> VisionGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        VisionGrid::new(h, w, c, data, GeoPoint { lon: -100.0, lat: 40.0 }, 1.25, 40.0).unwrap()
    }

    fn toy_cfg() -> VitConfig {
        VitConfig {
            patch: 8,
            channels: 2,
            grid: 16,
            dim: 16,
            enc_blocks: 1,
            dec_blocks: 1,
            dec_dim: 8,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn toy_model(seed: u64) -> (ParamStore, VisionMae) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = VisionMae::new(&mut store, "vit", toy_cfg(), PosEncConfig::default(), &mut rng).unwrap();
        (store, m)
    }

    fn e_vis(g: &mut Graph, m: &VisionMae, seq: &PatchSequence) -> Var {
        let offs: Vec<LocationOffset> = seq
            .centers
            .iter()
            .map(|&c| crate::geo::location_offset(c, seq.origin))
            .collect();
        crate::posenc::encode_vision_positions(g, &offs, &m.f_vis).unwrap()
    }

    #[test]
    fn patch_counts_and_constant_image() {
        let s = patchify(&grid(16, 16, 3, 1), 8).unwrap();
        assert_eq!(s.tokens.shape(), &[4, 192]);
        assert!(patchify(&grid(12, 16, 1, 1), 8).is_err());
        let mut g = grid(16, 16, 2, 2);
        g.data.fill(0.3);
        let s = patchify(&g, 4).unwrap();
        for r in 1..s.len() {
            assert_eq!(s.tokens.row(r), s.tokens.row(0));
        }
    }

    #[test]
    fn patch_layout_and_centers() {
        let g = grid(4, 4, 2, 3);
        let s = patchify(&g, 2).unwrap();
        // patch 1 is rows 0..2, cols 2..4
        assert_eq!(&s.tokens.row(1)[..2], g.pixel(0, 2));
        assert_eq!(&s.tokens.row(1)[2..4], g.pixel(0, 3));
        assert_eq!(&s.tokens.row(1)[4..6], g.pixel(1, 2));
        let c0 = s.centers[0];
        assert!((c0.lat - (40.0 + 1.25 / KM_PER_DEG)).abs() < 1e-12);
        assert!(s.centers[2].lat > s.centers[0].lat);
        assert!(s.centers[1].lon > s.centers[0].lon);
    }

    #[test]
    fn unpatchify_special_cases() {
        let g = grid(8, 8, 3, 4);
        let s = patchify(&g, 8).unwrap();
        assert_eq!(s.tokens.data(), g.data.as_slice());
        let z = s.with_tokens(Tensor::zeros(s.tokens.shape())).unwrap();
        assert!(unpatchify(&z, 8, 8, 3, 8).unwrap().data.iter().all(|v| *v == 0.0));
        assert!(unpatchify(&s, 16, 8, 3, 8).is_err());

        let s = patchify(&grid(16, 16, 1, 5), 4).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let shuffled = s.tokens.select_rows(&perm);
        assert_eq!(shuffled.select_rows(&perm), s.tokens);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(ph in 1usize..4, pw in 1usize..4, c in 1usize..4, p in 1usize..5, seed in 0u64..1000) {
            let g = grid(ph * p, pw * p, c, seed);
            let s = patchify(&g, p).unwrap();
            prop_assert_eq!(s.len(), ph * pw);
            let back = unpatchify(&s, g.h, g.w, c, p).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn mask_plans_partition(n in 2usize..200, ratio in 0.01f64..0.99, seed in 0u64..1000) {
            match sample_mask(n, ratio, seed) {
                Ok(plan) => {
                    prop_assert_eq!(plan.visible.len(), n - (ratio * n as f64).floor() as usize);
                    let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                    let restore = plan.restore_order();
                    let cat: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
                    for i in 0..n {
                        prop_assert_eq!(cat[restore[i]], i);
                    }
                }
                Err(Error::DegenerateSplit { .. }) => {
                    let m = (ratio * n as f64).floor() as usize;
                    prop_assert!(m == 0 || m == n);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }

    #[test]
    fn mask_examples() {
        let p = sample_mask(4, 0.75, 9).unwrap();
        assert_eq!((p.visible.len(), p.masked.len()), (1, 3));
        assert_eq!(sample_mask(50, 0.5, 3).unwrap(), sample_mask(50, 0.5, 3).unwrap());
        assert_ne!(sample_mask(50, 0.5, 3).unwrap(), sample_mask(50, 0.5, 4).unwrap());
        assert!(sample_mask(1, 0.5, 0).is_err());
        assert!(sample_mask(10, 0.0, 0).is_err());
        assert!(sample_mask(10, 1.0, 0).is_err());
    }

    #[test]
    fn mask_frequencies_are_uniform() {
        let mut counts = [0usize; 100];
        let draws = 10_000;
        for s in 0..draws {
            for &i in &sample_mask(100, 0.5, s).unwrap().masked {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn encoder_shapes_and_masked_invariance() {
        let (store, m) = toy_model(1);
        let seq = patchify(&grid(16, 16, 2, 7), 8).unwrap();
        let plan = sample_mask(4, 0.5, 1).unwrap();
        let mut g = Graph::new(&store);
        let e = e_vis(&mut g, &m, &seq);
        let z = m.encode_visible(&mut g, &seq.tokens, &plan, e).unwrap();
        assert_eq!(g.value(z).shape(), &[2, 16]);
        let z0 = g.value(z).clone();

        let mut tokens = seq.tokens.clone();
        for &i in &plan.masked {
            tokens.row_mut(i).iter_mut().for_each(|v| *v = 99.0);
        }
        let z1 = m.encode_visible(&mut g, &tokens, &plan, e).unwrap();
        assert_eq!(g.value(z1), &z0);

        let out = m.decode(&mut g, z, &plan, e).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 128]);
    }

    #[test]
    fn encoder_permutation_equivariance() {
        let (store, m) = toy_model(2);
        let seq = patchify(&grid(16, 16, 2, 8), 8).unwrap();
        let plan = MaskPlan {
            visible: vec![0, 2, 3],
            masked: vec![1],
            ratio: 0.25,
        };
        let perm = MaskPlan {
            visible: vec![3, 0, 2],
            ..plan.clone()
        };
        let mut g = Graph::new(&store);
        let e = e_vis(&mut g, &m, &seq);
        let a = m.encode_visible(&mut g, &seq.tokens, &plan, e).unwrap();
        let b = m.encode_visible(&mut g, &seq.tokens, &perm, e).unwrap();
        let (a, b) = (g.value(a), g.value(b));
        for (k, src) in [2, 0, 1].into_iter().enumerate() {
            for (x, y) in b.row(k).iter().zip(a.row(src)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_bias() {
        let (mut store, m) = toy_model(3);
        m.head.zero(&mut store);
        let bias: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
        store.value_mut(m.head.b).data_mut().copy_from_slice(&bias);
        let seq = patchify(&grid(16, 16, 2, 9), 8).unwrap();
        let plan = sample_mask(4, 0.5, 2).unwrap();
        let mut g = Graph::new(&store);
        let e = e_vis(&mut g, &m, &seq);
        let z = m.encode_visible(&mut g, &seq.tokens, &plan, e).unwrap();
        let out = m.decode(&mut g, z, &plan, e).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(out).row(r), bias.as_slice());
        }
    }

    #[test]
    fn masked_rows_share_the_mask_token() {
        let (mut store, m) = toy_model(4);
        // without positional inputs, masked rows decode identically
        store.value_mut(m.dec_pos).data_mut().fill(0.0);
        m.dec_geo.zero(&mut store);
        let seq = patchify(&grid(16, 16, 2, 10), 8).unwrap();
        let plan = MaskPlan {
            visible: vec![1],
            masked: vec![0, 2, 3],
            ratio: 0.75,
        };
        let mut g = Graph::new(&store);
        let e = e_vis(&mut g, &m, &seq);
        let z = m.encode_visible(&mut g, &seq.tokens, &plan, e).unwrap();
        let out = m.decode(&mut g, z, &plan, e).unwrap();
        let o = g.value(out);
        assert_eq!(o.row(0), o.row(2));
        assert_eq!(o.row(0), o.row(3));
        assert_ne!(o.row(0), o.row(1));
    }

    #[test]
    fn loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let t = grid(16, 16, 2, 11);
        let t = patchify(&t, 8).unwrap().tokens;
        let plan = sample_mask(4, 0.5, 0).unwrap();
        let p = g.constant(t.clone());
        let l = vision_loss(&mut g, p, &t, &plan, 1.0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        let p2 = g.constant(t.map(|v| 2.0 * v));
        let l0 = vision_loss(&mut g, p2, &t, &plan, 0.0).unwrap();
        let mse = g.masked_mse(p2, &t, &plan.masked).unwrap();
        assert_eq!(g.value(l0).data(), g.value(mse).data());
        let cos = g.masked_cosine(p2, &t, &plan.masked).unwrap();
        assert!(g.value(cos).data()[0].abs() < 1e-12);
        assert!(g.value(mse).data()[0] > 0.0);
        let empty = MaskPlan::all_visible(4);
        assert!(vision_loss(&mut g, p2, &t, &empty, 1.0).is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        let (mut store, m) = toy_model(5);
        let seq = patchify(&grid(16, 16, 2, 12), 8).unwrap();
        let plan = sample_mask(4, 0.5, 3).unwrap();
        let ids = gradcheck::all_params(&store);
        let r = gradcheck::check_params(&mut store, &ids, 6, |g| {
            let e = e_vis(g, &m, &seq);
            let z = m.encode_visible(g, &seq.tokens, &plan, e)?;
            let out = m.decode(g, z, &plan, e)?;
            vision_loss(g, out, &seq.tokens, &plan, 1.0)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.checked > 100);
    }
}
