use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{fnv1a64, KvConfig};
use crate::error::{Error, Result};
use crate::fusion::{BilateralFusion, FusionConfig};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::posenc::PosEncConfig;
use crate::tabular::{tabular_loss, TabTConfig, TabTransformer};
use crate::vision::{vision_loss, MaskPlan, VisionMae, VitConfig};

use super::data::RegionInput;

/// Which geographic signals reach the tabular pathway and the fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingMode {
    None,
    /// Tract location and geometry encodings.
    GeomLoc,
    /// Encodings plus the distance bias in cross-attention.
    GeomLocBias,
}

impl EncodingMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::GeomLoc => "geom_loc",
            Self::GeomLocBias => "geom_loc_bias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "geom_loc" => Ok(Self::GeomLoc),
            "geom_loc_bias" => Ok(Self::GeomLocBias),
            _ => Err(Error::Parse(format!("encoding mode `{s}`"))),
        }
    }

    pub fn tract_encoding(self) -> bool {
        self != Self::None
    }

    pub fn distance_bias(self) -> bool {
        self == Self::GeomLocBias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub tab: TabTConfig,
    pub fusion: FusionConfig,
    pub posenc: PosEncConfig,
    pub encodings: EncodingMode,
    /// Without fusion the pathways stay independent (the tabular-only MAE).
    pub fuse: bool,
    pub region_km: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            tab: TabTConfig::default(),
            fusion: FusionConfig::default(),
            posenc: PosEncConfig::default(),
            encodings: EncodingMode::GeomLocBias,
            fuse: true,
            region_km: 80.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small architecture for tests and smoke runs on 20 km regions at the
    /// native 1.25 km raster.
    pub fn tiny() -> Self {
        Self {
            vit: VitConfig {
                patch: 8,
                channels: 8,
                grid: 16,
                dim: 16,
                enc_blocks: 1,
                dec_blocks: 1,
                dec_dim: 8,
                heads: 2,
                mlp_ratio: 2,
            },
            tab: TabTConfig {
                features: 12,
                col_dim: 4,
                col_blocks: 1,
                col_heads: 2,
                row_dim: 16,
                row_blocks: 1,
                row_heads: 2,
                dec_blocks: 1,
                mlp_ratio: 2,
                ..TabTConfig::default()
            },
            fusion: FusionConfig {
                heads_tab_from_vis: 2,
                heads_vis_from_tab: 2,
                mlp_ratio: 2,
                ..FusionConfig::default()
            },
            region_km: 20.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.tab.validate()?;
        self.fusion.bias.validate()?;
        if !(self.region_km > 0.0) {
            return Err(Error::config(format!("region size {}", self.region_km)));
        }
        if self.fuse && self.fusion.layers == 0 {
            return Err(Error::config("fusion enabled with zero layers"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        let v = &mut c.vit;
        kv.read("model.vit.patch", &mut v.patch)?;
        kv.read("model.vit.channels", &mut v.channels)?;
        kv.read("model.vit.grid", &mut v.grid)?;
        kv.read("model.vit.dim", &mut v.dim)?;
        kv.read("model.vit.enc_blocks", &mut v.enc_blocks)?;
        kv.read("model.vit.dec_blocks", &mut v.dec_blocks)?;
        kv.read("model.vit.dec_dim", &mut v.dec_dim)?;
        kv.read("model.vit.heads", &mut v.heads)?;
        kv.read("model.vit.mlp_ratio", &mut v.mlp_ratio)?;
        let t = &mut c.tab;
        kv.read("model.tab.features", &mut t.features)?;
        kv.read("model.tab.col_dim", &mut t.col_dim)?;
        kv.read("model.tab.col_blocks", &mut t.col_blocks)?;
        kv.read("model.tab.col_heads", &mut t.col_heads)?;
        kv.read("model.tab.row_dim", &mut t.row_dim)?;
        kv.read("model.tab.row_blocks", &mut t.row_blocks)?;
        kv.read("model.tab.row_heads", &mut t.row_heads)?;
        kv.read("model.tab.dec_blocks", &mut t.dec_blocks)?;
        kv.read("model.tab.mlp_ratio", &mut t.mlp_ratio)?;
        kv.read("model.tab.row_attention", &mut t.row_attention)?;
        kv.read("model.tab.dec_row_attention", &mut t.dec_row_attention)?;
        let f = &mut c.fusion;
        kv.read("model.fusion.layers", &mut f.layers)?;
        kv.read("model.fusion.heads_tab_from_vis", &mut f.heads_tab_from_vis)?;
        kv.read("model.fusion.heads_vis_from_tab", &mut f.heads_vis_from_tab)?;
        kv.read("model.fusion.mlp_ratio", &mut f.mlp_ratio)?;
        kv.read("model.fusion.gain_init", &mut f.gain_init)?;
        kv.read("model.fusion.d0_km", &mut f.bias.d0_km)?;
        kv.read("model.fusion.tau_km", &mut f.bias.tau_km)?;
        kv.read("model.posenc.hidden_mult", &mut c.posenc.hidden_mult)?;
        kv.read("model.posenc.offset_scale", &mut c.posenc.offset_scale)?;
        if let Some(m) = kv.raw("model.encodings") {
            c.encodings = EncodingMode::parse(m)?;
        }
        kv.read("model.fuse", &mut c.fuse)?;
        kv.read("model.region_km", &mut c.region_km)?;
        kv.read("model.init_seed", &mut c.init_seed)?;
        c.fusion.distance_bias = c.encodings.distance_bias();
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        let v = &self.vit;
        kv.set("model.vit.patch", v.patch);
        kv.set("model.vit.channels", v.channels);
        kv.set("model.vit.grid", v.grid);
        kv.set("model.vit.dim", v.dim);
        kv.set("model.vit.enc_blocks", v.enc_blocks);
        kv.set("model.vit.dec_blocks", v.dec_blocks);
        kv.set("model.vit.dec_dim", v.dec_dim);
        kv.set("model.vit.heads", v.heads);
        kv.set("model.vit.mlp_ratio", v.mlp_ratio);
        let t = &self.tab;
        kv.set("model.tab.features", t.features);
        kv.set("model.tab.col_dim", t.col_dim);
        kv.set("model.tab.col_blocks", t.col_blocks);
        kv.set("model.tab.col_heads", t.col_heads);
        kv.set("model.tab.row_dim", t.row_dim);
        kv.set("model.tab.row_blocks", t.row_blocks);
        kv.set("model.tab.row_heads", t.row_heads);
        kv.set("model.tab.dec_blocks", t.dec_blocks);
        kv.set("model.tab.mlp_ratio", t.mlp_ratio);
        kv.set("model.tab.row_attention", t.row_attention);
        kv.set("model.tab.dec_row_attention", t.dec_row_attention);
        let f = &self.fusion;
        kv.set("model.fusion.layers", f.layers);
        kv.set("model.fusion.heads_tab_from_vis", f.heads_tab_from_vis);
        kv.set("model.fusion.heads_vis_from_tab", f.heads_vis_from_tab);
        kv.set("model.fusion.mlp_ratio", f.mlp_ratio);
        kv.set("model.fusion.gain_init", f.gain_init);
        kv.set("model.fusion.d0_km", f.bias.d0_km);
        kv.set("model.fusion.tau_km", f.bias.tau_km);
        kv.set("model.posenc.hidden_mult", self.posenc.hidden_mult);
        kv.set("model.posenc.offset_scale", self.posenc.offset_scale);
        kv.set("model.encodings", self.encodings.name());
        kv.set("model.fuse", self.fuse);
        kv.set("model.region_km", self.region_km);
        kv.set("model.init_seed", self.init_seed);
    }

    /// Architecture hash stored in checkpoints. The tabular mask ratio is a
    /// training setting and does not enter it.
    pub fn hash(&self) -> u64 {
        let mut kv = KvConfig::new();
        self.to_kv(&mut kv);
        fnv1a64(kv.to_text().as_bytes())
    }
}

/// ViT, tabular transformer and fusion sharing one parameter store under
/// the `vit.`, `tab.` and `fusion.` prefixes.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vit: VisionMae,
    pub tab: TabTransformer,
    pub fusion: Option<BilateralFusion>,
    pub freeze_vit: bool,
}

pub struct JointOutput {
    /// `[n_patches, p * p * c]`
    pub vis_pred: Var,
    /// `[n_tracts, features]`
    pub tab_pred: Var,
    /// Visible tabular tokens after fusion.
    pub z_tab: Var,
    pub z_vis: Var,
    pub attn_tab_from_vis: Vec<Var>,
}

pub struct JointLoss {
    pub total: Var,
    pub vis: Var,
    pub tab: Var,
}

impl JointModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut cfg = cfg;
        cfg.fusion.distance_bias = cfg.encodings.distance_bias();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let vit = VisionMae::new(&mut store, "vit", cfg.vit, cfg.posenc, &mut rng)?;
        let tab = TabTransformer::new(&mut store, "tab", cfg.tab, cfg.posenc, &mut rng)?;
        let fusion = if cfg.fuse {
            Some(BilateralFusion::new(
                &mut store,
                "fusion",
                cfg.fusion,
                cfg.vit.dim,
                cfg.tab.row_dim,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            vit,
            tab,
            fusion,
            freeze_vit: false,
        })
    }

    pub fn set_freeze_vit(&mut self, freeze: bool) {
        self.freeze_vit = freeze;
        self.store.set_trainable_prefix("vit.", !freeze);
    }

    /// Marks exactly the parameters under `prefixes` trainable.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in self.store.params_mut() {
            p.trainable = prefixes.iter().any(|x| p.name.starts_with(x));
        }
    }

    /// Zeroes every fusion output projection so each cross block reduces to
    /// the identity.
    pub fn zero_fusion_outputs(&mut self) {
        if let Some(f) = &self.fusion {
            for l in &f.layers {
                for b in [&l.vis_from_tab, &l.tab_from_vis] {
                    b.attn.out.zero(&mut self.store);
                    b.ffn.fc2.zero(&mut self.store);
                }
            }
        }
    }

    pub fn set_gains(&mut self, value: f64) {
        if let Some(f) = &self.fusion {
            for l in &f.layers {
                for b in [&l.vis_from_tab, &l.tab_from_vis] {
                    self.store.value_mut(b.gains).data_mut().fill(value);
                }
            }
        }
    }

    /// Copies every parameter under `prefix` from `src` by name.
    pub fn copy_prefix(&mut self, src: &JointModel, prefix: &str) -> Result<()> {
        for (_, p) in src.store.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
            let id = self
                .store
                .find(&p.name)
                .ok_or_else(|| Error::shape(format!("no parameter `{}` to copy into", p.name)))?;
            let dst = self.store.value_mut(id);
            if dst.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "`{}`: {:?} vs {:?}",
                    p.name,
                    dst.shape(),
                    p.value.shape()
                )));
            }
            *dst = p.value.clone();
        }
        Ok(())
    }

    /// Vision positional encodings `[n_patches, dim]`.
    pub fn e_vis(&self, g: &mut Graph, input: &RegionInput) -> Result<Var> {
        self.vit.f_vis.forward(g, input.vis_pos.clone())
    }

    pub fn e_tab(&self, g: &mut Graph, input: &RegionInput) -> Result<Option<Var>> {
        if self.cfg.encodings.tract_encoding() {
            Ok(Some(self.tab.f_tab.forward(g, input.tract_pos.clone())?))
        } else {
            Ok(None)
        }
    }

    /// Vision and tabular encoders over the visible tokens, bilateral fusion
    /// with the distance bias on the visible geolocations, then both
    /// decoders.
    pub fn joint_forward(
        &self,
        g: &mut Graph,
        input: &RegionInput,
        vis_plan: &MaskPlan,
        tab_plan: &MaskPlan,
    ) -> Result<JointOutput> {
        let e_vis = self.e_vis(g, input)?;
        let e_tab = self.e_tab(g, input)?;
        let zv = self.vit.encode_visible(g, &input.tokens, vis_plan, e_vis)?;
        let zt = self.tab.encode(g, &input.features, tab_plan, e_tab)?;
        let (z_vis, z_tab, attn) = match &self.fusion {
            Some(f) => {
                let phi = input.phi.select_rows(&vis_plan.visible).transpose2();
                let phi = phi.select_rows(&tab_plan.visible).transpose2();
                let out = f.forward(g, zv, zt, &phi)?;
                (out.z_vis, out.z_tab, out.attn_tab_from_vis)
            }
            None => (zv, zt, Vec::new()),
        };
        let vis_pred = self.vit.decode(g, z_vis, vis_plan, e_vis)?;
        let tab_pred = self.tab.decode(g, z_tab, tab_plan, e_tab)?;
        Ok(JointOutput {
            vis_pred,
            tab_pred,
            z_tab,
            z_vis,
            attn_tab_from_vis: attn,
        })
    }

    /// `L_vis + lambda * L_tab`, with `L_vis` the masked MSE plus `beta`
    /// times the masked cosine distance and `L_tab` the masked L1.
    pub fn joint_loss(
        &self,
        g: &mut Graph,
        out: &JointOutput,
        input: &RegionInput,
        vis_plan: &MaskPlan,
        tab_plan: &MaskPlan,
        lambda: f64,
        beta: f64,
    ) -> Result<JointLoss> {
        if lambda < 0.0 {
            return Err(Error::config(format!("tabular loss weight {lambda} < 0")));
        }
        let vis = vision_loss(g, out.vis_pred, &input.tokens, vis_plan, beta)?;
        let tab = tabular_loss(g, out.tab_pred, &input.features, tab_plan)?;
        let wt = g.scale(tab, lambda);
        let total = g.add(vis, wt)?;
        Ok(JointLoss { total, vis, tab })
    }

    /// ViT alone: encoder over the visible patches, decoder, pretraining loss.
    pub fn vit_forward(&self, g: &mut Graph, input: &RegionInput, plan: &MaskPlan) -> Result<Var> {
        let e_vis = self.e_vis(g, input)?;
        let z = self.vit.encode_visible(g, &input.tokens, plan, e_vis)?;
        self.vit.decode(g, z, plan, e_vis)
    }
}
