//! Tabular pathway: per-feature tokens, column attention inside each row,
//! row reduction, then row attention across tracts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{run_blocks, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::posenc::{PosEncConfig, PositionalEncoder};
use crate::tensor::Tensor;
use crate::vision::{sample_mask, MaskPlan};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TabTConfig {
    pub features: usize,
    pub col_dim: usize,
    pub col_blocks: usize,
    pub col_heads: usize,
    pub row_dim: usize,
    pub row_blocks: usize,
    pub row_heads: usize,
    pub dec_blocks: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    /// Off for the "no row attention" ablation (encoder and decoder).
    pub row_attention: bool,
    /// Off for a per-row MLP decoder.
    pub dec_row_attention: bool,
}

impl Default for TabTConfig {
    fn default() -> Self {
        Self {
            features: 12,
            col_dim: 16,
            col_blocks: 3,
            col_heads: 4,
            row_dim: 64,
            row_blocks: 2,
            row_heads: 4,
            dec_blocks: 1,
            mlp_ratio: 4,
            mask_ratio: 0.5,
            row_attention: true,
            dec_row_attention: true,
        }
    }
}

impl TabTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::config("tabular model needs at least one feature"));
        }
        if self.col_heads == 0 || !self.col_dim.is_multiple_of(self.col_heads) {
            return Err(Error::config(format!(
                "column dim {} not divisible by {} heads",
                self.col_dim, self.col_heads
            )));
        }
        if self.row_heads == 0 || !self.row_dim.is_multiple_of(self.row_heads) {
            return Err(Error::config(format!(
                "row dim {} not divisible by {} heads",
                self.row_dim, self.row_heads
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!("tabular mask ratio {}", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Row `j` of a token block is `x_j * w[j] + b[j]`.
#[derive(Clone, Debug)]
pub struct FeatureTokenizer {
    pub w: ParamId,
    pub b: ParamId,
}

impl FeatureTokenizer {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let init = |rng: &mut dyn rand::RngCore| {
            let v = (0..features * dim).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_vec(&[features, dim], v)
        };
        let w = init(rng);
        let b = init(rng);
        Self {
            w: store.add(format!("{name}.w"), w, false),
            b: store.add(format!("{name}.b"), b, false),
        }
    }

    /// `x` is `[n, features]`; output `[n, features, dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.feature_tokens(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct TabTransformer {
    pub cfg: TabTConfig,
    pub tokenizer: FeatureTokenizer,
    pub columns: Vec<TransformerBlock>,
    pub col_norm: LayerNorm,
    pub reduce: Linear,
    pub f_tab: PositionalEncoder,
    pub rows: Vec<TransformerBlock>,
    pub enc_norm: LayerNorm,
    pub mask_token: ParamId,
    pub decoder: Vec<TransformerBlock>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}

impl TabTransformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: TabTConfig,
        pe: PosEncConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = FeatureTokenizer::new(store, &format!("{name}.tok"), cfg.features, cfg.col_dim, rng);
        let columns = (0..cfg.col_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.col{i}"),
                    cfg.col_dim,
                    cfg.col_heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let mut rows: Vec<TransformerBlock> = (0..cfg.row_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.row{i}"),
                    cfg.row_dim,
                    cfg.row_heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let mut decoder: Vec<TransformerBlock> = (0..cfg.dec_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.dec{i}"),
                    cfg.row_dim,
                    cfg.row_heads,
                    cfg.mlp_ratio,
                    rng,
                )
            })
            .collect();
        rows.iter_mut().for_each(|b| b.attend = cfg.row_attention);
        decoder
            .iter_mut()
            .for_each(|b| b.attend = cfg.row_attention && cfg.dec_row_attention);
        Ok(Self {
            tokenizer,
            columns,
            col_norm: LayerNorm::new(store, &format!("{name}.col_norm"), cfg.col_dim),
            reduce: Linear::new(
                store,
                &format!("{name}.reduce"),
                cfg.features * cfg.col_dim,
                cfg.row_dim,
                rng,
            ),
            f_tab: PositionalEncoder::new(store, &format!("{name}.f_tab"), 5, cfg.row_dim, pe, rng),
            rows,
            enc_norm: LayerNorm::new(store, &format!("{name}.enc_norm"), cfg.row_dim),
            mask_token: store.normal(format!("{name}.mask_token"), &[cfg.row_dim], 0.02, false, rng),
            decoder,
            dec_norm: LayerNorm::new(store, &format!("{name}.dec_norm"), cfg.row_dim),
            head: Linear::new(store, &format!("{name}.head"), cfg.row_dim, cfg.features, rng),
            cfg,
        })
    }

    pub fn tokenize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.tokenizer.forward(g, x)
    }

    /// Self-attention over the feature axis, independently per row.
    pub fn column_encode(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let shape = g.value(tokens).shape().to_vec();
        let [n, f, d] = shape[..] else {
            return Err(Error::shape(format!("column tokens {shape:?}")));
        };
        let x = g.reshape(tokens, &[n * f, d])?;
        let x = run_blocks(g, &self.columns, x, n)?;
        let x = self.col_norm.forward(g, x)?;
        g.reshape(x, &[n, f, d])
    }

    /// Concatenates the column tokens of each row and projects to the row width.
    pub fn row_reduce(&self, g: &mut Graph, zcol: Var) -> Result<Var> {
        let shape = g.value(zcol).shape().to_vec();
        let [n, f, d] = shape[..] else {
            return Err(Error::shape(format!("column output {shape:?}")));
        };
        let x = g.reshape(zcol, &[n, f * d])?;
        self.reduce.forward(g, x)
    }

    pub fn row_encode(&self, g: &mut Graph, reduced: Var, e_tab: Option<Var>) -> Result<Var> {
        let x = match e_tab {
            Some(e) => g.add(reduced, e)?,
            None => reduced,
        };
        let x = run_blocks(g, &self.rows, x, 1)?;
        self.enc_norm.forward(g, x)
    }

    /// Encodes the visible rows of `x` (`[n, features]`); masked rows are
    /// dropped before tokenization. `e_tab` covers all `n` rows.
    pub fn encode(&self, g: &mut Graph, x: &Tensor, plan: &MaskPlan, e_tab: Option<Var>) -> Result<Var> {
        if x.shape().len() != 2 || x.cols() != self.cfg.features || x.rows() != plan.len() {
            return Err(Error::shape(format!(
                "table {:?} for {} features and {} planned rows",
                x.shape(),
                self.cfg.features,
                plan.len()
            )));
        }
        let xv = g.constant(x.select_rows(&plan.visible));
        let t = self.tokenize(g, xv)?;
        let z = self.column_encode(g, t)?;
        let r = self.row_reduce(g, z)?;
        let e = match e_tab {
            Some(e) => Some(g.gather_rows(e, &plan.visible)?),
            None => None,
        };
        self.row_encode(g, r, e)
    }

    /// `[n, features]` reconstruction of every row.
    pub fn decode(&self, g: &mut Graph, fused: Var, plan: &MaskPlan, e_tab: Option<Var>) -> Result<Var> {
        if g.value(fused).shape() != [plan.visible.len(), self.cfg.row_dim] {
            return Err(Error::shape(format!(
                "tabular decoder input {:?} for {} visible rows",
                g.value(fused).shape(),
                plan.visible.len()
            )));
        }
        let seq = if plan.masked.is_empty() {
            fused
        } else {
            let m = g.param(self.mask_token);
            let m = g.broadcast_row(m, plan.masked.len());
            g.concat_rows(&[fused, m])?
        };
        let mut x = g.gather_rows(seq, &plan.restore_order())?;
        if let Some(e) = e_tab {
            x = g.add(x, e)?;
        }
        let x = run_blocks(g, &self.decoder, x, 1)?;
        let x = self.dec_norm.forward(g, x)?;
        self.head.forward(g, x)
    }
}

/// Whole-row mask; same sampler as the vision patches.
pub fn mask_rows(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    sample_mask(n, ratio, seed)
}

/// Mean absolute error over the masked rows.
pub fn tabular_loss(g: &mut Graph, pred: Var, target: &Tensor, plan: &MaskPlan) -> Result<Var> {
    g.masked_l1(pred, target, &plan.masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> TabTConfig {
        TabTConfig {
            features: 3,
            col_dim: 8,
            col_blocks: 1,
            col_heads: 2,
            row_dim: 8,
            row_blocks: 1,
            row_heads: 2,
            dec_blocks: 1,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    fn model(cfg: TabTConfig, seed: u64) -> (ParamStore, TabTransformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = TabTransformer::new(&mut store, "tab", cfg, PosEncConfig::default(), &mut rng).unwrap();
        (store, m)
    }

    fn table(n: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, f], (0..n * f).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn tokenizer_is_affine_per_feature() {
        let (store, m) = model(toy_cfg(), 1);
        let mut g = Graph::new(&store);
        let x = table(2, 3, 2);
        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let t0 = m.tokenize(&mut g, zero).unwrap();
        assert_eq!(g.value(t0).shape(), &[2, 3, 8]);
        let b = store.value(m.tokenizer.b).data();
        assert_eq!(&g.value(t0).data()[..24], b);

        let xv = g.constant(x.clone());
        let t1 = m.tokenize(&mut g, xv).unwrap();
        let x2 = g.constant(x.map(|v| 2.0 * v));
        let t2 = m.tokenize(&mut g, x2).unwrap();
        let (v0, v1, v2) = (g.value(t0).data(), g.value(t1).data(), g.value(t2).data());
        for i in 0..v0.len() {
            assert!(((v2[i] - v0[i]) - 2.0 * (v1[i] - v0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn column_stage_keeps_rows_independent() {
        let (store, m) = model(toy_cfg(), 3);
        let row = table(1, 3, 4);
        let mut g = Graph::new(&store);
        let one = g.constant(row.clone());
        let t = m.tokenize(&mut g, one).unwrap();
        let z1 = m.column_encode(&mut g, t).unwrap();
        let mut two = row.data().to_vec();
        two.extend_from_slice(row.data());
        let two = g.constant(Tensor::from_vec(&[2, 3], two));
        let t = m.tokenize(&mut g, two).unwrap();
        let z2 = m.column_encode(&mut g, t).unwrap();
        assert_eq!(g.value(z2).shape(), &[2, 3, 8]);
        let (a, b) = (g.value(z1).data(), g.value(z2).data());
        assert!(close(&b[..24], a) && close(&b[24..], a));
    }

    #[test]
    fn column_stage_gradients() {
        let (mut store, m) = model(toy_cfg(), 5);
        let x = table(2, 3, 6);
        let ids: Vec<ParamId> = gradcheck::all_params(&store)
            .into_iter()
            .filter(|id| {
                let n = &store.get(*id).name;
                n.starts_with("tab.tok") || n.starts_with("tab.col")
            })
            .collect();
        let fwd = |g: &mut Graph| {
            let xv = g.constant(x.clone());
            let t = m.tokenize(g, xv)?;
            let z = m.column_encode(g, t)?;
            gradcheck::random_projection(g, z, 9)
        };
        let r = gradcheck::check_params(&mut store, &ids, 8, fwd).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn reduction_examples() {
        let (mut store, m) = model(toy_cfg(), 7);
        m.reduce.zero(&mut store);
        let bias: Vec<f64> = (0..8).map(|i| i as f64).collect();
        store.value_mut(m.reduce.b).data_mut().copy_from_slice(&bias);
        let mut g = Graph::new(&store);
        let z = g.constant(table(4, 24, 8).reshape(&[4, 3, 8]).unwrap());
        let r = m.row_reduce(&mut g, z).unwrap();
        assert_eq!(g.value(r).shape(), &[4, 8]);
        for i in 0..4 {
            assert_eq!(g.value(r).row(i), bias.as_slice());
        }

        let (store, m) = model(toy_cfg(), 7);
        let mut g = Graph::new(&store);
        let mut d = table(1, 24, 9).into_data();
        d.extend_from_within(..);
        let z = g.constant(Tensor::from_vec(&[2, 3, 8], d));
        let r = m.row_reduce(&mut g, z).unwrap();
        assert_eq!(g.value(r).row(0), g.value(r).row(1));
    }

    #[test]
    fn single_row_encode() {
        let (store, m) = model(toy_cfg(), 10);
        let mut g = Graph::new(&store);
        let r = g.constant(table(1, 8, 11));
        let e = g.constant(table(1, 8, 12));
        let out = m.row_encode(&mut g, r, Some(e)).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 8]);
        assert!(g.value(out).all_finite());
    }

    fn run_pipeline(
        m: &TabTransformer,
        store: &ParamStore,
        x: &Tensor,
        e: &Tensor,
        plan: &MaskPlan,
    ) -> (Tensor, Tensor) {
        let mut g = Graph::new(store);
        let ev = g.constant(e.clone());
        let z = m.encode(&mut g, x, plan, Some(ev)).unwrap();
        let out = m.decode(&mut g, z, plan, Some(ev)).unwrap();
        (g.value(z).clone(), g.value(out).clone())
    }

    #[test]
    fn pipeline_is_permutation_equivariant() {
        let (store, m) = model(toy_cfg(), 13);
        let (x, e) = (table(5, 3, 14), table(5, 8, 15));
        let plan = MaskPlan {
            visible: vec![0, 2, 3],
            masked: vec![1, 4],
            ratio: 0.4,
        };
        // new index i holds old row perm[i]
        let perm = [3, 4, 0, 1, 2];
        let inv = [2, 3, 4, 0, 1];
        let plan_p = MaskPlan {
            visible: vec![0, 2, 4],
            masked: vec![1, 3],
            ratio: 0.4,
        };
        let (_, out) = run_pipeline(&m, &store, &x, &e, &plan);
        let (_, out_p) = run_pipeline(&m, &store, &x.select_rows(&perm), &e.select_rows(&perm), &plan_p);
        for old in 0..5 {
            assert!(close(out_p.row(inv[old]), out.row(old)));
        }
    }

    #[test]
    fn ablation_rows_do_not_interact() {
        let cfg = TabTConfig {
            row_attention: false,
            ..toy_cfg()
        };
        let (store, m) = model(cfg, 16);
        let plan = MaskPlan::all_visible(4);
        let (x, e) = (table(4, 3, 17), table(4, 8, 18));
        let (z0, _) = run_pipeline(&m, &store, &x, &e, &plan);
        let mut x2 = x.clone();
        x2.row_mut(1).iter_mut().for_each(|v| *v += 1.0);
        let (z1, _) = run_pipeline(&m, &store, &x2, &e, &plan);
        for r in [0, 2, 3] {
            assert_eq!(z0.row(r), z1.row(r));
        }
        assert_ne!(z0.row(1), z1.row(1));

        // with row attention the change propagates
        let (store, m) = model(toy_cfg(), 16);
        let (z0, _) = run_pipeline(&m, &store, &x, &e, &plan);
        let (z1, _) = run_pipeline(&m, &store, &x2, &e, &plan);
        assert_ne!(z0.row(0), z1.row(0));
    }

    #[test]
    fn masked_row_values_never_matter() {
        let (store, m) = model(toy_cfg(), 19);
        let (x, e) = (table(6, 3, 20), table(6, 8, 21));
        let plan = mask_rows(6, 0.5, 3).unwrap();
        assert_eq!(plan.masked.len(), 3);
        let (_, out0) = run_pipeline(&m, &store, &x, &e, &plan);
        let mut x2 = x.clone();
        for &r in &plan.masked {
            x2.row_mut(r).iter_mut().for_each(|v| *v = 50.0);
        }
        let (_, out1) = run_pipeline(&m, &store, &x2, &e, &plan);
        assert_eq!(out0, out1);
        assert_eq!(out0.shape(), &[6, 3]);
        assert_eq!(mask_rows(6, 0.5, 3).unwrap(), plan);
        assert!(mask_rows(1, 0.5, 0).is_err());
    }

    #[test]
    fn zero_head_and_position_dependence() {
        let cfg = TabTConfig {
            dec_row_attention: false,
            ..toy_cfg()
        };
        let (mut store, m) = model(cfg, 22);
        let (x, e) = (table(4, 3, 23), table(4, 8, 24));
        let plan = MaskPlan {
            visible: vec![0, 1],
            masked: vec![2, 3],
            ratio: 0.5,
        };
        let (_, out0) = run_pipeline(&m, &store, &x, &e, &plan);
        let mut e2 = e.clone();
        e2.row_mut(2)[0] += 0.5;
        let (_, out1) = run_pipeline(&m, &store, &x, &e2, &plan);
        assert_ne!(out0.row(2), out1.row(2));
        assert_eq!(out0.row(3), out1.row(3));

        m.head.zero(&mut store);
        store.value_mut(m.head.b).data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        let (_, out) = run_pipeline(&m, &store, &x, &e, &plan);
        for r in 0..4 {
            assert_eq!(out.row(r), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn full_pipeline_gradients() {
        let (mut store, m) = model(toy_cfg(), 25);
        let (x, e) = (table(4, 3, 26), table(4, 8, 27));
        let plan = mask_rows(4, 0.5, 1).unwrap();
        let ids = gradcheck::all_params(&store);
        let r = gradcheck::check_params(&mut store, &ids, 4, |g| {
            let ev = g.constant(e.clone());
            let z = m.encode(g, &x, &plan, Some(ev))?;
            let out = m.decode(g, z, &plan, Some(ev))?;
            // smooth surrogate; L1 kinks make finite differences unreliable
            g.masked_mse(out, &x, &plan.masked)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
