//! Bilateral cross-attention between vision and tabular tokens with a
//! distance bias scaled per head by a learnable gain.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geo::{distance_bias, pairwise_distance_km, DistanceBiasConfig, GeoPoint};
use crate::graph::{AttentionBias, Graph, Var};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Vision queries, tabular context.
    VisFromTab,
    /// Tabular queries, vision context.
    TabFromVis,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub layers: usize,
    pub heads_tab_from_vis: usize,
    pub heads_vis_from_tab: usize,
    pub mlp_ratio: usize,
    pub gain_init: f64,
    /// Adds `alpha_h * phi(d)` to the attention logits.
    pub distance_bias: bool,
    pub bias: DistanceBiasConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            heads_tab_from_vis: 8,
            heads_vis_from_tab: 2,
            mlp_ratio: 4,
            gain_init: 1.0,
            distance_bias: true,
            bias: DistanceBiasConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub direction: Direction,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    /// One gain per head.
    pub gains: ParamId,
    pub ln_ff: LayerNorm,
    pub ffn: Mlp,
}

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        direction: Direction,
        dim: usize,
        context_dim: usize,
        heads: usize,
        mlp_ratio: usize,
        gain_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            direction,
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), context_dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, context_dim, heads, rng),
            gains: store.constant(format!("{name}.gains"), &[heads], gain_init),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, dim * mlp_ratio, dim, rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.attn.heads
    }
}

/// `phi[q, k] = tanh((d0 - d) / tau)` for every query/key point pair.
pub fn build_bias(query: &[GeoPoint], keys: &[GeoPoint], lat0: f64, cfg: &DistanceBiasConfig) -> Tensor {
    pairwise_distance_km(query, keys, lat0).map(|d| distance_bias(d, cfg))
}

/// One cross-attention update of `q` from `kv`: biased attention with a
/// residual, then a feed-forward residual. Returns the update and the
/// attention node.
pub fn cross_attend(g: &mut Graph, q: Var, kv: Var, phi: Option<&Tensor>, block: &CrossBlock) -> Result<(Var, Var)> {
    let (nq, nk) = (g.value(q).rows(), g.value(kv).rows());
    if nk == 0 {
        return Err(Error::shape("cross-attention without context tokens".to_string()));
    }
    let bias = match phi {
        Some(p) => {
            if p.shape() != [nq, nk] {
                return Err(Error::shape(format!("bias {:?} for {nq}x{nk} attention", p.shape())));
            }
            Some(AttentionBias {
                gains: g.param(block.gains),
                phi: p.clone(),
            })
        }
        None => None,
    };
    let hq = block.ln_q.forward(g, q)?;
    let hk = block.ln_kv.forward(g, kv)?;
    let (a, node) = block.attn.forward(g, hq, hk, 1, bias)?;
    let x = g.add(q, a)?;
    let h = block.ln_ff.forward(g, x)?;
    let h = block.ffn.forward(g, h)?;
    Ok((g.add(x, h)?, node))
}

#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub vis_from_tab: CrossBlock,
    pub tab_from_vis: CrossBlock,
}

#[derive(Clone, Debug)]
pub struct BilateralFusion {
    pub cfg: FusionConfig,
    pub layers: Vec<FusionLayer>,
}

/// Output of the fusion stack.
pub struct Fused {
    pub z_vis: Var,
    pub z_tab: Var,
    /// Tabular-from-vision attention node of each layer.
    pub attn_tab_from_vis: Vec<Var>,
}

impl BilateralFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: FusionConfig,
        vis_dim: usize,
        tab_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.bias.validate()?;
        for (dim, heads) in [(vis_dim, cfg.heads_vis_from_tab), (tab_dim, cfg.heads_tab_from_vis)] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::config(format!(
                    "fusion dim {dim} not divisible by {heads} heads"
                )));
            }
        }
        let layers = (0..cfg.layers)
            .map(|l| FusionLayer {
                vis_from_tab: CrossBlock::new(
                    store,
                    &format!("{name}.l{l}.vt"),
                    Direction::VisFromTab,
                    vis_dim,
                    tab_dim,
                    cfg.heads_vis_from_tab,
                    cfg.mlp_ratio,
                    cfg.gain_init,
                    rng,
                ),
                tab_from_vis: CrossBlock::new(
                    store,
                    &format!("{name}.l{l}.tv"),
                    Direction::TabFromVis,
                    tab_dim,
                    vis_dim,
                    cfg.heads_tab_from_vis,
                    cfg.mlp_ratio,
                    cfg.gain_init,
                    rng,
                ),
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    /// Runs every layer. `phi_vt` is `[n_vis, n_tab]`; it is ignored when
    /// the distance bias is disabled.
    pub fn forward(&self, g: &mut Graph, z_vis: Var, z_tab: Var, phi_vt: &Tensor) -> Result<Fused> {
        let phi_tv = phi_vt.transpose2();
        let (phi_vt, phi_tv) = if self.cfg.distance_bias {
            (Some(phi_vt), Some(&phi_tv))
        } else {
            (None, None)
        };
        let (mut zv, mut zt) = (z_vis, z_tab);
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (v, t, a) = bilateral_block(g, zv, zt, phi_vt, phi_tv, layer)?;
            zv = v;
            zt = t;
            attn.push(a);
        }
        Ok(Fused {
            z_vis: zv,
            z_tab: zt,
            attn_tab_from_vis: attn,
        })
    }
}

/// Both directions read the pre-update tokens.
pub fn bilateral_block(
    g: &mut Graph,
    z_vis: Var,
    z_tab: Var,
    phi_vt: Option<&Tensor>,
    phi_tv: Option<&Tensor>,
    layer: &FusionLayer,
) -> Result<(Var, Var, Var)> {
    let (zv, _) = cross_attend(g, z_vis, z_tab, phi_vt, &layer.vis_from_tab)?;
    let (zt, a) = cross_attend(g, z_tab, z_vis, phi_tv, &layer.tab_from_vis)?;
    Ok((zv, zt, a))
}

/// Head-averaged `[nq, nk]` attention weights of an attention node.
pub fn mean_head_weights(g: &Graph, node: Var) -> Option<Tensor> {
    let (p, groups, heads, nq, nk) = g.attention_weights(node)?;
    let mut out = vec![0.0; groups * nq * nk];
    for gi in 0..groups {
        for h in 0..heads {
            let src = &p[(gi * heads + h) * nq * nk..(gi * heads + h + 1) * nq * nk];
            let dst = &mut out[gi * nq * nk..(gi + 1) * nq * nk];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s / heads as f64;
            }
        }
    }
    Some(Tensor::from_vec(&[groups * nq, nk], out))
}

/// Mean over query rows of the attention mass on keys within `radius_km`.
pub fn attention_locality_stats(weights: &Tensor, distances: &Tensor, radius_km: f64) -> Result<f64> {
    if weights.shape() != distances.shape() || weights.shape().len() != 2 {
        return Err(Error::shape(format!(
            "weights {:?} vs distances {:?}",
            weights.shape(),
            distances.shape()
        )));
    }
    let rows = weights.rows();
    if rows == 0 {
        return Err(Error::shape("no query rows".to_string()));
    }
    let total: f64 = (0..rows)
        .map(|r| {
            weights
                .row(r)
                .iter()
                .zip(distances.row(r))
                .filter(|(_, d)| **d <= radius_km)
                .map(|(w, _)| w)
                .sum::<f64>()
        })
        .sum();
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn fusion(seed: u64) -> (ParamStore, BilateralFusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            heads_tab_from_vis: 4,
            heads_vis_from_tab: 2,
            mlp_ratio: 2,
            ..Default::default()
        };
        let f = BilateralFusion::new(&mut store, "fusion", cfg, 8, 12, &mut rng).unwrap();
        (store, f)
    }

    #[test]
    fn bias_examples() {
        let cfg = DistanceBiasConfig::default();
        let f = LocalFrame::new(GeoPoint { lon: -100.0, lat: 40.0 });
        let q = [f.to_geo(0.0, 0.0), f.to_geo(3.0, 4.0)];
        let k = [f.to_geo(0.0, 0.0), f.to_geo(10.0, 0.0), f.to_geo(-20.0, 7.0)];
        let phi = build_bias(&q, &k, 40.0, &cfg);
        assert!((phi.get2(0, 0) - 0.4f64.tanh()).abs() < 1e-12);
        assert!((phi.get2(0, 0) - 0.379_949).abs() < 1e-6);
        assert!(phi.get2(0, 1).abs() < 1e-9);
        assert!(phi.data().iter().all(|v| v.abs() < 1.0));
        let sub = build_bias(&q[1..], &k[1..], 40.0, &cfg);
        assert_eq!(sub.get2(0, 0), phi.get2(1, 1));
        assert_eq!(sub.get2(0, 1), phi.get2(1, 2));
    }

    fn two_key_weight(alpha: f64, phi: [f64; 2]) -> f64 {
        let mut store = ParamStore::new();
        let gains = store.add("a", Tensor::from_vec(&[1], vec![alpha]), false);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::zeros(&[1, 4]));
        let k = g.constant(rand_tensor(&[2, 4], 1));
        let gv = g.param(gains);
        let a = g
            .attention(
                q,
                k,
                k,
                1,
                1,
                Some(AttentionBias {
                    gains: gv,
                    phi: Tensor::from_vec(&[1, 2], phi.to_vec()),
                }),
            )
            .unwrap();
        g.attention_weights(a).unwrap().0[0]
    }

    #[test]
    fn two_key_softmax_closed_form() {
        let cfg = DistanceBiasConfig::default();
        let near = distance_bias(0.0, &cfg);
        let far = distance_bias(500.0, &cfg);
        let w = two_key_weight(5.0, [near, far]);
        let expected = 1.0 / (1.0 + (-5.0 * (near - far)).exp());
        assert!((w - expected).abs() < 1e-12);
        assert!((w - 0.99900).abs() < 5e-5, "{w}");
    }

    #[test]
    fn large_gain_is_one_hot_on_nearest() {
        let mut store = ParamStore::new();
        let gains = store.add("a", Tensor::from_vec(&[1], vec![1e4]), false);
        let phi = Tensor::from_vec(&[2, 3], vec![0.1, 0.3, -0.2, 0.25, -0.5, 0.2]);
        let mut g = Graph::new(&store);
        let q = g.constant(rand_tensor(&[2, 4], 2));
        let k = g.constant(rand_tensor(&[3, 4], 3));
        let gv = g.param(gains);
        let a = g
            .attention(q, k, k, 1, 1, Some(AttentionBias { gains: gv, phi }))
            .unwrap();
        let p = g.attention_weights(a).unwrap().0;
        assert!(p[1] > 1.0 - 1e-9 && p[3] > 1.0 - 1e-9);
    }

    #[test]
    fn zero_gain_equals_unbiased_and_shift_invariance() {
        let (mut store, f) = fusion(4);
        let block = &f.layers[0].tab_from_vis;
        store.value_mut(block.gains).data_mut().fill(0.0);
        let (q, kv) = (rand_tensor(&[3, 12], 5), rand_tensor(&[5, 8], 6));
        let phi = rand_tensor(&[3, 5], 7);
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let (a, _) = cross_attend(&mut g, qv, kvv, Some(&phi), block).unwrap();
        let (b, _) = cross_attend(&mut g, qv, kvv, None, block).unwrap();
        assert_eq!(g.value(a), g.value(b));

        store
            .value_mut(block.gains)
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, -1.0, 0.5]);
        let mut shifted = phi.clone();
        shifted.row_mut(1).iter_mut().for_each(|v| *v += 0.7);
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let (_, n1) = cross_attend(&mut g, qv, kvv, Some(&phi), block).unwrap();
        let (_, n2) = cross_attend(&mut g, qv, kvv, Some(&shifted), block).unwrap();
        let (p1, p2) = (g.attention_weights(n1).unwrap().0, g.attention_weights(n2).unwrap().0);
        for (x, y) in p1.iter().zip(p2) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in p1.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_ignores_gain() {
        let (mut store, f) = fusion(8);
        let block = f.layers[0].tab_from_vis.clone();
        let (q, kv) = (rand_tensor(&[2, 12], 9), rand_tensor(&[1, 8], 10));
        let phi = Tensor::from_vec(&[2, 1], vec![0.3, -0.9]);
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let (a, _) = cross_attend(&mut g, qv, kvv, Some(&phi), &block).unwrap();
            g.value(a).clone()
        };
        let a = run(&store);
        store.value_mut(block.gains).data_mut().fill(7.0);
        assert_eq!(run(&store), a);
        let mut g = Graph::new(&store);
        let qv = g.constant(q.clone());
        let empty = g.constant(Tensor::zeros(&[0, 8]));
        assert!(cross_attend(&mut g, qv, empty, None, &block).is_err());
    }

    #[test]
    fn bilateral_updates_are_parallel() {
        let (mut store, f) = fusion(11);
        let layer = &f.layers[0];
        let (zv, zt) = (rand_tensor(&[4, 8], 12), rand_tensor(&[3, 12], 13));
        let phi = rand_tensor(&[4, 3], 14);
        let phi_t = phi.transpose2();
        let mut g = Graph::new(&store);
        let (v, t) = (g.constant(zv.clone()), g.constant(zt.clone()));
        let (v1, t1, _) = bilateral_block(&mut g, v, t, Some(&phi), Some(&phi_t), layer).unwrap();
        // opposite order, both from the original inputs
        let (t2, _) = cross_attend(&mut g, t, v, Some(&phi_t), &layer.tab_from_vis).unwrap();
        let (v2, _) = cross_attend(&mut g, v, t, Some(&phi), &layer.vis_from_tab).unwrap();
        assert_eq!(g.value(v1), g.value(v2));
        assert_eq!(g.value(t1), g.value(t2));
        assert_eq!(g.value(v1).shape(), &[4, 8]);
        assert_eq!(g.value(t1).shape(), &[3, 12]);

        // zero output projection leaves only the feed-forward residual
        layer.vis_from_tab.attn.out.zero(&mut store);
        let mut g = Graph::new(&store);
        let (v, t) = (g.constant(zv), g.constant(zt));
        let (v1, _, _) = bilateral_block(&mut g, v, t, Some(&phi), Some(&phi_t), layer).unwrap();
        let h = layer.vis_from_tab.ln_ff.forward(&mut g, v).unwrap();
        let h = layer.vis_from_tab.ffn.forward(&mut g, h).unwrap();
        let expect = g.add(v, h).unwrap();
        assert_eq!(g.value(v1), g.value(expect));
    }

    #[test]
    fn gain_and_block_gradients() {
        let (mut store, f) = fusion(15);
        let (zv, zt) = (rand_tensor(&[4, 8], 16), rand_tensor(&[3, 12], 17));
        let phi = rand_tensor(&[4, 3], 18);
        let ids = gradcheck::all_params(&store);
        let r = gradcheck::check_params(&mut store, &ids, 6, |g| {
            let (v, t) = (g.constant(zv.clone()), g.constant(zt.clone()));
            let out = f.forward(g, v, t, &phi)?;
            let a = gradcheck::random_projection(g, out.z_vis, 1)?;
            let b = gradcheck::random_projection(g, out.z_tab, 2)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn locality_stats() {
        let w = Tensor::full(&[2, 4], 0.25);
        let d = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 30.0, 40.0, 5.0, 50.0, 6.0, 60.0]);
        assert!((attention_locality_stats(&w, &d, 10.0).unwrap() - 0.5).abs() < 1e-15);
        let one = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]);
        let d1 = Tensor::from_vec(&[1, 3], vec![50.0, 3.0, 1.0]);
        assert_eq!(attention_locality_stats(&one, &d1, 5.0).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut w = rand_tensor(&[6, 9], 20).map(f64::exp);
        for r in 0..6 {
            let s: f64 = w.row(r).iter().sum();
            w.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        let d = Tensor::from_vec(&[6, 9], (0..54).map(|_| rng.gen_range(0.0..40.0)).collect());
        let mut brute = 0.0;
        for i in 0..54 {
            if d.data()[i] <= 20.0 {
                brute += w.data()[i];
            }
        }
        brute /= 6.0;
        assert!((attention_locality_stats(&w, &d, 20.0).unwrap() - brute).abs() < 1e-12);
    }
}
