//! Learned geospatial positional encodings.

use rand::Rng;

use crate::error::Result;
use crate::geo::{LocationOffset, KM_PER_DEG};
use crate::geometry::TractSummary;
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosEncConfig {
    /// Hidden width as a multiple of the input width.
    pub hidden_mult: usize,
    /// Fixed factor applied to degree offsets before the MLP so that a
    /// typical region spans roughly unit range.
    pub offset_scale: f64,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            hidden_mult: 4,
            offset_scale: KM_PER_DEG / 40.0,
        }
    }
}

/// `f_vis: R^2 -> R^dv` and `f_tab: R^5 -> R^dt`.
#[derive(Clone, Debug)]
pub struct PositionalEncoder {
    pub mlp: Mlp,
    pub in_dim: usize,
    pub offset_scale: f64,
}

impl PositionalEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        cfg: PosEncConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (cfg.hidden_mult * in_dim).max(1);
        Self {
            mlp: Mlp::new(store, name, in_dim, hidden, out_dim, rng),
            in_dim,
            offset_scale: cfg.offset_scale,
        }
    }

    pub fn forward(&self, g: &mut Graph, inputs: Tensor) -> Result<Var> {
        let x = g.constant(inputs);
        self.mlp.forward(g, x)
    }

    pub fn vision_inputs(&self, offsets: &[LocationOffset]) -> Tensor {
        let data = offsets
            .iter()
            .flat_map(|o| [o.0[0] * self.offset_scale, o.0[1] * self.offset_scale])
            .collect();
        Tensor::from_vec(&[offsets.len(), 2], data)
    }

    pub fn tract_inputs(&self, summaries: &[TractSummary]) -> Tensor {
        let data = summaries
            .iter()
            .flat_map(|s| {
                let u = s.0;
                [u[0] * self.offset_scale, u[1] * self.offset_scale, u[2], u[3], u[4]]
            })
            .collect();
        Tensor::from_vec(&[summaries.len(), 5], data)
    }
}

/// Row `j` is `f_vis(offset_j)`.
pub fn encode_vision_positions(g: &mut Graph, offsets: &[LocationOffset], f_vis: &PositionalEncoder) -> Result<Var> {
    let x = f_vis.vision_inputs(offsets);
    f_vis.forward(g, x)
}

/// Row `i` is `f_tab(u_i)`.
pub fn encode_tract_positions(g: &mut Graph, summaries: &[TractSummary], f_tab: &PositionalEncoder) -> Result<Var> {
    let x = f_tab.tract_inputs(summaries);
    f_tab.forward(g, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_determinism_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fv = PositionalEncoder::new(&mut store, "fv", 2, 12, PosEncConfig::default(), &mut rng);
        let ft = PositionalEncoder::new(&mut store, "ft", 5, 8, PosEncConfig::default(), &mut rng);
        let offs = [
            LocationOffset([0.1, -0.2]),
            LocationOffset([0.1, -0.2]),
            LocationOffset([-0.3, 0.05]),
        ];
        let mut g = Graph::new(&store);
        let e = encode_vision_positions(&mut g, &offs, &fv).unwrap();
        let ev = g.value(e).clone();
        assert_eq!(ev.shape(), &[3, 12]);
        assert_eq!(ev.row(0), ev.row(1));

        let s = [
            TractSummary([0.1, 0.2, 5.0, 0.7, 0.9]),
            TractSummary([-0.1, 0.0, 4.0, 0.8, 1.0]),
        ];
        let e = encode_tract_positions(&mut g, &s, &ft).unwrap();
        let a = g.value(e).clone();
        let e = encode_tract_positions(&mut g, &[s[1], s[0]], &ft).unwrap();
        let b = g.value(e).clone();
        assert_eq!(a.shape(), &[2, 8]);
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let fv = PositionalEncoder::new(&mut store, "fv", 2, 6, PosEncConfig::default(), &mut rng);
        let offs = [LocationOffset([0.2, -0.1]), LocationOffset([-0.05, 0.3])];
        let ids = gradcheck::all_params(&store);
        let r = gradcheck::check_params(&mut store, &ids, 64, |g| encode_vision_positions(g, &offs, &fv)).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
