//! Fuzzy attention gating for skip connections.
//!
//! Each channel carries `m` Gaussian membership functions; the attention
//! value of a voxel is the fuzzy OR (maximum) of its memberships. The full
//! skip module normalizes and re-weights encoder and decoder features,
//! sums them, and gates the encoder branch with the resulting map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Floor added to the softplus so spreads stay strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-4;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Membership functions followed by a max over them.
    Fuzzy,
    /// Attention fixed at one; the module reduces to the SE-processed encoder branch.
    Identity,
}

/// Which tensor the attention map multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateTarget {
    Encoder,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuzzyConfig {
    pub memberships: usize,
    pub se_ratio: usize,
    pub gate: GateMode,
    pub target: GateTarget,
}

impl Default for FuzzyConfig {
    fn default() -> Self {
        FuzzyConfig {
            memberships: 4,
            se_ratio: 4,
            gate: GateMode::Fuzzy,
            target: GateTarget::Encoder,
        }
    }
}

/// Raw spread value whose parametrized sigma equals `sigma`.
pub fn rho_for_sigma(sigma: f64) -> f64 {
    let s = sigma - SIGMA_FLOOR;
    assert!(s > 0.0, "sigma must exceed the floor");
    // inverse softplus, stable for large s
    s + (-(-s).exp_m1()).ln()
}

/// Centers and raw spreads of `m` membership functions per channel, each `[m, C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GmfParams {
    pub mu: ParamId,
    pub rho: ParamId,
    pub m: usize,
    pub channels: usize,
}

impl GmfParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        m: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("GmfParams::new", "need at least one membership function"));
        }
        let mu = store.add(format!("{prefix}.mu"), init::normal(&[m, channels], 1.0, rng));
        let rho = store.add(
            format!("{prefix}.rho"),
            Tensor::full(&[m, channels], R::lit(rho_for_sigma(1.0))),
        );
        Ok(GmfParams { mu, rho, m, channels })
    }

    /// `sigma = softplus(rho) + floor` on the graph.
    pub fn sigma<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> Result<Var> {
        let rho = g.param(store, self.rho)?;
        let sp = g.softplus(rho)?;
        g.add_scalar(sp, R::lit(SIGMA_FLOOR))
    }

    /// Current spreads as plain values.
    pub fn sigma_values<R: Real>(&self, store: &ParamStore<R>) -> Tensor<R> {
        store
            .get(self.rho)
            .map(|r| crate::tensor::softplus_value(r) + R::lit(SIGMA_FLOOR))
    }
}

/// Membership of every voxel: `[N, C, ...] -> [N, m, C, ...]`.
pub fn gmf_membership<R: Real>(
    g: &mut Graph<R>,
    store: &ParamStore<R>,
    x: Var,
    p: &GmfParams,
) -> Result<Var> {
    let mu = g.param(store, p.mu)?;
    let sigma = p.sigma(g, store)?;
    g.gmf(x, mu, sigma)
}

/// Fuzzy OR over the membership axis: `[N, m, C, ...] -> [N, C, ...]`.
pub fn fuzzy_or<R: Real>(g: &mut Graph<R>, memberships: Var) -> Result<Var> {
    Ok(g.max_over_axis(memberships, 1)?.0)
}

/// Channel re-weighting from globally pooled features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeParams {
    /// `[C/r, C]`
    pub reduce: ParamId,
    /// `[C, C/r]`
    pub expand: ParamId,
    pub ratio: usize,
}

impl SeParams {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::invalid(
                "SeParams::new",
                format!("{channels} channels not divisible by ratio {ratio}"),
            ));
        }
        let hidden = channels / ratio;
        let reduce = store.add(format!("{prefix}.reduce"), init::fan_in(&[hidden, channels], channels, 1.0, rng));
        let expand = store.add(format!("{prefix}.expand"), init::fan_in(&[channels, hidden], hidden, 1.0, rng));
        Ok(SeParams { reduce, expand, ratio })
    }
}

pub fn se_layer<R: Real>(g: &mut Graph<R>, store: &ParamStore<R>, x: Var, p: &SeParams) -> Result<Var> {
    let c = g.shape(x).get(1).copied().unwrap_or(0);
    let rs = store.get(p.reduce).shape();
    if rs.len() != 2 || rs[1] != c {
        return Err(Error::shape("se_layer", format!("{c} channels, reduce {rs:?}")));
    }
    let w1 = g.param(store, p.reduce)?;
    let w2 = g.param(store, p.expand)?;
    let squeeze = g.global_avg_pool(x)?;
    let h = g.linear(squeeze, w1, None)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let e = g.linear(h, w2, None)?;
    let s = g.sigmoid(e)?;
    g.channel_scale(x, s)
}

/// Decoder-side parameters, present only under fuzzy gating.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGate {
    pub gmf: GmfParams,
    pub se_decoder: SeParams,
}

/// Skip-connection module for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyAttention {
    pub se_encoder: SeParams,
    pub gate: Option<FuzzyGate>,
    pub config: FuzzyConfig,
}

/// Output of [`FuzzyAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub attended: Var,
    /// `None` under identity gating.
    pub alpha: Option<Var>,
}

impl FuzzyAttention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        config: FuzzyConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let se_encoder = SeParams::new(store, &format!("{prefix}.se_enc"), channels, config.se_ratio, rng)?;
        let gate = match config.gate {
            GateMode::Fuzzy => Some(FuzzyGate {
                se_decoder: SeParams::new(store, &format!("{prefix}.se_dec"), channels, config.se_ratio, rng)?,
                gmf: GmfParams::new(store, &format!("{prefix}.gmf"), config.memberships, channels, rng)?,
            }),
            GateMode::Identity => None,
        };
        Ok(FuzzyAttention {
            se_encoder,
            gate,
            config,
        })
    }

    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        store: &ParamStore<R>,
        encoder: Var,
        decoder: Var,
    ) -> Result<Attended> {
        if g.shape(encoder) != g.shape(decoder) {
            return Err(Error::shape(
                "fuzzy_attention_module",
                format!("encoder {:?} vs decoder {:?}", g.shape(encoder), g.shape(decoder)),
            ));
        }
        let e = g.instance_norm(encoder, NORM_EPS)?;
        let e = g.leaky_relu(e, LEAKY_SLOPE)?;
        let e = se_layer(g, store, e, &self.se_encoder)?;
        let Some(gate) = &self.gate else {
            return Ok(Attended { attended: e, alpha: None });
        };
        let d = g.instance_norm(decoder, NORM_EPS)?;
        let d = g.leaky_relu(d, LEAKY_SLOPE)?;
        let d = se_layer(g, store, d, &gate.se_decoder)?;
        let sum = g.add(e, d)?;
        let fused = g.leaky_relu(sum, LEAKY_SLOPE)?;
        let members = gmf_membership(g, store, fused, &gate.gmf)?;
        let alpha = fuzzy_or(g, members)?;
        let target = match self.config.target {
            GateTarget::Encoder => e,
            GateTarget::Fused => fused,
        };
        let attended = g.mul(alpha, target)?;
        Ok(Attended {
            attended,
            alpha: Some(alpha),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn rho_inverts_softplus() {
        for s in [0.01, 0.5, 1.0, 3.0, 40.0] {
            let r = rho_for_sigma(s);
            let back = crate::tensor::softplus_value(r) + SIGMA_FLOOR;
            assert!((back - s).abs() < 1e-12, "{s} -> {back}");
        }
    }

    #[test]
    fn membership_at_center_and_one_sigma() {
        let mut store = ParamStore::<f64>::new();
        let p = GmfParams::new(&mut store, "g", 1, 2, &mut rng()).unwrap();
        store.set(p.mu, Tensor::new(&[1, 2], vec![0.3, -1.0]).unwrap()).unwrap();
        let sig = p.sigma_values(&store);
        let x = Tensor::new(&[1, 2, 1, 1, 2], vec![0.3, 0.3 + sig.data()[0], -1.0, -1.0 - sig.data()[1]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let f = gmf_membership(&mut g, &store, xv, &p).unwrap();
        let out = g.value(f).data();
        assert_eq!(out[0], 1.0);
        assert!((out[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(out[2], 1.0);
        assert!((out[3] - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn fuzzy_or_picks_max() {
        let mut g = Graph::<f64>::new();
        let m = g
            .constant(Tensor::new(&[1, 4, 1, 1, 1, 1], vec![0.2, 0.9, 0.5, 0.1]).unwrap())
            .unwrap();
        let a = fuzzy_or(&mut g, m).unwrap();
        assert_eq!(g.value(a).data(), &[0.9]);
        let single = g.constant(Tensor::new(&[1, 1, 2, 1, 1, 1], vec![0.4, 0.7]).unwrap()).unwrap();
        let a = fuzzy_or(&mut g, single).unwrap();
        assert_eq!(g.value(a).data(), &[0.4, 0.7]);
    }

    #[test]
    fn se_with_zero_expand_halves_input() {
        let mut store = ParamStore::<f64>::new();
        let p = SeParams::new(&mut store, "se", 4, 2, &mut rng()).unwrap();
        store.set(p.expand, Tensor::zeros(&[4, 2])).unwrap();
        let x = Tensor::from_fn(&[2, 4, 2, 2, 2], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = se_layer(&mut g, &store, xv, &p).unwrap();
        assert_eq!(g.value(y).data(), x.map(|v| 0.5 * v).data());

        let zero = g.constant(Tensor::zeros(&[1, 4, 2, 2, 2])).unwrap();
        let store2 = {
            let mut s = ParamStore::<f64>::new();
            SeParams::new(&mut s, "se", 4, 2, &mut rng()).unwrap();
            s
        };
        let y = se_layer(&mut g, &store2, zero, &p).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        let mut store = ParamStore::<f32>::new();
        assert!(SeParams::new(&mut store, "se", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn zero_inputs_give_closed_form_alpha() {
        let mut store = ParamStore::<f64>::new();
        let fa = FuzzyAttention::new(&mut store, "fa", 8, FuzzyConfig::default(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[1, 8, 2, 2, 2])).unwrap();
        let d = g.constant(Tensor::zeros(&[1, 8, 2, 2, 2])).unwrap();
        let out = fa.forward(&mut g, &store, e, d).unwrap();
        let alpha = g.value(out.alpha.unwrap());
        let gmf = fa.gate.unwrap().gmf;
        let mu = store.get(gmf.mu).data();
        let sigma = gmf.sigma_values(&store);
        for c in 0..8 {
            let expected = (0..4)
                .map(|i| {
                    let (m, s) = (mu[i * 8 + c], sigma.data()[i * 8 + c]);
                    (-m * m / (2.0 * s * s)).exp()
                })
                .fold(f64::MIN, f64::max);
            for v in &alpha.data()[c * 8..(c + 1) * 8] {
                assert!((v - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_gate_has_no_memberships() {
        let mut store = ParamStore::<f32>::new();
        let cfg = FuzzyConfig {
            gate: GateMode::Identity,
            ..FuzzyConfig::default()
        };
        let fa = FuzzyAttention::new(&mut store, "fa", 8, cfg, &mut rng()).unwrap();
        assert!(fa.gate.is_none());
        assert!(store.find("fa.gmf.mu").is_none());
    }

    #[test]
    fn mismatched_features_rejected() {
        let mut store = ParamStore::<f64>::new();
        let fa = FuzzyAttention::new(&mut store, "fa", 4, FuzzyConfig::default(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[1, 4, 2, 2, 2])).unwrap();
        let d = g.constant(Tensor::zeros(&[1, 4, 2, 2, 4])).unwrap();
        assert!(fa.forward(&mut g, &store, e, d).is_err());
    }
}
