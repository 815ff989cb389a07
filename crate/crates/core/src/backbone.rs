//! U-shaped encoder/decoder with depthwise-separable blocks, fuzzy
//! attention on every skip link and one sigmoid head per decoder scale.
//!
//! Scale `l = 0` is full resolution; scale `l` has extent `H / 2^l`. All
//! per-scale vectors in this module are ordered finest first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{FuzzyAttention, FuzzyConfig, GateMode, GateTarget};
use crate::init;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const SCALES: usize = 4;
const NORM_EPS: f64 = 1e-5;

/// How an attended skip feature joins the decoder path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub expansion: usize,
    pub groups: usize,
    pub memberships: usize,
    pub se_ratio: usize,
    pub gate: GateMode,
    pub gate_target: GateTarget,
    pub fusion: Fusion,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let f = FuzzyConfig::default();
        BackboneConfig {
            in_channels: 1,
            stage_channels: vec![8, 16, 32, 64],
            kernel: 3,
            expansion: 4,
            groups: 4,
            memberships: f.memberships,
            se_ratio: f.se_ratio,
            gate: f.gate,
            gate_target: f.target,
            fusion: Fusion::Concat,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("backbone: {d}")));
        if self.stage_channels.len() != SCALES {
            return bad(format!("need {SCALES} stage channels, got {}", self.stage_channels.len()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("stage channels {:?} must increase strictly", self.stage_channels));
        }
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.in_channels == 0 || self.expansion == 0 || self.memberships == 0 {
            return bad("in_channels, expansion and memberships must be positive".into());
        }
        for &c in &self.stage_channels {
            if self.groups == 0 || c % self.groups != 0 {
                return bad(format!("{c} channels not divisible into {} groups", self.groups));
            }
            if self.se_ratio == 0 || c % self.se_ratio != 0 {
                return bad(format!("{c} channels not divisible by se_ratio {}", self.se_ratio));
            }
        }
        Ok(())
    }

    pub fn fuzzy(&self) -> FuzzyConfig {
        FuzzyConfig {
            memberships: self.memberships,
            se_ratio: self.se_ratio,
            gate: self.gate,
            target: self.gate_target,
        }
    }

    /// Trainable scalar count of a backbone built from this config.
    pub fn parameter_count(&self) -> Result<usize> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Backbone::new(&mut store, self.clone(), &mut rng)?;
        Ok(store.num_elements())
    }
}

/// `[Cout, Cin]` weights plus `[Cout]` bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Pointwise {
            weight: store.add(format!("{prefix}.weight"), init::fan_in(&[cout, cin], cin, gain, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv3d_pointwise(x, w, b)
    }
}

fn depthwise_kernel<R: Real>(
    store: &mut ParamStore<R>,
    name: String,
    channels: usize,
    k: usize,
    rng: &mut impl Rng,
) -> ParamId {
    store.add(name, init::fan_in(&[channels, k, k, k], k * k * k, 1.0, rng))
}

/// Depthwise conv, group norm, pointwise expansion, GELU, pointwise
/// compression, residual add.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvNextBlock {
    pub depthwise: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub expand: Pointwise,
    pub compress: Pointwise,
    pub groups: usize,
}

impl ConvNextBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = channels * cfg.expansion;
        ConvNextBlock {
            depthwise: depthwise_kernel(store, format!("{prefix}.dw"), channels, cfg.kernel, rng),
            gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::full(&[channels], R::one())),
            beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[channels])),
            expand: Pointwise::new(store, &format!("{prefix}.expand"), channels, hidden, 1.0, rng),
            compress: Pointwise::new(store, &format!("{prefix}.compress"), hidden, channels, 1.0, rng),
            groups: cfg.groups,
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let k = g.param(store, self.depthwise)?;
        let h = g.conv3d_depthwise(x, k, 1, true)?;
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let h = g.group_norm(h, self.groups, gamma, beta, NORM_EPS)?;
        let h = self.expand.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.compress.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Stride-2 depthwise conv then a channel-changing pointwise conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownBlock {
    pub depthwise: ParamId,
    pub project: Pointwise,
}

impl DownBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        DownBlock {
            depthwise: depthwise_kernel(store, format!("{prefix}.dw"), cin, kernel, rng),
            project: Pointwise::new(store, &format!("{prefix}.project"), cin, cout, 1.0, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 5 || s[2..].iter().any(|d| d % 2 != 0) {
            return Err(Error::shape("down_block", format!("odd spatial extent in {s:?}")));
        }
        let k = g.param(store, self.depthwise)?;
        let h = g.conv3d_depthwise(x, k, 2, true)?;
        self.project.forward(g, store, h)
    }
}

/// Stride-2 depthwise transposed conv then a channel-changing pointwise conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpBlock {
    pub depthwise: ParamId,
    pub project: Pointwise,
}

impl UpBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        UpBlock {
            depthwise: depthwise_kernel(store, format!("{prefix}.dw"), cin, kernel, rng),
            project: Pointwise::new(store, &format!("{prefix}.project"), cin, cout, 1.0, rng),
        }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let k = g.param(store, self.depthwise)?;
        let h = g.deconv3d(x, k, 2)?;
        self.project.forward(g, store, h)
    }
}

/// Per-scale outputs, finest first.
#[derive(Debug, Clone)]
pub struct CoarseOutputs {
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
    /// Decoder features after skip fusion, `[N, C_l, ...]`.
    pub features: Vec<Var>,
    /// Attention maps (absent under identity gating).
    pub alphas: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Pointwise,
    stem_block: ConvNextBlock,
    encoders: Vec<ConvNextBlock>,
    downs: Vec<DownBlock>,
    bottleneck: ConvNextBlock,
    ups: Vec<UpBlock>,
    decoders: Vec<ConvNextBlock>,
    skips: Vec<FuzzyAttention>,
    merges: Vec<Pointwise>,
    heads: Vec<Pointwise>,
}

impl Backbone {
    /// Registers every parameter in `store`, in a fixed order.
    pub fn new<R: Real>(store: &mut ParamStore<R>, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels.clone();
        let k = config.kernel;
        let stem = Pointwise::new(store, "stem.project", config.in_channels, ch[0], 1.0, rng);
        let stem_block = ConvNextBlock::new(store, "stem.block", ch[0], &config, rng);
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..SCALES {
            encoders.push(ConvNextBlock::new(store, &format!("enc{l}"), ch[l], &config, rng));
            if l + 1 < SCALES {
                downs.push(DownBlock::new(store, &format!("down{l}"), ch[l], ch[l + 1], k, rng));
            }
        }
        let bottleneck = ConvNextBlock::new(store, "bottleneck", ch[SCALES - 1], &config, rng);
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        let mut skips = Vec::new();
        let mut merges = Vec::new();
        let mut heads = Vec::new();
        for l in 0..SCALES {
            if l + 1 < SCALES {
                ups.push(UpBlock::new(store, &format!("up{l}"), ch[l + 1], ch[l], k, rng));
            }
            decoders.push(ConvNextBlock::new(store, &format!("dec{l}"), ch[l], &config, rng));
            skips.push(FuzzyAttention::new(store, &format!("skip{l}"), ch[l], config.fuzzy(), rng)?);
            let merge_in = match config.fusion {
                Fusion::Concat => 2 * ch[l],
                Fusion::Add => ch[l],
            };
            merges.push(Pointwise::new(store, &format!("merge{l}"), merge_in, ch[l], 1.0, rng));
            heads.push(Pointwise::new(store, &format!("head{l}"), ch[l], 1, 1.0, rng));
        }
        Ok(Backbone {
            config,
            stem,
            stem_block,
            encoders,
            downs,
            bottleneck,
            ups,
            decoders,
            skips,
            merges,
            heads,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>, x: Var) -> Result<CoarseOutputs> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "backbone",
                format!("expected [N, {}, H, W, D], got {s:?}", self.config.in_channels),
            ));
        }
        let div = 1 << (SCALES - 1);
        if s[2..].iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::shape("backbone", format!("spatial extent {:?} not divisible by {div}", &s[2..])));
        }

        let h = self.stem.forward(g, store, x)?;
        let mut h = self.stem_block.forward(g, store, h)?;
        let mut skips = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            h = self.encoders[l].forward(g, store, h)?;
            skips.push(h);
            if l + 1 < SCALES {
                h = self.downs[l].forward(g, store, h)?;
            }
        }
        let mut h = self.bottleneck.forward(g, store, h)?;

        let mut features = vec![None; SCALES];
        let mut alphas = vec![None; SCALES];
        for l in (0..SCALES).rev() {
            if l + 1 < SCALES {
                h = self.ups[l].forward(g, store, h)?;
            }
            let d = self.decoders[l].forward(g, store, h)?;
            let att = self.skips[l].forward(g, store, skips[l], d)?;
            let merged = match self.config.fusion {
                Fusion::Concat => g.concat(&[att.attended, d])?,
                Fusion::Add => g.add(att.attended, d)?,
            };
            h = self.merges[l].forward(g, store, merged)?;
            features[l] = Some(h);
            alphas[l] = att.alpha;
        }
        let features: Vec<Var> = features.into_iter().map(Option::unwrap).collect();
        let mut logits = Vec::with_capacity(SCALES);
        let mut probs = Vec::with_capacity(SCALES);
        for l in 0..SCALES {
            let z = self.heads[l].forward(g, store, features[l])?;
            logits.push(z);
            probs.push(g.sigmoid(z)?);
        }
        Ok(CoarseOutputs {
            logits,
            probs,
            features,
            alphas,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn zero_compress_block_is_identity() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f64>::new();
        let block = ConvNextBlock::new(&mut store, "b", 8, &cfg, &mut rng());
        store.set(block.compress.weight, Tensor::zeros(&[8, 32])).unwrap();
        let x = Tensor::from_fn(&[1, 8, 4, 4, 4], |i| (i as f64 * 0.11).cos());
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = block.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn down_and_up_shapes() {
        let mut store = ParamStore::<f32>::new();
        let down = DownBlock::new(&mut store, "d", 8, 16, 3, &mut rng());
        let up = UpBlock::new(&mut store, "u", 16, 8, 3, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 8, 32, 32, 32], 0.5)).unwrap();
        let y = down.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 16, 16, 16]);
        let z = up.forward(&mut g, &store, y).unwrap();
        assert_eq!(g.shape(z), &[1, 8, 32, 32, 32]);
        let odd = g.constant(Tensor::zeros(&[1, 8, 5, 4, 4])).unwrap();
        assert!(down.forward(&mut g, &store, odd).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let mut c = BackboneConfig::default();
        c.kernel = 4;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.stage_channels = vec![8, 8, 32, 64];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.stage_channels = vec![8, 16, 32];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::new(&mut store, BackboneConfig::default(), &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 12, 16, 16])).unwrap();
        assert!(net.forward(&mut g, &store, x).is_err());
    }
}
