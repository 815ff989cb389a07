//! Central finite-difference checks of the reverse-mode engine in `f64`.
//!
//! A case builds a scalar-valued function of some input tensors and,
//! optionally, a parameter store. The harness contracts the output with
//! fixed random weights, compares analytic gradients against
//! `(f(x+h) - f(x-h)) / 2h` on a sample of coordinates, and skips any
//! coordinate whose perturbation flips a leaky-ReLU sign or a max winner.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::backbone::{BackboneConfig, ConvNextBlock, DownBlock, UpBlock, SCALES};
use crate::border::{fuse, Glcf, GlcfConfig};
use crate::fuzzy::{fuzzy_or, gmf_membership, se_layer, FuzzyAttention, FuzzyConfig, GateMode, GateTarget, GmfParams, SeParams};
use crate::losses::{ordinary_loss, LossWeights};
use crate::tensor::{sigmoid_value, Graph, ParamStore, Tensor, Var};

/// Tolerance for ops without kinks.
pub const SMOOTH_TOL: f64 = 1e-5;
/// Tolerance once a max or leaky-ReLU is on the path.
pub const KINKED_TOL: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + Send + Sync>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub params: ParamStore<f64>,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            inputs,
            params: ParamStore::new(),
            build: Box::new(move |g, _, v| build(g, v)),
        }
    }

    pub fn with_params(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        params: ParamStore<f64>,
        build: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            inputs,
            params,
            build: Box::new(build),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub kinked: bool,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checker {
    pub step: f64,
    /// Denominator floor for the relative error, so entries that are zero
    /// analytically compare on an absolute scale.
    pub floor: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub samples: usize,
    pub seed: u64,
}

impl Default for Checker {
    fn default() -> Self {
        Checker {
            step: 1e-5,
            floor: 1e-6,
            samples: 24,
            seed: 0x5eed,
        }
    }
}

struct Eval {
    loss: f64,
    signature: Vec<u32>,
}

impl Checker {
    fn eval(&self, case: &Case, inputs: &[Tensor<f64>], params: &ParamStore<f64>, weights: &Tensor<f64>) -> Result<Eval> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (case.build)(&mut g, params, &vars)?;
        Ok(Eval {
            loss: g.value(out).dot(weights),
            signature: g.kink_signature(),
        })
    }

    pub fn run(&self, case: &Case) -> Result<CheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = Graph::new();
        let vars = case
            .inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (case.build)(&mut g, &case.params, &vars)?;
        let weights: Tensor<f64> = init::normal(g.shape(out), 1.0, &mut rng);
        let w = g.constant(weights.clone())?;
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        let base_sig = g.kink_signature();
        let grads = g.backward(loss)?;

        let mut result = CheckResult {
            name: case.name.clone(),
            kinked: !base_sig.is_empty(),
            max_rel_err: 0.0,
            tolerance: if base_sig.is_empty() { SMOOTH_TOL } else { KINKED_TOL },
            checked: 0,
            skipped: 0,
        };

        let compare = |analytic: f64, plus: Eval, minus: Eval, result: &mut CheckResult| {
            if plus.signature != base_sig || minus.signature != base_sig {
                result.skipped += 1;
                return;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * self.step);
            let denom = analytic.abs().max(numeric.abs()).max(self.floor);
            let rel = (analytic - numeric).abs() / denom;
            result.max_rel_err = result.max_rel_err.max(rel);
            result.checked += 1;
        };

        for (i, var) in vars.iter().enumerate() {
            let zero = Tensor::zeros(case.inputs[i].shape());
            let grad = grads.wrt(*var).unwrap_or(&zero).clone();
            for j in self.pick(case.inputs[i].len(), &mut rng) {
                let mut inputs = case.inputs.clone();
                let x0 = inputs[i].data()[j];
                inputs[i].data_mut()[j] = x0 + self.step;
                let plus = self.eval(case, &inputs, &case.params, &weights)?;
                inputs[i].data_mut()[j] = x0 - self.step;
                let minus = self.eval(case, &inputs, &case.params, &weights)?;
                compare(grad.data()[j], plus, minus, &mut result);
            }
        }
        for id in case.params.ids() {
            let zero = Tensor::zeros(case.params.get(id).shape());
            let grad = grads.param(id).unwrap_or(&zero).clone();
            for j in self.pick(case.params.get(id).len(), &mut rng) {
                let mut params = case.params.clone();
                let x0 = params.get(id).data()[j];
                params.get_mut(id).data_mut()[j] = x0 + self.step;
                let plus = self.eval(case, &case.inputs, &params, &weights)?;
                params.get_mut(id).data_mut()[j] = x0 - self.step;
                let minus = self.eval(case, &case.inputs, &params, &weights)?;
                compare(grad.data()[j], plus, minus, &mut result);
            }
        }
        if result.checked == 0 {
            return Err(Error::invalid(
                "gradcheck",
                format!("{}: every sampled coordinate sat next to a kink", case.name),
            ));
        }
        Ok(result)
    }

    fn pick(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if len <= self.samples {
            (0..len).collect()
        } else {
            let mut idx = sample(rng, len, self.samples).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Formats results as a fixed-width table, one row per case.
pub fn table(results: &[CheckResult]) -> String {
    let mut out = format!(
        "{:<34} {:>6} {:>12} {:>9} {:>7} {:>7}\n",
        "case", "status", "max_rel_err", "tol", "checked", "skipped"
    );
    for r in results {
        out.push_str(&format!(
            "{:<34} {:>6} {:>12.3e} {:>9.0e} {:>7} {:>7}\n",
            r.name,
            if r.passed() { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.tolerance,
            r.checked,
            r.skipped
        ));
    }
    out
}


fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    init::normal(shape, 1.0, rng)
}

/// Values in `(0.05, 0.95)`, away from the BCE clamp.
fn probs_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_t(shape, rng).map(|v| 0.05 + 0.9 * sigmoid_value(v))
}

fn binary_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_t(shape, rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Every differentiable op on its own plus the composed modules.
pub fn standard_suite() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfab);
    let r = &mut rng;
    let vol = [1, 2, 4, 4, 4];
    let mut cases = vec![
        Case::new("add", vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.add(v[0], v[1])),
        Case::new("mul", vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.mul(v[0], v[1])),
        Case::new("scale", vec![rand_t(&[5], r)], |g, v| g.scale(v[0], -1.5)),
        Case::new("add_scalar", vec![rand_t(&[5], r)], |g, v| g.add_scalar(v[0], 0.3)),
        Case::new("scale_by", vec![rand_t(&[2, 3], r), rand_t(&[1], r)], |g, v| g.scale_by(v[0], v[1])),
        Case::new("gelu", vec![rand_t(&[12], r).map(|x| 3.0 * x)], |g, v| g.gelu(v[0])),
        Case::new("leaky_relu", vec![rand_t(&[12], r)], |g, v| g.leaky_relu(v[0], 0.01)),
        Case::new("sigmoid", vec![rand_t(&[12], r).map(|x| 3.0 * x)], |g, v| g.sigmoid(v[0])),
        Case::new("softplus", vec![rand_t(&[12], r).map(|x| 3.0 * x)], |g, v| g.softplus(v[0])),
        Case::new("sum", vec![rand_t(&[2, 3], r)], |g, v| g.sum(v[0])),
        Case::new("mean", vec![rand_t(&[2, 3], r)], |g, v| g.mean(v[0])),
        Case::new("reshape", vec![rand_t(&[2, 3], r)], |g, v| g.reshape(v[0], &[3, 2])),
        Case::new("flatten", vec![rand_t(&vol, r)], |g, v| g.flatten(v[0])),
        Case::new("concat", vec![rand_t(&vol, r), rand_t(&[1, 3, 4, 4, 4], r)], |g, v| g.concat(&[v[0], v[1]])),
        Case::new("concat_rows", vec![rand_t(&[2, 3], r), rand_t(&[4, 3], r)], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        Case::new("max_over_axis", vec![rand_t(&[1, 4, 2, 3, 3, 3], r)], |g, v| {
            Ok(g.max_over_axis(v[0], 1)?.0)
        }),
        Case::new("conv3d_depthwise_same", vec![rand_t(&vol, r), rand_t(&[2, 3, 3, 3], r)], |g, v| {
            g.conv3d_depthwise(v[0], v[1], 1, true)
        }),
        Case::new("conv3d_depthwise_stride2", vec![rand_t(&vol, r), rand_t(&[2, 3, 3, 3], r)], |g, v| {
            g.conv3d_depthwise(v[0], v[1], 2, true)
        }),
        Case::new("deconv3d", vec![rand_t(&[1, 2, 2, 2, 2], r), rand_t(&[2, 3, 3, 3], r)], |g, v| {
            g.deconv3d(v[0], v[1], 2)
        }),
        Case::new("conv3d_pointwise", vec![rand_t(&vol, r), rand_t(&[3, 2], r), rand_t(&[3], r)], |g, v| {
            g.conv3d_pointwise(v[0], v[1], v[2])
        }),
        Case::new("linear", vec![rand_t(&[3, 4], r), rand_t(&[2, 4], r), rand_t(&[2], r)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        Case::new("group_norm", vec![rand_t(&[1, 4, 3, 3, 3], r), rand_t(&[4], r), rand_t(&[4], r)], |g, v| {
            g.group_norm(v[0], 2, v[1], v[2], 1e-5)
        }),
        Case::new("instance_norm", vec![rand_t(&vol, r)], |g, v| g.instance_norm(v[0], 1e-5)),
        Case::new("global_avg_pool", vec![rand_t(&vol, r)], |g, v| g.global_avg_pool(v[0])),
        Case::new("channel_scale", vec![rand_t(&vol, r), rand_t(&[1, 2], r)], |g, v| g.channel_scale(v[0], v[1])),
        Case::new(
            "gmf",
            vec![rand_t(&vol, r), rand_t(&[3, 2], r), rand_t(&[3, 2], r).map(|x| 0.5 + x.abs())],
            |g, v| g.gmf(v[0], v[1], v[2]),
        ),
        Case::new("gather_cube", vec![rand_t(&vol, r)], |g, v| {
            g.gather_cube(v[0], 0, &[[0, 0, 0], [1, 2, 3], [3, 3, 3]], true)
        }),
        Case::new("gather_points", vec![rand_t(&vol, r)], |g, v| {
            g.gather_points(v[0], 0, &[[0, 1, 0], [2, 2, 2]])
        }),
        Case::new("broadcast_rows", vec![rand_t(&[3], r)], |g, v| g.broadcast_rows(v[0], 4)),
    ];
    let y = binary_t(&[2, 3, 3], r);
    let y2 = y.clone();
    cases.push(Case::new("dice_loss", vec![probs_t(&[2, 3, 3], r)], move |g, v| g.dice_loss(v[0], &y, 1.0)));
    cases.push(Case::new("bce_loss", vec![probs_t(&[2, 3, 3], r)], move |g, v| g.bce_loss(v[0], &y2)));

    let mut store = ParamStore::new();
    let gmf = GmfParams::new(&mut store, "gmf", 3, 2, r)?;
    cases.push(Case::with_params(
        "gmf_membership+fuzzy_or",
        vec![rand_t(&vol, r)],
        store,
        move |g, s, v| {
            let m = gmf_membership(g, s, v[0], &gmf)?;
            fuzzy_or(g, m)
        },
    ));

    let mut store = ParamStore::new();
    let se = SeParams::new(&mut store, "se", 4, 2, r)?;
    cases.push(Case::with_params("se_layer", vec![rand_t(&[1, 4, 3, 3, 3], r)], store, move |g, s, v| {
        se_layer(g, s, v[0], &se)
    }));

    for (name, gate, target) in [
        ("fuzzy_attention_module", GateMode::Fuzzy, GateTarget::Encoder),
        ("fuzzy_attention_module_fused", GateMode::Fuzzy, GateTarget::Fused),
        ("fuzzy_attention_identity", GateMode::Identity, GateTarget::Encoder),
    ] {
        let mut store = ParamStore::new();
        let cfg = FuzzyConfig {
            memberships: 3,
            se_ratio: 2,
            gate,
            target,
        };
        let m = FuzzyAttention::new(&mut store, "att", 4, cfg, r)?;
        let shape = [1, 4, 3, 3, 3];
        cases.push(Case::with_params(name, vec![rand_t(&shape, r), rand_t(&shape, r)], store, move |g, s, v| {
            Ok(m.forward(g, s, v[0], v[1])?.attended)
        }));
    }

    let bcfg = BackboneConfig {
        groups: 2,
        expansion: 2,
        ..BackboneConfig::default()
    };
    let mut store = ParamStore::new();
    let block = ConvNextBlock::new(&mut store, "block", 4, &bcfg, r);
    cases.push(Case::with_params("convnext_block", vec![rand_t(&[1, 4, 4, 4, 4], r)], store, move |g, s, v| {
        block.forward(g, s, v[0])
    }));
    let mut store = ParamStore::new();
    let down = DownBlock::new(&mut store, "down", 2, 3, 3, r);
    cases.push(Case::with_params("down_block", vec![rand_t(&vol, r)], store, move |g, s, v| {
        down.forward(g, s, v[0])
    }));
    let mut store = ParamStore::new();
    let up = UpBlock::new(&mut store, "up", 3, 2, 3, r);
    cases.push(Case::with_params("up_block", vec![rand_t(&[1, 3, 2, 2, 2], r)], store, move |g, s, v| {
        up.forward(g, s, v[0])
    }));

    cases.push(Case::new(
        "glcf_fuse",
        vec![
            rand_t(&[3, 4], r),
            rand_t(&[3, 4], r),
            rand_t(&[3, 4], r),
            rand_t(&[3, 4], r),
            rand_t(&[1], r),
            rand_t(&[1], r),
            rand_t(&[1], r),
            rand_t(&[1], r),
        ],
        |g, v| {
            let mut l = [v[4]; 4];
            for k in 0..4 {
                l[k] = g.sigmoid(v[4 + k])?;
            }
            fuse(g, v[0], v[1], v[2], v[3], l)
        },
    ));

    let gcfg = GlcfConfig {
        dims: vec![4; SCALES],
        pe_frequencies: 2,
        ..GlcfConfig::default()
    };
    let channels = [2, 2, 2, 2];
    let mut store = ParamStore::new();
    let glcf = Glcf::new(&mut store, gcfg, &channels, r)?;
    let feats: Vec<Tensor<f64>> = [8, 4, 2, 1].iter().map(|&e| rand_t(&[1, 2, e, e, e], r)).collect();
    for layer in [0, SCALES - 1] {
        let glcf = glcf.clone();
        let pts: Vec<[usize; 3]> = if layer == 0 { vec![[0, 0, 0], [3, 4, 5], [7, 7, 6]] } else { vec![[0, 0, 0]] };
        cases.push(Case::with_params(
            format!("glcf_refine_layer{layer}"),
            feats.clone(),
            store.clone(),
            move |g, s, v| {
                let z = glcf.refine_layer(g, s, v, layer, std::slice::from_ref(&pts))?;
                z.ok_or_else(|| Error::invalid("gradcheck", "no points"))
            },
        ));
    }

    let targets: Vec<Tensor<f64>> = (0..SCALES).map(|_| binary_t(&[1, 1, 2, 2, 2], r)).collect();
    let w = LossWeights::default();
    cases.push(Case::new(
        "deep_supervision_loss",
        (0..SCALES).map(|_| probs_t(&[1, 1, 2, 2, 2], r)).collect(),
        move |g, v| ordinary_loss(g, v, &targets, &w),
    ));
    Ok(cases)
}

/// Runs [`standard_suite`] with the default checker.
pub fn run_standard_suite() -> Result<Vec<CheckResult>> {
    let checker = Checker::default();
    standard_suite()?.iter().map(|c| checker.run(c)).collect()
}
