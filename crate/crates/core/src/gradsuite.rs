//! Finite-difference checks over every differentiable op and composite
//! block, at small fixed dimensions, repeated over a range of seeds.

use std::fmt::{self, Display, Write as _};
use std::time::{Duration, Instant};

use rand::Rng;

use crate::config::RunConfig;
use crate::depthbin::{depth_focal_loss, DepthTargetMap, INVALID_BIN};
use crate::detect::{detection_loss, AnchorTarget, DetectionHead, LossWeights, RESIDUALS};
use crate::dfe::{DepthDistribution, DfeState};
use crate::dtr::{
    attention_linear, attention_linear_explicit, attention_vanilla, build_dpe, feature_map, AttentionConfig,
    AttentionKind, DecoderLayer, DepthAwareTransformer, DpeState, EncoderLayer, MultiHeadAttention,
};
use crate::loss::{focal_on_probs, sigmoid_focal, FocalParams};
use crate::rng::{stream, streams, uniform_vec, Prng};
use crate::tensor::{
    conv2d, gradcheck, Conv2dParams, CoordMismatch, GradcheckOptions, GradcheckReport, Linear, Parameterized, Result,
    Tensor, TensorError,
};

type CaseFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Inputs and a scalar function of them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    build: fn(&mut Prng) -> Result<Case>,
}

impl Check {
    pub fn case(&self, seed: u64) -> Result<Case> {
        (self.build)(&mut stream(seed, streams::GRADSUITE))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub first_seed: u64,
    pub tol: f64,
    pub eps: f64,
    /// Gradient magnitude below which errors are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per input and seed.
    pub max_coords: usize,
    /// Name of a check whose analytic gradient is scaled by 1.01.
    pub corrupt: Option<String>,
    /// Substring filter on check names.
    pub only: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            tol: 1e-4,
            eps: 1e-5,
            floor: 1e-5,
            max_coords: 6,
            corrupt: None,
            only: None,
        }
    }
}

impl SuiteOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            seeds: cfg.gradcheck_seeds,
            first_seed: cfg.seed,
            tol: cfg.gradcheck_tol,
            corrupt: (!cfg.gradcheck_corrupt.is_empty()).then(|| cfg.gradcheck_corrupt.clone()),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub seeds: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: usize,
    /// Worst failing coordinate and its seed.
    pub worst: Option<(u64, CoordMismatch)>,
    pub elapsed: Duration,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<26} {:>5} {:>7} {:>7} {:>12} {:>6}",
            "check", "seeds", "coords", "skipped", "max_rel_err", "status"
        )?;
        for e in &self.entries {
            let status = if e.passed() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<26} {:>5} {:>7} {:>7} {:>12.3e} {:>6}",
                e.name, e.seeds, e.checked, e.skipped, e.max_rel_error, status
            )?;
            if let Some((seed, m)) = &e.worst {
                writeln!(
                    f,
                    "  seed {seed} input {} index {}: analytic {:e} numeric {:e}",
                    m.input, m.index, m.analytic, m.numeric
                )?;
            }
        }
        let mut tail = format!("{} checks in {:.2}s", self.entries.len(), self.elapsed.as_secs_f64());
        let failed = self.failed();
        if !failed.is_empty() {
            let _ = write!(tail, "; failed: {}", failed.join(", "));
        }
        writeln!(f, "{tail}")
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut report = SuiteReport::default();
    for check in checks() {
        if opts.only.as_deref().is_some_and(|s| !check.name.contains(s)) {
            continue;
        }
        report.entries.push(run_check(&check, opts)?);
    }
    if let Some(name) = &opts.corrupt {
        if !report.entries.iter().any(|e| e.name == name) {
            return Err(TensorError::Invalid {
                op: "gradsuite",
                msg: format!("no check named {name:?}"),
            });
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

pub fn run_check(check: &Check, opts: &SuiteOptions) -> Result<SuiteEntry> {
    let start = Instant::now();
    let scale = if opts.corrupt.as_deref() == Some(check.name) { 1.01 } else { 1.0 };
    let mut entry = SuiteEntry {
        name: check.name,
        seeds: opts.seeds,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        failures: 0,
        worst: None,
        elapsed: Duration::ZERO,
    };
    for seed in opts.first_seed..opts.first_seed + opts.seeds as u64 {
        let case = check.case(seed)?;
        let go = GradcheckOptions {
            eps: opts.eps,
            tol: opts.tol,
            max_coords: Some(opts.max_coords),
            floor: opts.floor,
            seed,
            analytic_scale: scale,
            kink_tol: Some(1e-2),
        };
        let r: GradcheckReport = gradcheck(check.name, &case.f, &case.inputs, &go)?;
        entry.checked += r.checked;
        entry.skipped += r.skipped;
        entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
        entry.max_abs_error = entry.max_abs_error.max(r.max_abs_error);
        entry.failures += r.failures.len();
        for m in r.failures {
            if entry.worst.as_ref().map_or(true, |(_, w)| m.rel_error > w.rel_error) {
                entry.worst = Some((seed, m));
            }
        }
    }
    entry.elapsed = start.elapsed();
    Ok(entry)
}

fn err(e: impl Display) -> TensorError {
    TensorError::Invalid {
        op: "gradsuite",
        msg: e.to_string(),
    }
}

fn uniform(rng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::new(uniform_vec(rng, shape.iter().product(), lo, hi), shape)
}

/// Uniform magnitudes in `[0.2, 1]` with random sign: clear of kinks at 0.
fn signed(rng: &mut Prng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(v, shape)
}

/// `sum(out * r)` for fixed pseudo-random `r`, so every output element
/// reaches the gradient with a distinct weight.
fn project(out: &Tensor) -> Result<Tensor> {
    let r = Tensor::new(uniform_vec(&mut stream(99, streams::GRADSUITE), out.numel(), -1.0, 1.0), out.shape())?;
    out.mul(&r)?.sum()
}

fn unary(inputs: Vec<Tensor>, f: fn(&[Tensor]) -> Result<Tensor>) -> Result<Case> {
    Ok(Case {
        inputs,
        f: Box::new(move |a| project(&f(a)?)),
    })
}

/// Checks `forward` with respect to `extra` inputs and every parameter of
/// `module`.
fn with_params<M>(
    module: M,
    extra: Vec<Tensor>,
    forward: impl Fn(&M, &[Tensor]) -> Result<Tensor> + 'static,
) -> Case
where
    M: Parameterized + Clone + 'static,
{
    let n = extra.len();
    let mut inputs = extra;
    inputs.extend(module.clone().params_mut().into_iter().map(|p| p.detach()));
    Case {
        inputs,
        f: Box::new(move |a| {
            let mut m = module.clone();
            for (p, t) in m.params_mut().into_iter().zip(&a[n..]) {
                *p = t.clone();
            }
            project(&forward(&m, &a[..n])?)
        }),
    }
}

fn conv_case(rng: &mut Prng, cin: usize, cout: usize, k: usize, groups: usize, pad: usize, stride: usize) -> Result<Case> {
    let conv = Conv2dParams::init(rng, cin, cout, k, groups, pad, stride, true)?;
    let x = uniform(rng, &[cin, 5, 7], -1.0, 1.0)?;
    Ok(with_params(conv, vec![x], |c, a| conv2d(&a[0], c)))
}

fn attn_cfg(kind: AttentionKind, layer_norm: bool) -> AttentionConfig {
    let mut cfg = AttentionConfig::new(8, 2, kind);
    cfg.ffn_dim = 12;
    cfg.layer_norm = layer_norm;
    cfg
}

fn encoder_case(rng: &mut Prng, kind: AttentionKind, layer_norm: bool) -> Result<Case> {
    let layer = EncoderLayer::init(rng, &attn_cfg(kind, layer_norm)).map_err(err)?;
    let x = uniform(rng, &[6, 8], -1.0, 1.0)?;
    Ok(with_params(layer, vec![x], |l, a| l.forward(&a[0]).map_err(err)))
}

fn decoder_case(rng: &mut Prng, kind: AttentionKind, layer_norm: bool) -> Result<Case> {
    let layer = DecoderLayer::init(rng, &attn_cfg(kind, layer_norm)).map_err(err)?;
    let q = uniform(rng, &[6, 8], -1.0, 1.0)?;
    let mem = uniform(rng, &[6, 8], -1.0, 1.0)?;
    Ok(with_params(layer, vec![q, mem], |l, a| l.forward(&a[0], &a[1]).map_err(err)))
}

fn mha_case(rng: &mut Prng, kind: AttentionKind) -> Result<Case> {
    let mha = MultiHeadAttention::init(rng, 8, 2, kind).map_err(err)?;
    let q = uniform(rng, &[5, 8], -1.0, 1.0)?;
    let ctx = uniform(rng, &[7, 8], -1.0, 1.0)?;
    Ok(with_params(mha, vec![q, ctx], |m, a| m.forward(&a[0], &a[1]).map_err(err)))
}

fn dtr_case(rng: &mut Prng, kind: AttentionKind) -> Result<Case> {
    let dtr = DepthAwareTransformer::init(rng, &attn_cfg(kind, false)).map_err(err)?;
    let ctx = uniform(rng, &[8, 3, 3], -1.0, 1.0)?;
    let depth = uniform(rng, &[8, 3, 3], -1.0, 1.0)?;
    let pe = uniform(rng, &[8, 3, 3], -0.5, 0.5)?;
    Ok(with_params(dtr, vec![ctx, depth, pe], |d, a| {
        d.forward(&a[0], &a[1], Some(&a[2])).map_err(err)
    }))
}

fn qkv(rng: &mut Prng) -> Result<Vec<Tensor>> {
    Ok(vec![
        uniform(rng, &[6, 4], -1.0, 1.0)?,
        uniform(rng, &[7, 4], -1.0, 1.0)?,
        uniform(rng, &[7, 3], -1.0, 1.0)?,
    ])
}

fn random_targets(rng: &mut Prng, anchors: usize, classes: usize) -> Vec<Option<AnchorTarget>> {
    (0..anchors)
        .map(|_| {
            rng.gen_bool(0.4).then(|| {
                let mut residuals = [0.0; RESIDUALS];
                for r in &mut residuals {
                    *r = rng.gen_range(-2.0..2.0);
                }
                AnchorTarget {
                    class: rng.gen_range(0..classes),
                    gt: 0,
                    residuals,
                }
            })
        })
        .collect()
}

/// Every check in the suite, elementwise ops first.
pub fn checks() -> Vec<Check> {
    macro_rules! check {
        ($name:expr, $build:expr) => {
            Check {
                name: $name,
                build: $build,
            }
        };
    }
    vec![
        check!("add", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?, uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].add(&a[1]))),
        check!("sub", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?, uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].sub(&a[1]))),
        check!("mul", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?, uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].mul(&a[1]))),
        check!("div", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?, uniform(r, &[3, 4], 0.5, 2.0)?], |a| a[0].div(&a[1]))),
        check!("scale", |r| unary(vec![uniform(r, &[5], -1.0, 1.0)?], |a| a[0].scale(-1.7))),
        check!("add_scalar", |r| unary(vec![uniform(r, &[5], -1.0, 1.0)?], |a| a[0].add_scalar(0.3))),
        check!("neg", |r| unary(vec![uniform(r, &[5], -1.0, 1.0)?], |a| a[0].neg())),
        check!("elu", |r| unary(vec![signed(r, &[3, 4])?], |a| a[0].elu())),
        check!("relu", |r| unary(vec![signed(r, &[3, 4])?], |a| a[0].relu())),
        check!("exp", |r| unary(vec![uniform(r, &[3, 4], -2.0, 2.0)?], |a| a[0].exp())),
        check!("log", |r| unary(vec![uniform(r, &[3, 4], 0.2, 3.0)?], |a| a[0].log())),
        check!("sigmoid", |r| unary(vec![uniform(r, &[3, 4], -4.0, 4.0)?], |a| a[0].sigmoid())),
        check!("smooth_l1", |r| unary(vec![uniform(r, &[4, 5], -3.0, 3.0)?], |a| a[0].smooth_l1())),
        check!("sum", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].sum())),
        check!("mean", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].mean())),
        check!("sum_axis", |r| unary(vec![uniform(r, &[2, 3, 4], -1.0, 1.0)?], |a| a[0].sum_axis(1))),
        check!("softmax", |r| unary(vec![uniform(r, &[3, 4, 2], -2.0, 2.0)?], |a| a[0].softmax(1))),
        check!("normalize_sum", |r| unary(vec![uniform(r, &[3, 4], 0.2, 1.0)?], |a| a[0].normalize_sum(0))),
        check!("layer_norm", |r| unary(vec![uniform(r, &[3, 5], -1.0, 1.0)?], |a| a[0].layer_norm(1e-5))),
        check!("matmul", |r| unary(vec![uniform(r, &[5, 7], -1.0, 1.0)?, uniform(r, &[7, 3], -1.0, 1.0)?], |a| a[0].matmul(&a[1]))),
        check!("add_row_bias", |r| unary(vec![uniform(r, &[4, 3], -1.0, 1.0)?, uniform(r, &[3], -1.0, 1.0)?], |a| a[0].add_row_bias(&a[1]))),
        check!("reshape", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].reshape(&[2, 6]))),
        check!("transpose", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].transpose())),
        check!("permute", |r| unary(vec![uniform(r, &[2, 3, 4], -1.0, 1.0)?], |a| a[0].permute(&[2, 0, 1]))),
        check!("concat", |r| unary(vec![uniform(r, &[2, 3], -1.0, 1.0)?, uniform(r, &[2, 4], -1.0, 1.0)?], |a| Tensor::concat(a, 1))),
        check!("narrow", |r| unary(vec![uniform(r, &[3, 5], -1.0, 1.0)?], |a| a[0].narrow(1, 1, 3))),
        check!("gather", |r| unary(vec![uniform(r, &[3, 4], -1.0, 1.0)?], |a| a[0].gather(&[0, 5, 5, 11, 2]))),
        check!("index_rows", |r| unary(vec![uniform(r, &[4, 3], -1.0, 1.0)?], |a| a[0].index_rows(&[3, 0, 3, 1]))),
        check!("conv2d", |r| conv_case(r, 3, 4, 3, 1, 1, 1)),
        check!("conv2d_strided", |r| conv_case(r, 2, 3, 3, 1, 1, 2)),
        check!("conv2d_grouped", |r| conv_case(r, 4, 6, 3, 2, 1, 1)),
        check!("conv2d_1x1", |r| conv_case(r, 3, 2, 1, 1, 0, 1)),
        check!("linear", |r| {
            let l = Linear::init(r, 4, 3);
            Ok(with_params(l, vec![uniform(r, &[5, 4], -1.0, 1.0)?], |l, a| l.forward(&a[0])))
        }),
        check!("focal_on_probs", |r| unary(vec![uniform(r, &[7], 0.05, 0.95)?], |a| {
            focal_on_probs(&a[0], FocalParams::default())
        })),
        check!("sigmoid_focal", |r| {
            let targets: Vec<bool> = (0..8).map(|_| r.gen_bool(0.3)).collect();
            Ok(Case {
                inputs: vec![uniform(r, &[2, 4], -4.0, 4.0)?],
                f: Box::new(move |a| sigmoid_focal(&a[0], &targets, FocalParams::default())?.sum()),
            })
        }),
        check!("feature_map", |r| unary(vec![signed(r, &[3, 4])?], |a| feature_map(&a[0]).map_err(err))),
        check!("attention_vanilla", |r| unary(qkv(r)?, |a| attention_vanilla(&a[0], &a[1], &a[2]).map_err(err))),
        check!("attention_linear", |r| unary(qkv(r)?, |a| attention_linear(&a[0], &a[1], &a[2]).map_err(err))),
        check!("attention_linear_explicit", |r| unary(qkv(r)?, |a| {
            attention_linear_explicit(&a[0], &a[1], &a[2]).map_err(err)
        })),
        check!("mha_vanilla", |r| mha_case(r, AttentionKind::Vanilla)),
        check!("mha_linear", |r| mha_case(r, AttentionKind::Linear)),
        check!("encoder_vanilla", |r| encoder_case(r, AttentionKind::Vanilla, false)),
        check!("encoder_linear", |r| encoder_case(r, AttentionKind::Linear, false)),
        check!("encoder_linear_ln", |r| encoder_case(r, AttentionKind::Linear, true)),
        check!("decoder_vanilla", |r| decoder_case(r, AttentionKind::Vanilla, false)),
        check!("decoder_linear", |r| decoder_case(r, AttentionKind::Linear, false)),
        check!("decoder_linear_ln", |r| decoder_case(r, AttentionKind::Linear, true)),
        check!("dtr_vanilla", |r| dtr_case(r, AttentionKind::Vanilla)),
        check!("dtr_linear", |r| dtr_case(r, AttentionKind::Linear)),
        check!("dfe", |r| {
            let dfe = DfeState::init(r, 4, 8, 2).map_err(err)?;
            let x = uniform(r, &[4, 3, 4], -1.0, 1.0)?;
            Ok(with_params(dfe, vec![x], |d, a| {
                let out = d.forward(&a[0]).map_err(err)?;
                Tensor::concat(&[out.features, out.dist.probs], 0)
            }))
        }),
        check!("dpe", |r| {
            let dpe = DpeState::init(r, 6, 4).map_err(err)?;
            let probs = uniform(r, &[6, 3, 4], -2.0, 2.0)?.softmax(0)?;
            let dist = DepthDistribution::new(probs).map_err(err)?;
            Ok(with_params(dpe, vec![], move |d, _| build_dpe(&dist, d).map_err(err)))
        }),
        check!("detection_head", |r| {
            let head = DetectionHead::init(r, 4, 2, 2).map_err(err)?;
            let x = uniform(r, &[4, 3, 3], -1.0, 1.0)?;
            Ok(with_params(head, vec![x], |h, a| {
                let out = h.forward(&a[0]).map_err(err)?;
                Tensor::concat(&[out.cls.reshape(&[out.cls.numel()])?, out.reg.reshape(&[out.reg.numel()])?], 0)
            }))
        }),
        check!("detection_loss", |r| {
            let anchors = 6;
            let mut targets = random_targets(r, anchors, 2);
            if targets.iter().all(Option::is_none) {
                targets[0] = Some(AnchorTarget {
                    class: 0,
                    gt: 0,
                    residuals: [0.5; RESIDUALS],
                });
            }
            let weights = LossWeights {
                cls: 1.3,
                reg: 0.7,
                dep: 1.0,
            };
            Ok(Case {
                inputs: vec![uniform(r, &[anchors, 2], -3.0, 3.0)?, uniform(r, &[anchors, RESIDUALS], -2.0, 2.0)?],
                f: Box::new(move |a| {
                    Ok(detection_loss(&a[0], &a[1], &targets, weights, FocalParams::default())
                        .map_err(err)?
                        .total)
                }),
            })
        }),
        check!("depth_loss", |r| {
            let (bins, h, w) = (6, 3, 4);
            let mut target = DepthTargetMap::empty(h, w, bins);
            for l in &mut target.labels {
                *l = if r.gen_bool(0.3) { INVALID_BIN } else { r.gen_range(0..bins as i32) };
            }
            target.labels[0] = 1;
            Ok(Case {
                inputs: vec![uniform(r, &[bins, h, w], -2.0, 2.0)?],
                f: Box::new(move |a| {
                    let dist = DepthDistribution::new(a[0].softmax(0)?).map_err(err)?;
                    Ok(depth_focal_loss(&dist, &target, FocalParams::default()).map_err(err)?.loss)
                }),
            })
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        let opts = SuiteOptions {
            seeds: 2,
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.entries.len() > 40);
    }

    #[test]
    fn corrupt_hook_names_the_check() {
        let opts = SuiteOptions {
            seeds: 1,
            corrupt: Some("matmul".into()),
            only: Some("mat".into()),
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts).unwrap();
        assert_eq!(r.failed(), vec!["matmul"]);
        assert!(r.to_string().contains("FAIL"));
    }

    #[test]
    fn unknown_corrupt_name_is_an_error() {
        let opts = SuiteOptions {
            seeds: 1,
            corrupt: Some("nope".into()),
            only: Some("add".into()),
            ..SuiteOptions::default()
        };
        assert!(run_suite(&opts).is_err());
    }
}
