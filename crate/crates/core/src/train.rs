//! Adam with cosine annealing over a fixed set of synthetic scenes.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use crate::config::RunConfig;
use crate::detect::GroundTruth;
use crate::eval::{evaluate, EvalReport, Frame, Metric};
use crate::model::{anchor_priors, scene_ground_truth, ModelError, MonoDtr, Result};
use crate::synthetic::SyntheticScene;
use crate::tensor::{Parameterized, Tensor};

/// `lr0 * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    /// Updates every parameter from its accumulated gradient and replaces
    /// it with a fresh leaf. Parameters without a gradient are left as is.
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(ModelError::Checkpoint("parameter count changed between steps".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = p.grad() else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data().to_vec();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            *p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub dep: f64,
}

/// `step,lr,total,cls,reg,dep` with round-trip precision.
pub fn write_loss_csv<W: Write>(out: &mut W, curve: &[StepLog]) -> std::io::Result<()> {
    writeln!(out, "step,lr,total,cls,reg,dep")?;
    for s in curve {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", s.step, s.lr, s.total, s.cls, s.reg, s.dep)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: MonoDtr,
    pub curve: Vec<StepLog>,
}

struct Prepared<'a> {
    scene: &'a SyntheticScene,
    gts: Vec<GroundTruth>,
}

fn dump(model: &mut MonoDtr, curve: &[StepLog]) -> String {
    let mut s = String::new();
    for l in curve.iter().rev().take(5).rev() {
        let _ = write!(s, "\n  step {} total {} cls {} reg {} dep {}", l.step, l.total, l.cls, l.reg, l.dep);
    }
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let bad = p.data().iter().filter(|v| !v.is_finite()).count();
        let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = write!(s, "\n  param {i} {:?} norm {norm:e} non-finite {bad}", p.shape());
    }
    s
}

/// Full-batch training: every step sums the scene losses, averages them,
/// and takes one Adam step at the annealed rate.
pub fn train(cfg: &RunConfig, scenes: &[SyntheticScene]) -> Result<TrainOutcome> {
    let priors = anchor_priors(cfg, scenes)?;
    let mut model = MonoDtr::init(cfg, Some(&priors))?;
    let prepared: Vec<Prepared> = scenes
        .iter()
        .map(|s| {
            Ok(Prepared {
                scene: s,
                gts: scene_ground_truth(s, &cfg.classes)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut adam = Adam::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    let norm = 1.0 / scenes.len().max(1) as f64;
    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut total: Option<Tensor> = None;
        let mut log = StepLog {
            step,
            lr,
            total: 0.0,
            cls: 0.0,
            reg: 0.0,
            dep: 0.0,
        };
        for p in &prepared {
            let l = match model.scene_loss(cfg, &p.scene.input, &p.gts, &p.scene.depth_target) {
                Ok(l) => l,
                Err(e) => {
                    return Err(ModelError::NonFinite {
                        step,
                        detail: format!("{e}{}", dump(&mut model, &curve)),
                    })
                }
            };
            log.cls += l.cls * norm;
            log.reg += l.reg * norm;
            log.dep += l.dep * norm;
            total = Some(match total {
                Some(t) => t.add(&l.total)?,
                None => l.total,
            });
        }
        let Some(total) = total else {
            break;
        };
        let total = total.scale(norm)?;
        log.total = total.item();
        if !log.total.is_finite() {
            return Err(ModelError::NonFinite {
                step,
                detail: dump(&mut model, &curve),
            });
        }
        curve.push(log);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step} lr {lr:.3e} loss {:.6} (cls {:.6} reg {:.6} dep {:.6})", log.total, log.cls, log.reg, log.dep);
        }
        total.backward()?;
        adam.step(model.params_mut(), lr)?;
    }
    Ok(TrainOutcome { model, curve })
}

/// Detections of the model on each scene, evaluated at every configured
/// threshold for every metric.
pub fn evaluate_scenes(cfg: &RunConfig, model: &MonoDtr, scenes: &[SyntheticScene]) -> Result<EvalReport> {
    let frames = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut f = model.detect(cfg, s)?;
            f.name = format!("{i:06}");
            Ok(f)
        })
        .collect::<Result<Vec<Frame>>>()?;
    let thresholds: Vec<(Metric, f64)> = cfg
        .eval_ious
        .iter()
        .flat_map(|&t| Metric::ALL.into_iter().map(move |m| (m, t)))
        .collect();
    Ok(evaluate(&frames, &cfg.classes, &thresholds, |_| true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_scenes;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        p.mul(&p).unwrap().sum().unwrap().backward().unwrap();
        let mut adam = Adam::default();
        adam.step(vec![&mut p], 0.1).unwrap();
        // first bias-corrected step is lr * sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-9);
        assert!((p.data()[1] + 1.9).abs() < 1e-9);
    }

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.channels = 8;
        c.heads = 2;
        c.bins = 8;
        c.merge_scale = 2;
        c.steps = 4;
        c.lr = 1e-3;
        c.log_every = 0;
        c
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let scenes = generate_scenes(&cfg).unwrap();
        let a = train(&cfg, &scenes).unwrap();
        let b = train(&cfg, &scenes).unwrap();
        assert_eq!(a.curve.len(), 4);
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &a.curve).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("step,lr,total,cls,reg,dep\n0,"));
    }
}
