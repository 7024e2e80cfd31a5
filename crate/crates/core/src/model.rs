//! The full detector: stub backbone, context branch, depth-aware feature
//! enhancement, depth positional encoding, depth-aware transformer and the
//! anchor head.

use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::depthbin::{depth_focal_loss, DepthBinError, DepthTargetMap};
use crate::detect::{
    anchor_scales, anchor_templates, build_targets, compute_anchor_priors, decode_detections, detection_loss,
    generate_anchors, ground_truth_from_label, to_kitti_label, AnchorGrid, DetectError, DetectionHead,
    GroundTruth, HeadOutput, TemplatePrior,
};
use crate::dfe::{DepthDistribution, DfeError, DfeState};
use crate::dtr::{build_dpe, AttentionConfig, DepthAwareTransformer, DpeState, DtrError};
use crate::eval::Frame;
use crate::kittiio::KittiError;
use crate::rng::{stream, streams};
use crate::synthetic::{SceneError, SyntheticScene};
use crate::tensor::{read_tensor_file, write_tensor_file, Conv2dParams, Parameterized, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dfe(#[from] DfeError),
    #[error(transparent)]
    Dtr(#[from] DtrError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    DepthBin(#[from] DepthBinError),
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug)]
pub struct MonoDtr {
    /// Stub backbone: input field to `C` channels, 3x3 + ReLU.
    pub backbone: Conv2dParams,
    /// Context branch feeding the encoder, 3x3 + ReLU.
    pub context: Conv2dParams,
    pub dfe: Option<DfeState>,
    pub dpe: Option<DpeState>,
    pub dtr: DepthAwareTransformer,
    pub head: DetectionHead,
    pub anchors: AnchorGrid,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub head: HeadOutput,
    pub dist: Option<DepthDistribution>,
}

#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Tensor,
    pub cls: f64,
    pub reg: f64,
    pub dep: f64,
    pub positives: usize,
}

pub fn attention_config(cfg: &RunConfig) -> AttentionConfig {
    let mut a = AttentionConfig::new(cfg.channels, cfg.heads, cfg.attention);
    a.enc_layers = cfg.enc_layers;
    a.dec_layers = cfg.dec_layers;
    a.layer_norm = cfg.layer_norm;
    a
}

/// Anchor-form ground truth of a scene; unknown classes and DontCare rows
/// are skipped.
pub fn scene_ground_truth(scene: &SyntheticScene, classes: &[String]) -> Result<Vec<GroundTruth>> {
    scene
        .labels
        .iter()
        .filter(|l| !l.is_dont_care())
        .filter_map(|l| classes.iter().position(|c| *c == l.kind).map(|k| (l, k)))
        .map(|(l, k)| Ok(ground_truth_from_label(l, &scene.calib, k)?))
        .collect()
}

/// Per-template statistics of the scenes' ground truth.
pub fn anchor_priors(cfg: &RunConfig, scenes: &[SyntheticScene]) -> Result<Vec<TemplatePrior>> {
    let templates = anchor_templates(&cfg.anchor_ratios, &anchor_scales(cfg.anchor_base, cfg.anchor_scales))?;
    let mut gts = Vec::new();
    for s in scenes {
        gts.extend(scene_ground_truth(s, &cfg.classes)?.into_iter().map(|g| g.params));
    }
    Ok(compute_anchor_priors(&gts, &templates)?)
}

impl MonoDtr {
    /// Weights come from the config seed; `priors` fill the anchors' 3D
    /// fields.
    pub fn init(cfg: &RunConfig, priors: Option<&[TemplatePrior]>) -> Result<Self> {
        cfg.validate()?;
        if cfg.use_dpe && !cfg.use_dfe {
            return Err(ConfigError::Invalid("use_dpe needs the depth distribution from use_dfe".into()).into());
        }
        let mut rng = stream(cfg.seed, streams::INIT);
        let c = cfg.channels;
        let anchors = generate_anchors(
            cfg.height,
            cfg.width,
            cfg.stride as f64,
            &cfg.anchor_ratios,
            &anchor_scales(cfg.anchor_base, cfg.anchor_scales),
            priors,
        )?;
        let backbone = Conv2dParams::init(&mut rng, cfg.input_channels, c, 3, 1, 1, 1, true)?;
        let context = Conv2dParams::init(&mut rng, c, c, 3, 1, 1, 1, true)?;
        let dfe = if cfg.use_dfe {
            Some(DfeState::init(&mut rng, c, cfg.bins, cfg.merge_scale)?)
        } else {
            None
        };
        let dpe = if cfg.use_dpe {
            Some(DpeState::init(&mut rng, cfg.bins, c)?)
        } else {
            None
        };
        let dtr = DepthAwareTransformer::init(&mut rng, &attention_config(cfg))?;
        let head = DetectionHead::init(&mut rng, c, anchors.per_pixel(), cfg.classes.len())?;
        Ok(Self {
            backbone,
            context,
            dfe,
            dpe,
            dtr,
            head,
            anchors,
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<ModelOutput> {
        let f = self.backbone.forward(input)?.relu()?;
        let ctx = self.context.forward(&f)?.relu()?;
        let (depth_feat, dist) = match &self.dfe {
            Some(dfe) => {
                let out = dfe.forward(&f)?;
                (out.features, Some(out.dist))
            }
            None => (f, None),
        };
        let pe = match (&self.dpe, &dist) {
            (Some(dpe), Some(d)) => Some(build_dpe(d, dpe)?),
            _ => None,
        };
        let fused = self.dtr.forward(&ctx, &depth_feat, pe.as_ref())?;
        Ok(ModelOutput {
            head: self.head.forward(&fused)?,
            dist,
        })
    }

    /// Weighted detection loss plus the depth loss when the depth branch is
    /// present.
    pub fn scene_loss(&self, cfg: &RunConfig, input: &Tensor, gts: &[GroundTruth], depth: &DepthTargetMap) -> Result<SceneLoss> {
        let out = self.forward(input)?;
        let targets = build_targets(&self.anchors.anchors, gts)?;
        let det = detection_loss(&out.head.cls, &out.head.reg, &targets, cfg.loss_weights(), cfg.focal())?;
        let (total, dep) = match &out.dist {
            Some(dist) => {
                let d = depth_focal_loss(dist, depth, cfg.focal())?;
                let v = d.loss.item();
                (det.total.add(&d.loss.scale(cfg.w_dep)?)?, v)
            }
            None => (det.total.clone(), 0.0),
        };
        Ok(SceneLoss {
            total,
            cls: det.cls.item(),
            reg: det.reg.item(),
            dep,
            positives: det.positives,
        })
    }

    /// Detections of one scene as scored KITTI rows.
    pub fn detect(&self, cfg: &RunConfig, scene: &SyntheticScene) -> Result<Frame> {
        let out = self.forward(&scene.input)?;
        let decoded = decode_detections(
            &out.head.cls,
            &out.head.reg,
            &self.anchors.anchors,
            &scene.calib,
            cfg.score_thresh,
            cfg.nms_iou,
        )?;
        let detections = decoded
            .detections
            .iter()
            .map(|d| Ok(to_kitti_label(d, &cfg.classes)?))
            .collect::<Result<_>>()?;
        Ok(Frame {
            name: String::new(),
            detections,
            ground_truth: scene.labels.clone(),
        })
    }

    /// Writes every parameter as `pNNNN.tnsr` plus the anchor priors.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, p) in self.params_mut().into_iter().enumerate() {
            write_tensor_file(&dir.join(format!("p{i:04}.tnsr")), p)?;
        }
        let priors: Vec<f64> = self
            .anchors
            .templates
            .iter()
            .flat_map(|t| {
                let p = t.prior;
                p.mean.into_iter().chain(p.var).chain([p.count as f64])
            })
            .collect();
        write_tensor_file(
            &dir.join("anchor_priors.tnsr"),
            &Tensor::new(priors, &[self.anchors.per_pixel(), 11])?,
        )?;
        Ok(())
    }

    /// Rebuilds the model for `cfg` and loads weights written by [`save`].
    ///
    /// [`save`]: MonoDtr::save
    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let pri = read_tensor_file(&dir.join("anchor_priors.tnsr"))?;
        let rows: Vec<TemplatePrior> = pri
            .data()
            .chunks(11)
            .map(|c| TemplatePrior {
                mean: [c[0], c[1], c[2], c[3], c[4]],
                var: [c[5], c[6], c[7], c[8], c[9]],
                count: c[10] as usize,
            })
            .collect();
        let mut model = Self::init(cfg, Some(&rows))?;
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let t = read_tensor_file(&dir.join(format!("p{i:04}.tnsr")))?;
            if t.shape() != p.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {i} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.to_param();
        }
        Ok(model)
    }
}

impl Parameterized for MonoDtr {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.extend(self.context.params_mut());
        if let Some(d) = self.dfe.as_mut() {
            out.extend(d.params_mut());
        }
        if let Some(d) = self.dpe.as_mut() {
            out.extend(d.params_mut());
        }
        out.extend(self.dtr.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate_scene;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.channels = 8;
        c.heads = 2;
        c.bins = 8;
        c.merge_scale = 2;
        c
    }

    #[test]
    fn forward_shapes() {
        let cfg = small();
        let m = MonoDtr::init(&cfg, None).unwrap();
        let s = generate_scene(&cfg, 0).unwrap();
        let out = m.forward(&s.input).unwrap();
        let a = cfg.height * cfg.width * 48;
        assert_eq!(out.head.cls.shape(), &[a, 1]);
        assert_eq!(out.head.reg.shape(), &[a, 11]);
        assert_eq!(out.dist.unwrap().dims(), (8, cfg.height, cfg.width));
    }

    #[test]
    fn baseline_has_no_depth_branch() {
        let mut cfg = small();
        cfg.use_dfe = false;
        assert!(MonoDtr::init(&cfg, None).is_err());
        cfg.use_dpe = false;
        let m = MonoDtr::init(&cfg, None).unwrap();
        let s = generate_scene(&cfg, 0).unwrap();
        let gts = scene_ground_truth(&s, &cfg.classes).unwrap();
        let l = m.scene_loss(&cfg, &s.input, &gts, &s.depth_target).unwrap();
        assert_eq!(l.dep, 0.0);
        assert!(l.positives > 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small();
        let s = generate_scene(&cfg, 0).unwrap();
        let priors = anchor_priors(&cfg, std::slice::from_ref(&s)).unwrap();
        let mut m = MonoDtr::init(&cfg, Some(&priors)).unwrap();
        let dir = std::env::temp_dir().join(format!("monodtr-ckpt-{}", std::process::id()));
        m.save(&dir).unwrap();
        let back = MonoDtr::load(&cfg, &dir).unwrap();
        let _ = std::fs::remove_dir_all(&dir);
        assert_eq!(back.anchors, m.anchors);
        let (a, b) = (m.forward(&s.input).unwrap(), back.forward(&s.input).unwrap());
        assert_eq!(a.head.reg.data(), b.head.reg.data());
    }
}
