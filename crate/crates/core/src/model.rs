//! The complete detector: backbone, candidate sampling, decoder and heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PointFeatures};
use crate::candidates::{
    assign_kps_labels, sample_fps, sample_kps, sample_kps_nms, CandidateSet, SamplerHead, SamplerOutput,
    SamplingMethod, DEFAULT_KPS_K, DEFAULT_NMS_RADIUS,
};
use crate::decoder::{Decoder, DecoderConfig, StagePrediction};
use crate::diffcore::{rng_from_seed, Graph, ParamStore, Tensor, Var};
use crate::error::{bail, Result};
use crate::geometry::{Box3D, Point3};
use crate::heads_losses::{
    assign_decoder_targets, sampler_loss, stage_loss, total_loss, HeadConfig, LossWeights, StageTerms, AssignRule,
};
use crate::scenegen::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub sampling: SamplingMethod,
    /// Number of object candidates K.
    pub candidates: usize,
    /// Positives per box for the sampling head.
    pub kps_k: usize,
    pub kps_nms_radius: f64,
    pub decoder: DecoderConfig,
    pub class_aware_size: bool,
    /// Heading bins; zero for axis-aligned boxes.
    pub yaw_bins: usize,
    /// Decoder positive rule.
    pub assignment: AssignRule,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            sampling: SamplingMethod::Kps,
            candidates: 16,
            kps_k: DEFAULT_KPS_K,
            kps_nms_radius: DEFAULT_NMS_RADIUS,
            decoder: DecoderConfig::default(),
            class_aware_size: true,
            yaw_bins: 0,
            assignment: AssignRule::InsideBox,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate(self.backbone.feature_width)?;
        self.loss_weights.validate()?;
        if self.candidates == 0 || self.candidates > self.backbone.output_points() {
            bail!(
                Config,
                "candidates must be in 1..={} (backbone output points), got {}",
                self.backbone.output_points(),
                self.candidates
            );
        }
        if self.kps_k == 0 {
            bail!(Config, "kps_k must be at least 1");
        }
        if matches!(self.assignment, AssignRule::Radius(r) if !(r > 0.0)) || !(self.kps_nms_radius >= 0.0) {
            bail!(Config, "assignment radius must be positive and kps_nms_radius non-negative");
        }
        Ok(())
    }

    /// Head layout for the categories of a generator.
    pub fn head_config(&self, gen: &GeneratorConfig) -> HeadConfig {
        let templates = gen.size_templates();
        HeadConfig {
            num_classes: gen.num_classes(),
            size_templates: if self.class_aware_size {
                templates
            } else {
                let n = templates.len() as f64;
                let mean = [0, 1, 2].map(|k| templates.iter().map(|t| t[k]).sum::<f64>() / n);
                vec![mean]
            },
            class_aware_size: self.class_aware_size,
            yaw_bins: self.yaw_bins,
        }
    }
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub points: PointFeatures,
    pub sampler: SamplerOutput,
    pub candidates: CandidateSet,
    pub stages: Vec<StagePrediction>,
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sampler objectness and center terms.
    pub sampler: [f64; 2],
    pub stages: Vec<StageTerms<f64>>,
}

impl LossBreakdown {
    /// `(name, value)` pairs: the total, sampler terms and stage means.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("total".to_string(), self.total),
            ("sampler_objectness".to_string(), self.sampler[0]),
            ("sampler_center".to_string(), self.sampler[1]),
        ];
        let n = self.stages.len().max(1) as f64;
        if let Some(first) = self.stages.first() {
            for (i, (name, _)) in first.named().into_iter().enumerate() {
                let mean = self.stages.iter().map(|s| s.named()[i].1).sum::<f64>() / n;
                v.push((name.to_string(), mean));
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub head_cfg: HeadConfig,
    backbone: Backbone,
    sampler: SamplerHead,
    decoder: Decoder,
}

impl Detector {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, head_cfg: &HeadConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        head_cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let width = cfg.backbone.feature_width;
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng)?;
        let sampler = SamplerHead::new(&mut store, width, &mut rng);
        let decoder = Decoder::new(&mut store, width, &cfg.decoder, head_cfg, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                head_cfg: head_cfg.clone(),
                backbone,
                sampler,
                decoder,
            },
            store,
        ))
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: &[Point3],
        features: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        let pf = self.backbone.forward(g, store, points, features)?;
        let sampler = self.sampler.forward(g, store, &pf)?;
        let k = self.cfg.candidates;
        let candidates = match self.cfg.sampling {
            SamplingMethod::Fps => sample_fps(g, &pf, k, 0)?,
            SamplingMethod::Kps => sample_kps(g, &pf, &sampler.scores, k)?,
            SamplingMethod::KpsNms => sample_kps_nms(g, &pf, &sampler.scores, &sampler.centers, k, self.cfg.kps_nms_radius)?,
        };
        let stages = self.decoder.run(g, store, &candidates, &pf, Some(&sampler.centers))?;
        Ok(ForwardOutput {
            points: pf,
            sampler,
            candidates,
            stages,
        })
    }

    /// Total training loss: mean stage loss plus the sampler loss.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutput, gt: &[Box3D]) -> Result<(Var, LossBreakdown)> {
        let w = &self.cfg.loss_weights;
        let labels = assign_kps_labels(&out.points.positions, gt, self.cfg.kps_k)?;
        let (sampler, sampler_terms) = sampler_loss(g, &out.sampler, &labels, w)?;
        let mut stage_vars = Vec::with_capacity(out.stages.len());
        let mut stage_terms = Vec::with_capacity(out.stages.len());
        for s in &out.stages {
            let t = assign_decoder_targets(&out.candidates.positions, &s.reference, gt, &self.head_cfg, self.cfg.assignment)?;
            let (v, terms) = stage_loss(g, &s.head, &t, &self.head_cfg, w)?;
            stage_vars.push(v);
            stage_terms.push(terms);
        }
        let total = total_loss(g, &stage_vars, sampler)?;
        Ok((
            total,
            LossBreakdown {
                total: g.value(total).item(),
                sampler: sampler_terms,
                stages: stage_terms,
            },
        ))
    }

    /// Decoded boxes of every stage, before any suppression.
    pub fn detect(&self, store: &ParamStore, points: &[Point3], features: Option<&Tensor>) -> Result<Vec<Vec<Box3D>>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, points, features)?;
        Ok(out.stages.into_iter().map(|s| s.boxes).collect())
    }
}
