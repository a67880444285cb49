//! Stacked attention decoder over object candidates.
//!
//! Each stage runs self-attention among candidates, aggregation over the
//! backbone points (cross-attention, or one of the grouped baselines), a
//! feed-forward block and a detection head. Box predictions of one stage
//! feed the spatial encodings and reference centers of the next.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PointFeatures;
use crate::candidates::CandidateSet;
use crate::diffcore::nn::{LayerNorm, Linear, Mlp};
use crate::diffcore::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::geometry::{dist2, point_in_box, Box3D, Point3};
use crate::heads_losses::{decode_boxes, DetectionHead, HeadConfig, HeadOutput};

pub const DEFAULT_VOTE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    #[default]
    IterativeCenterSize,
    IterativeCenter,
    Fixed,
    None,
}

impl EncodingMode {
    pub fn is_iterative(self) -> bool {
        matches!(self, Self::IterativeCenterSize | Self::IterativeCenter)
    }
}

impl std::str::FromStr for EncodingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "iterative_center_size" => Self::IterativeCenterSize,
            "iterative_center" => Self::IterativeCenter,
            "fixed" => Self::Fixed,
            "none" => Self::None,
            _ => bail!(Argument, "unknown encoding mode {s:?}"),
        })
    }
}

/// How object features gather information from the points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Attention,
    RoiMax,
    RoiAverage,
    Vote,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => Self::Attention,
            "roi_max" => Self::RoiMax,
            "roi_average" => Self::RoiAverage,
            "vote" => Self::Vote,
            _ => bail!(Argument, "unknown aggregation {s:?}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub mode: EncodingMode,
    pub aggregation: Aggregation,
    pub vote_threshold: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            mode: EncodingMode::IterativeCenterSize,
            aggregation: Aggregation::Attention,
            vote_threshold: DEFAULT_VOTE_THRESHOLD,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || width % self.heads != 0 {
            bail!(Config, "feature width {width} is not divisible by {} heads", self.heads);
        }
        if !(self.vote_threshold > 0.0) {
            bail!(Config, "vote_threshold must be positive");
        }
        Ok(())
    }
}

/// Multi-head attention with bias-free projections.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            bail!(Dimension, "width {width} is not divisible by {heads} heads");
        }
        let grp = ParamGroup::Decoder;
        let mut lin = |p: &str| Linear::new(store, &format!("{name}.{p}"), width, width, false, grp, rng);
        Ok(Self {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            output: lin("output"),
            heads,
            width,
        })
    }

    /// Attention of `queries` over elements with separate key and value
    /// inputs. Returns the output and the head-averaged weights `[Kq × Ke]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<(Var, Tensor)> {
        for (v, what) in [(queries, "queries"), (keys, "keys"), (values, "values")] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != self.width {
                bail!(Dimension, "attention {what} have shape {s:?}, expected width {}", self.width);
            }
        }
        if g.shape(keys)[0] != g.shape(values)[0] {
            bail!(Dimension, "attention keys and values differ in row count");
        }
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys)?;
        let v = self.value.forward(g, store, values)?;
        let d = self.width / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (kq, ke) = (g.shape(queries)[0], g.shape(keys)[0]);
        let mut weights = vec![0.0; kq * ke];
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d, d)?;
            let kh = g.slice_cols(k, h * d, d)?;
            let vh = g.slice_cols(v, h * d, d)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax(logits)?;
            for (w, x) in weights.iter_mut().zip(g.value(a).data()) {
                *w += x / self.heads as f64;
            }
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let out = self.output.forward(g, store, cat)?;
        Ok((out, Tensor::new([kq, ke], weights)?))
    }
}

/// Plain attention where keys and values are the same elements.
pub fn attention(g: &mut Graph, store: &ParamStore, p: &AttentionParams, queries: Var, elements: Var) -> Result<Var> {
    Ok(p.forward(g, store, queries, elements, elements)?.0)
}

/// Multiply-add count of one decoder stage.
pub fn flops_per_stage(m: u64, k: u64, c: u64, h: u64) -> Result<u64> {
    if m == 0 || k == 0 || c == 0 || h == 0 {
        bail!(Argument, "flops_per_stage needs positive arguments");
    }
    let self_att = 4 * k * c * c + 2 * k * k * c;
    let cross = 2 * k * c * c + 2 * m * c * c + 2 * k * m * c;
    let ffn = 8 * k * c * c;
    Ok(self_att + cross + ffn)
}

/// Stage inputs that change between stages.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub stage: usize,
    pub features: Var,
    /// `(x, y, z, l, h, w)` of the current box estimate per candidate.
    pub boxes: Vec<[f64; 6]>,
    /// Centers that this stage's offsets are relative to.
    pub reference: Vec<Point3>,
}

#[derive(Debug, Clone)]
pub struct StagePrediction {
    pub head: HeadOutput,
    pub reference: Vec<Point3>,
    pub boxes: Vec<Box3D>,
    /// Head-averaged cross-attention weights `[K × M]`.
    pub cross_weights: Option<Tensor>,
}

#[derive(Debug, Clone)]
enum Aggregator {
    Attention(AttentionParams),
    Roi { average: bool, proj: Linear },
    Vote { mlp: Mlp, threshold: f64 },
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: AttentionParams,
    norm1: LayerNorm,
    aggregator: Aggregator,
    norm2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: LayerNorm,
    box_enc: Option<Linear>,
    point_enc: Option<Linear>,
    head: DetectionHead,
}

fn box_tensor(boxes: &[[f64; 6]]) -> Result<Tensor> {
    Tensor::new([boxes.len(), 6], boxes.iter().flatten().copied().collect())
}

fn point_tensor(points: &[Point3]) -> Result<Tensor> {
    Tensor::new([points.len(), 3], points.iter().flatten().copied().collect())
}

fn box_of(p: &[f64; 6]) -> Box3D {
    Box3D {
        center: [p[0], p[1], p[2]],
        size: [p[3], p[4], p[5]],
        yaw: 0.0,
        class_id: 0,
        score: 1.0,
    }
}

impl DecoderLayer {
    fn new<R: Rng>(
        store: &mut ParamStore,
        l: usize,
        width: usize,
        cfg: &DecoderConfig,
        head_cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("decoder.{l}");
        let grp = ParamGroup::Decoder;
        let aggregator = match cfg.aggregation {
            Aggregation::Attention => {
                Aggregator::Attention(AttentionParams::new(store, &format!("{name}.cross"), width, cfg.heads, rng)?)
            }
            Aggregation::RoiMax | Aggregation::RoiAverage => Aggregator::Roi {
                average: cfg.aggregation == Aggregation::RoiAverage,
                proj: Linear::new(store, &format!("{name}.roi"), width, width, true, ParamGroup::Backbone, rng),
            },
            Aggregation::Vote => Aggregator::Vote {
                mlp: Mlp::new(store, &format!("{name}.vote"), &[width + 3, width, width], ParamGroup::Backbone, rng),
                threshold: cfg.vote_threshold,
            },
        };
        let encodes = cfg.mode != EncodingMode::None;
        Ok(Self {
            self_attn: AttentionParams::new(store, &format!("{name}.self"), width, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width, grp),
            aggregator,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width, grp),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), width, 4 * width, true, grp, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), 4 * width, width, true, grp, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), width, grp),
            box_enc: encodes.then(|| Linear::new(store, &format!("{name}.box_enc"), 6, width, true, grp, rng)),
            point_enc: (encodes && cfg.aggregation == Aggregation::Attention)
                .then(|| Linear::new(store, &format!("{name}.point_enc"), 3, width, true, grp, rng)),
            head: DetectionHead::new(store, &format!("{name}.head"), width, head_cfg, rng)?,
        })
    }

    fn with_encoding(g: &mut Graph, x: Var, enc: Option<Var>) -> Result<Var> {
        match enc {
            Some(e) => g.add(x, e),
            None => Ok(x),
        }
    }

    /// Self-attention among candidates with box encodings on queries and keys.
    pub fn self_attention_block(&self, g: &mut Graph, store: &ParamStore, o: Var, box_enc: Option<Var>) -> Result<Var> {
        let qk = Self::with_encoding(g, o, box_enc)?;
        let (a, _) = self.self_attn.forward(g, store, qk, qk, o)?;
        let r = g.add(o, a)?;
        self.norm1.forward(g, store, r)
    }

    /// Group-free aggregation over every point, or a grouped baseline.
    pub fn cross_attention_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        o: Var,
        state: &DecoderState,
        box_enc: Option<Var>,
        points: &PointFeatures,
        vote_centers: Option<&[Point3]>,
    ) -> Result<(Var, Option<Tensor>)> {
        let (agg, weights) = match &self.aggregator {
            Aggregator::Attention(p) => {
                let q = Self::with_encoding(g, o, box_enc)?;
                let k = match &self.point_enc {
                    Some(enc) => {
                        let pos = g.constant(point_tensor(&points.positions)?);
                        let pe = enc.forward(g, store, pos)?;
                        g.add(points.features, pe)?
                    }
                    None => points.features,
                };
                let (a, w) = p.forward(g, store, q, k, points.features)?;
                debug_assert!(w.data().chunks(w.cols().max(1)).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
                (a, Some(w))
            }
            Aggregator::Roi { average, proj } => {
                let pooled = roi_pool_aggregate(g, points, &state.boxes, *average)?;
                (proj.forward(g, store, pooled)?, None)
            }
            Aggregator::Vote { mlp, threshold } => {
                let votes = vote_centers.ok_or_else(|| Error::Usage("vote aggregation needs vote centers".into()))?;
                (vote_aggregate(g, store, mlp, points, votes, &state.reference, *threshold)?, None)
            }
        };
        let r = g.add(o, agg)?;
        Ok((self.norm2.forward(g, store, r)?, weights))
    }

    pub fn ffn_block(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ffn1.forward(g, store, x)?;
        let h = g.relu(h);
        let y = self.ffn2.forward(g, store, h)?;
        let r = g.add(x, y)?;
        self.norm3.forward(g, store, r)
    }

    /// One full stage: blocks, head, decoded boxes.
    pub fn decoder_stage(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &DecoderState,
        points: &PointFeatures,
        vote_centers: Option<&[Point3]>,
    ) -> Result<(Var, StagePrediction)> {
        let box_enc = match &self.box_enc {
            Some(enc) => {
                let b = g.constant(box_tensor(&state.boxes)?);
                Some(enc.forward(g, store, b)?)
            }
            None => None,
        };
        let o1 = self.self_attention_block(g, store, state.features, box_enc)?;
        let (o2, weights) = self.cross_attention_block(g, store, o1, state, box_enc, points, vote_centers)?;
        let o3 = self.ffn_block(g, store, o2)?;
        let head = self.head.forward(g, store, o3)?;
        let boxes = decode_boxes(&head.values(g), &state.reference, &self.head.cfg)?;
        Ok((
            o3,
            StagePrediction {
                head,
                reference: state.reference.clone(),
                boxes,
                cross_weights: weights,
            },
        ))
    }
}

/// Pools the features of points inside each box (max or mean). A box
/// without points takes the feature of the point nearest its center.
pub fn roi_pool_aggregate(g: &mut Graph, points: &PointFeatures, boxes: &[[f64; 6]], average: bool) -> Result<Var> {
    if points.positions.is_empty() {
        bail!(Argument, "roi pooling over an empty point set");
    }
    let segments: Vec<Vec<usize>> = boxes
        .iter()
        .map(|p| {
            let b = box_of(p);
            let inside: Vec<usize> = (0..points.positions.len())
                .filter(|&i| point_in_box(&points.positions[i], &b))
                .collect();
            if inside.is_empty() {
                vec![nearest(&points.positions, &b.center)]
            } else {
                inside
            }
        })
        .collect();
    if average {
        g.segment_mean(points.features, &segments)
    } else {
        g.segment_max(points.features, &segments)
    }
}

fn nearest(points: &[Point3], c: &Point3) -> usize {
    let mut best = 0;
    for i in 1..points.len() {
        if dist2(&points[i], c) < dist2(&points[best], c) {
            best = i;
        }
    }
    best
}

/// Groups points whose voted center lies within `threshold` of each
/// candidate center, applies the perceptron to `[feature, offset/threshold]`
/// and max-pools. An empty group uses the nearest voted point.
pub fn vote_aggregate(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    points: &PointFeatures,
    vote_centers: &[Point3],
    candidate_centers: &[Point3],
    threshold: f64,
) -> Result<Var> {
    if threshold <= 0.0 {
        bail!(Argument, "vote threshold must be positive");
    }
    if vote_centers.len() != points.positions.len() || vote_centers.is_empty() {
        bail!(Dimension, "{} vote centers for {} points", vote_centers.len(), points.positions.len());
    }
    let t2 = threshold * threshold;
    let mut flat = Vec::new();
    let mut rel = Vec::new();
    let mut segments = Vec::with_capacity(candidate_centers.len());
    for c in candidate_centers {
        let mut group: Vec<usize> = (0..vote_centers.len()).filter(|&j| dist2(&vote_centers[j], c) <= t2).collect();
        if group.is_empty() {
            group.push(nearest(vote_centers, c));
        }
        let start = flat.len();
        for j in group {
            flat.push(j);
            rel.extend((0..3).map(|k| (vote_centers[j][k] - c[k]) / threshold));
        }
        segments.push((start..flat.len()).collect::<Vec<_>>());
    }
    let feats = g.gather_rows(points.features, &flat)?;
    let rel = g.constant(Tensor::new([flat.len(), 3], rel)?);
    let x = g.concat(&[feats, rel])?;
    let h = mlp.forward(g, store, x)?;
    g.segment_max(h, &segments)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    head_cfg: HeadConfig,
    layers: Vec<DecoderLayer>,
    /// Applied directly to candidate features when there are no layers.
    proposal_head: Option<DetectionHead>,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        width: usize,
        cfg: &DecoderConfig,
        head_cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(store, l, width, cfg, head_cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let proposal_head = if cfg.layers == 0 {
            Some(DetectionHead::new(store, "decoder.proposal", width, head_cfg, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            head_cfg: head_cfg.clone(),
            layers,
            proposal_head,
        })
    }

    pub fn layer(&self, l: usize) -> &DecoderLayer {
        &self.layers[l]
    }

    /// Initial box estimates: candidate positions with the mean template size.
    pub fn initial_boxes(&self, candidates: &[Point3]) -> Vec<[f64; 6]> {
        let s = self.head_cfg.default_size();
        candidates.iter().map(|p| [p[0], p[1], p[2], s[0], s[1], s[2]]).collect()
    }

    /// Runs every stage. With zero layers the head reads the candidate
    /// features directly and a single prediction is returned.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        candidates: &CandidateSet,
        points: &PointFeatures,
        vote_centers: Option<&[Point3]>,
    ) -> Result<Vec<StagePrediction>> {
        let init = self.initial_boxes(&candidates.positions);
        self.run_from(g, store, candidates, &init, points, vote_centers)
    }

    /// [`Decoder::run`] with explicit initial box estimates.
    pub fn run_from(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        candidates: &CandidateSet,
        initial_boxes: &[[f64; 6]],
        points: &PointFeatures,
        vote_centers: Option<&[Point3]>,
    ) -> Result<Vec<StagePrediction>> {
        if initial_boxes.len() != candidates.len() {
            bail!(Dimension, "{} initial boxes for {} candidates", initial_boxes.len(), candidates.len());
        }
        if let Some(head) = &self.proposal_head {
            let out = head.forward(g, store, candidates.features)?;
            let boxes = decode_boxes(&out.values(g), &candidates.positions, &self.head_cfg)?;
            return Ok(vec![StagePrediction {
                head: out,
                reference: candidates.positions.clone(),
                boxes,
                cross_weights: None,
            }]);
        }
        let default_size = self.head_cfg.default_size();
        let mut state = DecoderState {
            stage: 0,
            features: candidates.features,
            boxes: initial_boxes.to_vec(),
            reference: candidates.positions.clone(),
        };
        let mut preds = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            state.stage = l;
            let (features, pred) = layer.decoder_stage(g, store, &state, points, vote_centers)?;
            let (boxes, reference) = match self.cfg.mode {
                EncodingMode::IterativeCenterSize => (
                    pred.boxes
                        .iter()
                        .map(|b| [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2]])
                        .collect(),
                    pred.boxes.iter().map(|b| b.center).collect(),
                ),
                EncodingMode::IterativeCenter => (
                    pred.boxes
                        .iter()
                        .map(|b| [b.center[0], b.center[1], b.center[2], default_size[0], default_size[1], default_size[2]])
                        .collect(),
                    pred.boxes.iter().map(|b| b.center).collect(),
                ),
                EncodingMode::Fixed | EncodingMode::None => (state.boxes.clone(), state.reference.clone()),
            };
            state = DecoderState {
                stage: l + 1,
                features,
                boxes,
                reference,
            };
            preds.push(pred);
        }
        Ok(preds)
    }
}

pub const ATTENTION_CSV_HEADER: &str = "stage,candidate,point,weight";

/// Writes `(stage, candidate, point, weight)` rows for every stage that
/// recorded cross-attention weights.
pub fn write_attention_csv<W: Write>(w: &mut W, stages: &[StagePrediction]) -> Result<()> {
    let io = |e: std::io::Error| Error::Data(format!("writing attention dump: {e}"));
    writeln!(w, "{ATTENTION_CSV_HEADER}").map_err(io)?;
    for (s, p) in stages.iter().enumerate() {
        let Some(t) = &p.cross_weights else { continue };
        for k in 0..t.rows() {
            for (m, v) in t.row(k).iter().enumerate() {
                writeln!(w, "{s},{k},{m},{v:.9e}").map_err(io)?;
            }
        }
    }
    Ok(())
}
