//! Initial object candidates: farthest-point, k-closest-point and
//! k-closest-point with center NMS, plus the per-point sampling head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PointFeatures;
use crate::diffcore::nn::{Linear, Mlp};
use crate::diffcore::{Graph, ParamGroup, ParamStore, Var};
use crate::error::{bail, Result};
use crate::geometry::{dist2, farthest_point_sample, point_in_box, Box3D, Point3};

pub const DEFAULT_KPS_K: usize = 4;
pub const DEFAULT_NMS_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Fps,
    #[default]
    Kps,
    KpsNms,
}

impl std::str::FromStr for SamplingMethod {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fps" => Self::Fps,
            "kps" => Self::Kps,
            "kps_nms" => Self::KpsNms,
            _ => bail!(Argument, "unknown sampling method {s:?} (fps, kps, kps_nms)"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub indices: Vec<usize>,
    pub positions: Vec<Point3>,
    pub features: Var,
    pub objectness_scores: Vec<f64>,
    pub method: SamplingMethod,
}

impl CandidateSet {
    /// Gathers the candidates at `indices` out of the backbone output.
    pub fn gather(
        g: &mut Graph,
        points: &PointFeatures,
        indices: Vec<usize>,
        scores: Option<&[f64]>,
        method: SamplingMethod,
    ) -> Result<Self> {
        let features = g.gather_rows(points.features, &indices)?;
        Ok(Self {
            positions: indices.iter().map(|&i| points.positions[i]).collect(),
            objectness_scores: indices.iter().map(|&i| scores.map_or(1.0, |s| s[i])).collect(),
            features,
            indices,
            method,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-point targets of the sampling head.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerLabels {
    pub positive: Vec<bool>,
    /// `box center - point` for positives, zero elsewhere.
    pub offsets: Vec<[f64; 3]>,
}

impl SamplerLabels {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Marks, for every box, the `k` interior points closest to its center.
/// A point selected by several boxes takes its offset from the nearest
/// center (lower box index on ties).
pub fn assign_kps_labels(points: &[Point3], gt: &[Box3D], k: usize) -> Result<SamplerLabels> {
    if k == 0 {
        bail!(Argument, "k must be at least 1");
    }
    let n = points.len();
    let mut positive = vec![false; n];
    let mut offsets = vec![[0.0; 3]; n];
    let mut owner_dist = vec![f64::INFINITY; n];
    for b in gt {
        let mut inside: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| point_in_box(p, b))
            .map(|(i, p)| (dist2(p, &b.center), i))
            .collect();
        inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, i) in inside.iter().take(k) {
            positive[i] = true;
            if d < owner_dist[i] {
                owner_dist[i] = d;
                let p = points[i];
                offsets[i] = [b.center[0] - p[0], b.center[1] - p[1], b.center[2] - p[2]];
            }
        }
    }
    Ok(SamplerLabels { positive, offsets })
}

pub fn sample_fps(g: &mut Graph, points: &PointFeatures, k: usize, seed_index: usize) -> Result<CandidateSet> {
    let n = points.positions.len();
    if k > n {
        bail!(Argument, "cannot sample {k} candidates from {n} points");
    }
    let idx = farthest_point_sample(&points.positions, k, seed_index % n.max(1))?;
    CandidateSet::gather(g, points, idx, None, SamplingMethod::Fps)
}

/// Indices of the `k` highest scores, ties by lower index.
pub fn kps_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        bail!(Argument, "cannot sample {k} candidates from {} points", scores.len());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Greedy score-ordered selection suppressing points whose predicted
/// center falls within `radius` of an already selected one. Slots left
/// after exhaustion are filled with the best suppressed points.
pub fn kps_nms_indices(scores: &[f64], centers: &[Point3], k: usize, radius: f64) -> Result<Vec<usize>> {
    if radius <= 0.0 || k == 0 {
        bail!(Argument, "kps_nms needs radius > 0 and k >= 1");
    }
    if k > scores.len() || centers.len() != scores.len() {
        bail!(Argument, "kps_nms: {k} candidates from {} scores / {} centers", scores.len(), centers.len());
    }
    let order = kps_indices(scores, scores.len())?;
    let r2 = radius * radius;
    let mut taken = vec![false; scores.len()];
    let mut suppressed = vec![false; scores.len()];
    let mut keep = Vec::with_capacity(k);
    for &i in &order {
        if keep.len() == k {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        taken[i] = true;
        for &j in &order {
            if !taken[j] && !suppressed[j] && dist2(&centers[i], &centers[j]) <= r2 {
                suppressed[j] = true;
            }
        }
    }
    for &i in &order {
        if keep.len() == k {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            keep.push(i);
        }
    }
    Ok(keep)
}

pub fn sample_kps(g: &mut Graph, points: &PointFeatures, scores: &[f64], k: usize) -> Result<CandidateSet> {
    let idx = kps_indices(scores, k)?;
    CandidateSet::gather(g, points, idx, Some(scores), SamplingMethod::Kps)
}

pub fn sample_kps_nms(
    g: &mut Graph,
    points: &PointFeatures,
    scores: &[f64],
    centers: &[Point3],
    k: usize,
    radius: f64,
) -> Result<CandidateSet> {
    let idx = kps_nms_indices(scores, centers, k, radius)?;
    CandidateSet::gather(g, points, idx, Some(scores), SamplingMethod::KpsNms)
}

/// Output of the sampling head for every backbone point.
#[derive(Debug, Clone)]
pub struct SamplerOutput {
    /// `[M × 1]` objectness logits.
    pub logits: Var,
    /// `[M × 3]` predicted offsets to the object center.
    pub offsets: Var,
    pub scores: Vec<f64>,
    pub centers: Vec<Point3>,
}

#[derive(Debug, Clone)]
pub struct SamplerHead {
    mlp: Mlp,
    objectness: Linear,
    center: Linear,
}

impl SamplerHead {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        let grp = ParamGroup::Backbone;
        Self {
            mlp: Mlp::new(store, "sampler.mlp", &[width, width, width], grp, rng),
            objectness: Linear::new(store, "sampler.objectness", width, 1, true, grp, rng),
            center: Linear::new(store, "sampler.center", width, 3, true, grp, rng),
        }
    }

    pub fn objectness_layer(&self) -> &Linear {
        &self.objectness
    }

    pub fn center_layer(&self) -> &Linear {
        &self.center
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &PointFeatures) -> Result<SamplerOutput> {
        if g.shape(points.features)[0] == 0 {
            bail!(Argument, "sampler head on an empty point set");
        }
        let h = self.mlp.forward(g, store, points.features)?;
        let logits = self.objectness.forward(g, store, h)?;
        let offsets = self.center.forward(g, store, h)?;
        let scores = g.value(logits).data().iter().map(|&x| sigmoid(x)).collect();
        let centers = points
            .positions
            .iter()
            .zip(g.value(offsets).data().chunks_exact(3))
            .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
            .collect();
        Ok(SamplerOutput {
            logits,
            offsets,
            scores,
            centers,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
