//! Prediction heads, target assignment, loss terms and box decoding.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{sigmoid, SamplerLabels, SamplerOutput};
use crate::diffcore::nn::{Linear, Mlp};
use crate::diffcore::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::error::{bail, Error, Result};
use crate::geometry::{dist2, point_in_box_eps, wrap_angle, Box3D, Point3};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Candidates within this distance of a ground-truth center are positives.
pub const ASSIGN_RADIUS: f64 = 0.3;
pub const MIN_DECODED_SIZE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    /// Canonical sizes; one per class when `class_aware_size` is set.
    pub size_templates: Vec<[f64; 3]>,
    pub class_aware_size: bool,
    /// Number of heading bins; zero disables the orientation branch.
    pub yaw_bins: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            size_templates: vec![[1.0; 3]],
            class_aware_size: true,
            yaw_bins: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.size_templates.is_empty() {
            bail!(Config, "head needs at least one class and one size template");
        }
        if self.class_aware_size && self.size_templates.len() != self.num_classes {
            bail!(
                Config,
                "class-aware size head needs one template per class ({} templates, {} classes)",
                self.size_templates.len(),
                self.num_classes
            );
        }
        if self.size_templates.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
            bail!(Config, "size templates must be positive");
        }
        Ok(())
    }

    pub fn num_templates(&self) -> usize {
        self.size_templates.len()
    }

    /// Columns of the size-offset output.
    pub fn size_offset_width(&self) -> usize {
        if self.class_aware_size {
            3 * self.num_templates()
        } else {
            3
        }
    }

    /// Mean template, used as the size of boxes that have not been predicted yet.
    pub fn default_size(&self) -> [f64; 3] {
        let n = self.size_templates.len() as f64;
        let mut s = [0.0; 3];
        for t in &self.size_templates {
            for k in 0..3 {
                s[k] += t[k] / n;
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub objectness: f64,
    pub classification: f64,
    pub center: f64,
    pub size_class: f64,
    pub size_offset: f64,
    pub yaw_class: f64,
    pub yaw_offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            objectness: 0.5,
            classification: 0.1,
            center: 1.0,
            size_class: 0.1,
            size_offset: 0.1,
            yaw_class: 0.1,
            yaw_offset: 0.04,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.objectness,
            self.classification,
            self.center,
            self.size_class,
            self.size_offset,
            self.yaw_class,
            self.yaw_offset,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            bail!(Config, "loss weights must be finite and non-negative");
        }
        Ok(())
    }

    /// Weighted sum of already evaluated terms.
    pub fn combine(&self, t: &StageTerms<f64>) -> f64 {
        let mut s = self.objectness * t.objectness
            + self.classification * t.classification
            + self.center * t.center
            + self.size_class * t.size_class
            + self.size_offset * t.size_offset;
        if let Some((c, o)) = t.yaw {
            s += self.yaw_class * c + self.yaw_offset * o;
        }
        s
    }
}

/// Per-term values of one stage loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTerms<T> {
    pub objectness: T,
    pub classification: T,
    pub center: T,
    pub size_class: T,
    pub size_offset: T,
    pub yaw: Option<(T, T)>,
}

impl StageTerms<f64> {
    /// `(name, value)` pairs in log order.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("objectness", self.objectness),
            ("classification", self.classification),
            ("center", self.center),
            ("size_class", self.size_class),
            ("size_offset", self.size_offset),
        ];
        if let Some((c, o)) = self.yaw {
            v.push(("yaw_class", c));
            v.push(("yaw_offset", o));
        }
        v
    }
}

/// Graph outputs of the detection head for K candidates.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[K × 1]`
    pub objectness: Var,
    /// `[K × classes]`
    pub class_logits: Var,
    /// `[K × 3]`
    pub center_offsets: Var,
    /// `[K × T]`
    pub size_logits: Var,
    /// `[K × 3T]` (template-major) when class-aware, else `[K × 3]`.
    pub size_offsets: Var,
    /// `[K × B]` each.
    pub yaw: Option<(Var, Var)>,
}

/// Plain values of a [`HeadOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub objectness: Tensor,
    pub class_logits: Tensor,
    pub center_offsets: Tensor,
    pub size_logits: Tensor,
    pub size_offsets: Tensor,
    pub yaw: Option<(Tensor, Tensor)>,
}

impl HeadOutput {
    pub fn values(&self, g: &Graph) -> HeadValues {
        HeadValues {
            objectness: g.value(self.objectness).clone(),
            class_logits: g.value(self.class_logits).clone(),
            center_offsets: g.value(self.center_offsets).clone(),
            size_logits: g.value(self.size_logits).clone(),
            size_offsets: g.value(self.size_offsets).clone(),
            yaw: self.yaw.map(|(c, o)| (g.value(c).clone(), g.value(o).clone())),
        }
    }
}

/// Shared two-layer perceptron followed by one linear layer per task.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub cfg: HeadConfig,
    mlp: Mlp,
    objectness: Linear,
    class: Linear,
    center: Linear,
    size_class: Linear,
    size_offset: Linear,
    yaw: Option<(Linear, Linear)>,
}

impl DetectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grp = ParamGroup::Backbone;
        let mut lin = |task: &str, out: usize| Linear::new(store, &format!("{name}.{task}"), width, out, true, grp, rng);
        let objectness = lin("objectness", 1);
        let class = lin("class", cfg.num_classes);
        let center = lin("center", 3);
        let size_class = lin("size_class", cfg.num_templates());
        let size_offset = lin("size_offset", cfg.size_offset_width());
        let yaw = (cfg.yaw_bins > 0).then(|| (lin("yaw_class", cfg.yaw_bins), lin("yaw_offset", cfg.yaw_bins)));
        Ok(Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[width, width, width], grp, rng),
            cfg: cfg.clone(),
            objectness,
            class,
            center,
            size_class,
            size_offset,
            yaw,
        })
    }

    /// Every task layer, for inspection or re-initialisation.
    pub fn task_layers(&self) -> Vec<&Linear> {
        let mut v = vec![&self.objectness, &self.class, &self.center, &self.size_class, &self.size_offset];
        if let Some((c, o)) = &self.yaw {
            v.push(c);
            v.push(o);
        }
        v
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<HeadOutput> {
        let h = self.mlp.forward(g, store, features)?;
        Ok(HeadOutput {
            objectness: self.objectness.forward(g, store, h)?,
            class_logits: self.class.forward(g, store, h)?,
            center_offsets: self.center.forward(g, store, h)?,
            size_logits: self.size_class.forward(g, store, h)?,
            size_offsets: self.size_offset.forward(g, store, h)?,
            yaw: match &self.yaw {
                Some((c, o)) => Some((c.forward(g, store, h)?, o.forward(g, store, h)?)),
                None => None,
            },
        })
    }
}

/// Per-candidate training targets of one decoder stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoderTargets {
    /// 0/1 per candidate.
    pub objectness: Vec<f64>,
    /// Candidate indices of positives; the remaining fields follow this order.
    pub positives: Vec<usize>,
    pub gt_index: Vec<usize>,
    pub class: Vec<usize>,
    /// Flattened `[P × 3]`, `gt center - reference`.
    pub center: Vec<f64>,
    pub size_class: Vec<usize>,
    /// Flattened `[P × 3]`, `gt size - template size`.
    pub size_offset: Vec<f64>,
    pub yaw_bin: Vec<usize>,
    pub yaw_offset: Vec<f64>,
}

/// Index of the template closest in log-volume.
pub fn nearest_template(size: &[f64; 3], templates: &[[f64; 3]]) -> usize {
    let v = (size[0] * size[1] * size[2]).ln();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, t) in templates.iter().enumerate() {
        let d = (v - (t[0] * t[1] * t[2]).ln()).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn yaw_bin_width(bins: usize) -> f64 {
    2.0 * PI / bins as f64
}

/// Heading bin and residual, with bin `b` centred at `b · 2π/B`.
pub fn yaw_to_bin(yaw: f64, bins: usize) -> (usize, f64) {
    let w = yaw_bin_width(bins);
    let a = yaw.rem_euclid(2.0 * PI);
    let b = (((a + w / 2.0) / w).floor() as usize) % bins;
    (b, wrap_angle(a - b as f64 * w))
}

pub fn bin_to_yaw(bin: usize, offset: f64, bins: usize) -> f64 {
    wrap_angle(bin as f64 * yaw_bin_width(bins) + offset)
}

/// How candidates are matched to ground-truth boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignRule {
    /// Positive when the candidate lies inside (or on) a box.
    InsideBox,
    /// Positive when the candidate lies within this distance of a box center.
    Radius(f64),
}

impl Default for AssignRule {
    fn default() -> Self {
        Self::InsideBox
    }
}

/// Tolerance of the inside-box test; surface samples sit exactly on faces.
pub const INSIDE_BOX_EPS: f64 = 1e-6;

/// Assigns candidates to ground truth. A candidate matches the boxes that
/// satisfy `rule` at `assign_centers[i]` and takes the one with the nearest
/// center (lower index on ties). Regression targets are relative to
/// `reference[i]`.
pub fn assign_decoder_targets(
    assign_centers: &[Point3],
    reference: &[Point3],
    gt: &[Box3D],
    cfg: &HeadConfig,
    rule: AssignRule,
) -> Result<DecoderTargets> {
    if assign_centers.len() != reference.len() {
        bail!(Dimension, "{} assignment centers vs {} references", assign_centers.len(), reference.len());
    }
    let mut t = DecoderTargets {
        objectness: vec![0.0; reference.len()],
        ..Default::default()
    };
    if let AssignRule::Radius(r) = rule {
        if !(r > 0.0) {
            bail!(Argument, "assignment radius must be positive, got {r}");
        }
    }
    for (i, c) in assign_centers.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, b) in gt.iter().enumerate() {
            let d = dist2(c, &b.center);
            let hit = match rule {
                AssignRule::InsideBox => point_in_box_eps(c, b, INSIDE_BOX_EPS),
                AssignRule::Radius(r) => d <= r * r,
            };
            if hit && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        let Some((_, j)) = best else { continue };
        let b = &gt[j];
        if b.class_id >= cfg.num_classes {
            bail!(Data, "ground-truth class {} out of range for {} classes", b.class_id, cfg.num_classes);
        }
        t.objectness[i] = 1.0;
        t.positives.push(i);
        t.gt_index.push(j);
        t.class.push(b.class_id);
        t.center.extend((0..3).map(|k| b.center[k] - reference[i][k]));
        let s = nearest_template(&b.size, &cfg.size_templates);
        t.size_class.push(s);
        let tpl = cfg.size_templates[s];
        t.size_offset.extend((0..3).map(|k| b.size[k] - tpl[k]));
        if cfg.yaw_bins > 0 {
            let (bin, off) = yaw_to_bin(b.yaw, cfg.yaw_bins);
            t.yaw_bin.push(bin);
            t.yaw_offset.push(off);
        }
    }
    Ok(t)
}

/// Regression/classification terms are averaged over positives and fall
/// back to a constant zero when there are none.
pub fn stage_loss(
    g: &mut Graph,
    out: &HeadOutput,
    targets: &DecoderTargets,
    cfg: &HeadConfig,
    weights: &LossWeights,
) -> Result<(Var, StageTerms<f64>)> {
    let objectness = g.focal_loss(out.objectness, &targets.objectness, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let terms = if targets.positives.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        StageTerms {
            objectness,
            classification: zero,
            center: zero,
            size_class: zero,
            size_offset: zero,
            yaw: out.yaw.map(|_| (zero, zero)),
        }
    } else {
        let pos = &targets.positives;
        let cls = g.gather_rows(out.class_logits, pos)?;
        let classification = g.cross_entropy(cls, &targets.class)?;
        let ctr = g.gather_rows(out.center_offsets, pos)?;
        let center = g.smooth_l1(ctr, &targets.center, SMOOTH_L1_BETA)?;
        let szl = g.gather_rows(out.size_logits, pos)?;
        let size_class = g.cross_entropy(szl, &targets.size_class)?;
        let width = cfg.size_offset_width();
        let idx: Vec<usize> = pos
            .iter()
            .zip(&targets.size_class)
            .flat_map(|(&i, &s)| {
                let base = i * width + if cfg.class_aware_size { 3 * s } else { 0 };
                base..base + 3
            })
            .collect();
        let szo = g.take(out.size_offsets, &idx, [pos.len(), 3])?;
        let size_offset = g.smooth_l1(szo, &targets.size_offset, SMOOTH_L1_BETA)?;
        let yaw = match out.yaw {
            Some((yc, yo)) => {
                let l = g.gather_rows(yc, pos)?;
                let c = g.cross_entropy(l, &targets.yaw_bin)?;
                let b = cfg.yaw_bins;
                let idx: Vec<usize> = pos.iter().zip(&targets.yaw_bin).map(|(&i, &k)| i * b + k).collect();
                let o = g.take(yo, &idx, [pos.len(), 1])?;
                let o = g.smooth_l1(o, &targets.yaw_offset, SMOOTH_L1_BETA)?;
                Some((c, o))
            }
            None => None,
        };
        StageTerms {
            objectness,
            classification,
            center,
            size_class,
            size_offset,
            yaw,
        }
    };
    let mut total = g.scale(terms.objectness, weights.objectness);
    for (v, w) in [
        (terms.classification, weights.classification),
        (terms.center, weights.center),
        (terms.size_class, weights.size_class),
        (terms.size_offset, weights.size_offset),
    ]
    .into_iter()
    .chain(
        terms
            .yaw
            .map(|(c, o)| [(c, weights.yaw_class), (o, weights.yaw_offset)])
            .into_iter()
            .flatten(),
    ) {
        let s = g.scale(v, w);
        total = g.add(total, s)?;
    }
    let values = StageTerms {
        objectness: g.value(terms.objectness).item(),
        classification: g.value(terms.classification).item(),
        center: g.value(terms.center).item(),
        size_class: g.value(terms.size_class).item(),
        size_offset: g.value(terms.size_offset).item(),
        yaw: terms.yaw.map(|(c, o)| (g.value(c).item(), g.value(o).item())),
    };
    Ok((total, values))
}

/// Objectness focal loss over every point plus center regression on the
/// positives. Returns the total and the two unweighted terms.
pub fn sampler_loss(
    g: &mut Graph,
    out: &SamplerOutput,
    labels: &SamplerLabels,
    weights: &LossWeights,
) -> Result<(Var, [f64; 2])> {
    let targets: Vec<f64> = labels.positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let obj = g.focal_loss(out.logits, &targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let mut total = g.scale(obj, weights.objectness);
    let pos: Vec<usize> = (0..targets.len()).filter(|&i| labels.positive[i]).collect();
    let mut center_val = 0.0;
    if !pos.is_empty() {
        let pred = g.gather_rows(out.offsets, &pos)?;
        let t: Vec<f64> = pos.iter().flat_map(|&i| labels.offsets[i]).collect();
        let c = g.smooth_l1(pred, &t, SMOOTH_L1_BETA)?;
        center_val = g.value(c).item();
        let c = g.scale(c, weights.center);
        total = g.add(total, c)?;
    }
    Ok((total, [g.value(obj).item(), center_val]))
}

/// Mean over decoder stages plus the sampler loss.
pub fn total_loss(g: &mut Graph, stage_losses: &[Var], sampler: Var) -> Result<Var> {
    if stage_losses.is_empty() {
        bail!(Argument, "total_loss needs at least one stage");
    }
    let mut acc = stage_losses[0];
    for &s in &stage_losses[1..] {
        acc = g.add(acc, s)?;
    }
    let mean = g.scale(acc, 1.0 / stage_losses.len() as f64);
    g.add(mean, sampler)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Turns head values into boxes around `reference` positions.
pub fn decode_boxes(values: &HeadValues, reference: &[Point3], cfg: &HeadConfig) -> Result<Vec<Box3D>> {
    if cfg.size_templates.is_empty() {
        bail!(Argument, "decode_boxes needs at least one size template");
    }
    let k = reference.len();
    if values.objectness.rows() != k {
        bail!(Dimension, "{} head rows for {} candidates", values.objectness.rows(), k);
    }
    let width = cfg.size_offset_width();
    (0..k)
        .map(|i| {
            let off = values.center_offsets.row(i);
            let center = [reference[i][0] + off[0], reference[i][1] + off[1], reference[i][2] + off[2]];
            let t = argmax(values.size_logits.row(i));
            let so = values.size_offsets.row(i);
            let base = if width == 3 { 0 } else { 3 * t };
            let tpl = cfg.size_templates[t];
            let size = [0, 1, 2].map(|d| (tpl[d] + so[base + d]).max(MIN_DECODED_SIZE));
            let yaw = match &values.yaw {
                Some((c, o)) => {
                    let b = argmax(c.row(i));
                    bin_to_yaw(b, o.row(i)[b], cfg.yaw_bins)
                }
                None => 0.0,
            };
            let probs = softmax_row(values.class_logits.row(i));
            let class_id = argmax(&probs);
            let score = sigmoid(values.objectness.row(i)[0]) * probs[class_id];
            Box3D::new(center, size, yaw, class_id, score)
        })
        .collect()
}

/// Appends `(step, stage, term, value)` rows.
pub fn write_loss_rows<W: Write>(w: &mut W, step: usize, stage: &str, terms: &[(&str, f64)]) -> Result<()> {
    for (name, v) in terms {
        writeln!(w, "{step},{stage},{name},{v}").map_err(|e| Error::Training(format!("writing loss log: {e}")))?;
    }
    Ok(())
}

pub const LOSS_CSV_HEADER: &str = "step,stage,term,value";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::check_params;
    use crate::diffcore::rng_from_seed;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn cfg3() -> HeadConfig {
        HeadConfig {
            num_classes: 3,
            size_templates: vec![[1.0, 0.4, 0.6], [0.45, 0.5, 0.45], [0.35, 0.8, 0.5]],
            class_aware_size: true,
            yaw_bins: 0,
        }
    }

    fn head_values(g: &mut Graph, k: usize, cfg: &HeadConfig, seed: u64) -> HeadOutput {
        let mut rng = rng_from_seed(seed);
        let mut t = |c: usize| {
            let data = (0..k * c).map(|_| rng.random_range(-1.5..1.5)).collect();
            g.var(Tensor::new([k, c], data).unwrap())
        };
        HeadOutput {
            objectness: t(1),
            class_logits: t(cfg.num_classes),
            center_offsets: t(3),
            size_logits: t(cfg.num_templates()),
            size_offsets: t(cfg.size_offset_width()),
            yaw: (cfg.yaw_bins > 0).then(|| (t(cfg.yaw_bins), t(cfg.yaw_bins))),
        }
    }

    // Independent scalar oracles.
    fn focal_oracle(x: f64, y: f64) -> f64 {
        let p = 1.0 / (1.0 + (-x).exp());
        let (pt, at) = if y == 1.0 { (p, FOCAL_ALPHA) } else { (1.0 - p, 1.0 - FOCAL_ALPHA) };
        -at * (1.0 - pt).powi(2) * pt.ln()
    }
    fn sl1_oracle(d: f64) -> f64 {
        let a = d.abs();
        if a < 1.0 {
            0.5 * a * a
        } else {
            a - 0.5
        }
    }
    fn ce_oracle(row: &[f64], t: usize) -> f64 {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[t].exp() / z).ln()
    }
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn focal_smooth_l1_and_ce_examples() {
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(0.0));
        let f = g.focal_loss(x, &[1.0], 0.25, 2.0).unwrap();
        assert!((g.value(f).item() - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((g.value(f).item() - 0.04329).abs() < 1e-4);
        let x = g.var(Tensor::scalar(40.0));
        let f = g.focal_loss(x, &[1.0], 0.25, 2.0).unwrap();
        assert!(g.value(f).item() < 1e-30);
        let x = g.var(Tensor::scalar(0.7));
        let f = g.focal_loss(x, &[0.0], 0.5, 0.0).unwrap();
        let bce = (1.0 + 0.7f64.exp()).ln();
        assert!((g.value(f).item() - 0.5 * bce).abs() < 1e-14);

        let p = g.var(Tensor::new([2], vec![2.0, 0.5]).unwrap());
        let l = g.smooth_l1(p, &[0.0, 0.0], 1.0).unwrap();
        assert!((g.value(l).item() - (1.5 + 0.125) / 2.0).abs() < 1e-15);
        let l = g.smooth_l1(p, &[2.0, 0.5], 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let lg = g.var(Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let ce = g.cross_entropy(lg, &[1]).unwrap();
        assert!((g.value(ce).item() + 0.75f64.ln()).abs() < 1e-14);
        let u = g.var(Tensor::zeros([1, 5]));
        let ce = g.cross_entropy(u, &[3]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-14);
        assert!(matches!(g.cross_entropy(u, &[5]), Err(Error::Argument(_))));
    }

    #[test]
    fn head_shapes_and_zero_init() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        let cfg = cfg3();
        let head = DetectionHead::new(&mut store, "h", 6, &cfg, &mut rng).unwrap();
        for l in head.task_layers() {
            store.value_mut(l.weight).data_mut().fill(0.0);
            store.value_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([4, 6], 0.3));
        let out = head.forward(&mut g, &store, x).unwrap();
        let v = out.values(&g);
        assert_eq!(v.size_offsets.shape(), &[4, 9]);
        for t in [&v.objectness, &v.class_logits, &v.center_offsets, &v.size_logits, &v.size_offsets] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }

        let agnostic = HeadConfig {
            class_aware_size: false,
            yaw_bins: 12,
            ..cfg3()
        };
        let mut store = ParamStore::new();
        let head = DetectionHead::new(&mut store, "h", 6, &agnostic, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([4, 6], 0.3));
        let v = head.forward(&mut g, &store, x).unwrap().values(&g);
        assert_eq!(v.size_offsets.shape(), &[4, 3]);
        assert_eq!(v.yaw.as_ref().unwrap().0.shape(), &[4, 12]);
    }

    #[test]
    fn assignment_examples() {
        let cfg = cfg3();
        let gt = vec![
            Box3D::axis_aligned([0.0, 0.2, 0.0], [1.0, 0.4, 0.6], 0).unwrap(),
            Box3D::axis_aligned([0.4, 0.25, 0.0], [0.45, 0.5, 0.45], 1).unwrap(),
        ];
        let cands = [[0.0, 0.2, 0.0], [0.2, 0.2, 0.0], [3.0, 0.0, 0.0]];
        let t = assign_decoder_targets(&cands, &cands, &gt, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
        assert_eq!(t.objectness, vec![1.0, 1.0, 0.0]);
        assert_eq!(t.positives, vec![0, 1]);
        assert_eq!(&t.center[..3], &[0.0, 0.0, 0.0]);
        // Candidate 1 sits 0.2 from gt 0 and ~0.206 from gt 1.
        assert_eq!(t.gt_index, vec![0, 0]);
        let tie = [[0.2, 0.25, 0.0]];
        let gt2 = vec![
            Box3D::axis_aligned([0.0, 0.25, 0.0], [0.4, 0.5, 0.4], 2).unwrap(),
            Box3D::axis_aligned([0.4, 0.25, 0.0], [0.4, 0.5, 0.4], 1).unwrap(),
        ];
        let t = assign_decoder_targets(&tie, &tie, &gt2, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
        assert_eq!(t.gt_index, vec![0]);
        let none = assign_decoder_targets(&cands, &cands, &[], &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
        assert!(none.positives.is_empty());
        assert_eq!(none.objectness, vec![0.0; 3]);
    }

    #[test]
    fn inside_box_assignment() {
        let cfg = cfg3();
        let gt = vec![
            Box3D::axis_aligned([0.0, 0.2, 0.0], [1.0, 0.4, 0.6], 0).unwrap(),
            Box3D::axis_aligned([0.6, 0.25, 0.0], [0.45, 0.5, 0.45], 1).unwrap(),
        ];
        // Face sample of box 0, far corner of box 0, overlap region, outside.
        let cands = [[0.0, 0.4, 0.0], [-0.5, 0.0, 0.3], [0.45, 0.2, 0.0], [2.0, 0.2, 0.0]];
        let refs = [[0.1, 0.1, 0.1]; 4];
        let t = assign_decoder_targets(&cands, &refs, &gt, &cfg, AssignRule::InsideBox).unwrap();
        assert_eq!(t.objectness, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(t.gt_index, vec![0, 0, 1]);
        assert_eq!(&t.center[..3], &[-0.1, 0.1, -0.1]);
        assert_eq!(AssignRule::default(), AssignRule::InsideBox);
        assert!(assign_decoder_targets(&cands, &refs, &gt, &cfg, AssignRule::Radius(0.0)).is_err());
    }

    #[test]
    fn no_positives_leaves_only_objectness() {
        let cfg = cfg3();
        let mut g = Graph::new();
        let out = head_values(&mut g, 5, &cfg, 1);
        let t = assign_decoder_targets(&[[9.0; 3]; 5], &[[9.0; 3]; 5], &[], &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
        let (l, terms) = stage_loss(&mut g, &out, &t, &cfg, &LossWeights::default()).unwrap();
        assert!(terms.objectness > 0.0);
        assert_eq!(terms.classification + terms.center + terms.size_class + terms.size_offset, 0.0);
        assert!((g.value(l).item() - 0.5 * terms.objectness).abs() < 1e-15);
    }

    #[test]
    fn weight_arithmetic() {
        let w = LossWeights::default();
        assert_eq!((w.objectness, w.classification, w.center, w.size_class, w.size_offset), (0.5, 0.1, 1.0, 0.1, 0.1));
        assert_eq!((w.yaw_class, w.yaw_offset), (0.1, 0.04));
        let ones = StageTerms {
            objectness: 1.0,
            classification: 1.0,
            center: 1.0,
            size_class: 1.0,
            size_offset: 1.0,
            yaw: None,
        };
        assert!((w.combine(&ones) - 1.8).abs() < 1e-15);
        let with_yaw = StageTerms {
            yaw: Some((1.0, 1.0)),
            ..ones
        };
        assert!((w.combine(&with_yaw) - 1.94).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let s1 = g.var(Tensor::scalar(1.0));
        let s3 = g.var(Tensor::scalar(3.0));
        let sp = g.var(Tensor::scalar(0.5));
        let t = total_loss(&mut g, &[s1, s3], sp).unwrap();
        assert_eq!(g.value(t).item(), 2.5);
        let t = total_loss(&mut g, &[s1], sp).unwrap();
        assert_eq!(g.value(t).item(), 1.5);
        let z = g.var(Tensor::scalar(0.0));
        let t = total_loss(&mut g, &[z, z], z).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        assert!(total_loss(&mut g, &[], sp).is_err());
    }

    #[test]
    fn stage_loss_matches_independent_weighted_sum() {
        for (aware, bins) in [(true, 0), (false, 0), (true, 8)] {
            let cfg = HeadConfig {
                class_aware_size: aware,
                yaw_bins: bins,
                ..cfg3()
            };
            let mut g = Graph::new();
            let k = 6;
            let out = head_values(&mut g, k, &cfg, 7);
            let gt = vec![
                Box3D::new([0.0, 0.2, 0.0], [0.9, 0.4, 0.6], 0.4, 0, 1.0).unwrap(),
                Box3D::new([1.0, 0.3, 1.0], [0.4, 0.6, 0.4], -2.0, 2, 1.0).unwrap(),
            ];
            let cands = [[0.1, 0.2, 0.0], [1.1, 0.2, 1.0], [0.0, 0.0, -0.1], [2.0; 3], [-1.0; 3], [1.0, 0.4, 0.9]];
            let refs: Vec<Point3> = cands.iter().map(|c| [c[0] + 0.05, c[1], c[2] - 0.02]).collect();
            let t = assign_decoder_targets(&cands, &refs, &gt, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
            assert_eq!(t.positives, vec![0, 1, 2, 5]);
            let w = LossWeights::default();
            let (l, terms) = stage_loss(&mut g, &out, &t, &cfg, &w).unwrap();

            let v = out.values(&g);
            let obj: Vec<f64> = (0..k).map(|i| focal_oracle(v.objectness.row(i)[0], t.objectness[i])).collect();
            let mut cls = vec![];
            let mut ctr = vec![];
            let mut szc = vec![];
            let mut szo = vec![];
            let mut yc = vec![];
            let mut yo = vec![];
            for (p, &i) in t.positives.iter().enumerate() {
                let b = &gt[t.gt_index[p]];
                cls.push(ce_oracle(v.class_logits.row(i), b.class_id));
                for d in 0..3 {
                    ctr.push(sl1_oracle(v.center_offsets.row(i)[d] - (b.center[d] - refs[i][d])));
                }
                // Oracle: template with the smallest |ln(volume ratio)|, by exhaustive scan.
                let vol = b.size[0] * b.size[1] * b.size[2];
                let ratio = |t: &[f64; 3]| (vol / (t[0] * t[1] * t[2])).ln().abs();
                let s = (0..cfg.size_templates.len())
                    .min_by(|&x, &y| ratio(&cfg.size_templates[x]).total_cmp(&ratio(&cfg.size_templates[y])))
                    .unwrap();
                szc.push(ce_oracle(v.size_logits.row(i), s));
                let base = if aware { 3 * s } else { 0 };
                for d in 0..3 {
                    szo.push(sl1_oracle(v.size_offsets.row(i)[base + d] - (b.size[d] - cfg.size_templates[s][d])));
                }
                if bins > 0 {
                    let (bin, off) = yaw_to_bin(b.yaw, bins);
                    let (c, o) = v.yaw.as_ref().unwrap();
                    yc.push(ce_oracle(c.row(i), bin));
                    yo.push(sl1_oracle(o.row(i)[bin] - off));
                }
            }
            let mut expect = 0.5 * mean(&obj) + 0.1 * mean(&cls) + 1.0 * mean(&ctr) + 0.1 * mean(&szc) + 0.1 * mean(&szo);
            if bins > 0 {
                expect += 0.1 * mean(&yc) + 0.04 * mean(&yo);
            }
            assert!((g.value(l).item() - expect).abs() < 1e-12);
            assert!((w.combine(&terms) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let cfg = HeadConfig {
            num_classes: 4,
            size_templates: vec![[0.5, 0.6, 0.7]],
            class_aware_size: false,
            yaw_bins: 0,
        };
        let v = HeadValues {
            objectness: Tensor::zeros([1, 1]),
            class_logits: Tensor::zeros([1, 4]),
            center_offsets: Tensor::zeros([1, 3]),
            size_logits: Tensor::zeros([1, 1]),
            size_offsets: Tensor::zeros([1, 3]),
            yaw: None,
        };
        let b = decode_boxes(&v, &[[1.0, 2.0, 3.0]], &cfg).unwrap();
        assert_eq!(b[0].center, [1.0, 2.0, 3.0]);
        assert_eq!(b[0].size, [0.5, 0.6, 0.7]);
        assert!((b[0].score - 0.125).abs() < 1e-15);
        b[0].validate().unwrap();
        let mut v2 = v.clone();
        v2.size_offsets = Tensor::full([1, 3], -5.0);
        let b = decode_boxes(&v2, &[[0.0; 3]], &cfg).unwrap();
        assert_eq!(b[0].size, [MIN_DECODED_SIZE; 3]);
    }

    #[test]
    fn yaw_bins_round_trip() {
        for bins in [1, 4, 12] {
            for i in 0..50 {
                let yaw = wrap_angle(-3.2 + i as f64 * 0.13);
                let (b, o) = yaw_to_bin(yaw, bins);
                assert!(b < bins && o.abs() <= PI / bins as f64 + 1e-12);
                assert!((wrap_angle(bin_to_yaw(b, o, bins) - yaw)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_and_loss_gradients_match_finite_differences() {
        let cfg = HeadConfig {
            yaw_bins: 4,
            ..cfg3()
        };
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(5);
        let head = DetectionHead::new(&mut store, "h", 5, &cfg, &mut rng).unwrap();
        let feats = Tensor::new([3, 5], (0..15).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let gt = vec![Box3D::new([0.0, 0.2, 0.0], [0.9, 0.4, 0.6], 1.0, 1, 1.0).unwrap()];
        let cands = [[0.1, 0.2, 0.0], [1.1, 0.2, 1.0], [0.0, 0.1, -0.1]];
        let t = assign_decoder_targets(&cands, &cands, &gt, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
        let r = check_params(&store, 1e-6, None, |g, s| {
            let x = g.constant(feats.clone());
            let out = head.forward(g, s, x)?;
            Ok(stage_loss(g, &out, &t, &cfg, &LossWeights::default())?.0)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    proptest! {
        #[test]
        fn focal_is_nonnegative_and_below_bce(x in -30.0..30.0f64, pos in proptest::bool::ANY, gamma in 0.0..4.0f64) {
            let y = if pos { 1.0 } else { 0.0 };
            let mut g = Graph::new();
            let v = g.var(Tensor::scalar(x));
            let f = g.focal_loss(v, &[y], 0.25, gamma).unwrap();
            let b = g.focal_loss(v, &[y], 0.25, 0.0).unwrap();
            prop_assert!(g.value(f).item() >= 0.0);
            prop_assert!(g.value(f).item() <= g.value(b).item() + 1e-15);
        }

        #[test]
        fn total_loss_is_permutation_invariant(seed in 0u64..500, perm_seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let cfg = cfg3();
            let k = 7;
            let mut rng = rng_from_seed(seed);
            let cands: Vec<Point3> = (0..k).map(|_| [rng.random_range(-1.0..1.0), 0.2, rng.random_range(-1.0..1.0)]).collect();
            let gt = vec![
                Box3D::axis_aligned([0.0, 0.2, 0.0], [0.9, 0.4, 0.6], 0).unwrap(),
                Box3D::axis_aligned([0.6, 0.25, 0.6], [0.45, 0.5, 0.45], 1).unwrap(),
            ];
            let mut g = Graph::new();
            let out = head_values(&mut g, k, &cfg, seed);
            let t = assign_decoder_targets(&cands, &cands, &gt, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
            let (a, _) = stage_loss(&mut g, &out, &t, &cfg, &LossWeights::default()).unwrap();

            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng_from_seed(perm_seed));
            let p = |v: Var, g: &mut Graph| g.gather_rows(v, &perm).unwrap();
            let permuted = HeadOutput {
                objectness: p(out.objectness, &mut g),
                class_logits: p(out.class_logits, &mut g),
                center_offsets: p(out.center_offsets, &mut g),
                size_logits: p(out.size_logits, &mut g),
                size_offsets: p(out.size_offsets, &mut g),
                yaw: None,
            };
            let pc: Vec<Point3> = perm.iter().map(|&i| cands[i]).collect();
            let t2 = assign_decoder_targets(&pc, &pc, &gt, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
            let (b, _) = stage_loss(&mut g, &permuted, &t2, &cfg, &LossWeights::default()).unwrap();
            prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
            prop_assert_eq!(t.positives.len(), t2.positives.len());
        }

        #[test]
        fn stage_losses_are_nonnegative(seed in 0u64..200, n in prop::sample::select(vec![1usize, 3, 8])) {
            let cfg = cfg3();
            let mut g = Graph::new();
            let out = head_values(&mut g, n, &cfg, seed);
            let cands: Vec<Point3> = (0..n).map(|i| [i as f64 * 0.1, 0.2, 0.0]).collect();
            let gt = vec![Box3D::axis_aligned([0.0, 0.2, 0.0], [0.9, 0.4, 0.6], 0).unwrap()];
            let t = assign_decoder_targets(&cands, &cands, &gt, &cfg, AssignRule::Radius(ASSIGN_RADIUS)).unwrap();
            let (_, terms) = stage_loss(&mut g, &out, &t, &cfg, &LossWeights::default()).unwrap();
            prop_assert!(terms.named().iter().all(|(_, v)| *v >= 0.0));
        }
    }
}
