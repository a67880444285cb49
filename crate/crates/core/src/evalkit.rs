//! Stage ensembling and mean-average-precision evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::geometry::{iou_unchecked, nms_per_class, score_order, Box3D, IouMode};
use crate::scenegen::Scene;

pub const ENSEMBLE_NMS_IOU: f64 = 0.25;
pub const EVAL_THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Boxes predicted for one scene, with the stage that produced each.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub scene_id: String,
    pub boxes: Vec<Box3D>,
    pub stages: Vec<usize>,
}

impl DetectionResult {
    pub fn new(scene_id: impl Into<String>, boxes: Vec<Box3D>, stage: usize) -> Self {
        let stages = vec![stage; boxes.len()];
        Self {
            scene_id: scene_id.into(),
            boxes,
            stages,
        }
    }

    fn select(&self, keep: &[usize]) -> Self {
        Self {
            scene_id: self.scene_id.clone(),
            boxes: keep.iter().map(|&i| self.boxes[i]).collect(),
            stages: keep.iter().map(|&i| self.stages[i]).collect(),
        }
    }

    /// Class-wise NMS of this result alone.
    pub fn suppressed(&self, iou_threshold: f64, mode: IouMode) -> Self {
        self.select(&nms_per_class(&self.boxes, iou_threshold, mode))
    }
}

/// Pools every stage's boxes and removes same-class duplicates.
pub fn ensemble_stages(stage_results: &[DetectionResult], iou_threshold: f64, mode: IouMode) -> Result<DetectionResult> {
    let Some(first) = stage_results.first() else {
        bail!(Argument, "ensemble needs at least one stage");
    };
    let mut all = DetectionResult {
        scene_id: first.scene_id.clone(),
        boxes: vec![],
        stages: vec![],
    };
    for r in stage_results {
        if r.scene_id != first.scene_id {
            bail!(Argument, "ensembling results of scenes {} and {}", first.scene_id, r.scene_id);
        }
        all.boxes.extend_from_slice(&r.boxes);
        all.stages.extend_from_slice(&r.stages);
    }
    Ok(all.suppressed(iou_threshold, mode))
}

/// Greedy matching for one class. Returns true-positive flags for the
/// class's detections in descending-score order.
pub fn match_detections(dets: &[Box3D], gt: &[Box3D], iou_threshold: f64, class_id: usize, mode: IouMode) -> Vec<bool> {
    let gt_idx: Vec<usize> = (0..gt.len()).filter(|&j| gt[j].class_id == class_id).collect();
    let mut taken = vec![false; gt_idx.len()];
    let mut flags = Vec::new();
    for i in score_order(dets) {
        if dets[i].class_id != class_id {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (t, &j) in gt_idx.iter().enumerate() {
            if taken[t] {
                continue;
            }
            let iou = iou_unchecked(&dets[i], &gt[j], mode);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, t));
            }
        }
        match best {
            Some((_, t)) => {
                taken[t] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// Precision/recall after each ranked detection.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-points interpolated AP over ranked TP/FP flags.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(flags, num_gt);
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub name: String,
    pub num_gt: usize,
    pub num_det: usize,
    /// One per threshold.
    pub ap: Vec<f64>,
    /// `(recall, precision)` samples per threshold.
    pub curves: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Unweighted class mean per threshold.
    pub map: Vec<f64>,
}

impl EvalReport {
    /// mAP at `threshold`, if it was evaluated.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == threshold).map(|i| self.map[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,name,num_gt,num_det");
        for t in &self.thresholds {
            write!(s, ",ap@{t}").unwrap();
        }
        s.push('\n');
        for (c, r) in self.classes.iter().enumerate() {
            write!(s, "{c},{},{},{}", r.name, r.num_gt, r.num_det).unwrap();
            for ap in &r.ap {
                write!(s, ",{ap:.6}").unwrap();
            }
            s.push('\n');
        }
        let gt: usize = self.classes.iter().map(|r| r.num_gt).sum();
        let det: usize = self.classes.iter().map(|r| r.num_det).sum();
        write!(s, "mean,all,{gt},{det}").unwrap();
        for m in &self.map {
            write!(s, ",{m:.6}").unwrap();
        }
        s.push('\n');
        s
    }

    /// Precision-recall plot of one class, one series per threshold.
    pub fn pr_svg(&self, class: usize) -> String {
        let r = &self.classes[class];
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .thresholds
            .iter()
            .zip(&r.curves)
            .map(|(t, c)| (format!("IoU {t}"), c.clone()))
            .collect();
        svg_line_plot(&format!("{} precision/recall", r.name), "recall", "precision", &series)
    }

    /// Writes `report.csv` and one `pr_<class>.svg` per class.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.csv");
        std::fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))?;
        for c in 0..self.classes.len() {
            let p = dir.join(format!("pr_{}.svg", self.classes[c].name));
            std::fs::write(&p, self.pr_svg(c)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Evaluates detections against ground truth, pooling detections across
/// scenes before ranking. Scenes without a result count as empty.
pub fn evaluate(
    results: &[DetectionResult],
    gts: &[Scene],
    class_names: &[String],
    thresholds: &[f64],
    mode: IouMode,
) -> Result<EvalReport> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        bail!(Argument, "IoU threshold {t} outside (0, 1]");
    }
    let index: HashMap<&str, usize> = gts.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut per_scene: Vec<Vec<Box3D>> = vec![vec![]; gts.len()];
    for r in results {
        let Some(&i) = index.get(r.scene_id.as_str()) else {
            bail!(Data, "detections for unknown scene {:?}", r.scene_id);
        };
        per_scene[i].extend_from_slice(&r.boxes);
    }
    let nc = class_names.len();
    for b in per_scene.iter().flatten().chain(gts.iter().flat_map(|s| &s.boxes)) {
        if b.class_id >= nc {
            bail!(Data, "class id {} out of range for {nc} classes", b.class_id);
        }
    }
    let mut classes = Vec::with_capacity(nc);
    for (c, name) in class_names.iter().enumerate() {
        let num_gt = gts.iter().flat_map(|s| &s.boxes).filter(|b| b.class_id == c).count();
        let num_det = per_scene.iter().flatten().filter(|b| b.class_id == c).count();
        let mut ap = Vec::with_capacity(thresholds.len());
        let mut curves = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            // (score, scene, rank within scene, flag)
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::with_capacity(num_det);
            for (s, dets) in per_scene.iter().enumerate() {
                let flags = match_detections(dets, &gts[s].boxes, t, c, mode);
                let scores = score_order(dets).into_iter().filter(|&i| dets[i].class_id == c).map(|i| dets[i].score);
                for (r, (score, f)) in scores.zip(flags).enumerate() {
                    pooled.push((score, s, r, f));
                }
            }
            pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
            ap.push(average_precision(&flags, num_gt));
            curves.push(pr_curve(&flags, num_gt));
        }
        classes.push(ClassReport {
            name: name.clone(),
            num_gt,
            num_det,
            ap,
            curves,
        });
    }
    let map = (0..thresholds.len())
        .map(|t| {
            if nc == 0 {
                0.0
            } else {
                classes.iter().map(|r| r.ap[t]).sum::<f64>() / nc as f64
            }
        })
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        map,
    })
}

pub const DETECTIONS_HEADER: &str = "# scene class score cx cy cz l h w yaw stage";

/// One line per box: scene id, class, score, center, size, yaw, stage.
pub fn format_detections(results: &[DetectionResult]) -> String {
    let mut s = format!("{DETECTIONS_HEADER}\n");
    for r in results {
        for (b, st) in r.boxes.iter().zip(&r.stages) {
            let [x, y, z] = b.center;
            let [l, h, w] = b.size;
            writeln!(s, "{} {} {} {x} {y} {z} {l} {h} {w} {} {st}", r.scene_id, b.class_id, b.score, b.yaw).unwrap();
        }
    }
    s
}

/// Parses [`format_detections`] output. The stage column is optional and
/// defaults to zero; results keep the order in which scenes first appear.
pub fn parse_detections(text: &str) -> Result<Vec<DetectionResult>> {
    let mut out: Vec<DetectionResult> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("detections line {}: {what}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 && f.len() != 11 {
            return Err(bad(&format!("expected 10 or 11 fields, found {}", f.len())));
        }
        let class: usize = f[1].parse().map_err(|_| bad("bad class"))?;
        let mut v = [0.0; 8];
        for (k, x) in v.iter_mut().enumerate() {
            *x = f[2 + k].parse().map_err(|_| bad("bad number"))?;
        }
        let stage: usize = match f.get(10) {
            Some(s) => s.parse().map_err(|_| bad("bad stage"))?,
            None => 0,
        };
        let b = Box3D::new([v[1], v[2], v[3]], [v[4], v[5], v[6]], v[7], class, v[0]).map_err(|e| bad(&e.to_string()))?;
        if !(0.0..=1.0).contains(&b.score) {
            return Err(bad("score outside [0, 1]"));
        }
        let i = *index.entry(f[0].to_string()).or_insert_with(|| {
            out.push(DetectionResult::new(f[0], vec![], 0));
            out.len() - 1
        });
        out[i].boxes.push(b);
        out[i].stages.push(stage);
    }
    Ok(out)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

pub fn write_detections(path: &Path, results: &[DetectionResult]) -> Result<()> {
    std::fs::write(path, format_detections(results)).map_err(|e| Error::io(path, e))
}

pub const GROUND_TRUTH_HEADER: &str = "# scene class cx cy cz l h w yaw";

/// One line per box; scenes without boxes get a line holding only their id.
pub fn format_ground_truth(scenes: &[Scene]) -> String {
    let mut s = format!("{GROUND_TRUTH_HEADER}\n");
    for sc in scenes {
        if sc.boxes.is_empty() {
            writeln!(s, "{}", sc.id).unwrap();
        }
        for b in &sc.boxes {
            let [x, y, z] = b.center;
            let [l, h, w] = b.size;
            writeln!(s, "{} {} {x} {y} {z} {l} {h} {w} {}", sc.id, b.class_id, b.yaw).unwrap();
        }
    }
    s
}

/// Parses [`format_ground_truth`] output into point-free scenes, in order
/// of first appearance.
pub fn parse_ground_truth(text: &str) -> Result<Vec<Scene>> {
    let mut out: Vec<Scene> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("ground truth line {}: {what}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 1 && f.len() != 9 {
            return Err(bad(&format!("expected 1 or 9 fields, found {}", f.len())));
        }
        let i = *index.entry(f[0].to_string()).or_insert_with(|| {
            out.push(Scene {
                id: f[0].to_string(),
                points: vec![],
                features: None,
                boxes: vec![],
            });
            out.len() - 1
        });
        if f.len() == 1 {
            continue;
        }
        let class: usize = f[1].parse().map_err(|_| bad("bad class"))?;
        let mut v = [0.0; 7];
        for (k, x) in v.iter_mut().enumerate() {
            *x = f[2 + k].parse().map_err(|_| bad("bad number"))?;
        }
        let b = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class, 1.0).map_err(|e| bad(&e.to_string()))?;
        out[i].boxes.push(b);
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal SVG line chart; axes span the data range (at least `[0, 1]`).
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|s| &s.1).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, xml_escape(title)).unwrap();
    writeln!(
        s,
        r#"<path d="M{M} {} V{} H{}" fill="none" stroke="black"/>"#,
        M,
        H - M,
        W - M
    )
    .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, xml_escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    )
    .unwrap();
    for (v, x) in [(x0, M), (x1, W - M)] {
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - M + 16.0).unwrap();
    }
    for (v, y) in [(y0, H - M), (y1, M)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, M - 4.0, y + 4.0).unwrap();
    }
    for (k, (name, data)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = data
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, coords.join(" ")).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - M - 100.0,
            M + 14.0 * (k as f64 + 1.0),
            xml_escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
