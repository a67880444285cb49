//! Synthetic indoor-like scenes: boxes resting on a floor, sampled as
//! surface shells plus uniform clutter.

mod augment;
mod io;

pub use augment::{augment, AugmentDraw};
pub use io::{decode_scene, encode_scene, read_dataset, read_scene, write_dataset, write_scene, Dataset, MANIFEST_FILE};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Rng64, Tensor};
use crate::error::{bail, Error, Result};
use crate::geometry::{iou_unchecked, point_in_box_eps, Box3D, IouMode, Point3};

/// Minimum number of surface points every generated box keeps.
pub const MIN_POINTS_PER_BOX: usize = 8;

/// Pairwise IoU bound between generated boxes.
pub const MAX_PLACEMENT_IOU: f64 = 0.05;

const PLACEMENT_RETRIES: usize = 200;
const SAMPLING_RETRIES: usize = 32;

/// Scene seeds of the validation split start here, keeping them disjoint
/// from the training seeds `0..n_train`.
pub const VAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: Vec<Point3>,
    /// Optional per-point extra features, `[N × width]`.
    pub features: Option<Tensor>,
    pub boxes: Vec<Box3D>,
}

impl Scene {
    pub fn num_points_in(&self, b: &Box3D, eps: f64) -> usize {
        self.points.iter().filter(|p| point_in_box_eps(p, b, eps)).count()
    }

    /// Checks box validity and the per-box point guarantee.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(f) = &self.features {
            if f.rows() != self.points.len() {
                bail!(Data, "scene {}: feature rows do not match point count", self.id);
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate()?;
            let n = self.num_points_in(b, 1e-9);
            if n < MIN_POINTS_PER_BOX {
                bail!(Data, "scene {}: box {} holds only {} points", self.id, i, n);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    /// Mean `(l, h, w)`.
    pub mean_size: [f64; 3],
    /// Relative half-width of the uniform size jitter.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub categories: Vec<Category>,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub points_per_scene: usize,
    pub clutter_fraction: f64,
    pub occlusion_fraction: f64,
    pub yaw: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let cat = |name: &str, mean_size| Category {
            name: name.into(),
            mean_size,
            spread: 0.1,
        };
        Self {
            seed: 0,
            bounds_min: [-2.0, 0.0, -2.0],
            bounds_max: [2.0, 2.0, 2.0],
            categories: vec![
                cat("table", [1.0, 0.4, 0.6]),
                cat("chair", [0.45, 0.5, 0.45]),
                cat("cabinet", [0.35, 0.8, 0.5]),
                cat("sofa", [1.3, 0.4, 0.7]),
            ],
            min_boxes: 1,
            max_boxes: 5,
            points_per_scene: 1024,
            clutter_fraction: 0.1,
            occlusion_fraction: 0.0,
            yaw: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("clutter", self.clutter_fraction), ("occlusion", self.occlusion_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                bail!(Config, "{name} fraction {f} outside [0, 1]");
            }
        }
        if self.occlusion_fraction >= 1.0 {
            bail!(Config, "occlusion fraction 1 leaves no surface points");
        }
        if self.categories.is_empty() {
            bail!(Config, "generator needs at least one category");
        }
        for c in &self.categories {
            if c.mean_size.iter().any(|&s| !(s > 0.0)) || !(0.0..1.0).contains(&c.spread) {
                bail!(Config, "category {} needs positive sizes and spread in [0, 1)", c.name);
            }
        }
        if self.min_boxes > self.max_boxes {
            bail!(Config, "min_boxes {} > max_boxes {}", self.min_boxes, self.max_boxes);
        }
        if (0..3).any(|k| self.bounds_max[k] <= self.bounds_min[k]) {
            bail!(Config, "empty scene bounds");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Per-class mean sizes, used as size templates.
    pub fn size_templates(&self) -> Vec<[f64; 3]> {
        self.categories.iter().map(|c| c.mean_size).collect()
    }

    fn iou_mode(&self) -> IouMode {
        if self.yaw {
            IouMode::Oriented
        } else {
            IouMode::AxisAligned
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for one scene, derived from the config seed and the scene seed.
pub fn scene_rng(cfg_seed: u64, scene_seed: u64) -> Rng64 {
    Rng64::seed_from_u64(splitmix64(cfg_seed ^ splitmix64(scene_seed)))
}

pub fn scene_id(scene_seed: u64) -> String {
    if scene_seed >= VAL_SEED_OFFSET {
        format!("val_{:06}", scene_seed - VAL_SEED_OFFSET)
    } else {
        format!("train_{:06}", scene_seed)
    }
}

fn place_boxes(cfg: &GeneratorConfig, scene_seed: u64, rng: &mut Rng64) -> Result<Vec<Box3D>> {
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mode = cfg.iou_mode();
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let class_id = rng.random_range(0..cfg.categories.len());
            let cat = &cfg.categories[class_id];
            let size = cat
                .mean_size
                .map(|m| m * (1.0 + cat.spread * rng.random_range(-1.0..=1.0)));
            let yaw = if cfg.yaw {
                rng.random_range(0.0..std::f64::consts::PI)
            } else {
                0.0
            };
            let reach = if cfg.yaw {
                [size[0].hypot(size[2]) / 2.0; 2]
            } else {
                [size[0] / 2.0, size[2] / 2.0]
            };
            let (lo, hi) = (cfg.bounds_min, cfg.bounds_max);
            if hi[0] - lo[0] < 2.0 * reach[0] || hi[2] - lo[2] < 2.0 * reach[1] || hi[1] - lo[1] < size[1] {
                continue;
            }
            let center = [
                rng.random_range(lo[0] + reach[0]..=hi[0] - reach[0]),
                lo[1] + size[1] / 2.0,
                rng.random_range(lo[2] + reach[1]..=hi[2] - reach[1]),
            ];
            let b = Box3D::new(center, size, yaw, class_id, 1.0)?;
            if boxes.iter().all(|o| iou_unchecked(o, &b, mode) < MAX_PLACEMENT_IOU) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation {
                seed: scene_seed,
                msg: format!("could not place box {} after {PLACEMENT_RETRIES} attempts", boxes.len()),
            });
        }
    }
    Ok(boxes)
}

/// Uniform sample on the surface of `b`.
fn sample_surface(b: &Box3D, rng: &mut Rng64) -> Point3 {
    let [l, h, w] = b.size;
    // Faces come in pairs with areas h·w (±x), l·w (±y), l·h (±z).
    let areas = [h * w, l * w, l * h];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && u >= areas[axis] {
        u -= areas[axis];
        axis += 1;
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut local = [0.0; 3];
    for (k, s) in b.size.iter().enumerate() {
        local[k] = if k == axis {
            sign * s / 2.0
        } else {
            rng.random_range(-s / 2.0..=s / 2.0)
        };
    }
    let (sn, cs) = b.yaw.sin_cos();
    [
        b.center[0] + cs * local[0] + sn * local[2],
        b.center[1] + local[1],
        b.center[2] - sn * local[0] + cs * local[2],
    ]
}

/// Generates one scene; deterministic in `(cfg.seed, scene_seed)`.
pub fn generate_scene(cfg: &GeneratorConfig, scene_seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, scene_seed);
    let boxes = place_boxes(cfg, scene_seed, &mut rng)?;

    let n = cfg.points_per_scene;
    let n_clutter = (n as f64 * cfg.clutter_fraction).round() as usize;
    let n_surface = n - n_clutter;
    let mut points = Vec::with_capacity(n);
    if !boxes.is_empty() {
        let share = n_surface / boxes.len();
        let extra = n_surface % boxes.len();
        for (i, b) in boxes.iter().enumerate() {
            let budget = share + usize::from(i < extra);
            let mut kept = Vec::new();
            for attempt in 0..SAMPLING_RETRIES {
                kept.clear();
                for _ in 0..budget {
                    let p = sample_surface(b, &mut rng);
                    if !rng.random_bool(cfg.occlusion_fraction) {
                        kept.push(p);
                    }
                }
                if kept.len() >= MIN_POINTS_PER_BOX {
                    break;
                }
                if attempt + 1 == SAMPLING_RETRIES {
                    return Err(Error::Generation {
                        seed: scene_seed,
                        msg: format!("box {i} kept fewer than {MIN_POINTS_PER_BOX} surface points"),
                    });
                }
            }
            points.extend_from_slice(&kept);
        }
    }
    // Dropped surface points become clutter so every scene has exactly n points.
    let (lo, hi) = (cfg.bounds_min, cfg.bounds_max);
    while points.len() < n {
        points.push([0, 1, 2].map(|k| rng.random_range(lo[k]..=hi[k])));
    }
    points.shuffle(&mut rng);

    let scene = Scene {
        id: scene_id(scene_seed),
        points,
        features: None,
        boxes,
    };
    scene.check_invariants().map_err(|e| Error::Generation {
        seed: scene_seed,
        msg: e.to_string(),
    })?;
    Ok(scene)
}

/// Train scenes use seeds `0..n_train`; validation scenes use
/// `VAL_SEED_OFFSET + (0..n_val)`.
pub fn generate_split(cfg: &GeneratorConfig, n_train: usize, n_val: usize) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let train = (0..n_train as u64)
        .map(|s| generate_scene(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..n_val as u64)
        .map(|s| generate_scene(cfg, VAL_SEED_OFFSET + s))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_in_box;

    fn on_surface(p: &Point3, b: &Box3D) -> bool {
        if !point_in_box_eps(p, b, 1e-9) {
            return false;
        }
        let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
        let (s, c) = b.yaw.sin_cos();
        let local = [c * d[0] - s * d[2], d[1], s * d[0] + c * d[2]];
        (0..3).any(|k| (local[k].abs() - b.size[k] / 2.0).abs() < 1e-9)
    }

    #[test]
    fn single_box_without_clutter_is_all_surface() {
        let cfg = GeneratorConfig {
            min_boxes: 1,
            max_boxes: 1,
            clutter_fraction: 0.0,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.points.len(), 1024);
        assert!(s.points.iter().all(|p| point_in_box_eps(p, &s.boxes[0], 1e-9)));
        assert!(s.points.iter().all(|p| on_surface(p, &s.boxes[0])));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig {
            yaw: true,
            ..Default::default()
        };
        assert_eq!(generate_scene(&cfg, 17).unwrap(), generate_scene(&cfg, 17).unwrap());
        assert_ne!(generate_scene(&cfg, 17).unwrap(), generate_scene(&cfg, 18).unwrap());
    }

    #[test]
    fn occlusion_halves_surface_points_within_three_sigma() {
        let base = GeneratorConfig {
            clutter_fraction: 0.0,
            ..Default::default()
        };
        let occ = GeneratorConfig {
            occlusion_fraction: 0.5,
            ..base.clone()
        };
        for seed in 0..20 {
            let a = generate_scene(&base, seed).unwrap();
            let b = generate_scene(&occ, seed).unwrap();
            let n = a.points.len() / a.boxes.len();
            for bx in &b.boxes {
                let full = a.points.iter().filter(|p| on_surface(p, bx)).count();
                assert!(full >= n, "unoccluded count {full} < budget {n}");
                let kept = b.points.iter().filter(|p| on_surface(p, bx)).count() as f64;
                let mean = n as f64 * 0.5;
                let sigma = (n as f64 * 0.25).sqrt();
                assert!((kept - mean).abs() <= 3.0 * sigma + 1.0, "kept {kept}, expected {mean} ± {}", 3.0 * sigma);
            }
        }
    }

    #[test]
    fn generated_scenes_satisfy_invariants() {
        for yaw in [false, true] {
            let cfg = GeneratorConfig {
                yaw,
                ..Default::default()
            };
            let mode = cfg.iou_mode();
            for seed in 0..40 {
                let s = generate_scene(&cfg, seed).unwrap();
                s.check_invariants().unwrap();
                assert!((1..=5).contains(&s.boxes.len()));
                for (i, a) in s.boxes.iter().enumerate() {
                    for b in &s.boxes[i + 1..] {
                        assert!(iou_unchecked(a, b, mode) < MAX_PLACEMENT_IOU);
                    }
                    assert!(point_in_box(&a.center, a));
                    for k in 0..3 {
                        assert!(a.center[k] >= cfg.bounds_min[k] && a.center[k] <= cfg.bounds_max[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn placement_failure_names_the_seed() {
        let cfg = GeneratorConfig {
            bounds_min: [-0.5, 0.0, -0.5],
            bounds_max: [0.5, 1.0, 0.5],
            min_boxes: 40,
            max_boxes: 40,
            ..Default::default()
        };
        match generate_scene(&cfg, 77) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 77),
            other => panic!("expected a generation error, got {other:?}"),
        }
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let cfg = GeneratorConfig::default();
        let (train, val) = generate_split(&cfg, 3, 0).unwrap();
        assert_eq!(train.len(), 3);
        assert!(val.is_empty());
        let (t2, v2) = generate_split(&cfg, 3, 2).unwrap();
        assert_eq!(t2, train);
        let train_ids: Vec<_> = t2.iter().map(|s| &s.id).collect();
        assert!(v2.iter().all(|s| !train_ids.contains(&&s.id)));
    }

    #[test]
    fn config_validation() {
        let bad = GeneratorConfig {
            clutter_fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&bad, 0), Err(Error::Config(_))));
    }
}
