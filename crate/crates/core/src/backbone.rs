//! Point-set encoder-decoder: four set-abstraction stages followed by two
//! feature-propagation stages back up to the second stage's resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::Mlp;
use crate::diffcore::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::error::{bail, Result};
use crate::geometry::{dist2, farthest_point_sample, Point3};

/// Inverse-distance interpolation regulariser.
pub const INTERP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_point_counts: [usize; 4],
    pub stage_radii: [f64; 4],
    /// Must equal the third and second stage counts: each propagation
    /// stage lands on the positions of the matching abstraction stage.
    pub up_point_counts: [usize; 2],
    pub feature_width: usize,
    pub neighbors_per_ball: usize,
    /// Width of optional per-point input features.
    pub input_feature_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_point_counts: [512, 256, 128, 64],
            stage_radii: [0.2, 0.4, 0.8, 1.2],
            up_point_counts: [128, 256],
            feature_width: 64,
            neighbors_per_ball: 16,
            input_feature_width: 0,
        }
    }
}

impl BackboneConfig {
    /// The full-size layout: 2048/1024/512/256 centers, upsampled to 512 and 1024.
    pub fn paper_scale(feature_width: usize) -> Self {
        Self {
            stage_point_counts: [2048, 1024, 512, 256],
            stage_radii: [0.2, 0.4, 0.8, 1.2],
            up_point_counts: [512, 1024],
            feature_width,
            neighbors_per_ball: 32,
            input_feature_width: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stage_point_counts;
        if s[3] == 0 || s.windows(2).any(|w| w[0] <= w[1]) {
            bail!(Config, "stage_point_counts must be positive and strictly decreasing, got {s:?}");
        }
        let r = &self.stage_radii;
        if r[0] <= 0.0 || r.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "stage_radii must be positive and strictly increasing, got {r:?}");
        }
        if self.up_point_counts != [s[2], s[1]] {
            bail!(
                Config,
                "up_point_counts {:?} must equal the third and second stage counts [{}, {}]",
                self.up_point_counts,
                s[2],
                s[1]
            );
        }
        if self.feature_width == 0 || self.neighbors_per_ball == 0 {
            bail!(Config, "feature_width and neighbors_per_ball must be positive");
        }
        Ok(())
    }

    pub fn output_points(&self) -> usize {
        self.up_point_counts[1]
    }
}

/// Positions with graph-bound features of matching row count.
#[derive(Debug, Clone)]
pub struct PointFeatures {
    pub positions: Vec<Point3>,
    pub features: Var,
}

/// Up to `max_neighbors` indices within `radius` of `center`, nearest
/// first (ties by index). Short lists repeat their first entry; an empty
/// ball falls back to the nearest point.
pub fn ball_query(points: &[Point3], center: &Point3, radius: f64, max_neighbors: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        bail!(Argument, "ball_query on an empty point set");
    }
    if radius <= 0.0 || max_neighbors == 0 {
        bail!(Argument, "ball_query needs radius > 0 and max_neighbors >= 1");
    }
    let r2 = radius * radius;
    let mut found: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let d = dist2(p, center);
            (d <= r2).then_some((d, i))
        })
        .collect();
    if found.is_empty() {
        let nearest = points
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(p, center), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .unwrap();
        return Ok(vec![nearest.1; max_neighbors]);
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if found.len() > max_neighbors {
        found.select_nth_unstable_by(max_neighbors - 1, cmp);
        found.truncate(max_neighbors);
    }
    found.sort_unstable_by(cmp);
    let mut out: Vec<usize> = found.iter().map(|&(_, i)| i).collect();
    out.resize(max_neighbors, out[0]);
    Ok(out)
}

/// Normalised inverse-distance weights of the (up to) three nearest coarse
/// points for every fine point.
pub fn interpolation_weights(coarse: &[Point3], fine: &[Point3]) -> Result<Vec<Vec<(usize, f64)>>> {
    if coarse.is_empty() {
        bail!(Argument, "feature propagation needs a nonempty coarse set");
    }
    let k = coarse.len().min(3);
    let mut out = Vec::with_capacity(fine.len());
    for p in fine {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, c) in coarse.iter().enumerate() {
            let d = dist2(p, c);
            if best.len() < k || d < best[k - 1].0 {
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, i));
                best.truncate(k);
            }
        }
        let w: Vec<f64> = best.iter().map(|&(d, _)| 1.0 / (d.sqrt() + INTERP_EPS)).collect();
        let total: f64 = w.iter().sum();
        out.push(best.iter().zip(&w).map(|(&(_, i), &w)| (i, w / total)).collect());
    }
    Ok(out)
}

/// FPS centers, ball-query grouping with radius-normalised relative
/// coordinates, shared perceptron, max-pool.
pub fn set_abstraction(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    positions: &[Point3],
    features: Option<Var>,
    count: usize,
    radius: f64,
    neighbors: usize,
) -> Result<PointFeatures> {
    if count > positions.len() {
        bail!(Argument, "set abstraction wants {count} centers from {} points", positions.len());
    }
    let centers = farthest_point_sample(positions, count, 0)?;
    let mut flat = Vec::with_capacity(count * neighbors);
    let mut rel = Vec::with_capacity(count * neighbors * 3);
    for &c in &centers {
        let cp = positions[c];
        for j in ball_query(positions, &cp, radius, neighbors)? {
            let p = positions[j];
            rel.extend((0..3).map(|k| (p[k] - cp[k]) / radius));
            flat.push(j);
        }
    }
    let rel = g.constant(Tensor::new([count * neighbors, 3], rel)?);
    let grouped = match features {
        Some(f) => {
            let gathered = g.gather_rows(f, &flat)?;
            g.concat(&[rel, gathered])?
        }
        None => rel,
    };
    let h = mlp.forward(g, store, grouped)?;
    let pooled = g.group_max(h, neighbors)?;
    Ok(PointFeatures {
        positions: centers.iter().map(|&i| positions[i]).collect(),
        features: pooled,
    })
}

/// Interpolates coarse features onto `fine_positions`, concatenates the
/// skip features and applies the perceptron.
pub fn feature_propagation(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    coarse: &PointFeatures,
    fine_positions: &[Point3],
    skip: Option<Var>,
) -> Result<PointFeatures> {
    let w = interpolation_weights(&coarse.positions, fine_positions)?;
    let interp = g.row_mix(coarse.features, w)?;
    let x = match skip {
        Some(s) => g.concat(&[interp, s])?,
        None => interp,
    };
    Ok(PointFeatures {
        positions: fine_positions.to_vec(),
        features: mlp.forward(g, store, x)?,
    })
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    sa: Vec<Mlp>,
    fp: Vec<Mlp>,
}

impl Backbone {
    pub fn new<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_width;
        let grp = ParamGroup::Backbone;
        let sa = (0..4)
            .map(|i| {
                let cin = if i == 0 { cfg.input_feature_width } else { c };
                Mlp::new(store, &format!("backbone.sa{i}"), &[3 + cin, c, c], grp, rng)
            })
            .collect();
        let fp = (0..2)
            .map(|i| Mlp::new(store, &format!("backbone.fp{i}"), &[2 * c, c, c], grp, rng))
            .collect();
        Ok(Self { cfg: cfg.clone(), sa, fp })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: &[Point3],
        features: Option<&Tensor>,
    ) -> Result<PointFeatures> {
        let cfg = &self.cfg;
        if points.len() < cfg.stage_point_counts[0] {
            bail!(
                Argument,
                "cloud has {} points, the first stage needs {}",
                points.len(),
                cfg.stage_point_counts[0]
            );
        }
        let input = match features {
            Some(f) if f.cols() != cfg.input_feature_width || f.rows() != points.len() => bail!(
                Dimension,
                "input features {:?} do not match {} points of width {}",
                f.shape(),
                points.len(),
                cfg.input_feature_width
            ),
            Some(f) => Some(g.constant(f.clone())),
            None if cfg.input_feature_width > 0 => {
                bail!(Dimension, "backbone expects input features of width {}", cfg.input_feature_width)
            }
            None => None,
        };
        let mut levels: Vec<PointFeatures> = Vec::with_capacity(4);
        for i in 0..4 {
            let (pos, feat) = match levels.last() {
                Some(l) => (l.positions.as_slice(), Some(l.features)),
                None => (points, input),
            };
            let next = set_abstraction(
                g,
                store,
                &self.sa[i],
                pos,
                feat,
                cfg.stage_point_counts[i],
                cfg.stage_radii[i],
                cfg.neighbors_per_ball,
            )?;
            levels.push(next);
        }
        let up1 = feature_propagation(g, store, &self.fp[0], &levels[3], &levels[2].positions, Some(levels[2].features))?;
        feature_propagation(g, store, &self.fp[1], &up1, &levels[1].positions, Some(levels[1].features))
    }
}
