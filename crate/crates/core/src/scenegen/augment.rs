use rand::Rng;

use super::Scene;
use crate::geometry::{wrap_angle, Box3D, Point3};

const MAX_ROTATION_DEG: f64 = 5.0;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

/// One draw of the training augmentation: optional mirror of x, rotation
/// about the vertical axis, then uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        angle: 0.0,
        scale: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let max = MAX_ROTATION_DEG.to_radians();
        Self {
            flip: rng.random_bool(0.5),
            angle: rng.random_range(-max..=max),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }

    pub fn point(&self, p: &Point3) -> Point3 {
        let x = if self.flip { -p[0] } else { p[0] };
        let (s, c) = self.angle.sin_cos();
        [
            self.scale * (c * x + s * p[2]),
            self.scale * p[1],
            self.scale * (-s * x + c * p[2]),
        ]
    }

    pub fn boxed(&self, b: &Box3D) -> Box3D {
        let yaw = if self.flip { -b.yaw } else { b.yaw };
        Box3D {
            center: self.point(&b.center),
            size: b.size.map(|v| v * self.scale),
            yaw: if self.flip || self.angle != 0.0 {
                wrap_angle(yaw + self.angle)
            } else {
                b.yaw
            },
            ..*b
        }
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        Scene {
            id: scene.id.clone(),
            points: scene.points.iter().map(|p| self.point(p)).collect(),
            features: scene.features.clone(),
            boxes: scene.boxes.iter().map(|b| self.boxed(b)).collect(),
        }
    }
}

pub fn augment<R: Rng>(scene: &Scene, rng: &mut R) -> Scene {
    AugmentDraw::sample(rng).apply(scene)
}
