use crate::geom::{invert, wrap_angle, RigidTransform, Vec3};
use serde::{Deserialize, Serialize};

/// Upright box rotated by `yaw` about the vertical axis. `dims` holds
/// length (local x), height (y) and width (local z) in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vec3, dims: [f64; 3], yaw: f64) -> Self {
        Box3D { center, dims, yaw: wrap_angle(yaw) }
    }

    pub fn is_valid(&self) -> bool {
        self.dims.iter().all(|&d| d > 0.0 && d.is_finite())
            && self.center.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
    }

    /// Box-to-world pose.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, self.center)
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let local = invert(&self.pose()).apply(p);
        (0..3).all(|a| local[a].abs() <= self.dims[a] / 2.0)
    }

    /// Footprint corners as `(x, z)` pairs in cyclic order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let pose = self.pose();
        let (l, w) = (self.dims[0] / 2.0, self.dims[2] / 2.0);
        let local = [(l, w), (l, -w), (-l, -w), (-l, w)];
        let mut out = [[0.0; 2]; 4];
        for (o, (x, z)) in out.iter_mut().zip(local) {
            let p = pose.apply(&Vec3::new(x, 0.0, z));
            *o = [p.x, p.z];
        }
        out
    }

    /// Vertical extent `(bottom, top)`.
    pub fn y_range(&self) -> (f64, f64) {
        (self.center.y - self.dims[1] / 2.0, self.center.y + self.dims[1] / 2.0)
    }

    /// Moves the box rigidly; roll and pitch of `t` are discarded.
    pub fn transformed(&self, t: &RigidTransform) -> Box3D {
        Box3D::new(t.apply(&self.center), self.dims, self.yaw + t.yaw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprint_is_a_cycle() {
        let b = Box3D::new(Vec3::new(1.0, 0.5, 2.0), [4.0, 1.0, 2.0], 0.4);
        let f = b.footprint();
        let mut area = 0.0;
        for i in 0..4 {
            let (a, c) = (f[i], f[(i + 1) % 4]);
            area += a[0] * c[1] - c[0] * a[1];
        }
        assert!((area.abs() / 2.0 - 8.0).abs() < 1e-9, "{area}");
    }

    #[test]
    fn contains_and_transform() {
        let b = Box3D::new(Vec3::new(0.0, 0.75, 0.0), [4.0, 1.5, 2.0], 0.0);
        assert!(b.contains(&Vec3::new(1.9, 0.1, 0.9)));
        assert!(!b.contains(&Vec3::new(0.0, 0.0, 1.1)));
        let t = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vec3::new(1.0, 0.0, 0.0));
        let m = b.transformed(&t);
        assert!((m.center - Vec3::new(1.0, 0.75, 0.0)).norm() < 1e-12);
        assert!((m.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // the long axis now points along -z
        assert!(m.contains(&Vec3::new(1.0, 0.75, -1.9)));
        assert!(!m.contains(&Vec3::new(2.9, 0.75, 0.0)));
    }
}
