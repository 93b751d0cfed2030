//! Rigid-frame arithmetic.
//!
//! A [`Frame`] is a proper rigid transform `x -> R x + t`. Frames are attached
//! to every block of a molecule; local coordinates of a global point `x` in
//! frame `F` are `F⁻¹ ∘ x = Rᵀ (x - t)`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle a rotation vector maps to the identity.
pub const ROTVEC_ZERO_ANGLE: f64 = 1e-12;

/// Minimum angle (radians) between the two Gram-Schmidt input directions.
pub const GRAM_SCHMIDT_MIN_ANGLE: f64 = 1e-6;

/// Minimum eigenvalue gap of the centered covariance for a unique principal frame.
pub const PRINCIPAL_EIGEN_GAP: f64 = 1e-9;

/// Rigid transform with an orthonormal, right-handed rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Frame {
    fn default() -> Self {
        Self::identity()
    }
}

impl Frame {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Frame) -> Frame {
        Frame {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `(Rᵀ, -Rᵀ t)`.
    pub fn inverse(&self) -> Frame {
        let rt = self.rotation.transpose();
        Frame {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `R x + t`.
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Local coordinates of a global point, `Rᵀ (x - t)`.
    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(x - self.translation))
    }

    /// Pose of `other` expressed in this frame: `self⁻¹ ∘ other`.
    pub fn relative_to(&self, other: &Frame) -> Frame {
        let rt = self.rotation.transpose();
        Frame {
            rotation: rt * other.rotation,
            translation: rt * (other.translation - self.translation),
        }
    }

    /// Row-major flattening of the rotation matrix.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    /// Max-abs deviation of `RᵀR` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).amax()
    }
}

/// Axis-angle rotation stored as `axis * angle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector(pub Vec3);

impl RotationVector {
    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Unit quaternion `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// `[cos(θ/2), r̂ sin(θ/2)]` with `θ = |r|`.
    pub fn from_rotvec(r: &RotationVector) -> Self {
        let theta = r.angle();
        if theta < ROTVEC_ZERO_ANGLE {
            return Self::identity();
        }
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        Self {
            w: half.cos(),
            x: r.0.x * s,
            y: r.0.y * s,
            z: r.0.z * s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_rotation(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3::new(
            1.0 - 2.0 * y * y - 2.0 * z * z,
            2.0 * x * y - 2.0 * z * w,
            2.0 * x * z + 2.0 * y * w,
            2.0 * x * y + 2.0 * z * w,
            1.0 - 2.0 * x * x - 2.0 * z * z,
            2.0 * y * z - 2.0 * x * w,
            2.0 * x * z - 2.0 * y * w,
            2.0 * y * z + 2.0 * x * w,
            1.0 - 2.0 * x * x - 2.0 * y * y,
        )
    }

    /// Shepperd's method; the result has `w >= 0`.
    pub fn from_rotation(m: &Mat3) -> Self {
        let trace = m.trace();
        let q = if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            Self {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Self {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Self {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Self {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        let n = q.norm();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        Self {
            w: sign * q.w / n,
            x: sign * q.x / n,
            y: sign * q.y / n,
            z: sign * q.z / n,
        }
    }

    pub fn to_rotvec(&self) -> RotationVector {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < ROTVEC_ZERO_ANGLE {
            return RotationVector(Vec3::zeros());
        }
        let theta = 2.0 * s.atan2(self.w);
        RotationVector(v * (theta / s))
    }
}

/// Frame whose rotation is the axis-angle rotation `r`, placed at `t`.
pub fn rotvec_to_frame(r: &RotationVector, t: Vec3) -> Frame {
    if r.angle() < ROTVEC_ZERO_ANGLE {
        return Frame::from_translation(t);
    }
    Frame::new(Quaternion::from_rotvec(r).to_rotation(), t)
}

/// Orthonormal frame with first axis along `u` and second in the `(u, v)` plane.
pub fn gram_schmidt_frame(origin: Vec3, u: Vec3, v: Vec3) -> Result<Frame> {
    let (nu, nv) = (u.norm(), v.norm());
    if nu < 1e-12 || nv < 1e-12 {
        return Err(Error::DegenerateGeometry(format!(
            "zero-length frame direction (|u| = {nu:e}, |v| = {nv:e})"
        )));
    }
    let e1 = u / nu;
    let sin_angle = e1.cross(&(v / nv)).norm();
    if sin_angle < GRAM_SCHMIDT_MIN_ANGLE.sin() {
        return Err(Error::DegenerateGeometry(
            "frame directions are collinear".into(),
        ));
    }
    let e2 = (v - e1 * v.dot(&e1)).normalize();
    let e3 = e1.cross(&e2);
    Ok(Frame::new(Mat3::from_columns(&[e1, e2, e3]), origin))
}

/// Frame at the centroid whose axes are the principal axes of the centered
/// point cloud, ordered by descending variance.
///
/// Each of the first two axes points towards the side with positive third
/// moment of the projected coordinates, which keeps the frame equivariant
/// under rotations. When that moment vanishes the axis falls back to
/// "largest-magnitude component positive". The third axis is `e1 × e2`.
pub fn principal_frame(points: &[Vec3]) -> Result<Frame> {
    if points.is_empty() {
        return Err(Error::DegenerateGeometry("no points".into()));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let gap = (lambda[0] - lambda[1]).min(lambda[1] - lambda[2]);
    if gap < PRINCIPAL_EIGEN_GAP * lambda[0].max(1.0) {
        return Err(Error::DegenerateGeometry(format!(
            "principal axes ambiguous (eigenvalues {:.3e}, {:.3e}, {:.3e})",
            lambda[0], lambda[1], lambda[2]
        )));
    }

    let mut axes = [Vec3::zeros(); 2];
    for (slot, &idx) in axes.iter_mut().zip(order.iter()) {
        let e: Vec3 = eig.eigenvectors.column(idx).into_owned();
        let (mut skew, mut scale) = (0.0, 0.0);
        for p in points {
            let proj = (p - centroid).dot(&e);
            skew += proj * proj * proj;
            scale += proj.abs().powi(3);
        }
        let flip = if skew.abs() > 1e-9 * scale {
            skew < 0.0
        } else {
            let k = e.iamax();
            e[k] < 0.0
        };
        *slot = if flip { -e } else { e };
    }
    let e3 = axes[0].cross(&axes[1]);
    Ok(Frame::new(
        Mat3::from_columns(&[axes[0], axes[1], e3]),
        centroid,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..PI);
        rotvec_to_frame(&RotationVector(axis * angle), Vec3::zeros()).rotation
    }

    fn random_frame(rng: &mut impl Rng) -> Frame {
        let t = Vec3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        );
        Frame::new(random_rotation(rng), t)
    }

    /// 4×4 homogeneous form, used as an independent oracle.
    fn homogeneous(f: &Frame) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&f.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&f.translation);
        m
    }

    fn rz(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = Frame::new(rz(90.0), Vec3::new(1.0, 0.0, 0.0));
        let b = Frame::from_translation(Vec3::new(0.0, 1.0, 0.0));
        let c = a.compose(&b);
        let oracle = homogeneous(&a) * homogeneous(&b);
        assert!((homogeneous(&c) - oracle).amax() < 1e-15);
        assert!((c.translation - Vec3::zeros()).amax() < 1e-15);
        assert!((c.rotation - rz(90.0)).amax() < 1e-15);
    }

    #[test]
    fn inverse_matches_homogeneous_inverse() {
        let f = Frame::new(rz(90.0), Vec3::new(1.0, 2.0, 3.0));
        let inv = f.inverse();
        let oracle = homogeneous(&f).try_inverse().unwrap();
        assert!((homogeneous(&inv) - oracle).amax() < 1e-12);
        assert!((inv.rotation - rz(-90.0)).amax() < 1e-15);
    }

    #[test]
    fn identity_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng);
        assert_eq!(Frame::identity().compose(&f), f);
        assert_eq!(Frame::identity().inverse(), Frame::identity());
        let id = f.compose(&f.inverse());
        assert!((id.rotation - Mat3::identity()).amax() < 1e-12);
        assert!(id.translation.amax() < 1e-12);
        let back = f.inverse().inverse();
        assert!((back.rotation - f.rotation).amax() < 1e-12);
        assert!((back.translation - f.translation).amax() < 1e-12);
    }

    #[test]
    fn apply_round_trip_and_translation() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Frame::identity().apply(&x), x);
        let t = Vec3::new(-4.0, 0.5, 2.0);
        assert_eq!(Frame::from_translation(t).apply(&x), x + t);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let f = random_frame(&mut rng);
            let p = Vec3::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
            );
            assert!((f.inverse().apply(&f.apply(&p)) - p).amax() < 1e-12);
            assert!((f.to_local(&f.apply(&p)) - p).amax() < 1e-12);
        }
    }

    #[test]
    fn relative_frame_is_inverse_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random_frame(&mut rng), random_frame(&mut rng));
        let r1 = a.relative_to(&b);
        let r2 = a.inverse().compose(&b);
        assert!((r1.rotation - r2.rotation).amax() < 1e-12);
        assert!((r1.translation - r2.translation).amax() < 1e-12);
    }

    #[test]
    fn rotvec_zero_and_quarter_turn() {
        let f = rotvec_to_frame(&RotationVector(Vec3::zeros()), Vec3::zeros());
        assert_eq!(f.rotation, Mat3::identity());
        assert_eq!(
            Quaternion::from_rotvec(&RotationVector(Vec3::zeros())),
            Quaternion::identity()
        );
        let q = rotvec_to_frame(&RotationVector(Vec3::new(0.0, 0.0, PI / 2.0)), Vec3::zeros());
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((q.rotation - expected).amax() < 1e-15);
    }

    #[test]
    fn rotvec_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let f = rotvec_to_frame(&RotationVector(r), Vec3::zeros());
            assert!(f.orthogonality_error() < 1e-9);
            assert!((f.rotation.determinant() - 1.0).abs() < 1e-9);
            assert!((f.rotation * r - r).amax() < 1e-9);
            let q = Quaternion::from_rotvec(&RotationVector(r));
            assert!((q.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gram_schmidt_cases() {
        let f = gram_schmidt_frame(Vec3::zeros(), Vec3::x(), Vec3::y()).unwrap();
        assert!((f.rotation - Mat3::identity()).amax() < 1e-15);
        let f = gram_schmidt_frame(Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0))
            .unwrap();
        assert!((f.rotation - Mat3::identity()).amax() < 1e-15);
        assert!(matches!(
            gram_schmidt_frame(Vec3::zeros(), Vec3::x(), Vec3::new(2.0, 0.0, 0.0)),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            gram_schmidt_frame(Vec3::zeros(), Vec3::zeros(), Vec3::y()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn gram_schmidt_equivariance_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let o = Vec3::new(0.3, -1.0, 2.0);
        let u = Vec3::new(1.2, 0.4, -0.3);
        let v = Vec3::new(-0.2, 1.1, 0.5);
        let base = gram_schmidt_frame(o, u, v).unwrap();
        let scaled = gram_schmidt_frame(o, u * 3.5, v * 0.2).unwrap();
        assert!((base.rotation - scaled.rotation).amax() < 1e-12);
        for _ in 0..100 {
            let g = random_frame(&mut rng);
            let f = gram_schmidt_frame(g.apply(&o), g.rotation * u, g.rotation * v).unwrap();
            assert!((f.rotation - g.rotation * base.rotation).amax() < 1e-12);
            assert!((f.translation - g.apply(&o)).amax() < 1e-12);
            assert!((f.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    /// Jacobi eigen-iteration on a 3×3 symmetric matrix, independent of nalgebra's solver.
    fn jacobi_top_eigenvector(mut a: Mat3) -> Vec3 {
        let mut v = Mat3::identity();
        for _ in 0..100 {
            let (mut p, mut q, mut best) = (0, 1, 0.0);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    if a[(i, j)].abs() > best {
                        best = a[(i, j)].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if best < 1e-15 {
                break;
            }
            let theta = 0.5 * (2.0 * a[(p, q)]).atan2(a[(q, q)] - a[(p, p)]);
            let (s, c) = theta.sin_cos();
            let mut j = Mat3::identity();
            j[(p, p)] = c;
            j[(q, q)] = c;
            j[(p, q)] = s;
            j[(q, p)] = -s;
            a = j.transpose() * a * j;
            v *= j;
        }
        let k = (0..3).max_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)])).unwrap();
        v.column(k).into_owned()
    }

    #[test]
    fn principal_axis_of_elongated_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<Vec3> = (0..40)
            .map(|i| {
                Vec3::new(
                    i as f64 * 0.5 + rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.1..0.1),
                )
            })
            .collect();
        let f = principal_frame(&pts).unwrap();
        let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
        let mut cov = Mat3::zeros();
        for p in &pts {
            cov += (p - c) * (p - c).transpose();
        }
        let oracle = jacobi_top_eigenvector(cov / pts.len() as f64);
        let e1: Vec3 = f.rotation.column(0).into_owned();
        assert!((e1.dot(&oracle).abs() - 1.0).abs() < 1e-9);
        assert!(e1.x.abs() > 0.99);
        assert!((f.translation - c).amax() < 1e-12);
        assert!(f.orthogonality_error() < 1e-9);
        assert!((f.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn principal_frame_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pts: Vec<Vec3> = (0..30)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-6.0..6.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let base = principal_frame(&pts).unwrap();
        for _ in 0..100 {
            let g = random_frame(&mut rng);
            let moved: Vec<Vec3> = pts.iter().map(|p| g.apply(p)).collect();
            let f = principal_frame(&moved).unwrap();
            assert!((f.rotation - g.rotation * base.rotation).amax() < 1e-9);
            assert!((f.translation - g.apply(&base.translation)).amax() < 1e-9);
        }
    }

    #[test]
    fn regular_tetrahedron_is_degenerate() {
        let pts = [
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(1.0, -1.0, -1.0),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(-1.0, -1.0, 1.0),
        ];
        assert!(matches!(
            principal_frame(&pts),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn compose_is_associative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_frame(&mut rng), random_frame(&mut rng), random_frame(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            proptest::prop_assert!((l.rotation - r.rotation).amax() < 1e-12);
            proptest::prop_assert!((l.translation - r.translation).amax() < 1e-12);
        }

        #[test]
        fn quaternion_round_trip(x in -1.8f64..1.8, y in -1.8f64..1.8, z in -1.8f64..1.8) {
            let r = Vec3::new(x, y, z);
            proptest::prop_assume!(r.norm() <= PI - 1e-6);
            let m = rotvec_to_frame(&RotationVector(r), Vec3::zeros()).rotation;
            let back = Quaternion::from_rotation(&m).to_rotvec();
            proptest::prop_assert!((back.0 - r).amax() < 1e-9);
        }
    }
}
