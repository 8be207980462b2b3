//! Global (rigid / affine) transforms, dense displacement fields on a control
//! grid, backward warping, and the field smoothness energy.
//!
//! Warping is always backward: the output at target world point `x` is the
//! moving image sampled at `phi(x) = affine(x) + u(x)`.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3, IDENTITY3};
use crate::volume::{axis_cell, sample_with_gradient, Geometry, LabelMask, Volume};

/// Six rigid parameters: intrinsic X-Y-Z Euler angles (radians) and
/// translations as a fraction of the field-of-view extent per axis.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RigidParams {
    pub euler_xyz: [f64; 3],
    pub translation_frac: [f64; 3],
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

impl RigidParams {
    /// `R = Rx(a) * Ry(b) * Rz(c)`.
    pub fn rotation(&self) -> Mat3 {
        let [a, b, c] = self.euler_xyz;
        math::mat_mul(&math::mat_mul(&rot_x(a), &rot_y(b)), &rot_z(c))
    }

    /// Partial derivatives of the rotation matrix with respect to each angle.
    pub fn rotation_derivatives(&self) -> [Mat3; 3] {
        let [a, b, c] = self.euler_xyz;
        let (rx, ry, rz) = (rot_x(a), rot_y(b), rot_z(c));
        [
            math::mat_mul(&math::mat_mul(&d_rot_x(a), &ry), &rz),
            math::mat_mul(&math::mat_mul(&rx, &d_rot_y(b)), &rz),
            math::mat_mul(&math::mat_mul(&rx, &ry), &d_rot_z(c)),
        ]
    }

    /// Rigid transform about `center`, translations scaled by `extent` (mm).
    pub fn to_affine(&self, center: Vec3, extent: Vec3) -> AffineTransform {
        AffineTransform {
            matrix: self.rotation(),
            translation_mm: [
                self.translation_frac[0] * extent[0],
                self.translation_frac[1] * extent[1],
                self.translation_frac[2] * extent[2],
            ],
            center,
        }
    }
}

/// `p -> matrix * (p - center) + center + translation_mm`, world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AffineTransform {
    pub matrix: Mat3,
    pub translation_mm: Vec3,
    pub center: Vec3,
}

impl AffineTransform {
    pub fn identity(center: Vec3) -> Self {
        AffineTransform { matrix: IDENTITY3, translation_mm: [0.0; 3], center }
    }

    pub fn translation(t: Vec3, center: Vec3) -> Self {
        AffineTransform { matrix: IDENTITY3, translation_mm: t, center }
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let d = math::sub(p, self.center);
        let m = math::mat_vec(&self.matrix, d);
        [
            m[0] + self.center[0] + self.translation_mm[0],
            m[1] + self.center[1] + self.translation_mm[1],
            m[2] + self.center[2] + self.translation_mm[2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        math::determinant(&self.matrix)
    }

    /// `compose(outer, inner)(p) == outer(inner(p))`, expressed about the
    /// inner transform's center.
    pub fn compose(outer: &AffineTransform, inner: &AffineTransform) -> AffineTransform {
        let matrix = math::mat_mul(&outer.matrix, &inner.matrix);
        let shifted = math::sub(math::add(inner.center, inner.translation_mm), outer.center);
        let t = math::mat_vec(&outer.matrix, shifted);
        let translation_mm = [
            t[0] + outer.center[0] + outer.translation_mm[0] - inner.center[0],
            t[1] + outer.center[1] + outer.translation_mm[1] - inner.center[1],
            t[2] + outer.center[2] + outer.translation_mm[2] - inner.center[2],
        ];
        AffineTransform { matrix, translation_mm, center: inner.center }
    }

    /// `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<AffineTransform> {
        let inv = math::inverse(&self.matrix)?;
        let t = math::mat_vec(&inv, self.translation_mm);
        Some(AffineTransform { matrix: inv, translation_mm: [-t[0], -t[1], -t[2]], center: self.center })
    }

    /// Same mapping, re-expressed about a different center.
    pub fn recentered(&self, center: Vec3) -> AffineTransform {
        let image = self.apply(center);
        AffineTransform { matrix: self.matrix, translation_mm: math::sub(image, center), center }
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().chain(&self.translation_mm).chain(&self.center).all(|v| v.is_finite())
    }
}

/// Displacement vectors (mm) on a control grid, trilinearly upsampled when
/// evaluated at arbitrary world points.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    geom: Geometry,
    u: Vec<Vec3>,
}

/// Eight control points and trilinear weights for one world point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CellWeights {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl DisplacementField {
    pub fn new(geom: Geometry, u: Vec<Vec3>) -> Result<Self> {
        geom.validate()?;
        if geom.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGeometry(alloc::format!("control grid needs >= 2 points per axis, got {:?}", geom.dims)));
        }
        if u.len() != geom.len() {
            return Err(Error::LengthMismatch { expected: geom.len(), actual: u.len() });
        }
        if let Some(i) = u.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(DisplacementField { geom, u })
    }

    pub fn zeros(geom: Geometry) -> Result<Self> {
        Self::new(geom, vec![[0.0; 3]; geom.len()])
    }

    /// Control grid covering `target` with `factor` voxels per control cell
    /// (`factor = 1` is full resolution).
    pub fn control_grid(target: &Geometry, factor: usize) -> Geometry {
        let f = factor.max(1);
        let mut dims = [0; 3];
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            dims[a] = ((target.dims[a] - 1).div_ceil(f) + 1).max(2);
            spacing[a] = target.spacing[a] * f as f64;
        }
        Geometry { dims, spacing, origin: target.origin }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn values(&self) -> &[Vec3] {
        &self.u
    }

    pub fn into_values(self) -> Vec<Vec3> {
        self.u
    }

    #[inline]
    pub(crate) fn weights(geom: &Geometry, p: Vec3) -> CellWeights {
        let c = geom.world_to_voxel(p);
        let (x0, x1, fx, _) = axis_cell(c[0], geom.dims[0]);
        let (y0, y1, fy, _) = axis_cell(c[1], geom.dims[1]);
        let (z0, z1, fz, _) = axis_cell(c[2], geom.dims[2]);
        let nx = geom.dims[0];
        let nxy = nx * geom.dims[1];
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        CellWeights {
            idx: [
                x0 + nx * y0 + nxy * z0,
                x1 + nx * y0 + nxy * z0,
                x0 + nx * y1 + nxy * z0,
                x1 + nx * y1 + nxy * z0,
                x0 + nx * y0 + nxy * z1,
                x1 + nx * y0 + nxy * z1,
                x0 + nx * y1 + nxy * z1,
                x1 + nx * y1 + nxy * z1,
            ],
            w: [gx * gy * gz, fx * gy * gz, gx * fy * gz, fx * fy * gz, gx * gy * fz, fx * gy * fz, gx * fy * fz, fx * fy * fz],
        }
    }

    #[inline]
    pub(crate) fn interpolate(u: &[Vec3], cw: &CellWeights) -> Vec3 {
        let mut out = [0.0; 3];
        for n in 0..8 {
            let w = cw.w[n];
            let v = u[cw.idx[n]];
            out[0] += w * v[0];
            out[1] += w * v[1];
            out[2] += w * v[2];
        }
        out
    }

    /// Displacement (mm) at a world point; edge-clamped outside the grid.
    pub fn at_world(&self, p: Vec3) -> Vec3 {
        Self::interpolate(&self.u, &Self::weights(&self.geom, p))
    }

    /// Evaluates this field at the points of another control grid.
    pub fn resampled(&self, geom: &Geometry) -> Result<DisplacementField> {
        let mut u = Vec::with_capacity(geom.len());
        for idx in 0..geom.len() {
            let c = geom.coords(idx);
            let p = geom.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            u.push(self.at_world(p));
        }
        DisplacementField::new(*geom, u)
    }

    /// Largest displacement magnitude in mm.
    pub fn max_norm_mm(&self) -> f64 {
        self.u.iter().map(|&v| math::norm(v)).fold(0.0, f64::max)
    }

    /// Largest displacement magnitude measured in voxels of `image`.
    pub fn max_norm_voxels(&self, image: &Geometry) -> f64 {
        self.u
            .iter()
            .map(|v| math::norm([v[0] / image.spacing[0], v[1] / image.spacing[1], v[2] / image.spacing[2]]))
            .fold(0.0, f64::max)
    }
}

/// Sampling position of every target voxel, in moving-image voxel units.
fn for_each_sample_point(
    target: &Geometry,
    moving: &Geometry,
    t: &AffineTransform,
    field: Option<&DisplacementField>,
    mut f: impl FnMut(usize, Vec3),
) {
    let mut idx = 0;
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                let x = target.voxel_to_world([i as f64, j as f64, k as f64]);
                let mut phi = t.apply(x);
                if let Some(fld) = field {
                    phi = math::add(phi, fld.at_world(x));
                }
                f(idx, moving.world_to_voxel(phi));
                idx += 1;
            }
        }
    }
}

/// Backward-warps `moving` onto `target` with trilinear interpolation.
pub fn warp_volume(moving: &Volume, t: &AffineTransform, field: Option<&DisplacementField>, target: &Geometry) -> Volume {
    let mut data = vec![0.0f32; target.len()];
    let dims = moving.dims();
    for_each_sample_point(target, moving.geometry(), t, field, |idx, q| {
        data[idx] = sample_with_gradient(moving.data(), &dims, q).0 as f32;
    });
    Volume::new(*target, data).expect("warp of a finite volume is finite")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum MaskInterp {
    #[default]
    Nearest,
    /// Per-label indicators warped trilinearly, then argmax (ties to the
    /// lower label id).
    LinearThreshold,
}

#[inline]
fn nearest_index(q: f64, n: usize) -> usize {
    let r = libm::floor(q + 0.5);
    if r <= 0.0 {
        0
    } else if r >= (n - 1) as f64 {
        n - 1
    } else {
        r as usize
    }
}

pub fn warp_mask(
    moving: &LabelMask,
    t: &AffineTransform,
    field: Option<&DisplacementField>,
    target: &Geometry,
    mode: MaskInterp,
) -> LabelMask {
    let mg = *moving.geometry();
    let labels = moving.labels();
    let mut out = vec![0u16; target.len()];
    match mode {
        MaskInterp::Nearest => {
            for_each_sample_point(target, &mg, t, field, |idx, q| {
                let i = nearest_index(q[0], mg.dims[0]);
                let j = nearest_index(q[1], mg.dims[1]);
                let k = nearest_index(q[2], mg.dims[2]);
                out[idx] = labels[mg.index(i, j, k)];
            });
        }
        MaskInterp::LinearThreshold => {
            let unit = Geometry { dims: mg.dims, spacing: [1.0; 3], origin: [0.0; 3] };
            for_each_sample_point(target, &mg, t, field, |idx, q| {
                let cw = DisplacementField::weights(&unit, q);
                let mut acc: [(u16, f64); 8] = [(u16::MAX, 0.0); 8];
                let mut used = 0;
                for n in 0..8 {
                    let l = labels[cw.idx[n]];
                    match acc[..used].iter_mut().find(|(al, _)| *al == l) {
                        Some(slot) => slot.1 += cw.w[n],
                        None => {
                            acc[used] = (l, cw.w[n]);
                            used += 1;
                        }
                    }
                }
                let mut best = acc[0];
                for &(l, w) in &acc[1..used] {
                    if w > best.1 || (w == best.1 && l < best.0) {
                        best = (l, w);
                    }
                }
                out[idx] = best.0;
            });
        }
    }
    LabelMask::new(*target, out).expect("target geometry is valid")
}

/// Sum over axes of the mean (over forward-difference pairs along that axis)
/// of the squared per-mm difference, summed over the three components.
pub fn smoothness_energy(field: &DisplacementField) -> f64 {
    smoothness_energy_and_gradient(&field.geom, &field.u, None)
}

/// Energy and its exact gradient with respect to every control displacement.
pub fn smoothness_gradient(field: &DisplacementField) -> (f64, Vec<Vec3>) {
    let mut g = vec![[0.0; 3]; field.u.len()];
    let e = smoothness_energy_and_gradient(&field.geom, &field.u, Some(&mut g));
    (e, g)
}

pub(crate) fn smoothness_energy_and_gradient(geom: &Geometry, u: &[Vec3], mut grad: Option<&mut [Vec3]>) -> f64 {
    let [nx, ny, nz] = geom.dims;
    let strides = [1, nx, nx * ny];
    let mut energy = 0.0;
    for a in 0..3 {
        let n = geom.dims[a];
        if n < 2 {
            continue;
        }
        let pairs = (geom.len() / n) * (n - 1);
        let h2 = geom.spacing[a] * geom.spacing[a];
        let scale = 1.0 / (pairs as f64 * h2);
        let mut axis_sum = 0.0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let pos = [i, j, k];
                    if pos[a] + 1 >= n {
                        continue;
                    }
                    let p = geom.index(i, j, k);
                    let q = p + strides[a];
                    for c in 0..3 {
                        let d = u[q][c] - u[p][c];
                        axis_sum += d * d;
                        if let Some(g) = grad.as_deref_mut() {
                            let gd = 2.0 * d * scale;
                            g[q][c] += gd;
                            g[p][c] -= gd;
                        }
                    }
                }
            }
        }
        energy += axis_sum * scale;
    }
    energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    fn random_affine(rng: &mut ChaCha8Rng) -> AffineTransform {
        let mut m = IDENTITY3;
        for row in &mut m {
            for v in row.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        AffineTransform {
            matrix: m,
            translation_mm: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
            center: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        }
    }

    #[test]
    fn apply_examples() {
        let p = [1.5, -2.0, 3.0];
        assert_eq!(AffineTransform::identity([4.0, 5.0, 6.0]).apply(p), p);
        assert_eq!(AffineTransform::translation([1.0, 2.0, 3.0], [0.0; 3]).apply([0.0; 3]), [1.0, 2.0, 3.0]);
        let rz = RigidParams { euler_xyz: [0.0, 0.0, core::f64::consts::FRAC_PI_2], translation_frac: [0.0; 3] };
        let t = rz.to_affine([0.0; 3], [1.0; 3]);
        assert!(close(t.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], 1e-6));
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_affine(&mut rng);
        let id = AffineTransform::identity([0.0; 3]);
        let c = AffineTransform::compose(&id, &t);
        for _ in 0..5 {
            let p = [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)];
            assert!(close(c.apply(p), t.apply(p), 1e-12));
        }
        let inv = t.inverse().unwrap();
        let both = AffineTransform::compose(&t, &inv);
        for i in 0..3 {
            for j in 0..3 {
                assert!((both.matrix[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        let p = [3.0, -1.0, 2.0];
        assert!(close(both.apply(p), p, 1e-6));
    }

    #[test]
    fn compose_matches_pointwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (a, b) = (random_affine(&mut rng), random_affine(&mut rng));
        let ab = AffineTransform::compose(&a, &b);
        for _ in 0..20 {
            let p = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            assert!(close(ab.apply(p), a.apply(b.apply(p)), 1e-5));
        }
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let r = RigidParams { euler_xyz: [0.3, -0.2, 0.7], translation_frac: [0.0; 3] };
        let d = r.rotation_derivatives();
        let h = 1e-6;
        for a in 0..3 {
            let mut p = r;
            let mut m = r;
            p.euler_xyz[a] += h;
            m.euler_xyz[a] -= h;
            let (rp, rm) = (p.rotation(), m.rotation());
            for i in 0..3 {
                for j in 0..3 {
                    assert!(((rp[i][j] - rm[i][j]) / (2.0 * h) - d[a][i][j]).abs() < 1e-8);
                }
            }
        }
    }

    fn cube_geom(n: usize) -> Geometry {
        Geometry::with_dims([n, n, n]).unwrap()
    }

    #[test]
    fn identity_warp_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Geometry::new([6, 5, 4], [0.7, 1.3, 2.0], [-3.0, 1.0, 4.5]).unwrap();
        let v = Volume::from_fn(g, |_| rng.random::<f32>() * 100.0 - 50.0).unwrap();
        let field = DisplacementField::zeros(DisplacementField::control_grid(&g, 2)).unwrap();
        let w = warp_volume(&v, &AffineTransform::identity(g.center()), Some(&field), &g);
        assert_eq!(w.data(), v.data());
        let m = LabelMask::from_fn(g, |[i, j, k]| ((i + 2 * j + k) % 4) as u16).unwrap();
        for mode in [MaskInterp::Nearest, MaskInterp::LinearThreshold] {
            assert_eq!(warp_mask(&m, &AffineTransform::identity(g.center()), Some(&field), &g, mode), m);
        }
    }

    #[test]
    fn one_voxel_shift() {
        let g = cube_geom(8);
        let v = Volume::from_fn(g, |[i, j, k]| (i * i + 3 * j + 7 * k) as f32).unwrap();
        let t = AffineTransform::translation([1.0, 0.0, 0.0], g.center());
        let w = warp_volume(&v, &t, None, &g);
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..7 {
                    assert_eq!(w.get(i, j, k), v.get(i + 1, j, k));
                }
            }
        }
        let cube = LabelMask::from_fn(g, |[i, j, k]| u16::from((2..5).contains(&i) && (2..5).contains(&j) && (2..5).contains(&k))).unwrap();
        let wm = warp_mask(&cube, &t, None, &g, MaskInterp::Nearest);
        let expect = LabelMask::from_fn(g, |[i, j, k]| u16::from((1..4).contains(&i) && (2..5).contains(&j) && (2..5).contains(&k))).unwrap();
        assert_eq!(wm, expect);
    }

    #[test]
    fn affine_warp_of_ramp_matches_closed_form() {
        let g = Geometry::new([12, 10, 9], [1.0, 1.5, 0.8], [2.0, -1.0, 0.0]).unwrap();
        let (a, b, c, d) = (0.3, -0.2, 0.5, 1.0);
        let ramp = |p: Vec3| a * p[0] + b * p[1] + c * p[2] + d;
        let v = Volume::from_fn(g, |[i, j, k]| ramp(g.voxel_to_world([i as f64, j as f64, k as f64])) as f32).unwrap();
        let rp = RigidParams { euler_xyz: [0.05, -0.04, 0.08], translation_frac: [0.01, -0.02, 0.0] };
        let mut t = rp.to_affine(g.center(), g.extent());
        t.matrix[0][0] *= 1.05;
        t.matrix[1][2] += 0.03;
        let w = warp_volume(&v, &t, None, &g);
        let mut checked = 0;
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            let x = g.voxel_to_world([i as f64, j as f64, k as f64]);
            let phi = t.apply(x);
            let q = g.world_to_voxel(phi);
            if (0..3).all(|ax| q[ax] >= 0.0 && q[ax] <= (g.dims[ax] - 1) as f64) {
                assert!((w.data()[idx] as f64 - ramp(phi)).abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > g.len() / 2);
    }

    #[test]
    fn half_voxel_slab_linear_threshold() {
        let g = cube_geom(8);
        let slab = LabelMask::from_fn(g, |[i, _, _]| u16::from(i < 4)).unwrap();
        let t = AffineTransform::translation([0.5, 0.0, 0.0], g.center());
        let w = warp_mask(&slab, &t, None, &g, MaskInterp::LinearThreshold);
        // indicator-warp oracle: indicator(i + 0.5) >= 0.5 strictly above ties
        for idx in 0..g.len() {
            let [i, _, _] = g.coords(idx);
            let x = (i as f64 + 0.5).min(7.0);
            let x0 = (libm::floor(x) as usize).min(6);
            let f = x - x0 as f64;
            let ind = |n: usize| if n < 4 { 1.0 } else { 0.0 };
            let fg = ind(x0) * (1.0 - f) + ind(x0 + 1) * f;
            let expect = u16::from(fg > 1.0 - fg);
            assert_eq!(w.labels()[idx], expect, "voxel {i}");
        }
        assert_eq!(w.get(2, 0, 0), 1);
        assert_eq!(w.get(3, 0, 0), 0);
    }

    #[test]
    fn smoothness_examples() {
        let g = Geometry::new([5, 4, 3], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let c = DisplacementField::new(g, vec![[1.0, -2.0, 0.5]; g.len()]).unwrap();
        assert_eq!(smoothness_energy(&c), 0.0);
        let a = 0.3;
        let lin = DisplacementField::new(g, (0..g.len()).map(|i| [a * g.coords(i)[0] as f64 * g.spacing[0], 0.0, 0.0]).collect()).unwrap();
        assert!((smoothness_energy(&lin) - a * a).abs() < 1e-12);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = Geometry::new([5, 5, 5], [1.0, 1.5, 2.0], [0.0; 3]).unwrap();
        let u: Vec<Vec3> = (0..g.len()).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let f = DisplacementField::new(g, u.clone()).unwrap();
        let (_, grad) = smoothness_gradient(&f);
        let h = 1e-5;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for p in 0..g.len() {
            for c in 0..3 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[p][c] += h;
                um[p][c] -= h;
                let fd = (smoothness_energy(&DisplacementField::new(g, up).unwrap())
                    - smoothness_energy(&DisplacementField::new(g, um).unwrap()))
                    / (2.0 * h);
                num = num.max((fd - grad[p][c]).abs());
                den = den.max(fd.abs());
            }
        }
        assert!(num / den < 1e-6, "rel err {}", num / den);
    }

    proptest! {
        #[test]
        fn compose_is_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_affine(&mut rng), random_affine(&mut rng), random_affine(&mut rng));
            let l = AffineTransform::compose(&AffineTransform::compose(&a, &b), &c);
            let r = AffineTransform::compose(&a, &AffineTransform::compose(&b, &c));
            let p = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            prop_assert!(close(l.apply(p), r.apply(p), 1e-6));
        }

        #[test]
        fn nearest_warp_labels_subset(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = cube_geom(6);
            let m = LabelMask::from_fn(g, |_| [0u16, 2, 5][rng.random_range(0..3)]).unwrap();
            let t = random_affine(&mut rng);
            let w = warp_mask(&m, &t, None, &g, MaskInterp::Nearest);
            let src = m.label_set();
            prop_assert!(w.label_set().iter().all(|l| src.contains(l)));
        }

        #[test]
        fn smoothness_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = cube_geom(3);
            let f = DisplacementField::new(g, (0..27).map(|_| [rng.random::<f64>(), rng.random::<f64>(), 0.0]).collect()).unwrap();
            prop_assert!(smoothness_energy(&f) > 0.0);
        }
    }
}
