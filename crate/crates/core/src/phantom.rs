//! Analytic test phantoms: an atlas volume with labels, plus a query produced
//! by a known pose and smooth random deformation.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::backend::Corruption;
use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::volume::{Geometry, LabelMask, Volume};
use crate::xform::{warp_mask, warp_volume, AffineTransform, DisplacementField, MaskInterp, RigidParams};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields))]
pub enum PhantomKind {
    /// Ball of the given radius (voxels) at the grid center. `shaded` replaces
    /// the flat interior with a smooth pattern that changes under rotation
    /// about any axis.
    Sphere { radius: f64, shaded: bool },
    /// Body ellipsoid containing an ellipsoidal organ (label 1) and a
    /// spherical organ (label 2).
    TwoOrgan,
    /// Trunk along z splitting into two branches, each splitting again.
    TubeTree,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DeformSpec {
    /// Largest displacement magnitude in voxels.
    pub max_disp_vox: f64,
    pub smooth_sigma_vox: f64,
    pub seed: u64,
}

impl Default for DeformSpec {
    fn default() -> Self {
        DeformSpec { max_disp_vox: 0.0, smooth_sigma_vox: 8.0, seed: 0 }
    }
}

/// Global pose applied on top of the deformation, about the grid center.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PoseSpec {
    pub rotation_deg: [f64; 3],
    pub translation_vox: [f64; 3],
    pub scale: [f64; 3],
}

impl Default for PoseSpec {
    fn default() -> Self {
        PoseSpec { rotation_deg: [0.0; 3], translation_vox: [0.0; 3], scale: [1.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    #[cfg_attr(feature = "serde", serde(default))]
    pub noise_sigma: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub deform: DeformSpec,
    #[cfg_attr(feature = "serde", serde(default))]
    pub pose: PoseSpec,
    /// Seed for the intensity noise.
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidConfig(alloc::format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.deform.max_disp_vox >= 0.0) || !(self.deform.smooth_sigma_vox >= 0.0) {
            return Err(Error::InvalidConfig("deformation magnitude and sigma must be >= 0".into()));
        }
        if self.pose.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("pose scale must be positive".into()));
        }
        Ok(())
    }
}

/// Atlas pair plus the query generated from it through `true_affine` and
/// `true_field` (query(x) = atlas(affine(x) + field(x))).
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub atlas_image: Volume,
    pub atlas_mask: LabelMask,
    pub query_image: Volume,
    pub query_mask: LabelMask,
    pub true_affine: AffineTransform,
    pub true_field: DisplacementField,
}

/// Approximate signed distance (voxels, negative inside) to an ellipsoid
/// surface; exact for spheres.
fn ellipsoid_sd(p: Vec3, c: Vec3, r: Vec3) -> f64 {
    let d = [(p[0] - c[0]) / r[0], (p[1] - c[1]) / r[1], (p[2] - c[2]) / r[2]];
    let rho = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    (rho - 1.0) * r[0].min(r[1]).min(r[2])
}

/// Partial-volume occupancy of a voxel at signed distance `sd`.
fn occupancy(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn segment_distance2(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = math::sub(b, a);
    let ap = math::sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Tube-tree segments in voxel coordinates for the given dims.
pub fn tube_tree_segments(dims: [usize; 3]) -> Vec<(Vec3, Vec3)> {
    let f = |a: usize, t: f64| t * (dims[a] - 1) as f64;
    let root = [f(0, 0.5), f(1, 0.5), f(2, 0.15)];
    let fork = [f(0, 0.5), f(1, 0.5), f(2, 0.45)];
    let left = [f(0, 0.3), f(1, 0.45), f(2, 0.65)];
    let right = [f(0, 0.7), f(1, 0.55), f(2, 0.65)];
    vec![
        (root, fork),
        (fork, left),
        (fork, right),
        (left, [f(0, 0.2), f(1, 0.3), f(2, 0.85)]),
        (left, [f(0, 0.25), f(1, 0.7), f(2, 0.85)]),
        (right, [f(0, 0.8), f(1, 0.35), f(2, 0.85)]),
        (right, [f(0, 0.75), f(1, 0.7), f(2, 0.85)]),
    ]
}

/// Tube radius in voxels for the tube tree.
pub fn tube_radius(dims: [usize; 3]) -> f64 {
    (dims.iter().copied().min().unwrap_or(16) as f64 / 20.0).max(1.2)
}

/// Noise-free atlas image and labels.
pub fn rasterize(kind: &PhantomKind, dims: [usize; 3]) -> Result<(Volume, LabelMask)> {
    let g = Geometry::with_dims(dims)?;
    let c = g.center();
    let n = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let mut img = vec![0.0f32; g.len()];
    let mut lab = vec![0u16; g.len()];
    let segments = tube_tree_segments(dims);
    let rt = tube_radius(dims);
    for idx in 0..g.len() {
        let v = g.coords(idx);
        let p = [v[0] as f64, v[1] as f64, v[2] as f64];
        let (value, label) = match kind {
            PhantomKind::Sphere { radius, shaded } => {
                let r = *radius;
                let sd = math::norm(math::sub(p, c)) - r;
                let mut v = occupancy(sd);
                if *shaded {
                    let d = math::sub(p, c);
                    let (x, y, z) = (d[0] / r, d[1] / r, d[2] / r);
                    v *= 0.5 + 0.3 * x + 0.3 * y * z;
                }
                (v, u16::from(sd <= 0.0))
            }
            PhantomKind::TwoOrgan => {
                let body = ellipsoid_sd(p, c, [0.42 * n[0], 0.36 * n[1], 0.42 * n[2]]);
                let o1 = ellipsoid_sd(p, [c[0] - 0.16 * n[0], c[1] + 0.04 * n[1], c[2]], [0.17 * n[0], 0.13 * n[1], 0.2 * n[2]]);
                let o2 = ellipsoid_sd(p, [c[0] + 0.17 * n[0], c[1] - 0.05 * n[1], c[2] + 0.05 * n[2]], [0.12 * n[0]; 3]);
                let v = 0.3 * occupancy(body) + 0.35 * occupancy(o1) + 0.7 * occupancy(o2);
                let l = if o1 <= 0.0 {
                    1
                } else if o2 <= 0.0 {
                    2
                } else {
                    0
                };
                (v, l)
            }
            PhantomKind::TubeTree => {
                let d2 = segments.iter().map(|&(a, b)| segment_distance2(p, a, b)).fold(f64::INFINITY, f64::min);
                let sd = libm::sqrt(d2) - rt;
                (occupancy(sd), u16::from(sd <= 0.0))
            }
        };
        img[idx] = value as f32;
        lab[idx] = label;
    }
    Ok((Volume::new(g, img)?, LabelMask::new(g, lab)?))
}

/// Separable Gaussian blur with edge clamping, truncated at 3 sigma.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let mut cur = data.to_vec();
    if !(sigma > 0.0) {
        return cur;
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let ksum: f64 = kernel.iter().sum();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut next = vec![0.0; cur.len()];
    for a in 0..3 {
        let n = dims[a] as isize;
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / strides[a]) % dims[a]) as isize;
            let base = idx as isize - pos * strides[a] as isize;
            let mut acc = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let q = (pos + ki as isize - radius).clamp(0, n - 1);
                acc += w * cur[(base + q * strides[a] as isize) as usize];
            }
            *out = acc / ksum;
        }
        core::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Gaussian-smoothed white-noise displacement on the full-resolution grid of
/// `geom`, scaled so its largest magnitude is `max_disp_vox` voxels.
pub fn smooth_random_field(geom: &Geometry, max_disp_vox: f64, sigma_vox: f64, seed: u64) -> Result<DisplacementField> {
    let control = DisplacementField::control_grid(geom, 1);
    if !(max_disp_vox > 0.0) {
        return DisplacementField::zeros(control);
    }
    // Noise is drawn on a grid padded by the kernel radius and cropped after
    // smoothing, so the field statistics do not depend on distance to the
    // border. Wide kernels work on a grid coarsened by sigma / 4 and are
    // interpolated back; below sigma 8 the stride is 1 and nothing changes.
    let stride = ((sigma_vox / 4.0) as usize).max(1);
    let cs = sigma_vox / stride as f64;
    let pad = libm::ceil(3.0 * cs) as usize;
    let cd = control.dims.map(|d| (d - 1).div_ceil(stride) + 1);
    let pd = [cd[0] + 2 * pad, cd[1] + 2 * pad, cd[2] + 2 * pad];
    let axis_weights = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..control.dims[a])
            .map(|c| {
                let (lo, rem) = (c / stride, c % stride);
                let hi = (lo + 1).min(cd[a] - 1);
                (lo + pad, hi + pad, rem as f64 / stride as f64)
            })
            .collect()
    };
    let wx = [axis_weights(0), axis_weights(1), axis_weights(2)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = control.len();
    let mut comps = Vec::with_capacity(3);
    for _ in 0..3 {
        let noise: Vec<f64> = (0..pd[0] * pd[1] * pd[2]).map(|_| rng.sample(StandardNormal)).collect();
        let smooth = gaussian_smooth(&noise, pd, cs);
        let at = |i: usize, j: usize, k: usize| smooth[i + pd[0] * (j + pd[1] * k)];
        let mut crop = Vec::with_capacity(n);
        for idx in 0..n {
            let c = control.coords(idx);
            let ((x0, x1, fx), (y0, y1, fy), (z0, z1, fz)) = (wx[0][c[0]], wx[1][c[1]], wx[2][c[2]]);
            if stride == 1 {
                crop.push(at(x0, y0, z0));
                continue;
            }
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let plane = |k: usize| lerp(lerp(at(x0, y0, k), at(x1, y0, k), fx), lerp(at(x0, y1, k), at(x1, y1, k), fx), fy);
            crop.push(lerp(plane(z0), plane(z1), fz));
        }
        comps.push(crop);
    }
    let max = (0..n).map(|i| math::norm([comps[0][i], comps[1][i], comps[2][i]])).fold(0.0, f64::max);
    let s = if max > 0.0 { max_disp_vox / max } else { 0.0 };
    let u = (0..n)
        .map(|i| [comps[0][i] * s * geom.spacing[0], comps[1][i] * s * geom.spacing[1], comps[2][i] * s * geom.spacing[2]])
        .collect();
    DisplacementField::new(control, u)
}

/// Pose about `center`: rotation (intrinsic XYZ) after per-axis scaling.
pub fn pose_transform(pose: &PoseSpec, geom: &Geometry) -> AffineTransform {
    let deg = core::f64::consts::PI / 180.0;
    let r = RigidParams { euler_xyz: [pose.rotation_deg[0] * deg, pose.rotation_deg[1] * deg, pose.rotation_deg[2] * deg], translation_frac: [0.0; 3] }
        .rotation();
    let mut m = r;
    for row in m.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= pose.scale[j];
        }
    }
    AffineTransform {
        matrix: m,
        translation_mm: [
            pose.translation_vox[0] * geom.spacing[0],
            pose.translation_vox[1] * geom.spacing[1],
            pose.translation_vox[2] * geom.spacing[2],
        ],
        center: geom.center(),
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (clean, atlas_mask) = rasterize(&spec.kind, spec.dims)?;
    let g = *clean.geometry();
    let atlas_image = if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sigma = spec.noise_sigma;
        let data = clean.data().iter().map(|&v| (v as f64 + sigma * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
        Volume::new(g, data)?
    } else {
        clean
    };
    let true_affine = pose_transform(&spec.pose, &g);
    let true_field = smooth_random_field(&g, spec.deform.max_disp_vox, spec.deform.smooth_sigma_vox, spec.deform.seed)?;
    let query_image = warp_volume(&atlas_image, &true_affine, Some(&true_field), &g);
    let query_mask = warp_mask(&atlas_mask, &true_affine, Some(&true_field), &g, MaskInterp::Nearest);
    Ok(Phantom { atlas_image, atlas_mask, query_image, query_mask, true_affine, true_field })
}

/// Ten bundled atlas/query pairs mixing pose, scale and smooth deformation.
pub fn phantom_suite(n: usize) -> Vec<PhantomSpec> {
    let dims = [n; 3];
    let mut out = Vec::with_capacity(10);
    for i in 0..10u64 {
        let fi = i as f64;
        let kind = match i % 3 {
            0 => PhantomKind::TwoOrgan,
            1 => PhantomKind::Sphere { radius: 0.28 * n as f64, shaded: true },
            _ => PhantomKind::TwoOrgan,
        };
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        out.push(PhantomSpec {
            kind,
            dims,
            noise_sigma: 0.02,
            deform: DeformSpec { max_disp_vox: n as f64 / 16.0, smooth_sigma_vox: n as f64 / 8.0, seed: 100 + i },
            pose: PoseSpec {
                rotation_deg: [2.0 * sign, -3.0 + 0.5 * fi, sign * (6.0 + fi)],
                translation_vox: [sign * n as f64 / 16.0, -(n as f64) / 24.0, (n as f64 / 32.0) * sign],
                scale: [1.0 + 0.01 * fi + 0.06, 1.0 - 0.05, 1.0 + 0.02 * sign],
            },
            seed: 200 + i,
        });
    }
    out
}

/// Two-organ pair whose backend stand-in misses the smaller organ while the
/// atlas keeps both, so each source is right where the other is wrong.
pub struct ComplementaryScenario {
    pub phantom: Phantom,
    /// Oracle corruption that drops exactly the second-largest component of a
    /// two-component mask.
    pub corruption: Corruption,
}

/// First seed whose draws keep component 1 and drop component 2 at
/// probability 0.5.
fn drop_second_seed() -> u64 {
    (0u64..)
        .find(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            a >= 0.5 && b < 0.5
        })
        .expect("some seed qualifies")
}

pub fn complementary_scenario(n: usize, seed: u64) -> Result<ComplementaryScenario> {
    let nf = n as f64;
    let spec = PhantomSpec {
        kind: PhantomKind::TwoOrgan,
        dims: [n; 3],
        noise_sigma: 0.02,
        deform: DeformSpec { max_disp_vox: nf / 16.0, smooth_sigma_vox: nf / 8.0, seed },
        pose: PoseSpec { rotation_deg: [0.0, 2.0, 4.0], translation_vox: [nf / 32.0, -nf / 48.0, 0.0], scale: [1.04, 0.97, 1.0] },
        seed: seed + 1,
    };
    let mut phantom = generate_phantom(&spec)?;
    phantom.atlas_mask = phantom.atlas_mask.binarized();
    phantom.query_mask = phantom.query_mask.binarized();
    let corruption = Corruption { drop_component_prob: 0.5, seed: drop_second_seed(), ..Corruption::default() };
    Ok(ComplementaryScenario { phantom, corruption })
}
