//! Oriented 3D boxes: exact rotated IoU, axis-aligned GIoU (plain and on the
//! tape), point containment and a Monte-Carlo IoU estimate.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_inputs, GradCase, Scope};
use crate::scalar::Scalar;
use crate::tape::{concat_cols, Mode, Var};
use crate::tensor::Tensor;

/// Tolerance for on-edge classification during polygon clipping.
pub const CLIP_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        r - 2.0 * PI
    } else {
        r
    }
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
        }
    }

    pub fn axis_aligned(center: [f64; 3], size: [f64; 3]) -> Self {
        Self::new(center[0], center[1], center[2], size[0], size[1], size[2], 0.0)
    }

    pub fn is_valid(&self) -> bool {
        let all = [self.x, self.y, self.z, self.l, self.w, self.h, self.theta];
        all.iter().all(|v| v.is_finite())
            && self.l > 0.0
            && self.w > 0.0
            && self.h > 0.0
            && (-PI..PI).contains(&self.theta)
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            x: self.x + d[0],
            y: self.y + d[1],
            z: self.z + d[2],
            ..*self
        }
    }

    /// Rotates the box about the vertical axis through the origin.
    pub fn rotated_about_origin(&self, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self::new(
            c * self.x - s * self.y,
            s * self.x + c * self.y,
            self.z,
            self.l,
            self.w,
            self.h,
            self.theta + yaw,
        )
    }

    fn z_range(&self) -> (f64, f64) {
        (self.z - self.h / 2.0, self.z + self.h / 2.0)
    }
}

/// Counter-clockwise footprint corners: `l` along the heading, `w` across it.
pub fn box_corners_bev(b: &Box3D) -> Vec<[f64; 2]> {
    corners_rel(b, 0.0, 0.0)
}

fn corners_rel(b: &Box3D, ox: f64, oy: f64) -> Vec<[f64; 2]> {
    let (s, c) = b.theta.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)]
        .iter()
        .map(|&(u, v)| [b.x - ox + c * u - s * v, b.y - oy + s * u + c * v])
        .collect()
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            let cur_in = dc >= -CLIP_EPS;
            let prev_in = dp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if prev_in {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Fixed processing order so that `f(a, b)` and `f(b, a)` agree bit for bit.
fn ordered<'a>(a: &'a Box3D, b: &'a Box3D) -> (&'a Box3D, &'a Box3D) {
    let ka = a.to_array().map(f64::to_bits);
    let kb = b.to_array().map(f64::to_bits);
    if ka <= kb {
        (a, b)
    } else {
        (b, a)
    }
}

/// Ground-plane overlap area of two oriented footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = ordered(a, b);
    // Work relative to one center to keep rounding independent of absolute position.
    let (ox, oy) = (a.x, a.y);
    let pa = corners_rel(a, ox, oy);
    let pb = corners_rel(b, ox, oy);
    let poly = clip_convex(&pa, &pb);
    let area = polygon_area(&poly);
    if area > 0.0 {
        area
    } else {
        0.0
    }
}

fn z_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Exact IoU of two yaw-rotated boxes.
pub fn rotated_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = ordered(a, b);
    let dz = z_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn aabb_extents(b: &Box3D) -> ([f64; 3], [f64; 3]) {
    let c = b.center();
    let s = [b.l, b.w, b.h];
    (
        [c[0] - s[0] / 2.0, c[1] - s[1] / 2.0, c[2] - s[2] / 2.0],
        [c[0] + s[0] / 2.0, c[1] + s[1] / 2.0, c[2] + s[2] / 2.0],
    )
}

/// `(iou, enclosing volume, union volume)` with yaw ignored.
fn aabb_parts(a: &Box3D, b: &Box3D) -> (f64, f64, f64) {
    let (amin, amax) = aabb_extents(a);
    let (bmin, bmax) = aabb_extents(b);
    let mut inter = 1.0;
    let mut encl = 1.0;
    for k in 0..3 {
        inter *= (amax[k].min(bmax[k]) - amin[k].max(bmin[k])).max(0.0);
        encl *= amax[k].max(bmax[k]) - amin[k].min(bmin[k]);
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union, encl, union)
}

/// IoU with yaw ignored.
pub fn aabb_iou(a: &Box3D, b: &Box3D) -> f64 {
    aabb_parts(a, b).0
}

/// Generalized IoU with yaw ignored, in `(-1, 1]`.
pub fn aabb_giou(a: &Box3D, b: &Box3D) -> f64 {
    let (iou, encl, union) = aabb_parts(a, b);
    iou - (encl - union) / encl
}

fn col<'t, T: Scalar>(v: Var<'t, T>, j: usize) -> Result<Var<'t, T>> {
    v.slice_cols(j, 1)
}

fn prod3<'t, T: Scalar>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    col(v, 0)?.mul(col(v, 1)?)?.mul(col(v, 2)?)
}

/// Differentiable axis-aligned GIoU of two `[1, 6]` rows `(x, y, z, l, w, h)`.
///
/// Ties in the min/max terms route the subgradient to `a`.
pub fn aabb_giou_tape<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let half = T::c(0.5);
    let (ca, sa) = (a.slice_cols(0, 3)?, a.slice_cols(3, 3)?);
    let (cb, sb) = (b.slice_cols(0, 3)?, b.slice_cols(3, 3)?);
    let (amin, amax) = (ca.sub(sa.scale(half)?)?, ca.add(sa.scale(half)?)?);
    let (bmin, bmax) = (cb.sub(sb.scale(half)?)?, cb.add(sb.scale(half)?)?);
    let inter_ext = amax.minimum(bmax)?.sub(amin.maximum(bmin)?)?.relu()?;
    let encl_ext = amax.maximum(bmax)?.sub(amin.minimum(bmin)?)?;
    let inter = prod3(inter_ext)?;
    let encl = prod3(encl_ext)?;
    let union = prod3(sa)?.add(prod3(sb)?)?.sub(inter)?;
    let iou = inter.div(union)?;
    let gap = encl.sub(union)?.div(encl)?;
    iou.sub(gap)?.reshape(&[1])
}

/// Row `(x, y, z, l, w, h)` of a box as a tape constant.
pub fn box_row<'t, T: Scalar>(tape: &'t crate::tape::Tape<T>, b: &Box3D) -> Result<Var<'t, T>> {
    tape.constant(Tensor::from_f64(vec![1, 6], &[b.x, b.y, b.z, b.l, b.w, b.h])?)
}

/// Inclusive containment of points in the box's yaw-aligned frame.
pub fn points_in_box(points: &[[f64; 3]], b: &Box3D) -> Vec<bool> {
    let (s, c) = b.theta.sin_cos();
    let (hl, hw, hh) = (b.l / 2.0 + CLIP_EPS, b.w / 2.0 + CLIP_EPS, b.h / 2.0 + CLIP_EPS);
    points
        .iter()
        .map(|p| {
            let (dx, dy, dz) = (p[0] - b.x, p[1] - b.y, p[2] - b.z);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            u.abs() <= hl && v.abs() <= hw && dz.abs() <= hh
        })
        .collect()
}

pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    points_in_box(&[p], b)[0]
}

/// Axis-aligned bounds `(min, max)` enclosing both boxes.
fn union_bounds(a: &Box3D, b: &Box3D) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for bx in [a, b] {
        for c in box_corners_bev(bx) {
            lo[0] = lo[0].min(c[0]);
            lo[1] = lo[1].min(c[1]);
            hi[0] = hi[0].max(c[0]);
            hi[1] = hi[1].max(c[1]);
        }
        let (z0, z1) = bx.z_range();
        lo[2] = lo[2].min(z0);
        hi[2] = hi[2].max(z1);
    }
    (lo, hi)
}

/// Monte-Carlo IoU estimate from uniform samples over the union's bounding volume.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = union_bounds(a, b);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        ];
        let (ia, ib) = (point_in_box(p, a), point_in_box(p, b));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Random box with sizes in `[lo, hi]` and center within `spread` of the origin.
pub fn random_box(rng: &mut ChaCha8Rng, spread: f64, lo: f64, hi: f64) -> Box3D {
    Box3D::new(
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
        rng.gen_range(lo..hi),
        rng.gen_range(-PI..PI),
    )
}

/// A pair whose per-axis overlaps all stay clear of zero, and whose extents
/// never coincide, so the GIoU is smooth at the sample.
fn smooth_pair(rng: &mut ChaCha8Rng) -> (Box3D, Box3D) {
    loop {
        let a = random_box(rng, 1.0, 0.5, 2.0);
        let b = random_box(rng, 1.0, 0.5, 2.0);
        let (amin, amax) = aabb_extents(&a);
        let (bmin, bmax) = aabb_extents(&b);
        let ok = (0..3).all(|k| {
            let ov = amax[k].min(bmax[k]) - amin[k].max(bmin[k]);
            ov.abs() > 1e-3 && (amax[k] - bmax[k]).abs() > 1e-3 && (amin[k] - bmin[k]).abs() > 1e-3
        });
        if ok {
            return (a, b);
        }
    }
}

fn row(b: &Box3D) -> Tensor<f64> {
    Tensor::from_f64(vec![1, 6], &[b.x, b.y, b.z, b.l, b.w, b.h]).expect("six values")
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("aabb_giou", Scope::Geometry, |rng, fault| {
            let (a, b) = smooth_pair(rng);
            let gt = row(&b);
            check_inputs(
                &[row(&a)],
                Mode::Eval,
                move |tape, v| {
                    let g = tape.constant(gt.clone())?;
                    aabb_giou_tape(v[0], g)
                },
                fault,
            )
        }),
        GradCase::new("aabb_giou_both", Scope::Geometry, |rng, fault| {
            let (a, b) = smooth_pair(rng);
            check_inputs(&[row(&a), row(&b)], Mode::Eval, |_, v| aabb_giou_tape(v[0], v[1]), fault)
        }),
        GradCase::new("aabb_giou_disjoint", Scope::Geometry, |rng, fault| {
            let (a, mut b) = smooth_pair(rng);
            b.x += 5.0;
            check_inputs(&[row(&a), row(&b)], Mode::Eval, |_, v| aabb_giou_tape(v[0], v[1]), fault)
        }),
        GradCase::new("box_params_concat", Scope::Geometry, |rng, fault| {
            // The center-plus-log-size parameterization used by the box head.
            let (a, b) = smooth_pair(rng);
            let center = Tensor::from_f64(vec![1, 3], &[a.x, a.y, a.z])?;
            let logsize = Tensor::from_f64(vec![1, 3], &[a.l.ln(), a.w.ln(), a.h.ln()])?;
            let gt = row(&b);
            check_inputs(
                &[center, logsize],
                Mode::Eval,
                move |tape, v| {
                    let pred = concat_cols(&[v[0], v[1].exp()?])?;
                    aabb_giou_tape(pred, tape.constant(gt.clone())?)
                },
                fault,
            )
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_corners() {
        let c = box_corners_bev(&Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0));
        assert_eq!(c, vec![[0.5, -0.5], [0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5]]);
        assert!((polygon_area(&c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn angle_wraps_half_open() {
        assert_eq!(normalize_angle(PI), -PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
    }
}
