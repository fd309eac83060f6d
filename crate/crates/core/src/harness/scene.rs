//! Analytic scene rendering with exact motion models.
//!
//! A scene is a continuous texture on the plane moved by a closed-form motion
//! model. Frames are sampled directly from the continuous model at integer
//! times (never resampled from each other), so ground-truth frames and
//! pairwise flow fields are exact.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::Septuplet;
use crate::error::{Error, Result};
use crate::imaging::{FlowField, Frame};

pub const SEQUENCE_LEN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Translate,
    Rotate,
    Affine,
    Multiblob,
}

impl MotionKind {
    pub fn name(&self) -> &'static str {
        match self {
            MotionKind::Translate => "translate",
            MotionKind::Rotate => "rotate",
            MotionKind::Affine => "affine",
            MotionKind::Multiblob => "multiblob",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(MotionKind::Translate),
            "rotate" => Ok(MotionKind::Rotate),
            "affine" => Ok(MotionKind::Affine),
            "multiblob" => Ok(MotionKind::Multiblob),
            other => Err(Error::Format(format!("unknown motion kind: {other}"))),
        }
    }
}

/// Maximum displacement between consecutive frames, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityTier {
    Easy,
    Medium,
    Hard,
    Extreme,
}

impl VelocityTier {
    pub fn max_speed(&self) -> f64 {
        match self {
            VelocityTier::Easy => 1.0,
            VelocityTier::Medium => 2.0,
            VelocityTier::Hard => 4.0,
            VelocityTier::Extreme => 8.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VelocityTier::Easy => "easy",
            VelocityTier::Medium => "medium",
            VelocityTier::Hard => "hard",
            VelocityTier::Extreme => "extreme",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(VelocityTier::Easy),
            "medium" => Ok(VelocityTier::Medium),
            "hard" => Ok(VelocityTier::Hard),
            "extreme" => Ok(VelocityTier::Extreme),
            other => Err(Error::Format(format!("unknown velocity tier: {other}"))),
        }
    }
}

/// One continuous texture layer, defined on the whole plane.
#[derive(Debug, Clone)]
pub enum Texture {
    /// Isotropic Gaussian bumps: (cx, cy, sigma, amplitude).
    GaussianBlobs { blobs: Vec<(f64, f64, f64, f64)> },
    /// Plane waves: (kx, ky, phase, amplitude) with k in radians/pixel.
    Sinusoid { waves: Vec<(f64, f64, f64, f64)> },
    /// Smooth value noise on an integer lattice scaled by `cell` pixels.
    ValueNoise { cell: f64, amp: f64, seed: u64 },
}

fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

fn smootherstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl Texture {
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        match self {
            Texture::GaussianBlobs { blobs } => blobs
                .iter()
                .map(|&(cx, cy, sigma, amp)| {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum(),
            Texture::Sinusoid { waves } => waves
                .iter()
                .map(|&(kx, ky, phase, amp)| amp * (kx * x + ky * y + phase).sin())
                .sum(),
            Texture::ValueNoise { cell, amp, seed } => {
                let gx = x / cell;
                let gy = y / cell;
                let ix = gx.floor();
                let iy = gy.floor();
                let fx = smootherstep(gx - ix);
                let fy = smootherstep(gy - iy);
                let (ix, iy) = (ix as i64, iy as i64);
                let v00 = lattice_value(*seed, ix, iy);
                let v10 = lattice_value(*seed, ix + 1, iy);
                let v01 = lattice_value(*seed, ix, iy + 1);
                let v11 = lattice_value(*seed, ix + 1, iy + 1);
                let top = v00 + (v10 - v00) * fx;
                let bot = v01 + (v11 - v01) * fx;
                amp * (top + (bot - top) * fy)
            }
        }
    }
}

/// A moving Gaussian bump with its own constant velocity.
#[derive(Debug, Clone, Copy)]
struct MovingBlob {
    p0: [f64; 2],
    v: [f64; 2],
    sigma: f64,
    amp: f64,
}

#[derive(Debug, Clone)]
enum Motion {
    /// Constant translation v (pixels/frame).
    Translate { v: [f64; 2] },
    /// Rotation about `center` by `omega` radians/frame.
    Rotate { center: [f64; 2], omega: f64 },
    /// Linear warp M(t) = I + t A about `center`.
    Affine { center: [f64; 2], a: [[f64; 2]; 2] },
    /// Independently moving bumps over a constant background.
    Multiblob { blobs: Vec<MovingBlob> },
}

fn mat_apply(m: &[[f64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1],
        m[1][0] * p[0] + m[1][1] * p[1],
    ]
}

/// M(t) = I + t A.
fn affine_at(a: &[[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    [
        [1.0 + t * a[0][0], t * a[0][1]],
        [t * a[1][0], 1.0 + t * a[1][1]],
    ]
}

fn mat_inverse(m: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-9 {
        return Err(Error::InvalidParam("singular scene transform".into()));
    }
    Ok([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

impl Motion {
    /// Forward map of a scene point from time 0 coordinates to time t.
    /// Only meaningful for the global (non-multiblob) models.
    fn scene_to_frame(&self, t: f64, p: [f64; 2]) -> [f64; 2] {
        match self {
            Motion::Translate { v } => [p[0] + v[0] * t, p[1] + v[1] * t],
            Motion::Rotate { center, omega } => {
                let (s, c) = (omega * t).sin_cos();
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
            }
            Motion::Affine { center, a } => {
                let m = affine_at(a, t);
                let d = mat_apply(&m, [p[0] - center[0], p[1] - center[1]]);
                [center[0] + d[0], center[1] + d[1]]
            }
            Motion::Multiblob { .. } => unreachable!("multiblob has no global map"),
        }
    }

    /// Inverse map: frame-t pixel coordinates back to time-0 scene
    /// coordinates.
    fn frame_to_scene(&self, t: f64, p: [f64; 2]) -> Result<[f64; 2]> {
        match self {
            Motion::Translate { v } => Ok([p[0] - v[0] * t, p[1] - v[1] * t]),
            Motion::Rotate { center, omega } => {
                let (s, c) = (-omega * t).sin_cos();
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                Ok([center[0] + c * dx - s * dy, center[1] + s * dx + c * dy])
            }
            Motion::Affine { center, a } => {
                let inv = mat_inverse(&affine_at(a, t))?;
                let d = mat_apply(&inv, [p[0] - center[0], p[1] - center[1]]);
                Ok([center[0] + d[0], center[1] + d[1]])
            }
            Motion::Multiblob { .. } => unreachable!("multiblob has no global map"),
        }
    }
}

/// Scene recipe: motion family, velocity tier, and the seed that fixes all
/// randomized texture and motion parameters.
#[derive(Debug, Clone, Copy)]
pub struct ScenePattern {
    pub kind: MotionKind,
    pub tier: VelocityTier,
    pub seed: u64,
}

impl ScenePattern {
    pub fn from_tier(kind: MotionKind, tier: VelocityTier, seed: u64) -> Self {
        ScenePattern { kind, tier, seed }
    }
}

/// A rendered septuplet together with its closed-form motion model.
#[derive(Debug)]
pub struct SyntheticSequence {
    pub septuplet: Septuplet,
    width: usize,
    height: usize,
    motion: Motion,
}

impl SyntheticSequence {
    /// Exact flow from frame `from` to frame `to` (0-based indices) under
    /// the convention frame_from(x) = frame_to(x + u(x)).
    pub fn oracle_flow(&self, from: usize, to: usize) -> Result<FlowField> {
        if from >= SEQUENCE_LEN || to >= SEQUENCE_LEN {
            return Err(Error::InvalidParam(format!(
                "frame index out of range: {from} -> {to}"
            )));
        }
        let (w, h) = (self.width, self.height);
        let mut u = vec![0.0; w * h];
        let mut v = vec![0.0; w * h];
        match &self.motion {
            Motion::Multiblob { blobs } => {
                let dt = to as f64 - from as f64;
                let ta = from as f64;
                for y in 0..h {
                    for x in 0..w {
                        // Constant background: assign each pixel the motion
                        // of the blob nearest at the source time.
                        let mut best = f64::INFINITY;
                        let mut vel = [0.0, 0.0];
                        for b in blobs {
                            let cx = b.p0[0] + b.v[0] * ta;
                            let cy = b.p0[1] + b.v[1] * ta;
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            if d2 < best {
                                best = d2;
                                vel = b.v;
                            }
                        }
                        u[y * w + x] = vel[0] * dt;
                        v[y * w + x] = vel[1] * dt;
                    }
                }
            }
            motion => {
                for y in 0..h {
                    for x in 0..w {
                        let scene = motion.frame_to_scene(from as f64, [x as f64, y as f64])?;
                        let dst = motion.scene_to_frame(to as f64, scene);
                        u[y * w + x] = dst[0] - x as f64;
                        v[y * w + x] = dst[1] - y as f64;
                    }
                }
            }
        }
        FlowField::from_parts(w, h, u, v)
    }
}

fn unit_dir(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    [theta.cos(), theta.sin()]
}

/// Smooth global texture: low-frequency waves, a few bumps, and gentle value
/// noise, kept well inside [0, 1] so clamping never bites.
fn make_textures(rng: &mut ChaCha8Rng, width: usize, height: usize, seed: u64) -> Vec<Texture> {
    let span = width.min(height) as f64;
    let mut waves = Vec::new();
    for _ in 0..3 {
        let wavelength = rng.gen_range(span * 0.2..span * 0.5);
        let k = std::f64::consts::TAU / wavelength;
        let dir = unit_dir(rng);
        waves.push((
            k * dir[0],
            k * dir[1],
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.04..0.08),
        ));
    }
    let mut blobs = Vec::new();
    for _ in 0..4 {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        blobs.push((
            rng.gen_range(0.15 * width as f64..0.85 * width as f64),
            rng.gen_range(0.15 * height as f64..0.85 * height as f64),
            rng.gen_range(span * 0.05..span * 0.1),
            sign * rng.gen_range(0.08..0.16),
        ));
    }
    vec![
        Texture::Sinusoid { waves },
        Texture::GaussianBlobs { blobs },
        Texture::ValueNoise {
            cell: span * 0.15,
            amp: 0.05,
            seed,
        },
    ]
}

fn make_multiblob(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    speed: f64,
) -> Result<Vec<MovingBlob>> {
    let span = width.min(height) as f64;
    let sigma_lo = span * 0.03;
    let sigma_hi = span * 0.045;
    let n = 3;
    let horizon = (SEQUENCE_LEN - 1) as f64;
    // All blobs share a heading with small per-blob jitter, and are lined up
    // perpendicular to it. Relative drift is then dominated by the angle
    // jitter and stays well below the initial spacing, so trajectories never
    // approach each other.
    'attempt: for _ in 0..200 {
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let perp = [-heading.sin(), heading.cos()];
        let center = [width as f64 / 2.0, height as f64 / 2.0];
        let spacing = 0.3 * span;
        let mut blobs: Vec<MovingBlob> = Vec::with_capacity(n);
        for k in 0..n {
            let offset = (k as f64 - (n as f64 - 1.0) / 2.0) * spacing;
            let along = rng.gen_range(-0.08 * span..0.08 * span);
            let jitter = [
                rng.gen_range(-0.01 * span..0.01 * span),
                rng.gen_range(-0.01 * span..0.01 * span),
            ];
            let theta = heading + rng.gen_range(-0.06..0.06);
            let mag = speed * rng.gen_range(0.85..1.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            blobs.push(MovingBlob {
                p0: [
                    center[0] + perp[0] * offset + heading.cos() * along + jitter[0],
                    center[1] + perp[1] * offset + heading.sin() * along + jitter[1],
                ],
                v: [theta.cos() * mag, theta.sin() * mag],
                sigma: rng.gen_range(sigma_lo..sigma_hi),
                amp: sign * rng.gen_range(0.2..0.35),
            });
        }
        // Safety check that the nearest-blob flow labelling stays valid.
        for i in 0..n {
            for j in (i + 1)..n {
                let min_sep = 2.2 * (blobs[i].sigma + blobs[j].sigma);
                let steps = 12;
                for k in 0..=steps {
                    let t = horizon * k as f64 / steps as f64;
                    let dx = (blobs[i].p0[0] + blobs[i].v[0] * t)
                        - (blobs[j].p0[0] + blobs[j].v[0] * t);
                    let dy = (blobs[i].p0[1] + blobs[i].v[1] * t)
                        - (blobs[j].p0[1] + blobs[j].v[1] * t);
                    if (dx * dx + dy * dy).sqrt() < min_sep {
                        continue 'attempt;
                    }
                }
            }
        }
        return Ok(blobs);
    }
    Err(Error::InvalidParam(
        "could not place separated moving blobs; image too small for this tier".into(),
    ))
}

/// Renders a seven-frame sequence from the pattern. Frames are sampled from
/// the continuous scene model at t = 0..6; per-frame motion is bounded by
/// the tier speed, which must stay under a quarter of the short image side.
pub fn synth_sequence(
    pattern: &ScenePattern,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<SyntheticSequence> {
    if width < 16 || height < 16 {
        return Err(Error::InvalidParam(format!(
            "sequence size {width}x{height} below 16x16 minimum"
        )));
    }
    let speed = pattern.tier.max_speed();
    if speed > width.min(height) as f64 / 4.0 {
        return Err(Error::InvalidParam(format!(
            "per-frame motion {speed} exceeds quarter of image side"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pattern.seed.rotate_left(17));
    let center = [
        width as f64 / 2.0 + rng.gen_range(-0.1..0.1) * width as f64,
        height as f64 / 2.0 + rng.gen_range(-0.1..0.1) * height as f64,
    ];
    // Farthest corner distance bounds the displacement of rotation/affine.
    let r_max = [
        (0.0, 0.0),
        (width as f64 - 1.0, 0.0),
        (0.0, height as f64 - 1.0),
        (width as f64 - 1.0, height as f64 - 1.0),
    ]
    .iter()
    .map(|&(x, y)| ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt())
    .fold(0.0, f64::max);

    let motion = match pattern.kind {
        MotionKind::Translate => {
            let dir = unit_dir(&mut rng);
            Motion::Translate {
                v: [dir[0] * speed, dir[1] * speed],
            }
        }
        MotionKind::Rotate => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Motion::Rotate {
                center,
                omega: sign * speed / r_max,
            }
        }
        MotionKind::Affine => {
            // Scale/shear generator normalized so the fastest corner moves
            // about `speed` pixels on the first frame step.
            let raw: [[f64; 2]; 2] = [
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            ];
            let norm = (raw[0][0].powi(2) + raw[0][1].powi(2) + raw[1][0].powi(2)
                + raw[1][1].powi(2))
            .sqrt()
            .max(1e-9);
            let scale = speed / (r_max * norm);
            Motion::Affine {
                center,
                a: [
                    [raw[0][0] * scale, raw[0][1] * scale],
                    [raw[1][0] * scale, raw[1][1] * scale],
                ],
            }
        }
        MotionKind::Multiblob => Motion::Multiblob {
            blobs: make_multiblob(&mut rng, width, height, speed)?,
        },
    };

    let textures = match pattern.kind {
        MotionKind::Multiblob => Vec::new(),
        _ => make_textures(&mut rng, width, height, seed),
    };

    let mut frames = Vec::with_capacity(SEQUENCE_LEN);
    for t in 0..SEQUENCE_LEN {
        let frame = match &motion {
            Motion::Multiblob { blobs } => Frame::from_fn(width, height, 1, |x, y, _| {
                let mut val = 0.5;
                for b in blobs {
                    let cx = b.p0[0] + b.v[0] * t as f64;
                    let cy = b.p0[1] + b.v[1] * t as f64;
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    val += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                val
            })?,
            motion => {
                let mut data = vec![0.0; width * height];
                for y in 0..height {
                    for x in 0..width {
                        let scene =
                            motion.frame_to_scene(t as f64, [x as f64, y as f64])?;
                        let mut val = 0.5;
                        for tex in &textures {
                            val += tex.sample(scene[0], scene[1]);
                        }
                        data[y * width + x] = val;
                    }
                }
                Frame::from_data(width, height, 1, data.iter().map(|v| v.clamp(0.0, 1.0)).collect())?
            }
        };
        frames.push(frame);
    }
    let septuplet = Septuplet::new(frames)?;
    septuplet.reset_access_log();
    Ok(SyntheticSequence {
        septuplet,
        width,
        height,
        motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::backward_warp;

    fn warp_matches(seq: &SyntheticSequence, from: usize, to: usize, tol: f64) {
        let flow = seq.oracle_flow(from, to).unwrap();
        let (warped, _) = backward_warp(seq.septuplet.frame(to), &flow).unwrap();
        let a = seq.septuplet.frame(from);
        // Interior only: edge pixels can reference content outside the frame.
        let w = a.width();
        let h = a.height();
        let margin = 10;
        let mut max_err = 0.0f64;
        for y in margin..h - margin {
            for x in margin..w - margin {
                max_err = max_err.max((a.get(x, y, 0) - warped.get(x, y, 0)).abs());
            }
        }
        seq.septuplet.reset_access_log();
        assert!(max_err < tol, "{from}->{to} interior warp err {max_err}");
    }

    #[test]
    fn translate_oracle_flow_is_uniform_and_exact() {
        let pattern = ScenePattern::from_tier(MotionKind::Translate, VelocityTier::Medium, 7);
        let seq = synth_sequence(&pattern, 64, 64, 7).unwrap();
        let flow = seq.oracle_flow(0, 2).unwrap();
        let mag = (flow.u()[0].powi(2) + flow.v()[0].powi(2)).sqrt();
        assert!((mag - 4.0).abs() < 1e-9, "gap-2 medium magnitude {mag}");
        assert!(flow.u().iter().all(|&u| (u - flow.u()[0]).abs() < 1e-12));
        warp_matches(&seq, 0, 2, 2e-2);
    }

    #[test]
    fn rotate_and_affine_oracle_flows_warp_back() {
        for kind in [MotionKind::Rotate, MotionKind::Affine] {
            let pattern = ScenePattern::from_tier(kind, VelocityTier::Hard, 21);
            let seq = synth_sequence(&pattern, 64, 64, 21).unwrap();
            warp_matches(&seq, 2, 4, 3e-2);
            warp_matches(&seq, 4, 2, 3e-2);
        }
    }

    #[test]
    fn multiblob_oracle_flow_reconstructs_interior() {
        let pattern = ScenePattern::from_tier(MotionKind::Multiblob, VelocityTier::Easy, 3);
        let seq = synth_sequence(&pattern, 96, 96, 3).unwrap();
        warp_matches(&seq, 2, 4, 5e-2);
    }

    #[test]
    fn rendering_is_deterministic() {
        let pattern = ScenePattern::from_tier(MotionKind::Affine, VelocityTier::Easy, 11);
        let a = synth_sequence(&pattern, 32, 32, 11).unwrap();
        let b = synth_sequence(&pattern, 32, 32, 11).unwrap();
        for i in 0..SEQUENCE_LEN {
            assert_eq!(a.septuplet.frame(i).data(), b.septuplet.frame(i).data());
        }
        a.septuplet.reset_access_log();
        b.septuplet.reset_access_log();
    }

    #[test]
    fn midpoint_frame_is_held_out_frame() {
        let pattern = ScenePattern::from_tier(MotionKind::Rotate, VelocityTier::Medium, 5);
        let seq = synth_sequence(&pattern, 32, 32, 5).unwrap();
        // The frame between indices 2 and 4 is exactly the held-out frame.
        assert_eq!(
            seq.septuplet.held_out().data().len(),
            32 * 32
        );
        let flow_24 = seq.oracle_flow(2, 4).unwrap();
        let flow_23 = seq.oracle_flow(2, 3).unwrap();
        // Translation-like consistency: 2->3 flow is about half of 2->4.
        let mean = |f: &[f64]| f.iter().sum::<f64>() / f.len() as f64;
        assert!((mean(flow_23.u()) - 0.5 * mean(flow_24.u())).abs() < 0.05);
    }

    #[test]
    fn rejects_tiny_or_too_fast_scenes() {
        let p = ScenePattern::from_tier(MotionKind::Translate, VelocityTier::Easy, 1);
        assert!(synth_sequence(&p, 8, 8, 1).is_err());
        let p = ScenePattern::from_tier(MotionKind::Translate, VelocityTier::Extreme, 1);
        assert!(synth_sequence(&p, 24, 24, 1).is_err());
    }
}
