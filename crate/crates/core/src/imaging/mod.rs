//! Raster and flow containers, differentiable backward warping, and pyramids.
//!
//! All pixel data is 64-bit float in [0,1], row-major, channel-interleaved.
//! Warping uses bilinear sampling with clamp-to-edge and records an analytic
//! Jacobian so frame-space losses can be chained back to the flow field.

pub mod io;

use crate::error::{Error, Result};

/// An image raster. Values live in [0,1] after any load or synthesis op.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::InvalidParam(format!(
                "frame dims {width}x{height}x{channels}"
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    /// Builds a frame by evaluating `f(x, y, c)`; values are clamped to [0,1].
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut frame = Frame::new(width, height, channels)?;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(x, y, c);
                    if !v.is_finite() {
                        return Err(Error::NonFinite("frame synthesis".into()));
                    }
                    frame.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(frame)
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame data".into()));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// A per-pixel displacement field in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "flow component length for {width}x{height}"
            )));
        }
        let flow = FlowField {
            width,
            height,
            u,
            v,
        };
        flow.validate()?;
        Ok(flow)
    }

    /// Uniform displacement everywhere.
    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bound = self.width.max(self.height) as f64;
        for (a, b) in self.u.iter().zip(&self.v) {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite("flow field".into()));
            }
            if a.abs() > bound || b.abs() > bound {
                return Err(Error::InvalidParam(format!(
                    "flow displacement {a},{b} exceeds bound {bound}"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn u_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }
    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Returns `scale * self`, component-wise.
    pub fn scaled(&self, scale: f64) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| x * scale).collect(),
            v: self.v.iter().map(|x| x * scale).collect(),
        }
    }
}

/// Per-pixel record of the bilinear sample taken by [`backward_warp`]:
/// the four source pixels touched, their weights, and the derivative of the
/// warped value with respect to the local flow components.
#[derive(Debug, Clone)]
pub struct SampleJacobian {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Four source pixel indices (into `src.data` at channel 0) per output pixel.
    pub src_idx: Vec<[usize; 4]>,
    /// Matching bilinear weights; they sum to 1 per pixel.
    pub weights: Vec<[f64; 4]>,
    /// d(out)/d(u) per output sample, length w*h*c.
    pub d_du: Vec<f64>,
    /// d(out)/d(v) per output sample, length w*h*c.
    pub d_dv: Vec<f64>,
}

impl SampleJacobian {
    /// Accumulates the upstream frame-space gradient into flow-space gradients
    /// and (optionally) source-frame gradients.
    pub fn backprop(
        &self,
        upstream: &[f64],
        grad_u: &mut [f64],
        grad_v: &mut [f64],
        grad_src: Option<&mut [f64]>,
    ) {
        assert_eq!(upstream.len(), self.width * self.height * self.channels);
        let c = self.channels;
        for p in 0..self.width * self.height {
            let mut gu = 0.0;
            let mut gv = 0.0;
            for ch in 0..c {
                let g = upstream[p * c + ch];
                gu += g * self.d_du[p * c + ch];
                gv += g * self.d_dv[p * c + ch];
            }
            grad_u[p] += gu;
            grad_v[p] += gv;
        }
        if let Some(gs) = grad_src {
            for p in 0..self.width * self.height {
                let idx = &self.src_idx[p];
                let w = &self.weights[p];
                for ch in 0..c {
                    let g = upstream[p * c + ch];
                    for k in 0..4 {
                        gs[idx[k] * c + ch] += g * w[k];
                    }
                }
            }
        }
    }
}

/// Backward-warps `src` by `flow`: out(x,y) samples src at (x+u, y+v) with
/// bilinear interpolation, clamp-to-edge. Returns the warped frame and the
/// sample Jacobian. At exact integer coordinates the right-sided cell is used.
pub fn backward_warp(src: &Frame, flow: &FlowField) -> Result<(Frame, SampleJacobian)> {
    if src.width != flow.width || src.height != flow.height {
        return Err(Error::DimensionMismatch(format!(
            "warp src {}x{} vs flow {}x{}",
            src.width, src.height, flow.width, flow.height
        )));
    }
    let (w, h, c) = (src.width, src.height, src.channels);
    let mut out = Frame {
        width: w,
        height: h,
        channels: c,
        data: vec![0.0; w * h * c],
    };
    let mut jac = SampleJacobian {
        width: w,
        height: h,
        channels: c,
        src_idx: vec![[0; 4]; w * h],
        weights: vec![[0.0; 4]; w * h],
        d_du: vec![0.0; w * h * c],
        d_dv: vec![0.0; w * h * c],
    };
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let u = flow.u[p];
            let v = flow.v[p];
            if !u.is_finite() || !v.is_finite() {
                return Err(Error::NonFinite("flow field".into()));
            }
            let rx = x as f64 + u;
            let ry = y as f64 + v;
            // Derivative of the clamp: 1 inside the rectangle, 0 outside.
            let gate_x = if (0.0..=xmax).contains(&rx) { 1.0 } else { 0.0 };
            let gate_y = if (0.0..=ymax).contains(&ry) { 1.0 } else { 0.0 };
            let px = rx.clamp(0.0, xmax);
            let py = ry.clamp(0.0, ymax);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let i00 = y0 * w + x0;
            let i10 = y0 * w + x1;
            let i01 = y1 * w + x0;
            let i11 = y1 * w + x1;
            jac.src_idx[p] = [i00, i10, i01, i11];
            jac.weights[p] = [w00, w10, w01, w11];
            for ch in 0..c {
                let p00 = src.data[i00 * c + ch];
                let p10 = src.data[i10 * c + ch];
                let p01 = src.data[i01 * c + ch];
                let p11 = src.data[i11 * c + ch];
                let val = w00 * p00 + w10 * p10 + w01 * p01 + w11 * p11;
                out.data[p * c + ch] = val;
                let dpdx = (1.0 - fy) * (p10 - p00) + fy * (p11 - p01);
                let dpdy = (1.0 - fx) * (p01 - p00) + fx * (p11 - p10);
                jac.d_du[p * c + ch] = dpdx * gate_x;
                jac.d_dv[p * c + ch] = dpdy * gate_y;
            }
        }
    }
    Ok((out, jac))
}

fn blur_5tap(frame: &Frame) -> Frame {
    // Separable [1,4,6,4,1]/16, clamp-to-edge.
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h, c) = (frame.width, frame.height, frame.channels);
    let mut tmp = vec![0.0; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, coef) in K.iter().enumerate() {
                    let sx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                    acc += coef * frame.get(sx, y, ch);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, coef) in K.iter().enumerate() {
                    let sy = (y as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                    acc += coef * tmp[(sy * w + x) * c + ch];
                }
                out.set(x, y, ch, acc);
            }
        }
    }
    out
}

/// Bilinear resample to a new size (clamp-to-edge, pixel-center aligned).
pub fn resize_bilinear(frame: &Frame, new_w: usize, new_h: usize) -> Frame {
    let (w, h, c) = (frame.width, frame.height, frame.channels);
    let mut out = Frame {
        width: new_w,
        height: new_h,
        channels: c,
        data: vec![0.0; new_w * new_h * c],
    };
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    for y in 0..new_h {
        for x in 0..new_w {
            let px = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let py = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            for ch in 0..c {
                let val = (1.0 - fx) * (1.0 - fy) * frame.get(x0, y0, ch)
                    + fx * (1.0 - fy) * frame.get(x1, y0, ch)
                    + (1.0 - fx) * fy * frame.get(x0, y1, ch)
                    + fx * fy * frame.get(x1, y1, ch);
                out.set(x, y, ch, val);
            }
        }
    }
    out
}

/// Gaussian pyramid: level 0 is the input, each next level is a 5-tap blur
/// followed by bilinear resampling to round(dim * factor).
pub fn gaussian_pyramid(frame: &Frame, levels: usize, factor: f64) -> Result<Vec<Frame>> {
    if levels < 1 {
        return Err(Error::InvalidParam("pyramid levels must be >= 1".into()));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidParam(format!("pyramid factor {factor}")));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(frame.clone());
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let nw = (prev.width as f64 * factor).round() as usize;
        let nh = (prev.height as f64 * factor).round() as usize;
        if nw < 4 || nh < 4 {
            return Err(Error::InvalidParam(format!(
                "pyramid too deep: next level would be {nw}x{nh}"
            )));
        }
        let blurred = blur_5tap(prev);
        out.push(resize_bilinear(&blurred, nw, nh));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Frame {
        Frame::from_fn(w, h, c, |_, _, _| rng.gen_range(0.05..0.95)).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 9, 7, 3);
        let flow = FlowField::zeros(9, 7);
        let (out, jac) = backward_warp(&f, &flow).unwrap();
        assert_eq!(out.data(), f.data());
        // Right-sided cell convention: d/du at integer coords is the forward difference.
        for y in 0..7 {
            for x in 0..8 {
                for c in 0..3 {
                    let expect = f.get(x + 1, y, c) - f.get(x, y, c);
                    assert!((jac.d_du[(y * 9 + x) * 3 + c] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn integer_shift_reproduces_interior() {
        let f = Frame::from_fn(8, 8, 1, |x, _, _| x as f64 / 7.0).unwrap();
        let flow = FlowField::uniform(8, 8, 2.0, 0.0);
        let (out, _) = backward_warp(&f, &flow).unwrap();
        for y in 0..8 {
            for x in 0..6 {
                assert!((out.get(x, y, 0) - (x + 2) as f64 / 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_frame(&mut rng, 6, 6, 1);
        let mut flow = FlowField::zeros(6, 6);
        for p in 0..36 {
            flow.u_mut()[p] = rng.gen_range(-2.0..2.0);
            flow.v_mut()[p] = rng.gen_range(-2.0..2.0);
        }
        let (_, jac) = backward_warp(&f, &flow).unwrap();
        for w in &jac.weights {
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, 4, 4, 3);
        // Fractional parts bounded away from integer grid lines.
        let mut flow = FlowField::zeros(4, 4);
        for p in 0..16 {
            flow.u_mut()[p] = rng.gen_range(0.25..0.75) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            flow.v_mut()[p] = rng.gen_range(0.25..0.75) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let eps = 1e-4;
        let (_, jac) = backward_warp(&f, &flow).unwrap();
        for p in 0..16 {
            let x = p % 4;
            let y = p / 4;
            // Skip samples whose clamped position sits near the border kink.
            let px = x as f64 + flow.u()[p];
            let py = y as f64 + flow.v()[p];
            if !(0.2..=2.8).contains(&px) || !(0.2..=2.8).contains(&py) {
                continue;
            }
            let mut fp = flow.clone();
            fp.u_mut()[p] += eps;
            let mut fm = flow.clone();
            fm.u_mut()[p] -= eps;
            let (op, _) = backward_warp(&f, &fp).unwrap();
            let (om, _) = backward_warp(&f, &fm).unwrap();
            for c in 0..3 {
                let fd = (op.get(x, y, c) - om.get(x, y, c)) / (2.0 * eps);
                let an = jac.d_du[p * 3 + c];
                let denom = fd.abs().max(an.abs()).max(1e-9);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "pixel {p} ch {c}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn warp_is_linear_in_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_frame(&mut rng, 5, 5, 1);
        let b = random_frame(&mut rng, 5, 5, 1);
        let mut flow = FlowField::zeros(5, 5);
        for p in 0..25 {
            flow.u_mut()[p] = rng.gen_range(-1.5..1.5);
            flow.v_mut()[p] = rng.gen_range(-1.5..1.5);
        }
        let mix = Frame::from_data(
            5,
            5,
            1,
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 0.3 * x + 0.7 * y)
                .collect(),
        )
        .unwrap();
        let (wa, _) = backward_warp(&a, &flow).unwrap();
        let (wb, _) = backward_warp(&b, &flow).unwrap();
        let (wm, _) = backward_warp(&mix, &flow).unwrap();
        for p in 0..25 {
            assert!((wm.data()[p] - (0.3 * wa.data()[p] + 0.7 * wb.data()[p])).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_rejects_mismatch_and_nonfinite() {
        let f = Frame::new(4, 4, 1).unwrap();
        let flow = FlowField::zeros(5, 4);
        assert!(backward_warp(&f, &flow).is_err());
        let mut flow = FlowField::zeros(4, 4);
        flow.u_mut()[0] = f64::NAN;
        assert!(backward_warp(&f, &flow).is_err());
    }

    #[test]
    fn pyramid_of_constant_is_constant() {
        let f = Frame::from_fn(32, 32, 1, |_, _, _| 0.5).unwrap();
        let pyr = gaussian_pyramid(&f, 3, 0.5).unwrap();
        assert_eq!(pyr.len(), 3);
        for level in &pyr {
            for v in level.data() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_sizes_and_depth_errors() {
        let f = Frame::new(64, 64, 1).unwrap();
        let pyr = gaussian_pyramid(&f, 3, 0.5).unwrap();
        assert_eq!(
            pyr.iter().map(|l| l.width()).collect::<Vec<_>>(),
            vec![64, 32, 16]
        );
        let pyr1 = gaussian_pyramid(&f, 1, 0.5).unwrap();
        assert_eq!(pyr1[0], f);
        let small = Frame::new(8, 8, 1).unwrap();
        assert!(gaussian_pyramid(&small, 3, 0.5).is_err());
    }
}
