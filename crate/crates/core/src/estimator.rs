//! Frozen motion estimator: deterministic coarse-to-fine Horn-Schunck between
//! two frames, linear-motion splitting to intermediate-time flows, and a fixed
//! analytic feature extractor (intensity + Sobel gradients of both frames).

use crate::error::{Error, Result};
use crate::imaging::{backward_warp, gaussian_pyramid, Frame, FlowField};

/// Tunable parameters of the frozen estimator. In end-to-end adaptation mode
/// these are the optimisation target; otherwise they never change.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub smoothness: f64,
    pub levels: usize,
    pub iters_per_level: usize,
    pub scale_factor: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        EstimatorParams {
            smoothness: 0.5,
            levels: 4,
            iters_per_level: 40,
            scale_factor: 0.5,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.smoothness < 0.0 || !self.smoothness.is_finite() {
            return Err(Error::InvalidParam(format!(
                "smoothness {} must be >= 0",
                self.smoothness
            )));
        }
        if self.levels < 1 || self.iters_per_level < 1 {
            return Err(Error::InvalidParam(
                "levels and iters_per_level must be >= 1".into(),
            ));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(Error::InvalidParam(format!(
                "scale_factor {} must be in (0,1)",
                self.scale_factor
            )));
        }
        Ok(())
    }

    /// Flat key=value serialization.
    pub fn to_config_string(&self) -> String {
        format!(
            "smoothness={}\nlevels={}\niters_per_level={}\nscale_factor={}\n",
            self.smoothness, self.levels, self.iters_per_level, self.scale_factor
        )
    }

    pub fn from_config_str(s: &str) -> Result<Self> {
        let mut params = EstimatorParams::default();
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line: {line}")))?;
            let bad = |line: &str| Error::Format(format!("bad config value: {line}"));
            match key.trim() {
                "smoothness" => params.smoothness = value.trim().parse().map_err(|_| bad(line))?,
                "levels" => params.levels = value.trim().parse().map_err(|_| bad(line))?,
                "iters_per_level" => {
                    params.iters_per_level = value.trim().parse().map_err(|_| bad(line))?
                }
                "scale_factor" => params.scale_factor = value.trim().parse().map_err(|_| bad(line))?,
                other => return Err(Error::Format(format!("unknown config key: {other}"))),
            }
        }
        params.validate()?;
        Ok(params)
    }
}

/// Converts to single-channel luminance (0.299 R + 0.587 G + 0.114 B).
pub fn grayscale(frame: &Frame) -> Frame {
    if frame.channels() == 1 {
        return frame.clone();
    }
    Frame::from_fn(frame.width(), frame.height(), 1, |x, y, _| {
        0.299 * frame.get(x, y, 0) + 0.587 * frame.get(x, y, 1) + 0.114 * frame.get(x, y, 2)
    })
    .unwrap()
}

// Bilinear resize of a scalar field (no [0,1] clamping).
fn resize_field(field: &[f64], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<f64> {
    let mut out = vec![0.0; new_w * new_h];
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
            out[y * new_w + x] = (1.0 - fx) * (1.0 - fy) * field[y0 * w + x0]
                + fx * (1.0 - fy) * field[y0 * w + x1]
                + (1.0 - fx) * fy * field[y1 * w + x0]
                + fx * fy * field[y1 * w + x1];
        }
    }
    out
}

// Horn-Schunck neighbourhood average: 1/6 for the 4-neighbours, 1/12 for the
// diagonals, clamp-to-edge.
fn neighbour_average(field: &[f64], w: usize, h: usize, out: &mut [f64]) {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        field[cy * w + cx]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let cardinal = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1);
            let diagonal =
                at(x - 1, y - 1) + at(x + 1, y - 1) + at(x - 1, y + 1) + at(x + 1, y + 1);
            out[y as usize * w + x as usize] = cardinal / 6.0 + diagonal / 12.0;
        }
    }
}

fn central_diff_x(f: &Frame) -> Vec<f64> {
    let (w, h) = (f.width(), f.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xl = x.saturating_sub(1);
            let xr = (x + 1).min(w - 1);
            out[y * w + x] = (f.get(xr, y, 0) - f.get(xl, y, 0)) / 2.0;
        }
    }
    out
}

fn central_diff_y(f: &Frame) -> Vec<f64> {
    let (w, h) = (f.width(), f.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let yl = y.saturating_sub(1);
            let yr = (y + 1).min(h - 1);
            out[y * w + x] = (f.get(x, yr, 0) - f.get(x, yl, 0)) / 2.0;
        }
    }
    out
}

/// Estimates the flow a -> b (a(x) ~= b(x + F(x))) with coarse-to-fine
/// Horn-Schunck. Deterministic: same inputs and params give bit-identical
/// output.
pub fn estimate_flow(a: &Frame, b: &Frame, params: &EstimatorParams) -> Result<FlowField> {
    params.validate()?;
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("estimate_flow inputs".into()));
    }
    if a.width() < 8 || a.height() < 8 {
        return Err(Error::InvalidParam(format!(
            "estimate_flow needs >= 8x8, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let pyr_a = gaussian_pyramid(&ga, params.levels, params.scale_factor)?;
    let pyr_b = gaussian_pyramid(&gb, params.levels, params.scale_factor)?;

    let coarsest = params.levels - 1;
    let mut flow = FlowField::zeros(pyr_a[coarsest].width(), pyr_a[coarsest].height());
    for level in (0..params.levels).rev() {
        let la = &pyr_a[level];
        let lb = &pyr_b[level];
        let (w, h) = (la.width(), la.height());
        if flow.width() != w || flow.height() != h {
            let su = w as f64 / flow.width() as f64;
            let sv = h as f64 / flow.height() as f64;
            let u = resize_field(flow.u(), flow.width(), flow.height(), w, h)
                .into_iter()
                .map(|x| x * su)
                .collect();
            let v = resize_field(flow.v(), flow.width(), flow.height(), w, h)
                .into_iter()
                .map(|x| x * sv)
                .collect();
            flow = FlowField::from_parts(w, h, u, v)?;
        }
        let (warped_b, _) = backward_warp(lb, &flow)?;
        let ix: Vec<f64> = central_diff_x(la)
            .iter()
            .zip(central_diff_x(&warped_b))
            .map(|(p, q)| (p + q) / 2.0)
            .collect();
        let iy: Vec<f64> = central_diff_y(la)
            .iter()
            .zip(central_diff_y(&warped_b))
            .map(|(p, q)| (p + q) / 2.0)
            .collect();
        let it: Vec<f64> = warped_b
            .data()
            .iter()
            .zip(la.data())
            .map(|(wb, aa)| wb - aa)
            .collect();

        let n = w * h;
        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut du_bar = vec![0.0; n];
        let mut dv_bar = vec![0.0; n];
        for _ in 0..params.iters_per_level {
            neighbour_average(&du, w, h, &mut du_bar);
            neighbour_average(&dv, w, h, &mut dv_bar);
            for p in 0..n {
                let denom = params.smoothness + ix[p] * ix[p] + iy[p] * iy[p];
                let t = (ix[p] * du_bar[p] + iy[p] * dv_bar[p] + it[p]) / denom;
                du[p] = du_bar[p] - ix[p] * t;
                dv[p] = dv_bar[p] - iy[p] * t;
            }
        }
        for p in 0..n {
            flow.u_mut()[p] += du[p];
            flow.v_mut()[p] += dv[p];
        }
    }
    flow.validate()?;
    Ok(flow)
}

/// Splits bidirectional flows to intermediate-time flows under the linear
/// motion assumption: flow t->0 = t * f10, flow t->1 = (1-t) * f01.
pub fn intermediate_flows(
    f01: &FlowField,
    f10: &FlowField,
    t: f64,
) -> Result<(FlowField, FlowField)> {
    if !f01.same_shape(f10) {
        return Err(Error::DimensionMismatch("intermediate_flows inputs".into()));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidParam(format!("t {t} must be in (0,1)")));
    }
    Ok((f10.scaled(t), f01.scaled(1.0 - t)))
}

/// Fixed 6-channel per-pixel feature stack: grayscale intensity plus
/// horizontal/vertical Sobel gradients (1/8 normalization) of both frames.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    /// 6 channels interleaved: [gray_a, sx_a, sy_a, gray_b, sx_b, sy_b].
    data: Vec<f64>,
}

pub const FEATURE_CHANNELS: usize = 6;

impl FeatureStack {
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, p: usize) -> &[f64] {
        &self.data[p * FEATURE_CHANNELS..(p + 1) * FEATURE_CHANNELS]
    }
}

fn sobel(f: &Frame) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (f.width(), f.height());
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        f.get(cx, cy, 0)
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = y as usize * w + x as usize;
            gx[p] = (at(x + 1, y - 1) - at(x - 1, y - 1)
                + 2.0 * (at(x + 1, y) - at(x - 1, y))
                + at(x + 1, y + 1)
                - at(x - 1, y + 1))
                / 8.0;
            gy[p] = (at(x - 1, y + 1) - at(x - 1, y - 1)
                + 2.0 * (at(x, y + 1) - at(x, y - 1))
                + at(x + 1, y + 1)
                - at(x + 1, y - 1))
                / 8.0;
        }
    }
    (gx, gy)
}

pub fn extract_features(a: &Frame, b: &Frame) -> Result<FeatureStack> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("extract_features inputs".into()));
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let (sxa, sya) = sobel(&ga);
    let (sxb, syb) = sobel(&gb);
    let n = a.width() * a.height();
    let mut data = vec![0.0; n * FEATURE_CHANNELS];
    for p in 0..n {
        data[p * FEATURE_CHANNELS] = ga.data()[p];
        data[p * FEATURE_CHANNELS + 1] = sxa[p];
        data[p * FEATURE_CHANNELS + 2] = sya[p];
        data[p * FEATURE_CHANNELS + 3] = gb.data()[p];
        data[p * FEATURE_CHANNELS + 4] = sxb[p];
        data[p * FEATURE_CHANNELS + 5] = syb[p];
    }
    Ok(FeatureStack {
        width: a.width(),
        height: a.height(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_frame(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> Frame {
        Frame::from_fn(w, h, 1, |x, y, _| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            0.1 + 0.8 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .unwrap()
    }

    #[test]
    fn static_scene_has_near_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Frame::from_fn(24, 24, 1, |_, _, _| rng.gen_range(0.1..0.9)).unwrap();
        let params = EstimatorParams {
            levels: 2,
            ..Default::default()
        };
        let flow = estimate_flow(&a, &a, &params).unwrap();
        let mean_u: f64 = flow.u().iter().map(|x| x.abs()).sum::<f64>() / flow.u().len() as f64;
        let mean_v: f64 = flow.v().iter().map(|x| x.abs()).sum::<f64>() / flow.v().len() as f64;
        assert!(mean_u < 1e-3 && mean_v < 1e-3);
        let max = flow
            .u()
            .iter()
            .chain(flow.v())
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-2);
    }

    #[test]
    fn translated_blob_recovers_shift() {
        let a = blob_frame(32, 32, 14.0, 16.0, 4.0);
        let b = blob_frame(32, 32, 16.0, 16.0, 4.0);
        let params = EstimatorParams::default();
        let flow = estimate_flow(&a, &b, &params).unwrap();
        // Mean over the blob support (within 2 sigma of the source centre).
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut n = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                let dx = x as f64 - 14.0;
                let dy = y as f64 - 16.0;
                if dx * dx + dy * dy <= 64.0 {
                    su += flow.u()[y * 32 + x];
                    sv += flow.v()[y * 32 + x].abs();
                    n += 1.0;
                }
            }
        }
        let mean_u = su / n;
        let mean_av = sv / n;
        assert!(
            (mean_u - 2.0).abs() <= 0.5,
            "mean u {mean_u} not within 2 +- 0.5"
        );
        assert!(mean_av < 0.3, "mean |v| {mean_av}");
    }

    #[test]
    fn estimation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = Frame::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.1..0.9)).unwrap();
        let b = Frame::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.1..0.9)).unwrap();
        let params = EstimatorParams {
            levels: 2,
            ..Default::default()
        };
        let f1 = estimate_flow(&a, &b, &params).unwrap();
        let f2 = estimate_flow(&a, &b, &params).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn intermediate_flow_split() {
        let f01 = FlowField::uniform(8, 8, 4.0, 0.0);
        let f10 = FlowField::uniform(8, 8, -4.0, 0.0);
        let (ft0, ft1) = intermediate_flows(&f01, &f10, 0.5).unwrap();
        assert!(ft0.u().iter().all(|&u| u == -2.0));
        assert!(ft1.u().iter().all(|&u| u == 2.0));
        let zero = FlowField::zeros(8, 8);
        let (z0, z1) = intermediate_flows(&zero, &zero, 0.5).unwrap();
        assert!(z0.u().iter().all(|&u| u == 0.0) && z1.v().iter().all(|&v| v == 0.0));
        // Consistent linear motion: f10 = -f01 implies flow t->0 = -t * f01.
        let (c0, _) = intermediate_flows(&f01, &f01.scaled(-1.0), 0.5).unwrap();
        for p in 0..64 {
            assert_eq!(c0.u()[p], -0.5 * f01.u()[p]);
        }
    }

    #[test]
    fn features_of_constant_and_ramp() {
        let c = Frame::from_fn(12, 12, 1, |_, _, _| 0.4).unwrap();
        let feats = extract_features(&c, &c).unwrap();
        for p in 0..144 {
            let f = feats.at(p);
            assert!((f[0] - 0.4).abs() < 1e-15);
            assert_eq!(f[1], 0.0);
            assert_eq!(f[2], 0.0);
        }

        let w = 16usize;
        let ramp = Frame::from_fn(w, w, 1, |x, _, _| x as f64 / (w - 1) as f64).unwrap();
        let feats = extract_features(&ramp, &ramp).unwrap();
        // Interior Sobel-x response of a linear ramp is the per-pixel step.
        for y in 1..w - 1 {
            for x in 1..w - 1 {
                let f = feats.at(y * w + x);
                assert!((f[1] - 1.0 / (w - 1) as f64).abs() < 1e-12);
                assert!(f[2].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_swap_with_argument_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = Frame::from_fn(10, 10, 1, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let b = Frame::from_fn(10, 10, 1, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
        let ab = extract_features(&a, &b).unwrap();
        let ba = extract_features(&b, &a).unwrap();
        for p in 0..100 {
            let x = ab.at(p);
            let y = ba.at(p);
            assert_eq!(&x[0..3], &y[3..6]);
            assert_eq!(&x[3..6], &y[0..3]);
        }
    }

    #[test]
    fn params_config_round_trip() {
        let p = EstimatorParams {
            smoothness: 2.25,
            levels: 3,
            iters_per_level: 17,
            scale_factor: 0.5,
        };
        let q = EstimatorParams::from_config_str(&p.to_config_string()).unwrap();
        assert_eq!(p, q);
        assert!(EstimatorParams::from_config_str("smoothness=-1").is_err());
        assert!(EstimatorParams::from_config_str("bogus=1").is_err());
    }
}
