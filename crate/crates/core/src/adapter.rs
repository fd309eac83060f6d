//! Plug-in flow adapter: per-pixel affine modulation of an estimated flow,
//! F_hat = alpha * F + beta, with identity initialization, analytic gradients,
//! and a plain gradient-descent update.
//!
//! Two parameterizations: `Direct` holds one scalar alpha and a 2-vector beta
//! per pixel per warp direction; `FeatureConditioned` predicts (alpha, beta)
//! per pixel from the fixed 6-channel feature stack through a single linear
//! head shared by both directions (a 1x1 affine layer, no activation).

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::{FeatureStack, FEATURE_CHANNELS};
use crate::imaging::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    Direct,
    FeatureConditioned,
}

/// Which of the two intermediate flows the adapter is being applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    TowardEarlier,
    TowardLater,
}

impl WarpDirection {
    #[inline]
    fn index(self) -> usize {
        match self {
            WarpDirection::TowardEarlier => 0,
            WarpDirection::TowardLater => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Direct {
        /// Per-direction fields, each of length width*height.
        alpha: [Vec<f64>; 2],
        beta_u: [Vec<f64>; 2],
        beta_v: [Vec<f64>; 2],
    },
    Feature {
        /// weights[i][j]: feature channel i -> output j (alpha, beta_u, beta_v).
        weights: [[f64; 3]; FEATURE_CHANNELS],
        bias: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    width: usize,
    height: usize,
    state: State,
}

#[derive(Debug, Clone)]
pub struct AdapterGrad {
    width: usize,
    height: usize,
    state: State,
}

/// Record of one `apply` call, holding everything `backward` needs.
#[derive(Debug, Clone)]
pub struct ApplyTape {
    direction: WarpDirection,
    flow: FlowField,
    feats: Option<FeatureStack>,
}

impl AdapterParams {
    /// Identity state: applying it to any flow is a bit-exact no-op.
    pub fn init_identity(height: usize, width: usize, mode: AdapterMode) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam("adapter dims must be positive".into()));
        }
        let n = width * height;
        let state = match mode {
            AdapterMode::Direct => State::Direct {
                alpha: [vec![1.0; n], vec![1.0; n]],
                beta_u: [vec![0.0; n], vec![0.0; n]],
                beta_v: [vec![0.0; n], vec![0.0; n]],
            },
            AdapterMode::FeatureConditioned => State::Feature {
                weights: [[0.0; 3]; FEATURE_CHANNELS],
                bias: [1.0, 0.0, 0.0],
            },
        };
        Ok(AdapterParams {
            width,
            height,
            state,
        })
    }

    pub fn mode(&self) -> AdapterMode {
        match self.state {
            State::Direct { .. } => AdapterMode::Direct,
            State::Feature { .. } => AdapterMode::FeatureConditioned,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of tunable parameters.
    pub fn param_count(&self) -> usize {
        match &self.state {
            State::Direct { .. } => 2 * 3 * self.width * self.height,
            State::Feature { .. } => FEATURE_CHANNELS * 3 + 3,
        }
    }

    /// F_hat = alpha * F + beta per pixel. Feature mode derives (alpha, beta)
    /// from the stack through the linear head; `feats` must be present
    /// exactly in that mode.
    pub fn apply(
        &self,
        flow: &FlowField,
        feats: Option<&FeatureStack>,
        direction: WarpDirection,
    ) -> Result<(FlowField, ApplyTape)> {
        if flow.width() != self.width || flow.height() != self.height {
            return Err(Error::DimensionMismatch(format!(
                "adapter {}x{} vs flow {}x{}",
                self.width,
                self.height,
                flow.width(),
                flow.height()
            )));
        }
        let n = self.width * self.height;
        let mut out = flow.clone();
        match &self.state {
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            } => {
                if feats.is_some() {
                    return Err(Error::InvalidParam(
                        "direct mode takes no feature stack".into(),
                    ));
                }
                let d = direction.index();
                for p in 0..n {
                    out.u_mut()[p] = alpha[d][p] * flow.u()[p] + beta_u[d][p];
                    out.v_mut()[p] = alpha[d][p] * flow.v()[p] + beta_v[d][p];
                }
            }
            State::Feature { weights, bias } => {
                let feats = feats.ok_or_else(|| {
                    Error::InvalidParam("feature_conditioned mode requires features".into())
                })?;
                if feats.width() != self.width || feats.height() != self.height {
                    return Err(Error::DimensionMismatch("feature stack shape".into()));
                }
                for p in 0..n {
                    let m = feats.at(p);
                    let mut head = *bias;
                    for (i, mi) in m.iter().enumerate() {
                        for j in 0..3 {
                            head[j] += weights[i][j] * mi;
                        }
                    }
                    out.u_mut()[p] = head[0] * flow.u()[p] + head[1];
                    out.v_mut()[p] = head[0] * flow.v()[p] + head[2];
                }
            }
        }
        let tape = ApplyTape {
            direction,
            flow: flow.clone(),
            feats: match self.state {
                State::Feature { .. } => Some(feats.unwrap().clone()),
                State::Direct { .. } => None,
            },
        };
        Ok((out, tape))
    }

    /// Serializes to a binary blob: header (mode byte, height u32, width u32,
    /// little-endian), then little-endian f64 fields in order
    /// alpha_earlier, beta_earlier (u,v interleaved), alpha_later,
    /// beta_later | head weights row-major, head bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.push(match self.mode() {
            AdapterMode::Direct => 0u8,
            AdapterMode::FeatureConditioned => 1u8,
        });
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        let mut push = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        match &self.state {
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            } => {
                for d in 0..2 {
                    for &v in &alpha[d] {
                        push(v);
                    }
                    for p in 0..alpha[d].len() {
                        push(beta_u[d][p]);
                        push(beta_v[d][p]);
                    }
                }
            }
            State::Feature { weights, bias } => {
                for row in weights {
                    for &v in row {
                        push(v);
                    }
                }
                for &v in bias {
                    push(v);
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 9 {
            return Err(Error::Format(format!("{}: truncated header", path.display())));
        }
        let mode = bytes[0];
        let height = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let n = width * height;
        let mut pos = 9usize;
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let need = count * 8;
            if bytes.len() < pos + need {
                return Err(Error::Format(format!(
                    "{}: truncated payload",
                    path.display()
                )));
            }
            let out = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += need;
            Ok(out)
        };
        let state = match mode {
            0 => {
                let mut alpha = [Vec::new(), Vec::new()];
                let mut beta_u = [Vec::new(), Vec::new()];
                let mut beta_v = [Vec::new(), Vec::new()];
                for d in 0..2 {
                    alpha[d] = take(n)?;
                    let betas = take(2 * n)?;
                    beta_u[d] = betas.iter().step_by(2).copied().collect();
                    beta_v[d] = betas.iter().skip(1).step_by(2).copied().collect();
                }
                State::Direct {
                    alpha,
                    beta_u,
                    beta_v,
                }
            }
            1 => {
                let w = take(FEATURE_CHANNELS * 3)?;
                let b = take(3)?;
                let mut weights = [[0.0; 3]; FEATURE_CHANNELS];
                for i in 0..FEATURE_CHANNELS {
                    weights[i].copy_from_slice(&w[i * 3..i * 3 + 3]);
                }
                State::Feature {
                    weights,
                    bias: [b[0], b[1], b[2]],
                }
            }
            other => {
                return Err(Error::Format(format!(
                    "{}: unknown adapter mode {other}",
                    path.display()
                )))
            }
        };
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{}: trailing bytes after payload",
                path.display()
            )));
        }
        Ok(AdapterParams {
            width,
            height,
            state,
        })
    }
}

impl AdapterGrad {
    /// Zero-filled gradient matching the shape of `params`.
    pub fn zeros_like(params: &AdapterParams) -> Self {
        let n = params.width * params.height;
        let state = match params.state {
            State::Direct { .. } => State::Direct {
                alpha: [vec![0.0; n], vec![0.0; n]],
                beta_u: [vec![0.0; n], vec![0.0; n]],
                beta_v: [vec![0.0; n], vec![0.0; n]],
            },
            State::Feature { .. } => State::Feature {
                weights: [[0.0; 3]; FEATURE_CHANNELS],
                bias: [0.0; 3],
            },
        };
        AdapterGrad {
            width: params.width,
            height: params.height,
            state,
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.state {
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            } => alpha
                .iter()
                .chain(beta_u)
                .chain(beta_v)
                .all(|f| f.iter().all(|v| v.is_finite())),
            State::Feature { weights, bias } => {
                weights.iter().flatten().all(|v| v.is_finite())
                    && bias.iter().all(|v| v.is_finite())
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        match &mut self.state {
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            } => {
                for f in alpha.iter_mut().chain(beta_u).chain(beta_v) {
                    for v in f.iter_mut() {
                        *v *= s;
                    }
                }
            }
            State::Feature { weights, bias } => {
                for v in weights.iter_mut().flatten().chain(bias.iter_mut()) {
                    *v *= s;
                }
            }
        }
    }

    pub fn add(&mut self, other: &AdapterGrad) {
        match (&mut self.state, &other.state) {
            (
                State::Direct {
                    alpha: a,
                    beta_u: bu,
                    beta_v: bv,
                },
                State::Direct {
                    alpha: oa,
                    beta_u: obu,
                    beta_v: obv,
                },
            ) => {
                for d in 0..2 {
                    for p in 0..a[d].len() {
                        a[d][p] += oa[d][p];
                        bu[d][p] += obu[d][p];
                        bv[d][p] += obv[d][p];
                    }
                }
            }
            (
                State::Feature { weights, bias },
                State::Feature {
                    weights: ow,
                    bias: ob,
                },
            ) => {
                for i in 0..FEATURE_CHANNELS {
                    for j in 0..3 {
                        weights[i][j] += ow[i][j];
                    }
                }
                for j in 0..3 {
                    bias[j] += ob[j];
                }
            }
            _ => panic!("gradient mode mismatch"),
        }
    }

    /// Max absolute entry, for convergence diagnostics.
    pub fn linf_norm(&self) -> f64 {
        match &self.state {
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            } => alpha
                .iter()
                .chain(beta_u)
                .chain(beta_v)
                .flat_map(|f| f.iter())
                .fold(0.0, |m, v| m.max(v.abs())),
            State::Feature { weights, bias } => weights
                .iter()
                .flatten()
                .chain(bias.iter())
                .fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// Flattens to a vector in the same order as `flatten_params`.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_state(&self.state)
    }
}

fn flatten_state(state: &State) -> Vec<f64> {
    match state {
        State::Direct {
            alpha,
            beta_u,
            beta_v,
        } => {
            let mut out = Vec::new();
            for d in 0..2 {
                out.extend_from_slice(&alpha[d]);
                out.extend_from_slice(&beta_u[d]);
                out.extend_from_slice(&beta_v[d]);
            }
            out
        }
        State::Feature { weights, bias } => {
            let mut out: Vec<f64> = weights.iter().flatten().copied().collect();
            out.extend_from_slice(bias);
            out
        }
    }
}

impl AdapterParams {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_state(&self.state)
    }

    /// Inverse of `flatten`; used by the finite-difference oracles.
    pub fn assign_flat(&mut self, values: &[f64]) {
        let n = self.width * self.height;
        match &mut self.state {
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            } => {
                assert_eq!(values.len(), 6 * n);
                for d in 0..2 {
                    let base = d * 3 * n;
                    alpha[d].copy_from_slice(&values[base..base + n]);
                    beta_u[d].copy_from_slice(&values[base + n..base + 2 * n]);
                    beta_v[d].copy_from_slice(&values[base + 2 * n..base + 3 * n]);
                }
            }
            State::Feature { weights, bias } => {
                assert_eq!(values.len(), FEATURE_CHANNELS * 3 + 3);
                for i in 0..FEATURE_CHANNELS {
                    weights[i].copy_from_slice(&values[i * 3..i * 3 + 3]);
                }
                bias.copy_from_slice(&values[FEATURE_CHANNELS * 3..]);
            }
        }
    }
}

/// Chains an upstream gradient with respect to the adapted flow back to the
/// adapter parameters, accumulating into `grad`. Multiple apply sites sharing
/// the same parameters accumulate additively.
pub fn backward(
    params: &AdapterParams,
    tape: &ApplyTape,
    upstream_u: &[f64],
    upstream_v: &[f64],
    grad: &mut AdapterGrad,
) -> Result<()> {
    let n = params.width * params.height;
    if upstream_u.len() != n || upstream_v.len() != n {
        return Err(Error::DimensionMismatch("adapter upstream gradient".into()));
    }
    if tape.flow.width() != params.width || tape.flow.height() != params.height {
        return Err(Error::DimensionMismatch("adapter tape shape".into()));
    }
    match (&mut grad.state, &params.state) {
        (
            State::Direct {
                alpha: ga,
                beta_u: gbu,
                beta_v: gbv,
            },
            State::Direct { .. },
        ) => {
            let d = tape.direction.index();
            for p in 0..n {
                let gu = upstream_u[p];
                let gv = upstream_v[p];
                ga[d][p] += gu * tape.flow.u()[p] + gv * tape.flow.v()[p];
                gbu[d][p] += gu;
                gbv[d][p] += gv;
            }
        }
        (
            State::Feature {
                weights: gw,
                bias: gb,
            },
            State::Feature { .. },
        ) => {
            let feats = tape
                .feats
                .as_ref()
                .ok_or_else(|| Error::InvalidParam("tape missing feature stack".into()))?;
            for p in 0..n {
                let gu = upstream_u[p];
                let gv = upstream_v[p];
                let dout = [
                    gu * tape.flow.u()[p] + gv * tape.flow.v()[p],
                    gu,
                    gv,
                ];
                let m = feats.at(p);
                for (i, mi) in m.iter().enumerate() {
                    for j in 0..3 {
                        gw[i][j] += mi * dout[j];
                    }
                }
                for j in 0..3 {
                    gb[j] += dout[j];
                }
            }
        }
        _ => return Err(Error::InvalidParam("gradient/params mode mismatch".into())),
    }
    Ok(())
}

/// Plain gradient descent: every parameter decremented by eta * gradient.
/// A non-finite gradient rejects the whole step.
pub fn sgd_step(params: &mut AdapterParams, grad: &AdapterGrad, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidParam(format!("learning rate {eta}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("adapter gradient; step rejected".into()));
    }
    if grad.width != params.width || grad.height != params.height {
        return Err(Error::DimensionMismatch(format!(
            "gradient {}x{} vs adapter {}x{}",
            grad.width, grad.height, params.width, params.height
        )));
    }
    match (&mut params.state, &grad.state) {
        (
            State::Direct {
                alpha,
                beta_u,
                beta_v,
            },
            State::Direct {
                alpha: ga,
                beta_u: gbu,
                beta_v: gbv,
            },
        ) => {
            for d in 0..2 {
                for p in 0..alpha[d].len() {
                    alpha[d][p] -= eta * ga[d][p];
                    beta_u[d][p] -= eta * gbu[d][p];
                    beta_v[d][p] -= eta * gbv[d][p];
                }
            }
        }
        (
            State::Feature { weights, bias },
            State::Feature {
                weights: gw,
                bias: gb,
            },
        ) => {
            for i in 0..FEATURE_CHANNELS {
                for j in 0..3 {
                    weights[i][j] -= eta * gw[i][j];
                }
            }
            for j in 0..3 {
                bias[j] -= eta * gb[j];
            }
        }
        _ => return Err(Error::InvalidParam("gradient/params mode mismatch".into())),
    }
    Ok(())
}
