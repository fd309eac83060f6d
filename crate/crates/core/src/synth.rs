//! The interpolation operator: estimate bidirectional flow, split to
//! intermediate-time flows, apply the adapter, backward-warp both inputs and
//! blend 0.5/0.5. A recorded tape lets a frame-space loss be chained back to
//! the adapter parameters.
//!
//! Flow estimation is a stop-gradient boundary: estimated flows are treated
//! as constants by the backward pass. Gradients still reach the adapter in a
//! second-stage interpolation through the warp's linearity in its source
//! frames.

use crate::adapter::{backward as adapter_backward, AdapterGrad, AdapterMode, AdapterParams, ApplyTape, WarpDirection};
use crate::error::{Error, Result};
use crate::estimator::{estimate_flow, extract_features, intermediate_flows, EstimatorParams};
use crate::imaging::{backward_warp, Frame, FlowField, SampleJacobian};

/// Raw bidirectional flows feeding one interpolation: either estimated by the
/// frozen estimator (optionally shrunk by a multiplicative bias) or injected.
#[derive(Debug, Clone)]
pub enum FlowSource {
    Estimated { bias: f64 },
    Injected { f01: FlowField, f10: FlowField },
}

impl FlowSource {
    pub fn estimated() -> Self {
        FlowSource::Estimated { bias: 1.0 }
    }

    fn resolve(
        &self,
        i0: &Frame,
        i1: &Frame,
        est: &EstimatorParams,
    ) -> Result<(FlowField, FlowField)> {
        match self {
            FlowSource::Estimated { bias } => {
                if !(*bias > 0.0 && *bias <= 1.0) {
                    return Err(Error::InvalidParam(format!("flow bias {bias}")));
                }
                let f01 = estimate_flow(i0, i1, est)?;
                let f10 = estimate_flow(i1, i0, est)?;
                if *bias == 1.0 {
                    Ok((f01, f10))
                } else {
                    Ok((f01.scaled(*bias), f10.scaled(*bias)))
                }
            }
            FlowSource::Injected { f01, f10 } => Ok((f01.clone(), f10.clone())),
        }
    }
}

/// Everything the backward pass needs from one interpolation.
#[derive(Debug, Clone)]
pub struct SynthesisTape {
    width: usize,
    height: usize,
    channels: usize,
    apply_tape0: ApplyTape,
    apply_tape1: ApplyTape,
    jac0: SampleJacobian,
    jac1: SampleJacobian,
    /// Adapted intermediate flows, kept for inspection dumps.
    adapted_t0: FlowField,
    adapted_t1: FlowField,
    /// True where the blended output was clamped; gradient is zeroed there.
    clamped: Vec<bool>,
}

impl SynthesisTape {
    pub fn adapted_flows(&self) -> (&FlowField, &FlowField) {
        (&self.adapted_t0, &self.adapted_t1)
    }
}

fn check_pair(i0: &Frame, i1: &Frame) -> Result<()> {
    if !i0.same_shape(i1) {
        return Err(Error::DimensionMismatch(format!(
            "interpolate inputs {}x{}x{} vs {}x{}x{}",
            i0.width(),
            i0.height(),
            i0.channels(),
            i1.width(),
            i1.height(),
            i1.channels()
        )));
    }
    Ok(())
}

/// Midpoint interpolation with the adapter in the loop.
pub fn interpolate(
    i0: &Frame,
    i1: &Frame,
    est: &EstimatorParams,
    flows: &FlowSource,
    adapter: &AdapterParams,
) -> Result<(Frame, SynthesisTape)> {
    check_pair(i0, i1)?;
    let (f01, f10) = flows.resolve(i0, i1, est)?;
    interpolate_with_flows(i0, i1, &f01, &f10, adapter)
}

/// Midpoint interpolation from explicit raw flows (the estimator output is a
/// stop-gradient boundary, so callers may cache and re-inject it).
pub fn interpolate_with_flows(
    i0: &Frame,
    i1: &Frame,
    f01: &FlowField,
    f10: &FlowField,
    adapter: &AdapterParams,
) -> Result<(Frame, SynthesisTape)> {
    check_pair(i0, i1)?;
    let (ft0, ft1) = intermediate_flows(f01, f10, 0.5)?;
    let feats = match adapter.mode() {
        AdapterMode::FeatureConditioned => Some(extract_features(i0, i1)?),
        AdapterMode::Direct => None,
    };
    let (fh0, tape0) = adapter.apply(&ft0, feats.as_ref(), WarpDirection::TowardEarlier)?;
    let (fh1, tape1) = adapter.apply(&ft1, feats.as_ref(), WarpDirection::TowardLater)?;
    let (w0, jac0) = backward_warp(i0, &fh0)?;
    let (w1, jac1) = backward_warp(i1, &fh1)?;
    let n = w0.data().len();
    let mut data = vec![0.0; n];
    let mut clamped = vec![false; n];
    for p in 0..n {
        let v = 0.5 * w0.data()[p] + 0.5 * w1.data()[p];
        if !v.is_finite() {
            return Err(Error::NonFinite("interpolated frame".into()));
        }
        if v < 0.0 || v > 1.0 {
            clamped[p] = true;
        }
        data[p] = v.clamp(0.0, 1.0);
    }
    let out = Frame::from_data(i0.width(), i0.height(), i0.channels(), data)?;
    let tape = SynthesisTape {
        width: i0.width(),
        height: i0.height(),
        channels: i0.channels(),
        apply_tape0: tape0,
        apply_tape1: tape1,
        jac0,
        jac1,
        adapted_t0: fh0,
        adapted_t1: fh1,
        clamped,
    };
    Ok((out, tape))
}

/// Reference path with no adapter code at all; the frozen baseline.
pub fn interpolate_baseline(
    i0: &Frame,
    i1: &Frame,
    est: &EstimatorParams,
    flows: &FlowSource,
) -> Result<Frame> {
    check_pair(i0, i1)?;
    let (f01, f10) = flows.resolve(i0, i1, est)?;
    let (ft0, ft1) = intermediate_flows(&f01, &f10, 0.5)?;
    let (w0, _) = backward_warp(i0, &ft0)?;
    let (w1, _) = backward_warp(i1, &ft1)?;
    let n = w0.data().len();
    let mut data = vec![0.0; n];
    for p in 0..n {
        data[p] = (0.5 * w0.data()[p] + 0.5 * w1.data()[p]).clamp(0.0, 1.0);
    }
    Frame::from_data(i0.width(), i0.height(), i0.channels(), data)
}

/// Source-frame gradients produced by [`interpolate_backward`] when the tape
/// belongs to a second-stage interpolation whose inputs are themselves
/// synthesized.
pub struct SourceGrads {
    pub d_i0: Vec<f64>,
    pub d_i1: Vec<f64>,
}

/// Chains a per-pixel frame-space gradient back through blend, warps and
/// adapter, accumulating into `grad`. Returns gradients with respect to the
/// two source frames when requested.
pub fn interpolate_backward(
    adapter: &AdapterParams,
    tape: &SynthesisTape,
    d_frame: &[f64],
    grad: &mut AdapterGrad,
    want_source_grads: bool,
) -> Result<Option<SourceGrads>> {
    let n = tape.width * tape.height * tape.channels;
    if d_frame.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient length {} != {}",
            d_frame.len(),
            n
        )));
    }
    // Blend weight 0.5 per branch; clamp subgradient is zero where saturated.
    let mut upstream = vec![0.0; n];
    for p in 0..n {
        upstream[p] = if tape.clamped[p] { 0.0 } else { 0.5 * d_frame[p] };
    }
    let np = tape.width * tape.height;
    let mut gu = vec![0.0; np];
    let mut gv = vec![0.0; np];
    let mut src = if want_source_grads {
        Some(SourceGrads {
            d_i0: vec![0.0; n],
            d_i1: vec![0.0; n],
        })
    } else {
        None
    };
    tape.jac0.backprop(
        &upstream,
        &mut gu,
        &mut gv,
        src.as_mut().map(|s| s.d_i0.as_mut_slice()),
    );
    adapter_backward(adapter, &tape.apply_tape0, &gu, &gv, grad)?;
    gu.iter_mut().for_each(|x| *x = 0.0);
    gv.iter_mut().for_each(|x| *x = 0.0);
    tape.jac1.backprop(
        &upstream,
        &mut gu,
        &mut gv,
        src.as_mut().map(|s| s.d_i1.as_mut_slice()),
    );
    adapter_backward(adapter, &tape.apply_tape1, &gu, &gv, grad)?;
    Ok(src)
}

/// Per-pixel gradient of mean absolute error: sign(a - ref) / N.
pub fn l1_gradient(a: &Frame, reference: &Frame) -> Result<Vec<f64>> {
    if !a.same_shape(reference) {
        return Err(Error::DimensionMismatch("l1 gradient inputs".into()));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}
