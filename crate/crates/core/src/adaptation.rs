//! Test-time optimization: triplet construction from septuplets, cycle and
//! naive objectives, the gradient-descent update loop, and the end-to-end
//! variant tuning the estimator's smoothness weight by finite differences.
//!
//! One adaptation step is exactly one parameter update from the averaged
//! two-triplet loss. The held-out centre frame (index 3) is never touched by
//! the objectives; every frame read during adaptation goes through an access
//! log so tests can prove that.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU8, Ordering};
use std::time::Instant;

use crate::adapter::{sgd_step, AdapterGrad, AdapterParams};
use crate::error::{Error, Result};
use crate::estimator::{estimate_flow, EstimatorParams};
use crate::imaging::{Frame, FlowField};
use crate::metrics;
use crate::synth::{interpolate_backward, interpolate_with_flows, l1_gradient};

/// Seven consecutive frames. The even indices (0,2,4,6) are the model inputs;
/// index 3 is held-out ground truth for evaluation only.
#[derive(Debug)]
pub struct Septuplet {
    frames: Vec<Frame>,
    access_mask: AtomicU8,
}

pub const HELD_OUT_INDEX: usize = 3;

impl Septuplet {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.len() != 7 {
            return Err(Error::InvalidParam(format!(
                "septuplet needs exactly 7 frames, got {}",
                frames.len()
            )));
        }
        if !frames.iter().all(|f| f.same_shape(&frames[0])) {
            return Err(Error::DimensionMismatch(
                "septuplet frames differ in shape".into(),
            ));
        }
        Ok(Septuplet {
            frames,
            access_mask: AtomicU8::new(0),
        })
    }

    /// Frame access used by adaptation; the read is recorded.
    pub fn frame(&self, i: usize) -> &Frame {
        self.access_mask.fetch_or(1 << i, Ordering::Relaxed);
        &self.frames[i]
    }

    /// Held-out ground truth for evaluation; not recorded as an
    /// adaptation-time read.
    pub fn held_out(&self) -> &Frame {
        &self.frames[HELD_OUT_INDEX]
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn reset_access_log(&self) {
        self.access_mask.store(0, Ordering::Relaxed);
    }

    /// Bitmask of frame indices read through [`Septuplet::frame`].
    pub fn accessed_mask(&self) -> u8 {
        self.access_mask.load(Ordering::Relaxed)
    }
}

impl Clone for Septuplet {
    fn clone(&self) -> Self {
        Septuplet {
            frames: self.frames.clone(),
            access_mask: AtomicU8::new(self.access_mask.load(Ordering::Relaxed)),
        }
    }
}

/// The two triplets drawn from a septuplet's input frames, as septuplet
/// frame indices (earlier, middle/target, later).
pub const CYCLE_TRIPLETS: [(usize, usize, usize); 2] = [(0, 2, 4), (2, 4, 6)];
/// Wide-gap pairs of the naive objective: (earlier, target, later).
pub const NAIVE_TRIPLETS: [(usize, usize, usize); 2] = [(0, 2, 4), (2, 4, 6)];

/// Source of raw bidirectional flows for the two pipeline stages. Stage-1
/// flows come from real input frames and are cached across steps (the
/// estimator is frozen and sits behind a stop-gradient, so they are exact
/// constants of the optimization). Stage-2 flows depend on synthesized
/// frames and are recomputed on every call.
pub enum FlowProvider {
    Estimated {
        est: EstimatorParams,
        bias: f64,
        cache: RefCell<HashMap<(usize, usize), (FlowField, FlowField)>>,
    },
    /// Fixed flows keyed by frame-index pair (stage 1) or by the triplet's
    /// target index (stage 2). Used by oracle tests and injected-flow runs.
    Injected {
        stage1: HashMap<(usize, usize), (FlowField, FlowField)>,
        stage2: HashMap<usize, (FlowField, FlowField)>,
    },
}

impl FlowProvider {
    pub fn estimated(est: EstimatorParams, bias: f64) -> Result<Self> {
        if !(bias > 0.0 && bias <= 1.0) {
            return Err(Error::InvalidParam(format!("flow bias {bias}")));
        }
        Ok(FlowProvider::Estimated {
            est,
            bias,
            cache: RefCell::new(HashMap::new()),
        })
    }

    fn estimate_pair(
        est: &EstimatorParams,
        bias: f64,
        a: &Frame,
        b: &Frame,
    ) -> Result<(FlowField, FlowField)> {
        let fab = estimate_flow(a, b, est)?;
        let fba = estimate_flow(b, a, est)?;
        if bias == 1.0 {
            Ok((fab, fba))
        } else {
            Ok((fab.scaled(bias), fba.scaled(bias)))
        }
    }

    pub fn stage1(
        &self,
        pair: (usize, usize),
        a: &Frame,
        b: &Frame,
    ) -> Result<(FlowField, FlowField)> {
        match self {
            FlowProvider::Estimated { est, bias, cache } => {
                if let Some(hit) = cache.borrow().get(&pair) {
                    return Ok(hit.clone());
                }
                let flows = Self::estimate_pair(est, *bias, a, b)?;
                cache.borrow_mut().insert(pair, flows.clone());
                Ok(flows)
            }
            FlowProvider::Injected { stage1, .. } => stage1
                .get(&pair)
                .cloned()
                .ok_or_else(|| Error::InvalidParam(format!("no injected flow for pair {pair:?}"))),
        }
    }

    pub fn stage2(&self, key: usize, a: &Frame, b: &Frame) -> Result<(FlowField, FlowField)> {
        match self {
            FlowProvider::Estimated { est, bias, .. } => Self::estimate_pair(est, *bias, a, b),
            FlowProvider::Injected { stage2, .. } => stage2
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::InvalidParam(format!("no injected stage-2 flow {key}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Cycle,
    Naive,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Cycle => "cycle",
            Strategy::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Plugin,
    E2e,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Plugin => "plugin",
            Mode::E2e => "e2e",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    pub mode: Mode,
    pub steps: usize,
    pub eta: f64,
    pub eval_every: usize,
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParam(format!("eta {}", self.eta)));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParam("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptationReport {
    pub steps: Vec<StepRecord>,
    pub param_count: usize,
    pub adapt_ms_per_step: f64,
    pub infer_ms: f64,
    /// Set when a non-finite loss or gradient cut the run short.
    pub aborted: bool,
}

impl AdaptationReport {
    /// CSV: step,loss,psnr,ssim rows then a summary row params,adapt_ms,infer_ms.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,psnr,ssim\n");
        for r in &self.steps {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.8},{},{}\n",
                r.step,
                r.loss,
                fmt(r.psnr),
                fmt(r.ssim)
            ));
        }
        out.push_str("params,adapt_ms,infer_ms\n");
        out.push_str(&format!(
            "{},{:.3},{:.3}\n",
            self.param_count, self.adapt_ms_per_step, self.infer_ms
        ));
        out
    }
}

// One two-stage triplet pass: loss plus gradient accumulation with an
// overall `weight` on the loss term.
fn triplet_cycle_pass(
    s: &Septuplet,
    triplet: (usize, usize, usize),
    flows: &FlowProvider,
    adapter: &AdapterParams,
    grad: &mut AdapterGrad,
    weight: f64,
) -> Result<f64> {
    let (ai, mi, bi) = triplet;
    let ia = s.frame(ai);
    let im = s.frame(mi);
    let ib = s.frame(bi);
    let (f_am, f_ma) = flows.stage1((ai, mi), ia, im)?;
    let (early, tape_a) = interpolate_with_flows(ia, im, &f_am, &f_ma, adapter)?;
    let (f_mb, f_bm) = flows.stage1((mi, bi), im, ib)?;
    let (late, tape_b) = interpolate_with_flows(im, ib, &f_mb, &f_bm, adapter)?;
    let (f2f, f2b) = flows.stage2(mi, &early, &late)?;
    let (mid, tape_c) = interpolate_with_flows(&early, &late, &f2f, &f2b, adapter)?;
    let loss = metrics::l1_loss(&mid, im)?;
    let mut d_mid = l1_gradient(&mid, im)?;
    for v in &mut d_mid {
        *v *= weight;
    }
    let src = interpolate_backward(adapter, &tape_c, &d_mid, grad, true)?
        .expect("source grads requested");
    interpolate_backward(adapter, &tape_a, &src.d_i0, grad, false)?;
    interpolate_backward(adapter, &tape_b, &src.d_i1, grad, false)?;
    Ok(loss)
}

/// Cycle-consistency objective over both triplets: synthesize the two
/// intermediate frames, re-interpolate the real middle frame from them, and
/// average the two reconstruction losses. Returns the loss and the gradient
/// assembled through both two-stage tapes.
pub fn cycle_loss_step(
    s: &Septuplet,
    flows: &FlowProvider,
    adapter: &AdapterParams,
) -> Result<(f64, AdapterGrad)> {
    let mut grad = AdapterGrad::zeros_like(adapter);
    let mut loss = 0.0;
    for triplet in CYCLE_TRIPLETS {
        loss += 0.5 * triplet_cycle_pass(s, triplet, flows, adapter, &mut grad, 0.5)?;
    }
    Ok((loss, grad))
}

/// Naive objective: supervise directly across the wide temporal gap,
/// averaging the two 4-gap losses for parity with the cycle accounting.
pub fn naive_loss_step(
    s: &Septuplet,
    flows: &FlowProvider,
    adapter: &AdapterParams,
) -> Result<(f64, AdapterGrad)> {
    let mut grad = AdapterGrad::zeros_like(adapter);
    let mut loss = 0.0;
    for (ai, mi, bi) in NAIVE_TRIPLETS {
        let ia = s.frame(ai);
        let im = s.frame(mi);
        let ib = s.frame(bi);
        let (f_ab, f_ba) = flows.stage1((ai, bi), ia, ib)?;
        let (mid, tape) = interpolate_with_flows(ia, ib, &f_ab, &f_ba, adapter)?;
        loss += 0.5 * metrics::l1_loss(&mid, im)?;
        let mut d = l1_gradient(&mid, im)?;
        for v in &mut d {
            *v *= 0.5;
        }
        interpolate_backward(adapter, &tape, &d, &mut grad, false)?;
    }
    Ok((loss, grad))
}

fn strategy_loss(
    strategy: Strategy,
    s: &Septuplet,
    flows: &FlowProvider,
    adapter: &AdapterParams,
) -> Result<(f64, AdapterGrad)> {
    match strategy {
        Strategy::Cycle => cycle_loss_step(s, flows, adapter),
        Strategy::Naive => naive_loss_step(s, flows, adapter),
    }
}

/// Synthesizes the evaluation frame between input frames 2 and 4 (the two
/// frames flanking the held-out midpoint) with the current adapter.
pub fn evaluation_frame(
    s: &Septuplet,
    flows: &FlowProvider,
    adapter: &AdapterParams,
) -> Result<Frame> {
    let i3 = s.frame(2);
    let i5 = s.frame(4);
    let (f, b) = flows.stage1((2, 4), i3, i5)?;
    let (frame, _) = interpolate_with_flows(i3, i5, &f, &b, adapter)?;
    Ok(frame)
}

fn eval_metrics(s: &Septuplet, flows: &FlowProvider, adapter: &AdapterParams) -> Result<(f64, f64)> {
    let pred = evaluation_frame(s, flows, adapter)?;
    Ok((
        metrics::psnr(&pred, s.held_out())?,
        metrics::ssim(&pred, s.held_out())?,
    ))
}

/// Runs the adaptation loop on one septuplet, mutating `adapter` in place.
/// Records step-0 metrics first; the caller owns adapter reset between
/// sequences.
pub fn adapt(
    s: &Septuplet,
    flows: &FlowProvider,
    adapter: &mut AdapterParams,
    cfg: &AdaptationConfig,
) -> Result<AdaptationReport> {
    cfg.validate()?;
    let mut report = AdaptationReport {
        steps: Vec::with_capacity(cfg.steps + 1),
        param_count: adapter.param_count(),
        adapt_ms_per_step: 0.0,
        infer_ms: 0.0,
        aborted: false,
    };

    let infer_start = Instant::now();
    let (psnr0, ssim0) = eval_metrics(s, flows, adapter)?;
    report.infer_ms = infer_start.elapsed().as_secs_f64() * 1e3;

    let mut adapt_total = 0.0;
    let mut last_metrics = (psnr0, ssim0);
    for step in 0..=cfg.steps {
        let step_start = Instant::now();
        let (loss, grad) = strategy_loss(cfg.strategy, s, flows, adapter)?;
        if !loss.is_finite() {
            report.aborted = true;
            break;
        }
        let evaluate_now = step == 0 || step == cfg.steps || step % cfg.eval_every == 0;
        if evaluate_now && step > 0 {
            last_metrics = eval_metrics(s, flows, adapter)?;
        }
        report.steps.push(StepRecord {
            step,
            loss,
            psnr: evaluate_now.then_some(last_metrics.0),
            ssim: evaluate_now.then_some(last_metrics.1),
        });
        if step == cfg.steps {
            break;
        }
        if cfg.eta > 0.0 {
            if sgd_step(adapter, &grad, cfg.eta).is_err() {
                report.aborted = true;
                break;
            }
        }
        adapt_total += step_start.elapsed().as_secs_f64() * 1e3;
    }
    if cfg.steps > 0 {
        report.adapt_ms_per_step = adapt_total / cfg.steps as f64;
    } else {
        // Charge the cost of one loss+gradient evaluation.
        let t = Instant::now();
        let _ = strategy_loss(cfg.strategy, s, flows, adapter)?;
        report.adapt_ms_per_step = t.elapsed().as_secs_f64() * 1e3;
    }
    Ok(report)
}

/// End-to-end variant: tunes the estimator smoothness weight by central
/// finite differences of the strategy loss (the adapter stays at identity).
/// Integer-valued estimator parameters are frozen.
pub fn e2e_adapt(
    s: &Septuplet,
    est: &EstimatorParams,
    bias: f64,
    cfg: &AdaptationConfig,
) -> Result<(EstimatorParams, AdaptationReport)> {
    cfg.validate()?;
    let identity = AdapterParams::init_identity(s.height(), s.width(), crate::adapter::AdapterMode::Direct)?;
    let mut params = est.clone();
    let mut report = AdaptationReport {
        steps: Vec::with_capacity(cfg.steps + 1),
        param_count: 1,
        adapt_ms_per_step: 0.0,
        infer_ms: 0.0,
        aborted: false,
    };

    fn loss_at(
        base: &EstimatorParams,
        lambda: f64,
        bias: f64,
        cfg: &AdaptationConfig,
        s: &Septuplet,
        identity: &AdapterParams,
    ) -> Result<f64> {
        let mut p = base.clone();
        p.smoothness = lambda;
        let flows = FlowProvider::estimated(p, bias)?;
        Ok(strategy_loss(cfg.strategy, s, &flows, identity)?.0)
    }

    let infer_start = Instant::now();
    {
        let flows = FlowProvider::estimated(params.clone(), bias)?;
        let (psnr, ssim) = eval_metrics(s, &flows, &identity)?;
        report.infer_ms = infer_start.elapsed().as_secs_f64() * 1e3;
        let loss = loss_at(&params, params.smoothness, bias, cfg, s, &identity)?;
        report.steps.push(StepRecord {
            step: 0,
            loss,
            psnr: Some(psnr),
            ssim: Some(ssim),
        });
    }

    let mut adapt_total = 0.0;
    for step in 1..=cfg.steps {
        let t = Instant::now();
        let lambda = params.smoothness;
        let delta = 1e-2 * lambda.max(1e-6);
        let lp = loss_at(&params, lambda + delta, bias, cfg, s, &identity)?;
        let lm = loss_at(&params, (lambda - delta).max(0.0), bias, cfg, s, &identity)?;
        if !lp.is_finite() || !lm.is_finite() {
            report.aborted = true;
            break;
        }
        let g = (lp - lm) / (2.0 * delta);
        if cfg.eta > 0.0 {
            let mut next = lambda - cfg.eta * g;
            if next < 0.0 {
                next = 1e-6; // clamped; flagged through the record below
            }
            params.smoothness = next;
        }
        adapt_total += t.elapsed().as_secs_f64() * 1e3;

        let evaluate_now = step == cfg.steps || step % cfg.eval_every == 0;
        let loss = loss_at(&params, params.smoothness, bias, cfg, s, &identity)?;
        let (psnr, ssim) = if evaluate_now {
            let flows = FlowProvider::estimated(params.clone(), bias)?;
            let (p, ss) = eval_metrics(s, &flows, &identity)?;
            (Some(p), Some(ss))
        } else {
            (None, None)
        };
        report.steps.push(StepRecord {
            step,
            loss,
            psnr,
            ssim,
        });
    }
    if cfg.steps > 0 {
        report.adapt_ms_per_step = adapt_total / cfg.steps as f64;
    } else {
        report.adapt_ms_per_step = report.infer_ms.max(f64::MIN_POSITIVE);
    }
    Ok((params, report))
}
