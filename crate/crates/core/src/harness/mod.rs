//! Synthetic ground-truth sequences, bench specs with flow-bias injection,
//! dataset directory layout, and the ablation runner.
//!
//! Scenes are rendered by sampling a continuous analytic texture under an
//! exact motion model, so every frame (including the held-out midpoint) and
//! every pairwise flow field is available in closed form.

mod scene;

pub use scene::{
    synth_sequence, MotionKind, ScenePattern, SyntheticSequence, Texture, VelocityTier,
};

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::adaptation::{
    adapt, e2e_adapt, evaluation_frame, AdaptationConfig, AdaptationReport, FlowProvider, Mode,
    Septuplet, Strategy,
};
use crate::adapter::{AdapterMode, AdapterParams};
use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::imaging::io::{load_frame, save_frame, write_flo};
use crate::metrics;

/// One synthetic sequence in a bench.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub id: String,
    pub kind: MotionKind,
    pub tier: VelocityTier,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

/// A reproducible benchmark: sequence list plus an optional multiplicative
/// flow bias applied to the estimator output before the adapter.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub bias_gamma: f64,
    pub sequences: Vec<SequenceSpec>,
}

impl BenchSpec {
    /// Default bench: 20 sequences at 128x128, five per velocity tier,
    /// fixed seeds.
    pub fn default_bench(bias_gamma: f64) -> Self {
        let kinds = [
            MotionKind::Translate,
            MotionKind::Rotate,
            MotionKind::Affine,
            MotionKind::Multiblob,
            MotionKind::Translate,
        ];
        let tiers = [
            VelocityTier::Easy,
            VelocityTier::Medium,
            VelocityTier::Hard,
            VelocityTier::Extreme,
        ];
        let mut sequences = Vec::new();
        for (ti, tier) in tiers.iter().enumerate() {
            for (ki, kind) in kinds.iter().enumerate() {
                let idx = ti * kinds.len() + ki;
                sequences.push(SequenceSpec {
                    id: format!("seq_{idx:03}_{}_{}", kind.name(), tier.name()),
                    kind: *kind,
                    tier: *tier,
                    width: 128,
                    height: 128,
                    seed: 9000 + idx as u64,
                });
            }
        }
        BenchSpec {
            bias_gamma,
            sequences,
        }
    }

    /// Flat text format: `bias_gamma=G` plus one `seq=kind,tier,WxH,seed`
    /// line per sequence.
    pub fn to_spec_string(&self) -> String {
        let mut out = format!("bias_gamma={}\n", self.bias_gamma);
        for s in &self.sequences {
            out.push_str(&format!(
                "seq={},{},{}x{},{}\n",
                s.kind.name(),
                s.tier.name(),
                s.width,
                s.height,
                s.seed
            ));
        }
        out
    }

    pub fn from_spec_str(text: &str) -> Result<Self> {
        let mut bias_gamma = 1.0;
        let mut sequences = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad bench line: {line}")))?;
            match key.trim() {
                "bias_gamma" => {
                    bias_gamma = value
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad bias_gamma: {value}")))?
                }
                "seq" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 4 {
                        return Err(Error::Format(format!("bad seq line: {line}")));
                    }
                    let kind = MotionKind::parse(parts[0])?;
                    let tier = VelocityTier::parse(parts[1])?;
                    let (w, h) = parts[2]
                        .split_once('x')
                        .ok_or_else(|| Error::Format(format!("bad resolution: {}", parts[2])))?;
                    let width = w
                        .parse()
                        .map_err(|_| Error::Format(format!("bad width: {w}")))?;
                    let height = h
                        .parse()
                        .map_err(|_| Error::Format(format!("bad height: {h}")))?;
                    let seed = parts[3]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad seed: {}", parts[3])))?;
                    let idx = sequences.len();
                    sequences.push(SequenceSpec {
                        id: format!("seq_{idx:03}_{}_{}", parts[0], parts[1]),
                        kind,
                        tier,
                        width,
                        height,
                        seed,
                    });
                }
                other => return Err(Error::Format(format!("unknown bench key: {other}"))),
            }
        }
        if !(bias_gamma > 0.0 && bias_gamma <= 1.0) {
            return Err(Error::InvalidParam(format!("bias_gamma {bias_gamma}")));
        }
        if sequences.is_empty() {
            return Err(Error::InvalidParam("bench has no sequences".into()));
        }
        Ok(BenchSpec {
            bias_gamma,
            sequences,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_spec_str(&text)
    }
}

/// Renders one sequence from its spec.
pub fn synth_from_spec(spec: &SequenceSpec) -> Result<SyntheticSequence> {
    let pattern = ScenePattern::from_tier(spec.kind, spec.tier, spec.seed);
    scene::synth_sequence(&pattern, spec.width, spec.height, spec.seed)
}

/// Writes a sequence directory: frame_0001.png .. frame_0007.png, the exact
/// midpoint gt_mid.png, and oracle flow_XtoY.flo files (1-based frame
/// numbering) for every pair the adaptation strategies consume.
pub fn save_sequence_dir(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..7 {
        let path = dir.join(format!("frame_{:04}.png", i + 1));
        save_frame(seq.septuplet.frame(i), &path)?;
    }
    save_frame(seq.septuplet.held_out(), &dir.join("gt_mid.png"))?;
    for (a, b) in [(0usize, 2usize), (2, 4), (4, 6), (0, 4), (2, 6)] {
        for (x, y) in [(a, b), (b, a)] {
            let flow = seq.oracle_flow(x, y)?;
            write_flo(&flow, &dir.join(format!("flow_{}to{}.flo", x + 1, y + 1)))?;
        }
    }
    seq.septuplet.reset_access_log();
    Ok(())
}

/// Loads a septuplet from a sequence directory (synthetic or user-supplied).
pub fn load_sequence_dir(dir: &Path) -> Result<Septuplet> {
    let mut frames = Vec::with_capacity(7);
    for i in 1..=7 {
        let png = dir.join(format!("frame_{i:04}.png"));
        let ppm = dir.join(format!("frame_{i:04}.ppm"));
        let path = if png.exists() { png } else { ppm };
        frames.push(load_frame(&path)?);
    }
    Septuplet::new(frames)
}

/// One result row of the ablation table.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub seq_id: String,
    pub strategy: Strategy,
    pub mode: Mode,
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub adapt_ms: f64,
    pub infer_ms: f64,
    pub n_params: usize,
}

pub const CSV_HEADER: &str =
    "seq_id,strategy,mode,step,loss,psnr,ssim,adapt_ms,infer_ms,n_params";

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.8},{:.6},{:.6},{:.3},{:.3},{}",
            self.seq_id,
            self.strategy.name(),
            self.mode.name(),
            self.step,
            self.loss,
            self.psnr,
            self.ssim,
            self.adapt_ms,
            self.infer_ms,
            self.n_params
        )
    }
}

fn rows_from_report(
    seq_id: &str,
    strategy: Strategy,
    mode: Mode,
    report: &AdaptationReport,
    steps_list: &[usize],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &step in steps_list {
        let rec = report
            .steps
            .iter()
            .find(|r| r.step == step)
            .ok_or_else(|| Error::InvalidParam(format!("step {step} missing from report")))?;
        rows.push(EvalRow {
            seq_id: seq_id.to_string(),
            strategy,
            mode,
            step,
            loss: rec.loss,
            psnr: rec.psnr.ok_or_else(|| {
                Error::InvalidParam(format!("step {step} has no evaluation metrics"))
            })?,
            ssim: rec.ssim.unwrap(),
            adapt_ms: report.adapt_ms_per_step,
            infer_ms: report.infer_ms,
            n_params: report.param_count,
        });
    }
    Ok(rows)
}

/// Adapts one septuplet from a fresh identity adapter and reports metrics at
/// the requested steps.
pub fn evaluate_septuplet(
    s: &Septuplet,
    est: &EstimatorParams,
    bias: f64,
    strategy: Strategy,
    mode: Mode,
    steps_list: &[usize],
    eta: f64,
    seq_id: &str,
) -> Result<Vec<EvalRow>> {
    let max_step = steps_list.iter().copied().max().unwrap_or(0);
    let cfg = AdaptationConfig {
        strategy,
        mode,
        steps: max_step,
        eta,
        eval_every: 1,
    };
    let report = match mode {
        Mode::Plugin => {
            let flows = FlowProvider::estimated(est.clone(), bias)?;
            let mut adapter =
                AdapterParams::init_identity(s.height(), s.width(), AdapterMode::Direct)?;
            adapt(s, &flows, &mut adapter, &cfg)?
        }
        Mode::E2e => e2e_adapt(s, est, bias, &cfg)?.1,
    };
    rows_from_report(seq_id, strategy, mode, &report, steps_list)
}

/// Runs the full cartesian product of sequences x strategies x modes and
/// returns per-sequence rows plus mean-aggregate rows per cell. Sequences run
/// in a worker pool (capped by VFI_THREADS); output order is stable.
pub fn ablate(
    bench: &BenchSpec,
    est: &EstimatorParams,
    steps_list: &[usize],
    strategies: &[Strategy],
    modes: &[Mode],
    plugin_eta: f64,
    e2e_eta: f64,
) -> Result<Vec<EvalRow>> {
    if steps_list.is_empty() || strategies.is_empty() || modes.is_empty() {
        return Err(Error::InvalidParam("ablate needs non-empty lists".into()));
    }
    let results: Vec<Result<Vec<EvalRow>>> = bench
        .sequences
        .par_iter()
        .map(|spec| {
            let seq = synth_from_spec(spec)?;
            let mut rows = Vec::new();
            for &strategy in strategies {
                for &mode in modes {
                    let eta = match mode {
                        Mode::Plugin => plugin_eta,
                        Mode::E2e => e2e_eta,
                    };
                    rows.extend(evaluate_septuplet(
                        &seq.septuplet,
                        est,
                        bench.bias_gamma,
                        strategy,
                        mode,
                        steps_list,
                        eta,
                        &spec.id,
                    )?);
                }
            }
            Ok(rows)
        })
        .collect();
    let mut rows: Vec<EvalRow> = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        (&a.seq_id, a.strategy.name(), a.mode.name(), a.step).cmp(&(
            &b.seq_id,
            b.strategy.name(),
            b.mode.name(),
            b.step,
        ))
    });

    // Mean aggregates per (strategy, mode, step) cell.
    let mut cells: HashMap<(&'static str, &'static str, usize), Vec<&EvalRow>> = HashMap::new();
    for row in &rows {
        cells
            .entry((row.strategy.name(), row.mode.name(), row.step))
            .or_default()
            .push(row);
    }
    let mut aggregates = Vec::new();
    for &strategy in strategies {
        for &mode in modes {
            for &step in steps_list {
                let cell = &cells[&(strategy.name(), mode.name(), step)];
                let n = cell.len() as f64;
                aggregates.push(EvalRow {
                    seq_id: "aggregate".to_string(),
                    strategy,
                    mode,
                    step,
                    loss: cell.iter().map(|r| r.loss).sum::<f64>() / n,
                    psnr: cell.iter().map(|r| r.psnr).sum::<f64>() / n,
                    ssim: cell.iter().map(|r| r.ssim).sum::<f64>() / n,
                    adapt_ms: cell.iter().map(|r| r.adapt_ms).sum::<f64>() / n,
                    infer_ms: cell.iter().map(|r| r.infer_ms).sum::<f64>() / n,
                    n_params: cell[0].n_params,
                });
            }
        }
    }
    rows.extend(aggregates);
    Ok(rows)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

/// Builds the rayon pool respecting the VFI_THREADS cap. Call once at startup.
pub fn init_thread_pool() {
    if let Ok(val) = std::env::var("VFI_THREADS") {
        if let Ok(n) = val.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Frozen-baseline metrics of one septuplet (step-0 evaluation only).
pub fn baseline_metrics(
    s: &Septuplet,
    est: &EstimatorParams,
    bias: f64,
) -> Result<(f64, f64, f64, f64)> {
    let flows = FlowProvider::estimated(est.clone(), bias)?;
    let identity = AdapterParams::init_identity(s.height(), s.width(), AdapterMode::Direct)?;
    let t = Instant::now();
    let pred = evaluation_frame(s, &flows, &identity)?;
    let infer_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok((
        metrics::psnr(&pred, s.held_out())?,
        metrics::ssim(&pred, s.held_out())?,
        metrics::l1_loss(&pred, s.held_out())?,
        infer_ms,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_spec_round_trip() {
        let bench = BenchSpec::default_bench(0.6);
        assert_eq!(bench.sequences.len(), 20);
        let text = bench.to_spec_string();
        let back = BenchSpec::from_spec_str(&text).unwrap();
        assert_eq!(back.bias_gamma, 0.6);
        assert_eq!(back.sequences.len(), 20);
        for (a, b) in bench.sequences.iter().zip(&back.sequences) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.seed, b.seed);
        }
        assert!(BenchSpec::from_spec_str("bias_gamma=0.5\n").is_err());
        assert!(BenchSpec::from_spec_str("seq=translate,easy,64x64,1\nbias_gamma=2.0\n").is_err());
    }

    #[test]
    fn sequence_dir_round_trip() {
        let spec = SequenceSpec {
            id: "t".into(),
            kind: MotionKind::Translate,
            tier: VelocityTier::Easy,
            width: 32,
            height: 32,
            seed: 5,
        };
        let seq = synth_from_spec(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence_dir(&seq, dir.path()).unwrap();
        let loaded = load_sequence_dir(dir.path()).unwrap();
        // PNG quantization bound per sample.
        for i in 0..7 {
            let a = seq.septuplet.frame(i);
            let b = loaded.frame(i);
            let max_err = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 1.0 / 510.0 + 1e-12);
        }
        assert!(dir.path().join("gt_mid.png").exists());
        assert!(dir.path().join("flow_1to3.flo").exists());
    }

    #[test]
    fn ablate_row_count_and_determinism() {
        let bench = BenchSpec {
            bias_gamma: 1.0,
            sequences: vec![
                SequenceSpec {
                    id: "seq_000_translate_easy".into(),
                    kind: MotionKind::Translate,
                    tier: VelocityTier::Easy,
                    width: 32,
                    height: 32,
                    seed: 3,
                },
                SequenceSpec {
                    id: "seq_001_rotate_easy".into(),
                    kind: MotionKind::Rotate,
                    tier: VelocityTier::Easy,
                    width: 32,
                    height: 32,
                    seed: 4,
                },
            ],
        };
        let est = EstimatorParams {
            levels: 2,
            iters_per_level: 10,
            ..Default::default()
        };
        let steps = [0usize, 1];
        let strategies = [Strategy::Cycle, Strategy::Naive];
        let modes = [Mode::Plugin];
        let rows = ablate(&bench, &est, &steps, &strategies, &modes, 10.0, 0.1).unwrap();
        let expected = 2 * 2 * 1 * 2 + 2 * 1 * 2;
        assert_eq!(rows.len(), expected);
        // Deterministic apart from timing columns.
        let rows2 = ablate(&bench, &est, &steps, &strategies, &modes, 10.0, 0.1).unwrap();
        for (a, b) in rows.iter().zip(&rows2) {
            assert_eq!(a.seq_id, b.seq_id);
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.psnr, b.psnr);
            assert_eq!(a.ssim, b.ssim);
            assert_eq!(a.n_params, b.n_params);
        }
        // Shared identity start: cycle and naive step-0 rows agree.
        let find = |strategy: &str, step: usize| {
            rows.iter()
                .find(|r| r.seq_id == "seq_000_translate_easy" && r.strategy.name() == strategy && r.step == step)
                .unwrap()
        };
        assert_eq!(find("cycle", 0).psnr, find("naive", 0).psnr);
    }

    #[test]
    fn steps_zero_gives_frozen_baseline_rows() {
        let spec = SequenceSpec {
            id: "s".into(),
            kind: MotionKind::Translate,
            tier: VelocityTier::Medium,
            width: 32,
            height: 32,
            seed: 11,
        };
        let seq = synth_from_spec(&spec).unwrap();
        let est = EstimatorParams {
            levels: 2,
            iters_per_level: 10,
            ..Default::default()
        };
        let rows = evaluate_septuplet(
            &seq.septuplet,
            &est,
            1.0,
            Strategy::Cycle,
            Mode::Plugin,
            &[0],
            10.0,
            "s",
        )
        .unwrap();
        let (psnr, ssim, _, _) = baseline_metrics(&seq.septuplet, &est, 1.0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].psnr, psnr);
        assert_eq!(rows[0].ssim, ssim);
    }
}
