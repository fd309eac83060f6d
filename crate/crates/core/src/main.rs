use std::path::PathBuf;

use clap::{Parser, Subcommand};

use vfi::adaptation::{
    adapt, e2e_adapt, AdaptationConfig, FlowProvider, Mode, Strategy,
};
use vfi::adapter::{AdapterMode, AdapterParams};
use vfi::config::RunConfig;
use vfi::error::{Error, Result};
use vfi::harness::{
    ablate, baseline_metrics, init_thread_pool, load_sequence_dir, rows_to_csv,
    save_sequence_dir, synth_sequence, BenchSpec, MotionKind, ScenePattern, VelocityTier,
};
use vfi::imaging::io::{save_frame, write_flo};
use vfi::synth::{interpolate, FlowSource};

#[derive(Parser)]
#[command(
    name = "vfi",
    about = "Midpoint frame interpolation with test-time motion adaptation"
)]
struct Cli {
    /// Optional key=value config file overriding estimator and learning-rate
    /// defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic seven-frame sequence with exact ground truth.
    Synth {
        /// Motion family: translate, rotate, affine, multiblob.
        #[arg(long)]
        pattern: String,
        /// Velocity tier: easy, medium, hard, extreme.
        #[arg(long)]
        velocity: String,
        /// Resolution as WxH.
        #[arg(long, default_value = "128x128")]
        res: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate the midpoint of frames 3 and 5 of a sequence directory.
    Interpolate {
        #[arg(long)]
        seq: PathBuf,
        /// Output image path (.png or .ppm).
        #[arg(long)]
        out: PathBuf,
        /// Previously saved adapter parameters; identity when omitted.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Directory for the adapted intermediate flow fields (.flo).
        #[arg(long)]
        dump_flow: Option<PathBuf>,
        /// Multiplicative shrink applied to estimated flows, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        bias: f64,
    },
    /// Run test-time adaptation on one sequence and report the trajectory.
    Adapt {
        #[arg(long)]
        seq: PathBuf,
        /// cycle or naive.
        #[arg(long, default_value = "cycle")]
        strategy: String,
        /// plugin or e2e.
        #[arg(long, default_value = "plugin")]
        mode: String,
        /// Plugin adapter parameterization: direct or feature.
        #[arg(long, default_value = "direct")]
        adapter_mode: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Learning rate; defaults to the configured rate for the mode.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        bias: f64,
        /// Per-step CSV report path.
        #[arg(long)]
        report: PathBuf,
        /// Save the adapted parameters (plugin mode only).
        #[arg(long)]
        save_adapter: Option<PathBuf>,
    },
    /// Evaluate the frozen baseline against the held-out midpoint frame.
    Eval {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        bias: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the strategy x mode ablation over a benchmark.
    Ablate {
        /// Bench spec file; omit for the default 20-sequence bench.
        #[arg(long)]
        bench: Option<PathBuf>,
        /// Flow bias for the default bench (ignored when --bench is given).
        #[arg(long, default_value_t = 1.0)]
        bias: f64,
        #[arg(long, default_value = "0,5,10,20,30", value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, default_value = "cycle,naive", value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, default_value = "plugin,e2e", value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_res(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| Error::Format(format!("bad resolution: {s}")))?;
    Ok((
        w.parse()
            .map_err(|_| Error::Format(format!("bad width: {w}")))?,
        h.parse()
            .map_err(|_| Error::Format(format!("bad height: {h}")))?,
    ))
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "cycle" => Ok(Strategy::Cycle),
        "naive" => Ok(Strategy::Naive),
        other => Err(Error::Format(format!("unknown strategy: {other}"))),
    }
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "plugin" => Ok(Mode::Plugin),
        "e2e" => Ok(Mode::E2e),
        other => Err(Error::Format(format!("unknown mode: {other}"))),
    }
}

fn write_text(path: &PathBuf, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth {
            pattern,
            velocity,
            res,
            seed,
            out,
        } => {
            let kind = MotionKind::parse(&pattern)?;
            let tier = VelocityTier::parse(&velocity)?;
            let (w, h) = parse_res(&res)?;
            let scene = ScenePattern::from_tier(kind, tier, seed);
            let seq = synth_sequence(&scene, w, h, seed)?;
            save_sequence_dir(&seq, &out)?;
            println!(
                "wrote {} sequence ({}x{}, {} tier) to {}",
                kind.name(),
                w,
                h,
                tier.name(),
                out.display()
            );
        }
        Command::Interpolate {
            seq,
            out,
            adapter,
            dump_flow,
            bias,
        } => {
            let s = load_sequence_dir(&seq)?;
            let params = match adapter {
                Some(path) => AdapterParams::load(&path)?,
                None => AdapterParams::init_identity(s.height(), s.width(), AdapterMode::Direct)?,
            };
            let flows = FlowSource::Estimated { bias };
            let (frame, tape) =
                interpolate(s.frame(2), s.frame(4), &cfg.estimator, &flows, &params)?;
            save_frame(&frame, &out)?;
            if let Some(dir) = dump_flow {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let (f0, f1) = tape.adapted_flows();
                write_flo(f0, &dir.join("adapted_toward_earlier.flo"))?;
                write_flo(f1, &dir.join("adapted_toward_later.flo"))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Adapt {
            seq,
            strategy,
            mode,
            adapter_mode,
            steps,
            eta,
            bias,
            report,
            save_adapter,
        } => {
            let s = load_sequence_dir(&seq)?;
            let strategy = parse_strategy(&strategy)?;
            let mode = parse_mode(&mode)?;
            let eta = eta.unwrap_or(match mode {
                Mode::Plugin => cfg.plugin_eta,
                Mode::E2e => cfg.e2e_eta,
            });
            let acfg = AdaptationConfig {
                strategy,
                mode,
                steps,
                eta,
                eval_every: 1,
            };
            let rep = match mode {
                Mode::Plugin => {
                    let amode = match adapter_mode.as_str() {
                        "direct" => AdapterMode::Direct,
                        "feature" => AdapterMode::FeatureConditioned,
                        other => {
                            return Err(Error::Format(format!("unknown adapter mode: {other}")))
                        }
                    };
                    let flows = FlowProvider::estimated(cfg.estimator.clone(), bias)?;
                    let mut params = AdapterParams::init_identity(s.height(), s.width(), amode)?;
                    let rep = adapt(&s, &flows, &mut params, &acfg)?;
                    if let Some(path) = save_adapter {
                        params.save(&path)?;
                    }
                    rep
                }
                Mode::E2e => {
                    if save_adapter.is_some() {
                        return Err(Error::InvalidParam(
                            "--save-adapter applies to plugin mode only".into(),
                        ));
                    }
                    e2e_adapt(&s, &cfg.estimator, bias, &acfg)?.1
                }
            };
            write_text(&report, &rep.to_csv())?;
            let first = rep.steps.first().map(|r| r.loss).unwrap_or(f64::NAN);
            let last = rep.steps.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "{} {} adaptation: loss {first:.6} -> {last:.6} over {} steps ({} params); report at {}",
                strategy.name(),
                mode.name(),
                steps,
                rep.param_count,
                report.display()
            );
        }
        Command::Eval { seq, bias, report } => {
            let s = load_sequence_dir(&seq)?;
            let (psnr, ssim, l1, infer_ms) = baseline_metrics(&s, &cfg.estimator, bias)?;
            let text = format!(
                "metric,value\npsnr,{psnr:.6}\nssim,{ssim:.6}\nl1,{l1:.8}\ninfer_ms,{infer_ms:.3}\n"
            );
            write_text(&report, &text)?;
            println!("psnr {psnr:.3} dB, ssim {ssim:.4}, l1 {l1:.6}");
        }
        Command::Ablate {
            bench,
            bias,
            steps,
            strategies,
            modes,
            out,
        } => {
            init_thread_pool();
            let bench = match bench {
                Some(path) => BenchSpec::load(&path)?,
                None => BenchSpec::default_bench(bias),
            };
            let strategies: Vec<Strategy> = strategies
                .iter()
                .map(|s| parse_strategy(s))
                .collect::<Result<_>>()?;
            let modes: Vec<Mode> = modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?;
            let rows = ablate(
                &bench,
                &cfg.estimator,
                &steps,
                &strategies,
                &modes,
                cfg.plugin_eta,
                cfg.e2e_eta,
            )?;
            write_text(&out, &rows_to_csv(&rows))?;
            println!(
                "wrote {} rows ({} sequences) to {}",
                rows.len(),
                bench.sequences.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
