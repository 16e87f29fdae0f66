//! Command-line front end for the hybrid echo-control pipeline.
//!
//! Exit codes: 0 success, 2 input error (bad arguments, unreadable or
//! mismatched audio), 3 configuration error (bad config file, weights that do
//! not fit the configuration).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use hybrid_aec::io::{read_wav, write_f64_matrix, write_wav};
use hybrid_aec::metrics::{erle, measure_rtf, snr_db};
use hybrid_aec::pipeline::extract_features;
use hybrid_aec::postfilter::audit_footprint;
use hybrid_aec::subband_fb::{design_prototype, measure_round_trip_db, measure_tone_leakage_db};
use hybrid_aec::{
    process_stream, Condition, Error, MaskSource, MetricReport, ModelArch, ModelWeights, Pipeline,
    PipelineConfig, Result, Scenario, ScenarioSpec,
};

#[derive(Parser)]
#[command(name = "hybrid-aec", version, about = "Hybrid acoustic echo control: subband NLMS canceller plus neural mask postfilter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cancel echo in a microphone recording given the farend reference.
    Process(ProcessArgs),
    /// Generate synthetic scenario bundles (s, n, x, x_prime, d, y WAVs plus meta.txt).
    Simulate(SimulateArgs),
    /// Run the pipeline on a scenario bundle and score it against ground truth.
    Evaluate(EvaluateArgs),
    /// Print parameter count, MACs and latency of the postfilter configuration.
    Audit(AuditArgs),
    /// Design the filterbank prototype, report its quality and save the taps.
    DesignFb(DesignFbArgs),
    /// Write log-Bark features and ideal band masks of a scenario bundle for training.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct MaskArgs {
    /// Postfilter weights file.
    #[arg(long, conflicts_with = "oracle_mask")]
    weights: Option<PathBuf>,
    /// Use the oracle mask instead of a network: the ideal ratio mask when
    /// ground truth is available, otherwise an all-pass mask (LEC only).
    #[arg(long)]
    oracle_mask: bool,
}

#[derive(Args)]
struct ProcessArgs {
    /// Farend (loudspeaker) reference WAV.
    #[arg(long)]
    farend: PathBuf,
    /// Microphone WAV.
    #[arg(long)]
    mic: PathBuf,
    /// Output WAV (32-bit float), aligned with the input.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    mask: MaskArgs,
    /// Pipeline configuration file (flat `key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write a JSON metrics report (fields: condition, duration_s,
    /// latency_samples, erle_db, lec_erle_db, snr_in_db, snr_out_db, rtf).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory; with `--count` above one, bundles go to `clip_NNN` inside it.
    #[arg(long)]
    out: PathBuf,
    /// Base seed; clip `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// DT (double talk), STFE (farend only) or STNE (nearend only).
    #[arg(long, default_value = "DT")]
    condition: Condition,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Number of clips.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Disable the random augmentations (nonlinearity, crossfade, drift, ...).
    #[arg(long)]
    plain: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Scenario bundle directory.
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write a JSON metrics report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the enhanced signal.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit the architecture stored in this weights file instead of the default.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the audit text to a file as well.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DesignFbArgs {
    /// Output file for the prototype taps.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the white-noise round-trip measurement.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    /// Scenario bundle directory.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory: `features.f64` (frames x 3B), `targets.f64`
    /// (frames x B) and `bark_map.f64`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn mask_source(args: &MaskArgs, with_truth: bool) -> Result<MaskSource<f32>> {
    Ok(match (&args.weights, args.oracle_mask) {
        (Some(path), _) => MaskSource::network(&ModelWeights::load(path)?),
        (None, true) if with_truth => MaskSource::Ideal,
        _ => MaskSource::Unity,
    })
}

fn check_rate(what: &str, rate: u32, cfg: &PipelineConfig) -> Result<()> {
    if rate != cfg.stft.sample_rate {
        return Err(Error::InvalidInput(format!(
            "{what} is sampled at {rate} Hz, the configuration expects {} Hz",
            cfg.stft.sample_rate
        )));
    }
    Ok(())
}

fn write_report(path: Option<&Path>, report: &MetricReport) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, report.to_json())?;
    }
    Ok(())
}

fn process(a: ProcessArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (x, fx) = read_wav::<f32>(&a.farend)?;
    let (y, fy) = read_wav::<f32>(&a.mic)?;
    check_rate("farend", fx, &cfg)?;
    check_rate("mic", fy, &cfg)?;
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "farend has {} samples, mic has {}",
            x.len(),
            y.len()
        )));
    }
    let mut p = Pipeline::new(cfg.clone(), mask_source(&a.mask, false)?)?;
    let duration = x.len() as f64 / f64::from(fx);
    let (s_hat, rtf) = measure_rtf(duration, || process_stream(&mut p, &x, &y, None))?;
    let s_hat = s_hat?;
    write_wav(&a.out, &s_hat, fy)?;
    let report = MetricReport {
        duration_s: duration,
        latency_samples: p.latency(),
        erle_db: erle(&y, &s_hat).ok(),
        rtf: Some(rtf),
        ..Default::default()
    };
    print!("{}", report.to_text());
    write_report(a.report.as_deref(), &report)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    for i in 0..a.count {
        let seed = a.seed + i as u64;
        let spec = if a.plain {
            ScenarioSpec::plain(a.condition, a.duration, seed)
        } else {
            ScenarioSpec::sample(a.condition, a.duration, seed)
        };
        let sc = hybrid_aec::scenario::generate::<f64>(&spec)?;
        let dir = if a.count == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("clip_{i:03}"))
        };
        sc.write_bundle(&dir)?;
        println!("{} {} seed {seed}", dir.display(), a.condition.label());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let sc = Scenario::<f32>::read_bundle(&a.scenario)?;
    check_rate("scenario", sc.sample_rate(), &cfg)?;
    let mask = mask_source(&a.mask, true)?;
    let target = matches!(mask, MaskSource::Ideal).then_some(sc.s.as_slice());
    let duration = sc.x.len() as f64 / f64::from(sc.sample_rate());

    let mut p = Pipeline::new(cfg.clone(), mask)?;
    let (s_hat, rtf) = measure_rtf(duration, || process_stream(&mut p, &sc.x, &sc.y, target))?;
    let s_hat = s_hat?;
    let lec_out = process_stream(&mut Pipeline::new(cfg, MaskSource::Unity)?, &sc.x, &sc.y, None)?;

    let residual = |v: &[f32]| -> Vec<f32> { v.iter().zip(&sc.s).map(|(a, b)| a - b).collect() };
    let report = MetricReport {
        condition: Some(sc.meta.condition),
        duration_s: duration,
        latency_samples: p.latency(),
        erle_db: erle(&sc.y, &s_hat).ok(),
        lec_erle_db: erle(&sc.y, &lec_out).ok(),
        snr_in_db: snr_db(&sc.s, &residual(&sc.y)).ok(),
        snr_out_db: snr_db(&sc.s, &residual(&s_hat)).ok(),
        rtf: Some(rtf),
    };
    if let Some(out) = &a.out {
        write_wav(out, &s_hat, sc.sample_rate())?;
    }
    print!("{}", report.to_text());
    write_report(a.report.as_deref(), &report)
}

fn audit(a: AuditArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let arch = match &a.weights {
        Some(p) => ModelWeights::load(p)?.arch().clone(),
        None => ModelArch::default_for(cfg.stft.num_bins(), cfg.num_bands),
    };
    arch.validate()?;
    let frame_rate = cfg.stft.frame_rate();
    let fp = audit_footprint(&arch, frame_rate);
    let latency = cfg.latency();
    let mut text = String::new();
    text += &format!("params {}\n", fp.params);
    text += &format!("macs_per_frame {}\n", fp.macs_per_frame);
    text += &format!("macs_per_s {:.0}\n", fp.macs_per_s);
    text += &format!("frame_rate_hz {frame_rate}\n");
    text += &format!("latency_samples {latency}\n");
    text += &format!(
        "latency_ms {:.2}\n",
        1000.0 * latency as f64 / f64::from(cfg.stft.sample_rate)
    );
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text)?;
    }
    Ok(())
}

fn design_fb(a: DesignFbArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let fb = &cfg.filterbank;
    let proto = Arc::new(design_prototype::<f64>(fb.prototype_len, fb.num_subbands, fb.decimation)?);
    let fs = f64::from(cfg.stft.sample_rate);
    let round_trip = measure_round_trip_db(&proto, cfg.stft.sample_rate as usize, a.seed)?;
    let spacing = fs / fb.num_subbands as f64;
    let mut leakage = f64::NEG_INFINITY;
    let mut f = spacing * 3.2;
    while f < fs / 2.0 - 3.0 * spacing {
        leakage = leakage.max(measure_tone_leakage_db(&proto, fs, f, 1.5)?);
        f += spacing * 3.1;
    }
    proto.save(&a.out)?;
    println!("taps {}", proto.len());
    println!("group_delay {}", proto.group_delay());
    println!("round_trip_db {round_trip:.1}");
    println!("max_tone_leakage_db {leakage:.1}");
    Ok(())
}

fn export_features(a: ExportArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let sc = Scenario::<f64>::read_bundle(&a.scenario)?;
    check_rate("scenario", sc.sample_rate(), &cfg)?;
    let (features, targets) = extract_features(&cfg, &sc.x, &sc.y, Some(&sc.s))?;
    let targets = targets.unwrap_or_default();
    fs::create_dir_all(&a.out)?;
    let b = cfg.num_bands;
    write_f64_matrix(a.out.join("features.f64"), features.len(), 3 * b, &features.concat())?;
    write_f64_matrix(a.out.join("targets.f64"), targets.len(), b, &targets.concat())?;
    Pipeline::<f64>::new(cfg, MaskSource::Unity)?
        .bark_map()
        .save(a.out.join("bark_map.f64"))?;
    println!("frames {} features {} bands {b}", features.len(), 3 * b);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Process(a) => process(a),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Audit(a) => audit(a),
        Command::DesignFb(a) => design_fb(a),
        Command::ExportFeatures(a) => export_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 3 } else { 2 })
        }
    }
}
