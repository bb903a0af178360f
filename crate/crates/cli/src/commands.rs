use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ctts::acoustic::{read_mel, write_mel, MelSpectrogram};
use ctts::frontend::Inventory;
use ctts::modelfile::{self, footprint_report, load_dir, read_manifest, save_dir, Manifest, MODEL_FILE};
use ctts::pipeline::{Preset, TtsModel};
use ctts::quant::CalibMethod;
use ctts::vocoder::{pcm_bytes, prune_vocoder, wav_header, write_wav, VocoderPreset};

use crate::bench::{run_bench, workers_from_env, BenchConfig};
use crate::CliError;

/// Bytes each extra voice costs in the reference system.
pub const REFERENCE_VOICE_BYTES: f64 = 5.7e6;

#[derive(Debug, Parser)]
#[command(name = "ctts", version, about = "Compact neural text-to-speech")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a model directory with seeded random weights.
    InitRandom(InitArgs),
    /// Text to WAV through all three stages.
    Synth(SynthArgs),
    /// Mel dump to WAV through the vocoder only.
    Vocode(VocodeArgs),
    /// Convert the acoustic model's quantizable weights to INT8.
    Quantize(QuantizeArgs),
    /// Progressively prune the vocoder and store it block-sparse.
    Prune(PruneArgs),
    /// Median latency and real-time factor over a sentence file.
    Bench(BenchArgs),
    /// Footprint, sharing and sparsity tables.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, default_value = "optimized")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the frontend's input and output length cap.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub max_len: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write audio to `--out` chunk by chunk as it is generated.
    #[arg(long)]
    pub stream: bool,
    /// Also write the mel spectrogram here.
    #[arg(long)]
    pub mel_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VocodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub mel: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `maxabs`, `percentile` (99.9) or `percentile:<p>`.
    #[arg(long, default_value = "maxabs")]
    pub method: CalibMethod,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Final block sparsity for every prunable matrix, in [0, 1).
    #[arg(long, default_value_t = 0.85)]
    pub target: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// UTF-8 text, one sentence per line.
    #[arg(long)]
    pub text_file: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::InitRandom(a) => init_random(&a, out),
        Command::Synth(a) => synth(&a, out),
        Command::Vocode(a) => vocode(&a, out),
        Command::Quantize(a) => quantize(&a, out),
        Command::Prune(a) => prune(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::Inspect(a) => inspect(&a, out),
    }
}

pub fn init_model(preset: Preset, seed: u64, max_len: Option<usize>) -> Result<TtsModel, CliError> {
    let (mut fe, ac, voc) = TtsModel::configs_for(preset);
    if let Some(n) = max_len {
        fe.max_len = n;
    }
    Ok(TtsModel::from_configs(fe, ac, voc, preset == Preset::Optimized, seed)?)
}

fn init_random(a: &InitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = init_model(a.preset, a.seed, a.max_len.map(|n| n as usize))?;
    let n = save_dir(&a.out, &model, &Inventory::default_graphemes(), &Inventory::default_phonemes())?;
    writeln!(out, "wrote {} ({n} bytes, preset {:?}, seed {})", a.out.join(MODEL_FILE).display(), a.preset, a.seed)?;
    Ok(())
}

fn wav_file(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.text.trim().is_empty() {
        return Err(CliError::Usage("--text must not be empty".into()));
    }
    let dir = load_dir(&a.model)?;
    let synth = dir.model.synthesizer()?;
    let sample_rate = dir.model.vocoder.config.sample_rate;
    let file = std::cell::RefCell::new(wav_file(&a.out)?);
    let result = if a.stream {
        // the header needs the sample count, which is known once the mel is
        let mut on_mel = |mel: &MelSpectrogram| -> std::io::Result<()> {
            let mut f = file.borrow_mut();
            f.write_all(&wav_header(mel.n_samples(), sample_rate))?;
            f.flush()
        };
        let mut sink = |c: &[i16]| -> std::io::Result<()> {
            let mut f = file.borrow_mut();
            f.write_all(&pcm_bytes(c))?;
            f.flush()
        };
        synth.synthesize_streaming(&dir.graphemes, &a.text, a.seed, &mut on_mel, &mut sink)?
    } else {
        let r = synth.synthesize(&dir.graphemes, &a.text, a.seed)?;
        write_wav(&mut *file.borrow_mut(), &r.waveform.samples, sample_rate)?;
        r
    };
    file.borrow_mut().flush()?;
    if let Some(path) = &a.mel_out {
        write_mel(&mut wav_file(path)?, &result.mel.frames).map_err(ctts::pipeline::PipelineError::from)?;
    }
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    writeln!(
        out,
        "synth frontend_ms={:.3} acoustic_ms={:.3} vocoder_ms={:.3} total_ms={:.3} phonemes={} frames={} samples={} iterations={} rng_draws={} audio_ms={:.3}",
        ms(result.times.frontend),
        ms(result.times.acoustic),
        ms(result.times.vocoder),
        ms(result.total),
        result.phonemes.len(),
        result.mel.n_frames(),
        result.waveform.samples.len(),
        result.waveform.iterations,
        result.waveform.rng_draws,
        result.waveform.duration_secs() * 1e3
    )?;
    Ok(())
}

fn vocode(a: &VocodeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = load_dir(&a.model)?;
    let bytes = fs::read(&a.mel)?;
    let frames = read_mel(&mut bytes.as_slice()).map_err(|e| CliError::Usage(format!("--mel: {e}")))?;
    let cfg = &dir.model.vocoder.config;
    let mel = MelSpectrogram { frames, frame_hop: cfg.frame_hop };
    let wave = dir.model.synthesizer()?.vocoder.generate(&mel, a.seed).map_err(ctts::pipeline::PipelineError::from)?;
    write_wav(&mut wav_file(&a.out)?, &wave.samples, wave.sample_rate)?;
    writeln!(out, "vocode frames={} samples={} iterations={}", mel.n_frames(), wave.samples.len(), wave.iterations)?;
    Ok(())
}

fn quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut dir = load_dir(&a.input)?;
    let before = dir.model.acoustic.store.physical_bytes();
    let outcome = dir
        .model
        .acoustic
        .store
        .quantize(a.method)
        .map_err(|e| CliError::Stage { stage: "acoustic", message: e.to_string() })?;
    writeln!(out, "{:<32} {:>10} {:>12} {:>12} {:>5}", "tensor", "max|w|", "scale", "max err", "ok")?;
    for r in &outcome.reports {
        writeln!(
            out,
            "{:<32} {:>10.5} {:>12.4e} {:>12.4e} {:>5}",
            r.name,
            r.max_abs,
            r.scale,
            r.max_err,
            r.within_bound()
        )?;
    }
    for name in &outcome.skipped {
        writeln!(out, "skipped {name}: already int8")?;
    }
    let after = dir.model.acoustic.store.physical_bytes();
    let n = save_dir(&a.out, &dir.model, &dir.graphemes, &dir.phonemes)?;
    writeln!(
        out,
        "quantize method={} converted={} skipped={} acoustic_bytes_before={before} acoustic_bytes_after={after} file_bytes={n}",
        a.method,
        outcome.reports.len(),
        outcome.skipped.len()
    )?;
    Ok(())
}

fn prune(a: &PruneArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&a.target) {
        return Err(CliError::Usage(format!("--target must be in [0, 1), got {}", a.target)));
    }
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let mut dir = load_dir(&a.input)?;
    let voc = &mut dir.model.vocoder;
    let before = voc.store.physical_bytes();
    voc.config.preset = VocoderPreset::Sparse;
    voc.config.gru_hh_sparsity = a.target;
    voc.config.postnet_sparsity = a.target;
    let trace = prune_vocoder(&mut voc.store, &voc.config, a.steps).map_err(ctts::pipeline::PipelineError::from)?;
    for (t, s) in trace.steps.iter().enumerate() {
        writeln!(out, "step {} sparsity {s:.6}", t + 1)?;
    }
    for (slot, s) in &trace.matrices {
        writeln!(out, "matrix {slot} sparsity {s:.6}")?;
    }
    let after = voc.store.physical_bytes();
    let n = save_dir(&a.out, &dir.model, &dir.graphemes, &dir.phonemes)?;
    writeln!(
        out,
        "prune target={} steps={} vocoder_bytes_before={before} vocoder_bytes_after={after} ratio={:.4} file_bytes={n}",
        a.target,
        a.steps,
        after as f64 / before as f64
    )?;
    Ok(())
}

pub fn read_sentences(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if lines.is_empty() {
        return Err(CliError::Usage(format!("{} has no sentences", path.display())));
    }
    Ok(lines)
}

fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let texts = read_sentences(&a.text_file)?;
    let workers = workers_from_env().map_err(CliError::Usage)?;
    let dir = load_dir(&a.model)?;
    let synth = dir.model.synthesizer()?;
    let cfg = BenchConfig { iters: a.iters, warmup: a.warmup, seed: a.seed, workers };
    let report = run_bench(&synth, &dir.graphemes, &texts, &cfg)?;
    write!(out, "{}", report.table())?;
    writeln!(out, "{}", report.kv_line())?;
    Ok(())
}

/// Inspection derived from the container bytes alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    pub report: modelfile::FootprintReport,
    /// `(component, logical bytes, physical bytes)`; logical counts every
    /// slot as if it had its own aligned blob.
    pub sharing: Vec<(String, usize, usize)>,
    /// `(slot, target, achieved, kept blocks)`.
    pub sparsity: Vec<(String, f64, f64, usize)>,
}

pub fn inspect_bytes(bytes: &[u8]) -> Result<Inspection, CliError> {
    let report = footprint_report(bytes)?;
    let (manifest, _): (Manifest, usize) = read_manifest(bytes)?;
    let mut sharing = Vec::new();
    let mut sparsity = Vec::new();
    for c in &manifest.components {
        let blob = |id: usize| c.tensors.iter().find(|t| t.id == id).and_then(|t| t.bytes).unwrap_or(0) as usize;
        let logical = c.tensors.iter().map(|d| modelfile::align_up(blob(d.alias_of.unwrap_or(d.id)))).sum();
        let physical = report.component(&c.name).map(|f| f.bytes).unwrap_or(0);
        sharing.push((c.name.clone(), logical, physical));
        for d in c.tensors.iter().filter(|d| !d.is_alias()) {
            if let Some(s) = d.sparsity {
                sparsity.push((d.name.clone(), s.target, s.achieved, d.kept_blocks.unwrap_or(0)));
            }
        }
    }
    Ok(Inspection { report, sharing, sparsity })
}

fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    load_dir(&a.model)?;
    let bytes = fs::read(a.model.join(MODEL_FILE))?;
    let ins = inspect_bytes(&bytes)?;
    let mb = |b: usize| b as f64 / 1e6;
    writeln!(out, "{:<10} {:>6} {:>6} {:>12} {:>9}", "component", "slots", "blobs", "bytes", "MB")?;
    writeln!(out, "{:<10} {:>6} {:>6} {:>12} {:>9.3}", "header", "", "", ins.report.header, mb(ins.report.header))?;
    writeln!(
        out,
        "{:<10} {:>6} {:>6} {:>12} {:>9.3}",
        "manifest",
        "",
        "",
        ins.report.manifest,
        mb(ins.report.manifest)
    )?;
    for c in &ins.report.components {
        writeln!(out, "{:<10} {:>6} {:>6} {:>12} {:>9.3}", c.name, c.logical_tensors, c.blobs, c.bytes, mb(c.bytes))?;
    }
    writeln!(out, "{:<10} {:>6} {:>6} {:>12} {:>9.3}", "total", "", "", ins.report.total, mb(ins.report.total))?;
    for (name, logical, physical) in &ins.sharing {
        writeln!(
            out,
            "sharing {name} logical_bytes={logical} physical_bytes={physical} savings_bytes={}",
            logical - physical
        )?;
    }
    for (slot, target, achieved, kept) in &ins.sparsity {
        writeln!(out, "sparsity {slot} target={target:.4} achieved={achieved:.4} kept_blocks={kept}")?;
    }
    let voice = ins.report.per_voice();
    writeln!(
        out,
        "per_voice_bytes={voice} per_voice_mb={:.3} reference_mb={:.1} total_bytes={}",
        mb(voice),
        REFERENCE_VOICE_BYTES / 1e6,
        ins.report.total
    )?;
    Ok(())
}
