//! `rdc` — command-line surface for the variable-complexity image codec:
//! synthetic corpus generation, three-stage training, encode/decode, RD and
//! timing benchmarks, BD-rate, and mask/entropy visualization.

mod report;

use clap::{Parser, Subcommand};
use rdc_core::arr::Arr;
use rdc_core::codec::{decode_image, encode_image, MaskMode};
use rdc_core::corpus::{gen_corpus, LabeledImage};
use rdc_core::ctx::{Ctx, PureCtx};
use rdc_core::entropy::{gaussian_rate, GaussianParams};
use rdc_core::error::{RdcError, Result};
use rdc_core::img;
use rdc_core::mask::ComplexityLevel;
use rdc_core::metrics::{bd_rate, psnr, RdPoint};
use rdc_core::model::{ArchConfig, CodecModel};
use rdc_core::training::{TrainConfig, Trainer};
use report::{median, pearson_r, write_csv, write_svg_chart, Series};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rdc", version, about = "Variable-complexity image codec toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus (PPM images + PGM label maps).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the three-stage training schedule and write a model file.
    Train {
        #[arg(long)]
        lambda_d: u32,
        #[arg(long)]
        out: PathBuf,
        /// Directory of img_*.ppm training images; synthetic corpus if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// key=value overrides for the schedule (see README).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step CSV training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write a checkpoint here after every stage and at the end.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resume from a checkpoint written by --checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compress a PPM image to a bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        /// learned | all-zero | all-one | handcrafted
        #[arg(long, default_value = "learned")]
        mask_mode: String,
        #[arg(long)]
        out: PathBuf,
        input: PathBuf,
    },
    /// Decompress a bitstream to a PPM image and print decode stats.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the decoded mask as a PGM image.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        input: PathBuf,
    },
    /// Rate–distortion curves per level across several trained models.
    Eval {
        /// Model files (one per lambda_d); repeat the flag.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0,1")]
        levels: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Limit the number of corpus images used.
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Decode-timing sweep over levels; reports T/T_e/T_n and Pearson r.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
        levels: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Bjontegaard delta rate between two bpp,psnr CSV curves.
    BdRate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Per-level mask images and latent-entropy heat maps.
    Viz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "0,0.5,1")]
        levels: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Err(code) = check_thread_env() {
        return code;
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Exit codes: 0 success, 2 usage error, 3 data error, 4 model/stream
/// mismatch. clap exits with 2 on its own for malformed invocations.
fn exit_code(e: &RdcError) -> u8 {
    match e {
        RdcError::InvalidArgument(_) => 2,
        RdcError::ModelMismatch(_) => 4,
        _ => 3,
    }
}

/// RDC_THREADS caps the worker count. The engine is single-threaded, so any
/// positive cap is honored as-is; zero or garbage is a usage error.
fn check_thread_env() -> std::result::Result<(), ExitCode> {
    if let Ok(v) = std::env::var("RDC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => {
                eprintln!("error: RDC_THREADS must be a positive integer, got {v:?}");
                Err(ExitCode::from(2))
            }
        }
    } else {
        Ok(())
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, count, size, seed } => cmd_gen_data(&out, count, size, seed),
        Command::Train { lambda_d, out, data, config, seed, log, checkpoint, resume } => {
            cmd_train(lambda_d, &out, data.as_deref(), config.as_deref(), seed, log.as_deref(), checkpoint.as_deref(), resume.as_deref())
        }
        Command::Encode { model, level, mask_mode, out, input } => {
            cmd_encode(&model, level, &mask_mode, &out, &input)
        }
        Command::Decode { model, out, mask_out, input } => {
            cmd_decode(&model, &out, mask_out.as_deref(), &input)
        }
        Command::Eval { models, data, levels, out, svg, max_images } => {
            cmd_eval(&models, &data, &levels, &out, svg.as_deref(), max_images)
        }
        Command::Bench { model, data, levels, repeats, out, max_images } => {
            cmd_bench(&model, &data, &levels, repeats, &out, max_images)
        }
        Command::BdRate { anchor, test } => cmd_bd_rate(&anchor, &test),
        Command::Viz { model, image, levels, out } => cmd_viz(&model, &image, &levels, &out),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out).map_err(RdcError::Io)?;
    let corpus = gen_corpus(count, size, seed)?;
    for (i, li) in corpus.iter().enumerate() {
        img::write_ppm(&out.join(format!("img_{i:04}.ppm")), &li.image)?;
        img::write_pgm(&out.join(format!("lbl_{i:04}.pgm")), &li.label_map())?;
    }
    println!("wrote {count} images of {size}x{size} to {}", out.display());
    Ok(())
}

/// Loads img_*.ppm (plus lbl_*.pgm label maps when present) from a directory.
fn load_corpus(dir: &Path, max_images: Option<usize>) -> Result<Vec<LabeledImage>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(RdcError::Io)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("img_") && n.ends_with(".ppm"))
        .collect();
    names.sort();
    if let Some(m) = max_images {
        names.truncate(m);
    }
    if names.is_empty() {
        return Err(RdcError::Data(format!(
            "no img_*.ppm files in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(names.len());
    for n in &names {
        let image = img::read_ppm(&dir.join(n))?;
        let (h, w) = (image.shape[1], image.shape[2]);
        let lbl_path = dir.join(n.replace("img_", "lbl_").replace(".ppm", ".pgm"));
        let labels = if lbl_path.exists() {
            let m = img::read_pgm(&lbl_path)?;
            m.data.iter().map(|&v| (v * 2.0).round() as u8).collect()
        } else {
            vec![0u8; h * w]
        };
        out.push(LabeledImage { image, labels });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct CorpusSpec {
    n: usize,
    size: usize,
    seed: u64,
}

fn apply_config_line(cfg: &mut TrainConfig, corpus: &mut CorpusSpec, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| RdcError::InvalidArgument(format!("config {key}={value}: bad {what}"));
    match key {
        "schedule" => {
            *cfg = match value {
                "toy" => TrainConfig::toy(cfg.lambda_d),
                "desk" => TrainConfig::desk(cfg.lambda_d),
                _ => return Err(bad("schedule (toy|desk)")),
            }
        }
        "arch" => {
            cfg.arch = match value {
                "tiny" => ArchConfig::tiny(),
                "toy" => ArchConfig::toy(),
                "desk" => ArchConfig::desk(),
                _ => return Err(bad("arch (tiny|toy|desk)")),
            }
        }
        "stage0_steps" => cfg.stage0_steps = value.parse().map_err(|_| bad("integer"))?,
        "stage1_steps" => cfg.stage1_steps = value.parse().map_err(|_| bad("integer"))?,
        "stage2_steps" => cfg.stage2_steps = value.parse().map_err(|_| bad("integer"))?,
        "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
        "lr_late" => cfg.lr_late = value.parse().map_err(|_| bad("number"))?,
        "batch" => cfg.batch = value.parse().map_err(|_| bad("integer"))?,
        "crop" => cfg.crop = value.parse().map_err(|_| bad("integer"))?,
        "s" => cfg.s = value.parse().map_err(|_| bad("number"))?,
        "tau_start" => cfg.tau_start = value.parse().map_err(|_| bad("number"))?,
        "tau_end" => cfg.tau_end = value.parse().map_err(|_| bad("number"))?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
        "corpus_n" => corpus.n = value.parse().map_err(|_| bad("integer"))?,
        "corpus_size" => corpus.size = value.parse().map_err(|_| bad("integer"))?,
        "corpus_seed" => corpus.seed = value.parse().map_err(|_| bad("integer"))?,
        _ => return Err(RdcError::InvalidArgument(format!("unknown config key {key}"))),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    lambda_d: u32,
    out: &Path,
    data: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    log_path: Option<&Path>,
    checkpoint: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = TrainConfig::toy(lambda_d);
    let mut corpus_spec = CorpusSpec { n: 24, size: 128, seed: 1 };
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(RdcError::Io)?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                RdcError::InvalidArgument(format!("config line {}: expected key=value", ln + 1))
            })?;
            apply_config_line(&mut cfg, &mut corpus_spec, key.trim(), value.trim())?;
        }
        cfg.lambda_d = lambda_d;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let corpus = match data {
        Some(dir) => load_corpus(dir, None)?,
        None => gen_corpus(corpus_spec.n, corpus_spec.size, corpus_spec.seed)?,
    };

    let mut trainer = match resume {
        Some(path) => Trainer::load_checkpoint(cfg, path)?,
        None => Trainer::new(cfg)?,
    };
    let total = trainer.config.total_steps();
    let mut log = Vec::new();
    let mut last_stage = u8::MAX;
    while trainer.step < total {
        let row = trainer.step_once(&corpus)?;
        if row.stage != last_stage {
            last_stage = row.stage;
            if let Some(path) = checkpoint {
                trainer.save_checkpoint(path)?;
            }
        }
        if row.step % 50 == 0 || row.step + 1 == total {
            println!(
                "step {}/{total} stage {} loss {:.4} bpp {:.4} ce {:.3} lr {:.1e}",
                row.step, row.stage, row.terms.total, row.terms.rate_bpp, row.hard_ce, row.lr
            );
        }
        log.push(row);
    }
    if let Some(path) = checkpoint {
        trainer.save_checkpoint(path)?;
    }
    trainer.model.save(out)?;
    if let Some(path) = log_path {
        let rows: Vec<String> = log
            .iter()
            .map(|r| {
                format!(
                    "{},{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.4},{:.6},{:.2e}",
                    r.step,
                    r.stage,
                    r.terms.rate_bpp,
                    r.terms.weighted_distortion,
                    r.terms.complexity,
                    r.terms.total,
                    r.hard_ce,
                    r.level,
                    r.lambda_c,
                    r.lr
                )
            })
            .collect();
        write_csv(path, "step,stage,rate_bpp,weighted_distortion,complexity,total,hard_ce,level,lambda_c,lr", &rows)?;
    }
    println!("model written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    match s {
        "learned" => Ok(MaskMode::Learned),
        "all-zero" => Ok(MaskMode::AllZero),
        "all-one" => Ok(MaskMode::AllOne),
        "handcrafted" => Ok(MaskMode::Handcrafted),
        _ => Err(RdcError::InvalidArgument(format!(
            "mask mode {s:?} (expected learned|all-zero|all-one|handcrafted)"
        ))),
    }
}

fn cmd_encode(model_path: &Path, level: f64, mask_mode: &str, out: &Path, input: &Path) -> Result<()> {
    // Validate arguments before touching the filesystem so usage errors get
    // the usage exit code.
    let level = ComplexityLevel::new(level)?;
    let mode = parse_mask_mode(mask_mode)?;
    let model = CodecModel::load(model_path)?;
    let image = img::read_ppm(input)?;
    let enc = encode_image(&model, &image, level, mode)?;
    let (h, w) = (image.shape[1], image.shape[2]);
    fs::write(out, &enc.bytes).map_err(RdcError::Io)?;
    println!(
        "{} -> {} bytes, {:.4} bpp, C_e {:.4}",
        input.display(),
        enc.bytes.len(),
        enc.bpp(h, w),
        rdc_core::mask::compute_ce(&enc.mask)
    );
    Ok(())
}

fn cmd_decode(model_path: &Path, out: &Path, mask_out: Option<&Path>, input: &Path) -> Result<()> {
    let model = CodecModel::load(model_path)?;
    let bytes = fs::read(input).map_err(RdcError::Io)?;
    let dec = decode_image(&model, &bytes)?;
    img::write_ppm(out, &dec.image)?;
    if let Some(path) = mask_out {
        let plane = dec.mask.to_plane();
        let (h, w) = (plane.shape[0], plane.shape[1]);
        let shaped = Arr::from_vec(&[1, h, w], plane.data)?;
        img::write_pgm(path, &shaped)?;
    }
    let s = &dec.stats;
    println!(
        "ce={:.4} serial_steps={} t_total_ms={:.3} t_entropy_ms={:.3} t_network_ms={:.3} bits_z={} bits_y={}",
        s.achieved_ce,
        s.serial_steps,
        s.t_total.as_secs_f64() * 1e3,
        s.t_entropy.as_secs_f64() * 1e3,
        s.t_network.as_secs_f64() * 1e3,
        s.bits_z,
        s.bits_y
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn parse_levels(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| RdcError::InvalidArgument(format!("bad level {t:?}")))
                .and_then(|l| ComplexityLevel::new(l).map(|_| l))
        })
        .collect()
}

fn cmd_eval(
    models: &[PathBuf],
    data: &Path,
    levels: &str,
    out: &Path,
    svg: Option<&Path>,
    max_images: Option<usize>,
) -> Result<()> {
    let levels = parse_levels(levels)?;
    let corpus = load_corpus(data, max_images)?;
    let loaded: Vec<CodecModel> = models.iter().map(|p| CodecModel::load(p)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut series = Vec::new();
    for &level in &levels {
        let cl = ComplexityLevel::new(level)?;
        let mut points = Vec::new();
        for model in &loaded {
            let mut bpp_sum = 0.0;
            let mut psnr_sum = 0.0;
            for li in &corpus {
                let (h, w) = li.size();
                let enc = encode_image(model, &li.image, cl, MaskMode::Learned)?;
                let dec = decode_image(model, &enc.bytes)?;
                bpp_sum += enc.bpp(h, w);
                psnr_sum += psnr(&li.image, &dec.image)?;
            }
            let n = corpus.len() as f64;
            let (bpp, p) = (bpp_sum / n, psnr_sum / n);
            rows.push(format!("{level},{},{bpp:.6},{p:.4}", model.lambda_d));
            points.push((bpp, p));
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        series.push(Series {
            name: format!("l={level}"),
            points,
        });
    }
    write_csv(out, "level,lambda_d,bpp,psnr", &rows)?;
    if let Some(path) = svg {
        write_svg_chart(path, "Rate-distortion by complexity level", "bits per pixel", "PSNR (dB)", &series)?;
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(
    model_path: &Path,
    data: &Path,
    levels: &str,
    repeats: usize,
    out: &Path,
    max_images: Option<usize>,
) -> Result<()> {
    if repeats == 0 {
        return Err(RdcError::InvalidArgument("--repeats must be positive".into()));
    }
    let levels = parse_levels(levels)?;
    let model = CodecModel::load(model_path)?;
    let corpus = load_corpus(data, max_images)?;

    let mut rows = Vec::new();
    let mut level_te = Vec::new();
    let mut level_ce = Vec::new();
    for &level in &levels {
        let cl = ComplexityLevel::new(level)?;
        let mut t_tot = Vec::new();
        let mut t_ent = Vec::new();
        let mut t_net = Vec::new();
        let mut steps = 0usize;
        let mut ce_sum = 0.0;
        for li in &corpus {
            let enc = encode_image(&model, &li.image, cl, MaskMode::Learned)?;
            for rep in 0..repeats {
                let dec = decode_image(&model, &enc.bytes)?;
                t_tot.push(dec.stats.t_total.as_secs_f64() * 1e3);
                t_ent.push(dec.stats.t_entropy.as_secs_f64() * 1e3);
                t_net.push(dec.stats.t_network.as_secs_f64() * 1e3);
                if rep == 0 {
                    steps += dec.stats.serial_steps;
                    ce_sum += dec.stats.achieved_ce;
                }
            }
        }
        let n = corpus.len() as f64;
        let (mt, me, mn) = (median(&mut t_tot), median(&mut t_ent), median(&mut t_net));
        let ce = ce_sum / n;
        rows.push(format!(
            "{level},{ce:.6},{:.2},{mt:.3},{me:.3},{mn:.3}",
            steps as f64 / n
        ));
        level_te.push(me);
        level_ce.push(ce);
        println!(
            "level {level}: C_e {ce:.4}, median T {mt:.2} ms (T_e {me:.2}, T_n {mn:.2})"
        );
    }
    write_csv(out, "level,achieved_ce,serial_steps,median_t_ms,median_te_ms,median_tn_ms", &rows)?;
    if levels.len() >= 2 {
        match pearson_r(&level_ce, &level_te) {
            Ok(r) => println!("pearson_r(T_e, C_e) = {r:.4}"),
            Err(e) => println!("pearson_r unavailable: {e}"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bd-rate
// ---------------------------------------------------------------------------

/// Reads RD points from a CSV with `bpp` and `psnr` columns (header
/// optional; defaults to the first two columns).
fn read_rd_csv(path: &Path) -> Result<Vec<RdPoint>> {
    let text = fs::read_to_string(path).map_err(RdcError::Io)?;
    let mut lines = text.lines().peekable();
    let (mut bi, mut pi) = (0usize, 1usize);
    if let Some(first) = lines.peek() {
        let cols: Vec<&str> = first.split(',').map(str::trim).collect();
        if cols.iter().any(|c| c.eq_ignore_ascii_case("bpp")) {
            bi = cols.iter().position(|c| c.eq_ignore_ascii_case("bpp")).unwrap();
            pi = cols
                .iter()
                .position(|c| c.eq_ignore_ascii_case("psnr"))
                .ok_or_else(|| RdcError::Data("csv has bpp but no psnr column".into()))?;
            lines.next();
        }
    }
    let mut points = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| -> Result<f64> {
            cols.get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| RdcError::Data(format!("bad csv line {line:?}")))
        };
        points.push(RdPoint {
            bpp: get(bi)?,
            psnr: get(pi)?,
        });
    }
    points.sort_by(|a, b| a.psnr.partial_cmp(&b.psnr).unwrap());
    Ok(points)
}

fn cmd_bd_rate(anchor: &Path, test: &Path) -> Result<()> {
    let a = read_rd_csv(anchor)?;
    let t = read_rd_csv(test)?;
    let v = bd_rate(&a, &t)?;
    println!("{v:.4}");
    Ok(())
}

// ---------------------------------------------------------------------------
// viz
// ---------------------------------------------------------------------------

fn cmd_viz(model_path: &Path, image_path: &Path, levels: &str, out: &Path) -> Result<()> {
    let levels = parse_levels(levels)?;
    let model = CodecModel::load(model_path)?;
    let image = img::read_ppm(image_path)?;
    fs::create_dir_all(out).map_err(RdcError::Io)?;
    for &level in &levels {
        let cl = ComplexityLevel::new(level)?;
        let enc = encode_image(&model, &image, cl, MaskMode::Learned)?;
        let tag = format!("{:03}", (level * 100.0).round() as u32);

        // Bright = position predicted with context ("predicted by both").
        let plane = enc.mask.to_plane();
        let (h, w) = (plane.shape[0], plane.shape[1]);
        img::write_pgm(&out.join(format!("mask_l{tag}.pgm")), &Arr::from_vec(&[1, h, w], plane.data)?)?;

        // Per-position rate of the highest-entropy latent channel, under the
        // decoder's exact entropy parameters.
        let rate = latent_rate_map(&model, &enc.y_hat, &enc.z_hat, &enc.mask)?;
        let peak = rate.data.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
        let heat = rate.map(|v| v / peak);
        img::write_pgm(&out.join(format!("entropy_l{tag}.pgm")), &heat)?;
    }
    println!("wrote {} level(s) of mask/entropy maps to {}", levels.len(), out.display());
    Ok(())
}

/// Per-position coding cost (bits) of the single highest-entropy latent
/// channel, computed from the same entropy parameters the decoder uses.
fn latent_rate_map(
    model: &CodecModel,
    y_hat: &Arr,
    z_hat: &Arr,
    mask: &rdc_core::mask::SpatialMask,
) -> Result<Arr> {
    let mut c = PureCtx;
    let hyper = model.hyper_synthesis(&mut c, z_hat)?;
    let phi = model.context_full(&mut c, y_hat)?;
    let gate = c.broadcast_ch(&mask.to_plane(), 2 * model.arch.latent)?;
    let gated = c.mul(&phi, &gate)?;
    let (mu, sigma) = model.entropy_params(&mut c, &hyper, &gated)?;
    let rate = gaussian_rate(y_hat, &GaussianParams::new(mu, sigma)?)?;
    let (ch, h, w) = (rate.shape[0], rate.shape[1], rate.shape[2]);
    // Highest-entropy channel = largest total bits.
    let best = (0..ch)
        .max_by(|&a, &b| {
            let sa: f64 = rate.data[a * h * w..(a + 1) * h * w].iter().sum();
            let sb: f64 = rate.data[b * h * w..(b + 1) * h * w].iter().sum();
            sa.partial_cmp(&sb).unwrap()
        })
        .unwrap();
    Arr::from_vec(&[1, h, w], rate.data[best * h * w..(best + 1) * h * w].to_vec())
}
