//! Command-line front end. Exit codes: 0 success, 1 verification failure,
//! 2 input error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::attention::AmsaVariant;
use crate::bench::{self, closed_form, Dims, GraphSpec, REFERENCE_AMSA_GFLOPS, REFERENCE_MSA_GFLOPS};
use crate::codec::{self, ppm, CodecConfig};
use crate::dit::{dit_forward, DitConfig, GridKind};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::Model;
use crate::numcore::{cost, Tensor};
use crate::trainer::{self, TrainConfig};
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "axial-style", version, about = "Axial-attention style transfer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stylize content frames with a style image.
    Stylize(StylizeArgs),
    /// Analytic attention cost sweep and transformer cost report.
    Bench(BenchArgs),
    /// Run verification suites.
    Verify(VerifyArgs),
    /// Overfit a tiny model on procedural data.
    Traincheck(TraincheckArgs),
}

/// Transformer shape and wiring.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// standard, a or b.
    #[arg(long, default_value = "standard")]
    pub variant: AmsaVariant,
    /// Interaction as self-attention over the whole sequence.
    #[arg(long)]
    pub unimodal: bool,
    /// Skip the video-image interaction stage.
    #[arg(long)]
    pub no_interaction: bool,
}

impl ModelArgs {
    fn apply(&self, cfg: DitConfig) -> DitConfig {
        DitConfig {
            variant: self.variant,
            unimodal: self.unimodal,
            interaction_enabled: !self.no_interaction,
            ..cfg
        }
    }
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    /// Content frames (PPM), in sequence order.
    #[arg(required = true)]
    pub content: Vec<PathBuf>,
    /// Style image (PPM).
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the random weights when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Token width for random weights (ignored with a checkpoint).
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub base_channels: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Grid sides (`32`) or sizes (`32x48`), comma separated.
    #[arg(long, default_value = "8,16,32,64", value_delimiter = ',', value_parser = parse_dims)]
    pub grid: Vec<(usize, usize)>,
    /// Token grid for the transformer report.
    #[arg(long, default_value = "32x32", value_parser = parse_dims)]
    pub dims: (usize, usize),
    /// Content frames for the transformer report.
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    #[arg(long, default_value_t = 512)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Print the published 32x32 reference next to the measured row.
    #[arg(long)]
    pub paper_row: bool,
    /// Directory for bench.csv, bench.json and dit_cost.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suites to run (default: all).
    #[arg(value_parser = parse_suite)]
    pub suites: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TraincheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}, expected N or HxW"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the CLI on `args` (including the program name); returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Stylize(a) => stylize(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::Verify(a) => verify_cmd(&a),
        Command::Traincheck(a) => traincheck(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Divergence { .. } | Error::Determinism { .. } | Error::Accounting(_) => {
            EXIT_NUMERIC
        }
        Error::Contract(_) => EXIT_NUMERIC,
        Error::Shape { .. } | Error::Axis { .. } | Error::Config(_) | Error::Format(_) | Error::Io(_) => EXIT_INPUT,
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(Error::Config(format!("{} exists and is not a directory", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_frames(paths: &[PathBuf]) -> Result<Tensor> {
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let img = ppm::read_ppm(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
            other => other,
        })?;
        if let Some(first) = frames.first().map(|f: &Tensor| f.shape()[1..].to_vec()) {
            if img.shape() != first.as_slice() {
                return Err(Error::shape(
                    "stylize",
                    format!("{} is {:?}, earlier frames are {:?}", p.display(), img.shape(), first),
                ));
            }
        }
        frames.push(img.reshape(&[1, 3, img.dim(1), img.dim(2)])?);
    }
    Tensor::concat(&frames, 0)
}

fn stylize(a: &StylizeArgs) -> Result<i32> {
    let content = read_frames(&a.content)?;
    let style = read_frames(std::slice::from_ref(&a.style))?;
    if content.shape()[2..] != style.shape()[2..] {
        return Err(Error::shape(
            "stylize",
            format!("style is {:?}, content frames are {:?}", &style.shape()[2..], &content.shape()[2..]),
        ));
    }
    let t = content.dim(0);
    let base = match &a.checkpoint {
        Some(path) => Model::load(path)?,
        None => {
            let dit = DitConfig {
                embed_dim: a.embed_dim,
                heads: a.heads,
                ..DitConfig::default()
            };
            let codec = CodecConfig {
                base_channels: a.base_channels,
                embed_dim: a.embed_dim,
            };
            Model::init(dit, codec, a.seed)?
        }
    };
    let model = base.with_dit_config(a.model.apply(base.dit_cfg.clone()));
    if model.dit_cfg.interaction_enabled && !model.dit_cfg.unimodal && t % 2 != 0 {
        return Err(Error::Config(format!(
            "{t} content frames: the video-image interaction needs an even count (use --unimodal or --no-interaction)"
        )));
    }
    prepare_out(&a.out)?;

    let taps_c = model.encode(&content)?;
    let taps_s = model.encode(&style)?;
    let grid_c = codec::tokenize(&taps_c)?;
    let grid_s = codec::tokenize(&taps_s)?.with_kind(GridKind::Style);
    let (tokens, tally) = cost::count_flops(|| dit_forward(&grid_c, &grid_s, &model.dit_cfg, &model.dit));
    let images = codec::decode(&tokens?, &model.codec.decoder)?;
    let dit_flops = tally.total();
    let taps_cs = model.encode(&images)?;

    let mut files = Vec::with_capacity(t);
    for i in 0..t {
        let name = format!("stylized_{i:03}.ppm");
        let frame = images.narrow(0, i, 1)?;
        ppm::write_ppm(&a.out.join(&name), &frame.reshape(&frame.shape()[1..])?)?;
        files.push(name);
    }
    let metrics = json!({
        "schema": METRICS_SCHEMA,
        "frames": t,
        "height": content.dim(2),
        "width": content.dim(3),
        "config": model.dit_cfg,
        "seed": a.seed,
        "checkpoint": a.checkpoint.is_some(),
        "D_C": losses::metric_dc(&taps_cs, &taps_c)?,
        "D_S": losses::metric_ds(&taps_cs, &taps_s)?,
        "gram_texture_diff": losses::gram_texture_diff(&taps_cs, &taps_s)?.item(),
        "color_diff": losses::color_diff(&images, &style)?.item(),
        "dit_flops": dit_flops,
        "outputs": files,
    });
    write_json(&a.out.join("metrics.json"), &metrics)?;
    println!("wrote {t} frame(s) and metrics.json to {}", a.out.display());
    Ok(EXIT_OK)
}

fn bench_cmd(a: &BenchArgs) -> Result<i32> {
    let rows = bench::sweep(&a.grid, 1, a.embed_dim, a.heads, a.model.variant)?;
    println!(
        "{:>9} {:>16} {:>16} {:>8}",
        "grid", "msa score FLOPs", "amsa score FLOPs", "ratio"
    );
    for r in &rows {
        println!(
            "{:>9} {:>16} {:>16} {:>8.3}",
            format!("{}x{}", r.dims.h, r.dims.w),
            r.msa.score_flops,
            r.amsa.score_flops,
            r.score_ratio
        );
    }
    if a.paper_row {
        println!("paper: {REFERENCE_MSA_GFLOPS}G / {REFERENCE_AMSA_GFLOPS}G");
        if let Some(r) = rows.iter().find(|r| (r.dims.h, r.dims.w) == (32, 32)) {
            println!(
                "measured: {:.3}G / {:.3}G (score terms)",
                r.msa.score_flops as f64 / 1e9,
                r.amsa.score_flops as f64 / 1e9
            );
        }
    }

    let cfg = a.model.apply(DitConfig {
        embed_dim: a.embed_dim,
        heads: a.heads,
        ..DitConfig::default()
    });
    let (h, w) = a.dims;
    let dims = Dims {
        t: a.frames,
        t_kv: 1,
        h,
        w,
        d: a.embed_dim,
        heads: a.heads,
    };
    let report = bench::count_forward(&GraphSpec::Dit(cfg.clone()), &dims)?;
    let interaction = closed_form::interaction(&cfg, a.frames as u64, h as u64, w as u64);
    let bare = DitConfig {
        interaction_enabled: false,
        ..cfg.clone()
    };
    let without = bench::count_forward(&GraphSpec::Dit(bare), &dims)?.total_flops;
    println!("dit_forward {}x{}x{} D={}: {} FLOPs ({} in interaction)", a.frames, h, w, a.embed_dim, report.total_flops, interaction);

    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        fs::write(dir.join("bench.csv"), bench::sweep_csv(&rows))?;
        fs::write(dir.join("bench.json"), bench::sweep_json(&rows)?)?;
        let scopes: serde_json::Map<String, serde_json::Value> =
            ["content_encoder", "style_encoder", "interaction", "decoder", "score", "proj", "softmax", "ffn"]
                .iter()
                .map(|s| (s.to_string(), json!(report.flops_in_scope(s))))
                .collect();
        let dit = json!({
            "schema": METRICS_SCHEMA,
            "config": cfg,
            "dims": dims,
            "total_flops": report.total_flops,
            "score_flops": report.score_flops,
            "projection_flops": report.projection_flops,
            "interaction_closed_form": interaction,
            "total_flops_without_interaction": without,
            "peak_activation_elems": report.peak_activation_elems,
            "peak_activation_mib_f32": report.peak_activation_mib_f32,
            "largest_attention_map_elems": report.largest_attention_map_elems,
            "flops_by_scope": scopes,
            "convention": bench::FLOP_CONVENTION,
        });
        write_json(&dir.join("dit_cost.json"), &dit)?;
    }
    Ok(EXIT_OK)
}

fn verify_cmd(a: &VerifyArgs) -> Result<i32> {
    let suites = if a.suites.is_empty() { Suite::ALL.to_vec() } else { a.suites.clone() };
    let mut all_passed = true;
    for suite in suites {
        let report = verify::run(suite, a.seed)?;
        for c in &report.checks {
            println!(
                "  [{}] {}: {:.3e} (tol {:.0e})",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.value,
                c.tolerance
            );
        }
        println!(
            "{suite}: {} (max {:.3e}, {} checks)",
            if report.passed() { "PASS" } else { "FAIL" },
            report.max_value(),
            report.checks.len()
        );
        all_passed &= report.passed();
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_VERIFY })
}

fn traincheck(a: &TraincheckArgs) -> Result<i32> {
    let cfg = TrainConfig {
        seed: a.seed,
        steps: a.steps,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    prepare_out(&a.out)?;
    let (report, model) = trainer::overfit_check(&cfg)?;
    fs::write(a.out.join("loss_curve.csv"), trainer::curve_csv(&report.curve))?;
    model.save(&a.out.join("checkpoint.udit"))?;
    let passed = report.ratio <= 0.5 && report.encoder_unchanged;
    let summary = json!({
        "schema": METRICS_SCHEMA,
        "seed": report.seed,
        "steps": cfg.steps,
        "config": cfg,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "ratio": report.ratio,
        "encoder_unchanged": report.encoder_unchanged,
        "passed": passed,
    });
    write_json(&a.out.join("traincheck.json"), &summary)?;
    println!(
        "seed {}: loss {:.4} -> {:.4} (ratio {:.4}), encoder unchanged: {} => {}",
        report.seed,
        report.initial_loss,
        report.final_loss,
        report.ratio,
        report.encoder_unchanged,
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(if passed { EXIT_OK } else { EXIT_VERIFY })
}
