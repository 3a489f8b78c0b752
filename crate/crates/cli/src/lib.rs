//! `vgloop` command-line front end.

pub mod config;
pub mod error;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vgloop::edit::{apply_edit_script, parse_edit_script, resize_document, EditOp};
use vgloop::maskio::{build_hierarchy, load_mask_stack, validate_hierarchy_with, ValidationConfig};
use vgloop::raster::psnr;
use vgloop::svgio::{diff_documents, parse_svg, to_svg, RegionChange};
use vgloop::vectorize::{render_for, structure_loss, vectorize, OptimizeConfig};
use vgloop::RasterImage;
use vgloop_flow::checkpoint::Checkpoint;
use vgloop_flow::data::{condition_image, latent_to_image, toy_dataset, TOY_HELD_OUT};
use vgloop_flow::model::CondInput;
use vgloop_flow::train::{initial_noise, sample, stream_rng, train_flow, STREAM_NOISE};

use crate::config::{PipelineConfig, FORMAT_VERSION};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "vgloop",
    version,
    about = "Layered vectorization, rendering, editing and toy flow sampling"
)]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Image and mask stack to a layered SVG.
    Vectorize(VectorizeArgs),
    /// Rasterize an SVG to PNG.
    Render(RenderArgs),
    /// Apply a JSON edit script to an SVG.
    Edit(EditArgs),
    /// Render, re-vectorize, edit and re-render an SVG.
    Roundtrip(RoundtripArgs),
    /// Toy flow model.
    #[command(subcommand)]
    Flow(FlowCommand),
    /// Build and check a mask hierarchy.
    ValidateMasks(ValidateArgs),
}

#[derive(Debug, Args, Default)]
pub struct OptimizeFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau_occ: Option<f64>,
    #[arg(long)]
    pub tau_parent: Option<f64>,
    /// Edge softness in pixels.
    #[arg(long)]
    pub sigma_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VectorizeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the loss trace next to the output, extension replaced by `.trace.csv`.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub opt: OptimizeFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub svg: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output width; height follows the canvas aspect ratio.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=65536))]
    pub size: Option<u32>,
    #[arg(long)]
    pub sigma_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub svg: PathBuf,
    #[arg(long)]
    pub ops: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict transform and recolor ops to the target node itself.
    #[arg(long)]
    pub shallow: bool,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[arg(long)]
    pub svg: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub ops: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub opt: OptimizeFlags,
}

#[derive(Debug, Subcommand)]
pub enum FlowCommand {
    /// Train on the bundled toy set; writes a checkpoint and a sibling `.loss.csv`.
    Train(TrainArgs),
    /// Sample a latent conditioned on an SVG.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub svg: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    /// Text tag index.
    #[arg(long, default_value_t = 0)]
    pub tag: usize,
    /// Start from a standard normal instead of the learned noise.
    #[arg(long)]
    pub no_npv: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub tau_occ: Option<f64>,
    #[arg(long)]
    pub tau_parent: Option<f64>,
    #[arg(long)]
    pub tau_excl: Option<f64>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_svg(path: &Path) -> Result<vgloop::document::VectorDocument> {
    let parsed = parse_svg(&read_text(path)?).map_err(|e| match e {
        vgloop::Error::Parse { offset, message } => CliError::Io {
            path: path.display().to_string(),
            message: format!("parse error at byte {offset}: {message}"),
        },
        other => other.into(),
    })?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.document)
}

fn apply_flags(cfg: &mut PipelineConfig, f: &OptimizeFlags) {
    let v = &mut cfg.vectorize;
    if let Some(s) = f.steps {
        v.optimize.steps = s;
    }
    if let Some(g) = f.gamma {
        v.optimize.gamma = g;
    }
    if let Some(t) = f.tau_occ {
        v.tau_occ = t;
    }
    if let Some(t) = f.tau_parent {
        v.tau_parent = t;
    }
    if let Some(s) = f.sigma_r {
        v.optimize.soft_bandwidth = s;
    }
}

fn load_image(path: &Path) -> Result<RasterImage> {
    Ok(RasterImage::load(path)?.to_rgb())
}

fn cmd_vectorize(a: &VectorizeArgs, cfg: &PipelineConfig) -> Result<()> {
    let image = load_image(&a.image)?;
    let stack = load_mask_stack(&a.masks)?;
    if image.dims() != (stack.width, stack.height) {
        return Err(CliError::Io {
            path: a.image.display().to_string(),
            message: format!(
                "image is {}x{} but the mask stack is {}x{}",
                image.width(),
                image.height(),
                stack.width,
                stack.height
            ),
        });
    }
    let out = vectorize(&image, &stack, &cfg.vectorize)?;
    write_text(&a.out, &to_svg(&out.document)?)?;
    if a.trace {
        let mut csv = String::from("format_version,step,loss\n");
        for (i, l) in out.trace.iter().enumerate() {
            writeln!(csv, "{FORMAT_VERSION},{i},{l}").unwrap();
        }
        write_text(&with_suffix(&a.out, ".trace.csv"), &csv)?;
    }
    log::info!(
        "{} regions, loss {:.6} -> {:.6}",
        out.document.node_count(),
        out.trace.first().copied().unwrap_or(0.0),
        out.trace.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

/// Render at the document's canvas size, or scaled to `width` pixels wide.
pub fn render_document(
    doc: &vgloop::document::VectorDocument,
    width: Option<usize>,
    opt: &OptimizeConfig,
) -> Result<RasterImage> {
    match width {
        None => Ok(render_for(doc, opt)?),
        Some(w) => {
            let h =
                ((doc.height as f64 * w as f64 / doc.width.max(1) as f64).round() as usize).max(1);
            Ok(render_for(&resize_document(doc, w, h)?, opt)?)
        }
    }
}

fn cmd_render(a: &RenderArgs, cfg: &PipelineConfig) -> Result<()> {
    let mut opt = cfg.vectorize.optimize;
    if let Some(s) = a.sigma_r {
        opt.soft_bandwidth = s;
    }
    let doc = load_svg(&a.svg)?;
    let img = render_document(&doc, a.size.map(|s| s as usize), &opt)?;
    img.save(&a.out)?;
    Ok(())
}

fn load_ops(path: &Path, shallow: bool) -> Result<Vec<EditOp>> {
    let mut ops = parse_edit_script(&read_text(path)?).map_err(|e| io_err(path, e))?;
    if shallow {
        for op in &mut ops {
            match op {
                EditOp::Translate { shallow, .. }
                | EditOp::Scale { shallow, .. }
                | EditOp::Rotate { shallow, .. }
                | EditOp::Recolor { shallow, .. } => *shallow = true,
                _ => {}
            }
        }
    }
    Ok(ops)
}

fn cmd_edit(a: &EditArgs) -> Result<()> {
    let doc = load_svg(&a.svg)?;
    let ops = load_ops(&a.ops, a.shallow)?;
    let edited = apply_edit_script(&doc, &ops)?;
    write_text(&a.out, &to_svg(&edited)?)
}

fn cmd_roundtrip(a: &RoundtripArgs, cfg: &PipelineConfig) -> Result<()> {
    let opt = cfg.vectorize.optimize;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let doc = load_svg(&a.svg).map_err(|e| e.in_stage("parse"))?;
    let stack = load_mask_stack(&a.masks).map_err(|e| CliError::from(e).in_stage("masks"))?;
    let ops = load_ops(&a.ops, false).map_err(|e| e.in_stage("edit"))?;

    let src = resize_document(&doc, stack.width, stack.height)
        .map_err(|e| CliError::from(e).in_stage("render"))?;
    let image = render_for(&src, &opt).map_err(|e| CliError::from(e).in_stage("render"))?;
    let out = vectorize(&image, &stack, &cfg.vectorize)
        .map_err(|e| CliError::from(e).in_stage("vectorize"))?;
    // Continue from the quantized document so every artifact matches its file.
    let svg_text = to_svg(&out.document)?;
    let vectorized = parse_svg(&svg_text)
        .map_err(|e| CliError::from(e).in_stage("vectorize"))?
        .document;
    let rerender =
        render_for(&vectorized, &opt).map_err(|e| CliError::from(e).in_stage("vectorize"))?;
    let edited =
        apply_edit_script(&vectorized, &ops).map_err(|e| CliError::from(e).in_stage("edit"))?;
    let final_img = render_for(&edited, &opt).map_err(|e| CliError::from(e).in_stage("render"))?;

    let dir = &a.out_dir;
    image.save(&dir.join("render.png"))?;
    write_text(&dir.join("vectorized.svg"), &svg_text)?;
    write_text(&dir.join("edited.svg"), &to_svg(&edited)?)?;
    final_img.save(&dir.join("edited.png"))?;

    let p = psnr(&image, &rerender)?;
    let sl = structure_loss(
        &vectorized,
        &out.hierarchy,
        &image,
        opt.gamma,
        &opt.render_params(),
    )?;
    let d = diff_documents(&vectorized, &edited);
    let n = |f: fn(&RegionChange) -> bool| d.count(f);
    let mut csv = String::from(
        "format_version,psnr_db,structure_loss,recon_loss,regions,unchanged,moved,recolored,reshaped,added,removed\n",
    );
    writeln!(
        csv,
        "{FORMAT_VERSION},{p},{},{},{},{},{},{},{},{},{}",
        sl.total,
        sl.recon,
        vectorized.node_count(),
        n(|c| matches!(c, RegionChange::Unchanged)),
        n(|c| matches!(c, RegionChange::Moved { .. })),
        n(|c| matches!(c, RegionChange::Recolored { .. })),
        n(|c| matches!(c, RegionChange::Reshaped)),
        n(|c| matches!(c, RegionChange::Added)),
        n(|c| matches!(c, RegionChange::Removed)),
    )
    .unwrap();
    write_text(&dir.join("metrics.csv"), &csv)?;
    log::info!("psnr {p:.3} dB, structure loss {:.6}", sl.total);
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: &PipelineConfig) -> Result<()> {
    let mut tc = cfg.flow;
    tc.seed = cfg.seed;
    if let Some(e) = a.stage1_epochs {
        tc.stage1_epochs = e;
    }
    if let Some(e) = a.stage2_epochs {
        tc.stage2_epochs = e;
    }
    let items = toy_dataset(&tc.model)?;
    let train = &items[..items.len() - TOY_HELD_OUT];
    let out = train_flow(train, &tc)?;
    let ck = Checkpoint {
        model: out.model,
        head: out.head,
        trace: out.trace,
    };
    ck.save(&a.out)?;
    let mut csv = String::from("format_version,stage,epoch,total,fm,kl,cov\n");
    for r in &ck.trace {
        writeln!(
            csv,
            "{FORMAT_VERSION},{},{},{},{},{},{}",
            r.stage, r.epoch, r.total, r.fm, r.kl, r.cov
        )
        .unwrap();
    }
    write_text(&with_suffix(&a.out, ".loss.csv"), &csv)
}

fn cmd_sample(a: &SampleArgs, cfg: &PipelineConfig) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let mc = ck.model.config;
    if a.tag >= mc.tags {
        return Err(CliError::Usage(format!(
            "tag {} outside 0..{}",
            a.tag, mc.tags
        )));
    }
    let doc = load_svg(&a.svg)?;
    let cond = CondInput::new(&condition_image(&doc, mc.size)?, &mc)?;
    let steps = a.steps.map(|s| s as usize).unwrap_or(cfg.sample_steps);
    if steps == 0 {
        return Err(CliError::Usage("steps must be at least 1".into()));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_NOISE, 0);
    let head = if a.no_npv { None } else { Some(&ck.head) };
    let init = initial_noise(head, &mc, &cond, &mut rng)?;
    let z = sample(&ck.model, &init, &cond, a.tag, steps)?;
    latent_to_image(&z).save(&a.out)?;
    Ok(())
}

fn cmd_validate(a: &ValidateArgs, cfg: &PipelineConfig) -> Result<()> {
    let tau_occ = a.tau_occ.unwrap_or(cfg.vectorize.tau_occ);
    let tau_parent = a.tau_parent.unwrap_or(cfg.vectorize.tau_parent);
    let tau_excl = a.tau_excl.unwrap_or(cfg.tau_excl);
    let stack = load_mask_stack(&a.masks)?;
    let h = build_hierarchy(&stack, tau_occ, tau_parent)?;
    let violations = validate_hierarchy_with(
        &h,
        &ValidationConfig {
            tau_excl,
            tau_parent,
        },
    );
    println!(
        "{} masks in {} levels -> {} accepted in {} layers",
        stack.mask_count(),
        stack.levels.len(),
        h.mask_count(),
        h.depth()
    );
    for l in &h.layers {
        println!("layer {} (t={}): {} masks", l.level, l.t, l.masks.len());
    }
    for v in &violations {
        println!("violation: {v}");
    }
    if violations.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Validation {
            count: violations.len(),
        })
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Vectorize(a) => {
            apply_flags(&mut cfg, &a.opt);
            cmd_vectorize(a, &cfg)
        }
        Command::Render(a) => cmd_render(a, &cfg),
        Command::Edit(a) => cmd_edit(a),
        Command::Roundtrip(a) => {
            apply_flags(&mut cfg, &a.opt);
            cmd_roundtrip(a, &cfg)
        }
        Command::Flow(FlowCommand::Train(a)) => cmd_train(a, &cfg),
        Command::Flow(FlowCommand::Sample(a)) => cmd_sample(a, &cfg),
        Command::ValidateMasks(a) => cmd_validate(a, &cfg),
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 64 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(CliError::Config(e.to_string())),
        },
        None => execute(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
