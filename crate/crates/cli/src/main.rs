//! `qcsg`: synthesize datasets, fit quadric-convex assemblies, export and evaluate them.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qcsg::dataset::{write_gray_png, write_rgb_png, Dataset};
use qcsg::extract::{
    export_openscad, extract_mesh, extract_parts, read_ply, validate_scad, write_obj, write_ply,
    AssemblyCheckpoint, ObjGroup, ScadMode, ISO,
};
use qcsg::gradcheck::{parse_fault, run_gradcheck, GradCheckConfig, GradCheckReport};
use qcsg::metrics::{evaluate_assembly, EvalOptions};
use qcsg::optim::{run_fit, FitConfig, FitObserver, PhaseConfig};
use qcsg::render::{render_view, RenderedView};
use qcsg::synthgen::{scene, write_scene, DEFAULT_RESOLUTION, GT_MESH_RESOLUTION};
use qcsg::{assembly::FieldKernel, assembly::PrimitiveBank, Error};

const CHECKPOINT_FILE: &str = "assembly.qcsg";

#[derive(Parser)]
#[command(name = "qcsg", version, about = "Fit unions of quadric convexes to posed images")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a catalog scene into a dataset directory with a ground-truth mesh.
    Synth {
        scene: String,
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        size: usize,
        #[arg(long, default_value_t = GT_MESH_RESOLUTION)]
        mesh_resolution: usize,
    },
    /// Run the three-phase fit on a dataset.
    Fit {
        dataset: PathBuf,
        /// Output directory for the checkpoint, report and previews.
        #[arg(long)]
        out: PathBuf,
        /// TOML fit configuration; unspecified keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fit silhouettes only (disables the color term).
        #[arg(long)]
        mask_only: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint after its completed phase.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Export meshes (and optionally an OpenSCAD script) from a checkpoint.
    Extract {
        checkpoint: PathBuf,
        out: PathBuf,
        /// Marching-cubes grid resolution. 64 is a quick preview at half the
        /// accuracy of the default.
        #[arg(long, default_value_t = qcsg::extract::EVAL_RESOLUTION)]
        resolution: usize,
        #[arg(long, value_enum)]
        scad: Option<ScadArg>,
        /// Also write merged.ply.
        #[arg(long)]
        ply: bool,
    },
    /// Render every view, extract the surface and compute the evaluation report.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Ground-truth mesh (PLY); defaults to `<dataset>/gt.ply` when present.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Held-out view indices; defaults to the config's when `--config` is given.
        #[arg(long, value_delimiter = ',')]
        held_out: Option<Vec<usize>>,
        /// Fit configuration used to produce the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the report JSON and held-out renders.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = qcsg::extract::EVAL_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = qcsg::metrics::DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Finite-difference check of every analytic gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        primitives: Option<usize>,
        #[arg(long)]
        convexes: Option<usize>,
        #[arg(long)]
        rays_per_view: Option<usize>,
        /// Corrupt one node's adjoint: `node`, `node:nan` or `node:<scale>`.
        #[arg(long)]
        corrupt: Option<String>,
        /// Write the full reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScadArg {
    Polyhedron,
    FittedBox,
}

/// A check ran to completion and found a numerical fault.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NumericalFailure>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        Some(_) => 2,
        // Errors raised by the CLI itself concern its inputs.
        None => 1,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth {
            scene: name,
            out,
            size,
            mesh_resolution,
        } => cmd_synth(&name, &out, size, mesh_resolution),
        Command::Fit {
            dataset,
            out,
            config,
            mask_only,
            seed,
            resume,
        } => cmd_fit(&dataset, &out, config.as_deref(), mask_only, seed, resume.as_deref()),
        Command::Extract {
            checkpoint,
            out,
            resolution,
            scad,
            ply,
        } => cmd_extract(&checkpoint, &out, resolution, scad, ply),
        Command::Eval {
            checkpoint,
            dataset,
            gt,
            held_out,
            config,
            out,
            resolution,
            samples,
        } => cmd_eval(&checkpoint, &dataset, gt, held_out, config.as_deref(), out.as_deref(), resolution, samples),
        Command::GradCheck {
            seed,
            seeds,
            primitives,
            convexes,
            rays_per_view,
            corrupt,
            json,
        } => cmd_gradcheck(seed, seeds, primitives, convexes, rays_per_view, corrupt.as_deref(), json.as_deref()),
    }
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_synth(name: &str, out: &Path, size: usize, mesh_res: usize) -> anyhow::Result<()> {
    let sc = scene(name)?;
    let ds = write_scene(&sc, out, size, mesh_res)?;
    println!("wrote {} views and gt.ply for '{name}' to {}", ds.views.len(), out.display());
    Ok(())
}

/// Renders the first training view at the end of every phase.
struct PreviewObserver<'a> {
    dataset: &'a Dataset,
    view: usize,
    samples_per_ray: usize,
    renders: Vec<(u8, qcsg::Result<RenderedView>)>,
}

impl FitObserver for PreviewObserver<'_> {
    fn on_phase_end(&mut self, config: &PhaseConfig, bank: &PrimitiveBank, colors: &[[f64; 3]]) {
        let kernel = FieldKernel::new(bank);
        let camera = &self.dataset.views[self.view].camera;
        let r = render_view(&kernel, bank.weights(), colors, camera, config.opacity, self.samples_per_ray);
        self.renders.push((config.phase.number(), r));
    }
}

fn cmd_fit(
    dataset_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    mask_only: bool,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => FitConfig::load(p)?,
        None => FitConfig::default(),
    };
    if mask_only {
        cfg.mask_only = true;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = Dataset::load(dataset_dir)?;
    let resume = resume.map(AssemblyCheckpoint::load).transpose()?;
    create_dir(out)?;

    let preview_view = (0..dataset.views.len()).find(|i| !cfg.held_out.contains(i)).unwrap_or(0);
    let mut observer = PreviewObserver {
        dataset: &dataset,
        view: preview_view,
        samples_per_ray: cfg.samples_per_ray,
        renders: Vec::new(),
    };
    let outcome = run_fit(&dataset, &cfg, resume, &mut observer)?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt_path)?;
    write_json(&out.join("fit_report.json"), &outcome.report)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out.join("config.toml"), e))?;
    let previews = out.join("previews");
    create_dir(&previews)?;
    for (phase, render) in observer.renders {
        let r = render?;
        write_rgb_png(&previews.join(format!("phase{phase}_view{preview_view:03}.png")), &r.rgb)?;
        write_gray_png(&previews.join(format!("phase{phase}_view{preview_view:03}_mask.png")), &r.mask)?;
    }
    let rep = &outcome.report;
    println!(
        "fit done in {:.1}s: {} active primitives in {} convexes, {} parts",
        rep.seconds, rep.active_primitives, rep.active_convexes, rep.parts
    );
    if let Some(iou) = rep.held_out_iou() {
        println!("held-out mask IoU {iou:.4}");
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_extract(ckpt: &Path, out: &Path, resolution: usize, scad: Option<ScadArg>, ply: bool) -> anyhow::Result<()> {
    let ck = AssemblyCheckpoint::load(ckpt)?;
    create_dir(out)?;
    let merged = extract_mesh(&ck.bank, resolution, ISO)?;
    write_obj(
        &[ObjGroup {
            name: "merged".into(),
            color: None,
            mesh: merged.clone(),
        }],
        &out.join("merged.obj"),
    )?;
    if ply {
        write_ply(&merged, &out.join("merged.ply"))?;
    }

    let binary = ck.bank.mode() == qcsg::assembly::SelectionMode::Binary;
    let parts = if binary {
        extract_parts(&ck.bank, &ck.colors, resolution)?.parts
    } else {
        log::warn!("selection is not binarized; per-part meshes are skipped");
        Vec::new()
    };
    let parts_dir = out.join("parts");
    create_dir(&parts_dir)?;
    for part in &parts {
        write_obj(
            &[ObjGroup {
                name: format!("convex_{:03}", part.convex),
                color: Some(part.color),
                mesh: part.mesh.clone(),
            }],
            &parts_dir.join(format!("part_{:03}.obj", part.convex)),
        )?;
    }
    println!(
        "merged mesh: {} vertices, {} triangles; {} parts",
        merged.vertices.len(),
        merged.triangles.len(),
        parts.len()
    );

    if let Some(mode) = scad {
        if !binary {
            return Err(Error::Mode { expected: "binary" }.into());
        }
        let (mode, file) = match mode {
            ScadArg::Polyhedron => (ScadMode::Polyhedron, "parts.scad"),
            ScadArg::FittedBox => (ScadMode::FittedBox, "boxes.scad"),
        };
        let export = export_openscad(&parts, mode);
        validate_scad(&export.script).map_err(|e| anyhow!("generated OpenSCAD failed validation: {e}"))?;
        for w in &export.warnings {
            log::warn!("{w}");
        }
        let path = out.join(file);
        fs::write(&path, &export.script).map_err(|e| Error::io(&path, e))?;
        println!("{}: {} parts", path.display(), export.emitted.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    dataset_dir: &Path,
    gt: Option<PathBuf>,
    held_out: Option<Vec<usize>>,
    config: Option<&Path>,
    out: Option<&Path>,
    resolution: usize,
    samples: usize,
) -> anyhow::Result<()> {
    let ck = AssemblyCheckpoint::load(ckpt)?;
    let dataset = Dataset::load(dataset_dir)?;
    let cfg = config.map(FitConfig::load).transpose()?;
    let held_out = match (held_out, &cfg) {
        (Some(h), _) => h,
        (None, Some(c)) => c.held_out.clone(),
        (None, None) => Vec::new(),
    };
    let gt_path = gt.or_else(|| Some(dataset_dir.join("gt.ply")).filter(|p| p.exists()));
    let gt_mesh = gt_path.as_deref().map(read_ply).transpose()?;
    let opts = EvalOptions {
        resolution,
        samples,
        samples_per_ray: cfg.as_ref().map_or(EvalOptions::default().samples_per_ray, |c| c.samples_per_ray),
    };
    let mut eval = evaluate_assembly(&ck, &dataset, gt_mesh.as_ref(), &held_out, &opts)?;
    if let Some(c) = &cfg {
        if c.hash() != ck.config_hash {
            eval.report
                .notices
                .push("checkpoint was produced with a different configuration".into());
        }
    }
    for n in &eval.report.notices {
        eprintln!("notice: {n}");
    }
    let json = serde_json::to_string_pretty(&eval.report)?;
    println!("{json}");
    if let Some(out) = out {
        create_dir(out)?;
        write_json(&out.join("eval_report.json"), &eval.report)?;
        for (i, r) in &eval.held_out_renders {
            write_rgb_png(&out.join(format!("heldout_{i:03}.png")), &r.rgb)?;
            write_gray_png(&out.join(format!("heldout_{i:03}_mask.png")), &r.mask)?;
        }
    }
    Ok(())
}

fn print_gradcheck(r: &GradCheckReport) {
    println!("seed {}", r.seed);
    println!("  {:<6} {:<10} {:>8} {:>8} {:>12}  result", "phase", "group", "checked", "skipped", "max err");
    for g in &r.groups {
        let kind = if g.trainable { "" } else { " (frozen)" };
        println!(
            "  {:<6} {:<10} {:>8} {:>8} {:>12.3e}  {}{kind}",
            g.phase,
            g.group.name(),
            g.checked,
            g.skipped,
            g.max_abs_err,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    for n in &r.nodes {
        println!(
            "  node {:<14} {:>8} {:>12.3e}  {}",
            n.node.name(),
            n.compared,
            n.max_abs_err,
            if n.passed { "pass" } else { "FAIL" }
        );
    }
    for f in &r.forward {
        if !f.matches {
            println!("  phase {} forward mismatch: engine {} vs reference {}", f.phase, f.engine, f.reference);
        }
    }
    if let Some(e) = &r.engine_error {
        println!("  engine error: {e}");
    }
}

fn cmd_gradcheck(
    seed: u64,
    seeds: u64,
    primitives: Option<usize>,
    convexes: Option<usize>,
    rays_per_view: Option<usize>,
    corrupt: Option<&str>,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = GradCheckConfig::default();
    if let Some(p) = primitives {
        cfg.primitives = p;
    }
    if let Some(c) = convexes {
        cfg.convexes = c;
    }
    if let Some(r) = rays_per_view {
        cfg.rays_per_view = r;
    }
    let fault = corrupt.map(parse_fault).transpose()?;
    let mut reports = Vec::new();
    for s in seed..seed + seeds.max(1) {
        let r = run_gradcheck(&cfg, s, fault).with_context(|| format!("grad check seed {s}"))?;
        print_gradcheck(&r);
        reports.push(r);
    }
    if let Some(path) = json {
        write_json(path, &reports)?;
    }
    let mut failing: Vec<&str> = reports.iter().flat_map(|r| r.failing_node_names()).collect();
    failing.sort_unstable();
    failing.dedup();
    if reports.iter().all(|r| r.passed) {
        println!("all gradient checks passed");
        Ok(())
    } else if failing.is_empty() {
        Err(NumericalFailure("gradient check failed".into()).into())
    } else {
        Err(NumericalFailure(format!("gradient check failed at node(s): {}", failing.join(", "))).into())
    }
}
