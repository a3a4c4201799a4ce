//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O error, 3 validation error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::assign::{build_targets, default_levels, LevelSpec, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::grouping::{run_pipeline, GroupingConfig, NmsKernel};
use crate::io::{self, LevelTargetRecord};
use crate::loss::check_gradients;
use crate::metrics::{evaluate, ImageEval, MetricRecord};
use crate::pipeline::synthesize_candidates;
use crate::scene::GtHuman;
use crate::synth::{generate_scene, oracle_outputs, OracleConfig, PartShape, SceneConfig};
use crate::umpp::DEFAULT_PROTOTYPES;

/// Largest relative gradient error accepted by `loss-check`.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "nthp", version, about = "Deterministic multi-human parsing engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene (manifest plus mask files).
    GenScene {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute grid targets of a scene.
    Assign {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        levels: LevelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fabricate network outputs that reproduce a scene.
    Oracle {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        levels: LevelArgs,
        #[arg(long, default_value_t = DEFAULT_PROTOTYPES)]
        prototypes: usize,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode prototypes and coefficient grids into scored candidates.
    Synthesize {
        #[arg(long)]
        outputs: PathBuf,
        #[command(flatten)]
        grouping: GroupArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group candidates into parsed people.
    Group {
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        grouping: GroupArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score results against ground truth; pass one `--scene` per `--results`.
    Eval {
        #[arg(long, required = true)]
        results: Vec<PathBuf>,
        #[arg(long, required = true)]
        scene: Vec<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check loss gradients against central finite differences.
    LossCheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate, fabricate outputs, decode, group and evaluate one scene.
    Demo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub min_humans: usize,
    #[arg(long, default_value_t = 6)]
    pub max_humans: usize,
    #[arg(long, default_value_t = 2)]
    pub min_parts: usize,
    #[arg(long, default_value_t = 5)]
    pub max_parts: usize,
    #[arg(long, default_value_t = 16)]
    pub min_part_size: usize,
    #[arg(long, default_value_t = 28)]
    pub max_part_size: usize,
    #[arg(long, value_enum, default_value_t = PartShape::Mixed)]
    pub shape: PartShape,
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    #[arg(long, default_value_t = 6)]
    pub categories: u32,
}

impl From<&SceneArgs> for SceneConfig {
    fn from(a: &SceneArgs) -> Self {
        SceneConfig {
            height: a.height,
            width: a.width,
            humans: (a.min_humans, a.max_humans),
            parts_per_human: (a.min_parts, a.max_parts),
            part_size: (a.min_part_size, a.max_part_size),
            shape: a.shape,
            occlusion: a.occlusion,
            categories: a.categories,
            seed: a.seed,
            ..SceneConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct LevelArgs {
    /// TOML level table; the built-in table when absent.
    #[arg(long)]
    pub level_table: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
}

impl LevelArgs {
    fn specs(&self) -> Result<Vec<LevelSpec>> {
        match &self.level_table {
            Some(p) => io::load_levels(p),
            None => Ok(default_levels()),
        }
    }
}

/// Grouping flags. `--s-part` and `--r-human` default to exactly 1/3 and 2/3.
#[derive(Debug, Args)]
pub struct GroupArgs {
    #[arg(long, default_value_t = 200)]
    pub n_part: usize,
    #[arg(long, default_value = "0.333333333333333")]
    pub s_part: String,
    #[arg(long, default_value_t = 0.1)]
    pub s_human: f64,
    #[arg(long, default_value = "0.666666666666667")]
    pub r_human: String,
    #[arg(long, value_enum, default_value_t = NmsKernel::Gaussian)]
    pub nms: NmsKernel,
    #[arg(long, default_value_t = 2.0)]
    pub nms_sigma: f64,
    #[arg(long, default_value_t = 100)]
    pub n_human: usize,
}

/// Parses a threshold flag; the literal default maps to the exact fraction.
fn fraction(name: &'static str, text: &str, exact: f64, default: &str) -> Result<f64> {
    if text == default {
        return Ok(exact);
    }
    text.parse::<f64>()
        .map_err(|e| Error::param(name, format!("`{text}`: {e}")))
}

impl GroupArgs {
    fn config(&self) -> Result<GroupingConfig> {
        let cfg = GroupingConfig {
            n_part: self.n_part,
            s_part: fraction("s_part", &self.s_part, 1.0 / 3.0, "0.333333333333333")?,
            s_human: self.s_human,
            r_human: fraction("r_human", &self.r_human, 2.0 / 3.0, "0.666666666666667")?,
            nms_kernel: self.nms,
            nms_sigma: self.nms_sigma,
            n_human: self.n_human,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_report(records: &[MetricRecord]) {
    for r in records {
        println!("{r}");
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenScene { scene, out } => {
            let scene = generate_scene(&SceneConfig::from(&scene))?;
            let path = io::save_scene(&out, &scene)?;
            println!("wrote {} ({} instances)", path.display(), scene.instances.len());
        }
        Command::Assign { scene, levels, out } => {
            let gt = io::load_scene(&scene)?;
            let targets = build_targets(&gt, &levels.specs()?, levels.epsilon)?;
            let records: Vec<LevelTargetRecord> = targets.iter().map(LevelTargetRecord::from).collect();
            io::write_json(&out, &records)?;
            for t in &targets {
                println!("{}: {} positive cells", t.level, t.positives());
            }
        }
        Command::Oracle {
            scene,
            levels,
            prototypes,
            stride,
            out,
        } => {
            let gt = io::load_scene(&scene)?;
            let cfg = OracleConfig {
                prototypes,
                stride,
                ..OracleConfig::default()
            };
            let outputs = oracle_outputs::<f32>(&gt, &levels.specs()?, levels.epsilon, &cfg)?;
            let path = io::save_outputs(&out, [gt.height, gt.width], &outputs)?;
            println!("wrote {}", path.display());
        }
        Command::Synthesize { outputs, grouping, out } => {
            let cfg = grouping.config()?;
            let (size, outputs) = io::load_outputs::<f32>(&outputs)?;
            let c = synthesize_candidates(&outputs, &cfg)?;
            let path = io::save_candidates(&out, size, &c.parts, &c.humans)?;
            println!("wrote {} ({} parts, {} humans)", path.display(), c.parts.len(), c.humans.len());
        }
        Command::Group {
            candidates,
            grouping,
            out,
        } => {
            let cfg = grouping.config()?;
            let manifest: io::CandidateManifest = io::read_json(&candidates)?;
            let c = io::load_candidates::<f32>(&candidates)?;
            let results = run_pipeline(&c.parts, &c.humans, &cfg)?;
            let path = io::save_results(&out, manifest.image_size, &results)?;
            println!("wrote {} ({} people)", path.display(), results.len());
        }
        Command::Eval { results, scene, report } => {
            if results.len() != scene.len() {
                return Err(Error::param(
                    "results",
                    format!("{} result files for {} scenes", results.len(), scene.len()),
                ));
            }
            let mut preds = Vec::with_capacity(results.len());
            let mut gts: Vec<Vec<GtHuman>> = Vec::with_capacity(scene.len());
            for (r, s) in results.iter().zip(&scene) {
                let gt = io::load_scene(s)?;
                let pred = io::load_results::<f64>(r)?;
                if let Some(p) = pred.first() {
                    if p.human_mask.dims() != [gt.height, gt.width] {
                        return Err(Error::dims(&[gt.height, gt.width], &p.human_mask.dims()));
                    }
                }
                preds.push(pred);
                gts.push(gt.gt_humans()?);
            }
            let images: Vec<ImageEval<'_, f64>> = preds
                .iter()
                .zip(&gts)
                .map(|(r, g)| ImageEval { results: r, gts: g })
                .collect();
            let records = evaluate(&images)?;
            print_report(&records);
            if let Some(p) = report {
                io::write_json(&p, &records)?;
            }
        }
        Command::LossCheck { points, seed } => {
            let (focal, dice) = check_gradients(points, seed)?;
            let mut ok = true;
            for (name, c) in [("focal", focal), ("dice", dice)] {
                let pass = c.max_relative_error < GRADIENT_TOLERANCE;
                ok &= pass;
                println!(
                    "{name}: {} points, max relative error {:.3e} [{}]",
                    c.points,
                    c.max_relative_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Err(Error::InvalidValue(format!(
                    "gradient error exceeds {GRADIENT_TOLERANCE:e}"
                )));
            }
        }
        Command::Demo { seed, out } => {
            let records = demo(seed, &out)?;
            print_report(&records);
        }
    }
    Ok(())
}

/// The full oracle round trip on one default scene, writing every
/// intermediate file under `out`. Returns the metric report.
pub fn demo(seed: u64, out: &Path) -> Result<Vec<MetricRecord>> {
    let scene_dir = out.join("scene");
    let scene = generate_scene(&SceneConfig {
        seed,
        ..SceneConfig::default()
    })?;
    io::save_scene(&scene_dir, &scene)?;
    let size = [scene.height, scene.width];

    let outputs = oracle_outputs::<f32>(&scene, &default_levels(), DEFAULT_EPSILON, &OracleConfig::default())?;
    io::save_outputs(&out.join("outputs"), size, &outputs)?;

    let grouping = GroupingConfig::default();
    let c = synthesize_candidates(&outputs, &grouping)?;
    io::save_candidates(&out.join("candidates"), size, &c.parts, &c.humans)?;
    let results = run_pipeline(&c.parts, &c.humans, &grouping)?;
    io::save_results(&out.join("results"), size, &results)?;

    let gts = scene.gt_humans()?;
    let records = evaluate(&[ImageEval {
        results: &results,
        gts: &gts,
    }])?;
    io::write_json(&out.join("report.json"), &records)?;
    Ok(records)
}
