//! `unitprobe` command line: every workflow writes its reports, CSV mirrors
//! and rasters under one output directory together with a `manifest.json`
//! that lists the resolved flags, seed ranges and a hash of each file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unitprobe_core::dissect::{compare_reports, dissect_layer, DissectConfig, DissectionReport, SeedRange, Upsampling};
use unitprobe_core::error::Error as CoreError;
use unitprobe_core::export::{
    csv_string, encode_pbm, encode_png, encode_ppm, image_grid, json_string, normalize_map, sha256_hex,
};
use unitprobe_core::intervene::{
    ace, all_locations, channel_magnitudes, conditional_ace, insertion_levels, layer_trace, AceConfig, InsertLevel,
    InterventionSpec, LocationPolicy, Mode,
};
use unitprobe_core::optimize::{
    optimize_alpha, random_ranking, removal_difficulty, topk_ablation_curve, AlphaConfig, AlphaSolution, Lambda,
    CURVE_SEEDS,
};
use unitprobe_core::quality::{flag_artifact_units, repair, FlagConfig, RepairConfig};
use unitprobe_core::segment::segment;
use unitprobe_core::tensor::{upsample_nearest, Tensor};
use unitprobe_core::world::{World, WorldSpec, UNIT_LAYER};
use unitprobe_studio::{Studio, StudioConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const ENVELOPE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "unitprobe", version, about = "Find which generator units represent and cause object concepts")]
pub struct Cli {
    /// World spec file (TOML); the built-in default world when omitted.
    #[arg(long, global = true)]
    pub world: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "UNITPROBE_OUT", default_value = "out")]
    pub out: PathBuf,

    /// Also write PNG copies of every raster.
    #[arg(long, global = true)]
    pub png: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Render images and painted concept masks for a seed range.
    Generate(GenerateArgs),
    /// Label every unit of a layer with its best-IoU concept.
    Dissect(DissectArgs),
    /// Apply one intervention to one image; optionally estimate its causal effect.
    Intervene(InterveneArgs),
    /// Optimize the per-unit ablation coefficients for a concept.
    Optimize(OptimizeArgs),
    /// Concept area left after ablating the top-k units, against random rankings.
    AblationCurve(CurveArgs),
    /// Flag artifact units and measure the effect of ablating them.
    Repair(RepairArgs),
    /// Per-layer change caused by an intervention.
    Trace(TraceArgs),
    /// Difference between two dissection reports.
    Compare(CompareArgs),
    /// Run the studio HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsamplingArg {
    Nearest,
    Bilinear,
}

#[derive(Debug, Args, Serialize)]
pub struct DissectArgs {
    #[arg(long, default_value_t = UNIT_LAYER)]
    pub layer: usize,
    /// Threshold-selection images.
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    /// IoU evaluation images.
    #[arg(long, default_value_t = 200)]
    pub eval: usize,
    /// Offsets both seed ranges.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "nearest")]
    pub upsampling: UpsamplingArg,
    #[arg(long, default_value_t = 0.05)]
    pub iou_floor: f64,
    /// Skip the per-unit image grids.
    #[arg(long)]
    pub no_grids: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Insert,
    Ablate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Insert => Mode::Insert,
            ModeArg::Ablate => Mode::Ablate,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    #[arg(long, default_value_t = UNIT_LAYER)]
    pub layer: usize,
    /// Comma-separated unit indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub units: Vec<usize>,
    /// Featuremap cells as `row,col;row,col`.
    #[arg(long, conflicts_with = "everywhere", required_unless_present = "everywhere")]
    pub locations: Option<String>,
    /// Every cell of the layer.
    #[arg(long)]
    pub everywhere: bool,
    #[arg(long, value_enum, default_value = "insert")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    /// Latent seed of the image to edit.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct InterveneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub edit: EditArgs,
    /// Estimate the units' average causal effect on this concept.
    #[arg(long)]
    pub concept: Option<String>,
    /// Restrict the estimate to locations inside this concept.
    #[arg(long, requires = "concept")]
    pub context: Option<String>,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 100_000_000)]
    pub sample_start: u64,
    /// Square of cells of this radius around each drawn location.
    #[arg(long)]
    pub radius: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AlphaArgs {
    #[arg(long, default_value_t = UNIT_LAYER)]
    pub layer: usize,
    /// Fixed regularization weight.
    #[arg(long, conflicts_with = "lambda_probe")]
    pub lambda: Option<f64>,
    /// Set the weight from the effect gradient at alpha = 0.5 (the default).
    #[arg(long)]
    pub lambda_probe: bool,
    #[arg(long, default_value_t = 0.5)]
    pub probe_ratio: f64,
    #[arg(long, default_value_t = 64)]
    pub probe_samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Root of the minibatch stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl AlphaArgs {
    fn config(&self) -> AlphaConfig {
        AlphaConfig {
            lambda: match self.lambda {
                Some(value) => Lambda::Fixed { value },
                None => Lambda::Probe {
                    ratio: self.probe_ratio,
                    samples: self.probe_samples,
                },
            },
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch: self.batch,
            seed: self.seed,
            ..AlphaConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub concept: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub alpha: AlphaArgs,
}

const DEFAULT_K: &str = "0,1,2,3,4,5,6,8,10,12,16,20,24,32,48,64";

#[derive(Debug, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub concept: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub alpha: AlphaArgs,
    /// Reuse the ranking from an `optimize` report instead of optimizing.
    #[arg(long)]
    pub alpha_report: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_K)]
    pub k: Vec<usize>,
    /// Random rankings in the baseline.
    #[arg(long, default_value_t = 10)]
    pub random: usize,
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    #[arg(long, default_value_t = CURVE_SEEDS.count)]
    pub samples: usize,
    /// Also score removal of every concept at this k.
    #[arg(long)]
    pub removal_k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct RepairArgs {
    #[arg(long, default_value_t = UNIT_LAYER)]
    pub layer: usize,
    /// Units to flag.
    #[arg(long, default_value_t = 4)]
    pub flag: usize,
    #[arg(long, default_value_t = 200)]
    pub flag_images: usize,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value_t = 200)]
    pub reference_images: usize,
    #[arg(long, default_value_t = 10)]
    pub random: usize,
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub edit: EditArgs,
    /// Images behind the per-channel reference magnitudes.
    #[arg(long, default_value_t = 20)]
    pub magnitude_images: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Baseline dissection report.
    pub a: PathBuf,
    /// Dissection report to compare against the baseline.
    pub b: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug)]
pub enum CliError {
    Core(CoreError),
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Data(msg.into()))
}

/// A report with enough context to regenerate it.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope<T> {
    pub schema: String,
    pub schema_version: u32,
    pub tool_version: String,
    pub world: String,
    pub world_hash: String,
    pub seeds: BTreeMap<String, SeedRange>,
    pub report: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub world: String,
    pub world_hash: String,
    /// World file as given on the command line; `None` for the built-in world.
    pub world_file: Option<String>,
    pub png: bool,
    pub command: serde_json::Value,
    pub seeds: BTreeMap<String, SeedRange>,
    /// Roots of the named random streams.
    pub streams: BTreeMap<String, u64>,
    pub outputs: Vec<OutputFile>,
}

struct Run {
    dir: PathBuf,
    png: bool,
    world: World,
    world_file: Option<String>,
    seeds: BTreeMap<String, SeedRange>,
    streams: BTreeMap<String, u64>,
    outputs: BTreeMap<String, OutputFile>,
}

impl Run {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.insert(
            rel.to_string(),
            OutputFile {
                path: rel.to_string(),
                bytes: bytes.len(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    fn seed(&mut self, name: &str, range: SeedRange) {
        self.seeds.insert(name.to_string(), range);
    }

    fn stream(&mut self, name: &str, root: u64) {
        self.streams.insert(name.to_string(), root);
    }

    fn report<T: Serialize>(&mut self, stem: &str, schema: &str, report: &T) -> Result<()> {
        let env = Envelope {
            schema: format!("unitprobe.{schema}"),
            schema_version: ENVELOPE_SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            world: self.world.spec().name.clone(),
            world_hash: self.world.hash().to_string(),
            seeds: self.seeds.clone(),
            report,
        };
        self.write(&format!("{stem}.json"), json_string(&env)?.as_bytes())
    }

    fn csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<()> {
        self.write(rel, csv_string(rows)?.as_bytes())
    }

    /// PPM always, PNG too when asked.
    fn raster(&mut self, stem: &str, image: &Tensor) -> Result<()> {
        self.write(&format!("{stem}.ppm"), &encode_ppm(image)?)?;
        if self.png {
            self.write(&format!("{stem}.png"), &encode_png(image)?)?;
        }
        Ok(())
    }

    fn finish(self, command: &Command) -> Result<PathBuf> {
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            world: self.world.spec().name.clone(),
            world_hash: self.world.hash().to_string(),
            world_file: self.world_file,
            png: self.png,
            command: serde_json::to_value(command).map_err(CoreError::from)?,
            seeds: self.seeds,
            streams: self.streams,
            outputs: self.outputs.into_values().collect(),
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, json_string(&manifest)?)?;
        Ok(path)
    }
}

/// Parse `row,col;row,col`.
pub fn parse_locations(text: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|cell| {
            let parts: Vec<&str> = cell.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [i, j] => Ok((
                    i.parse().map_err(|_| format!("bad row in `{cell}`"))?,
                    j.parse().map_err(|_| format!("bad column in `{cell}`"))?,
                )),
                _ => Err(format!("location `{cell}` is not `row,col`")),
            }
        })
        .collect()
}

fn load_world(path: Option<&Path>) -> Result<World> {
    match path {
        None => Ok(World::default_world()),
        Some(p) => {
            let spec = WorldSpec::load(p).map_err(|e| CliError::Data(format!("cannot load world {}: {e}", p.display())))?;
            Ok(World::new(spec)?)
        }
    }
}

/// Build the intervention described by the edit flags.
pub fn edit_spec(world: &World, e: &EditArgs) -> Result<InterventionSpec> {
    let locations = match &e.locations {
        Some(text) => parse_locations(text).map_err(CliError::Data)?,
        None => all_locations(world, e.layer)?,
    };
    let mut spec = match Mode::from(e.mode) {
        Mode::Ablate => InterventionSpec::ablate(e.layer, e.units.clone(), locations),
        Mode::Insert => {
            world.check_layer(e.layer)?;
            let table = insertion_levels(world, e.layer, &InsertLevel::Quantile99, 0)?.unwrap_or_default();
            InterventionSpec::insert(e.layer, e.units.clone(), locations, &table)
        }
    };
    spec.strength = e.strength;
    spec.validate(world)?;
    Ok(spec)
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Run a parsed command and return its one-line summary.
pub fn execute(cli: &Cli) -> Result<String> {
    let world = load_world(cli.world.as_deref())?;
    if let Command::Serve(args) = &cli.command {
        return serve(world, cli.world.is_some(), args);
    }
    if let Command::Compare(args) = &cli.command {
        return compare(cli, args);
    }
    fs::create_dir_all(&cli.out)?;
    let mut run = Run {
        dir: cli.out.clone(),
        png: cli.png,
        world,
        world_file: cli.world.as_ref().map(|p| p.display().to_string()),
        seeds: BTreeMap::new(),
        streams: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    let summary = match &cli.command {
        Command::Generate(a) => generate(&mut run, a)?,
        Command::Dissect(a) => dissect(&mut run, a)?,
        Command::Intervene(a) => intervene(&mut run, a)?,
        Command::Optimize(a) => optimize(&mut run, a)?,
        Command::AblationCurve(a) => curve(&mut run, a)?,
        Command::Repair(a) => repair_cmd(&mut run, a)?,
        Command::Trace(a) => trace(&mut run, a)?,
        Command::Compare(_) | Command::Serve(_) => unreachable!(),
    };
    let manifest = run.finish(&cli.command)?;
    Ok(format!("{summary} ({})", manifest.display()))
}

#[derive(Serialize)]
struct AreaRow {
    seed: u64,
    concept: String,
    pixels: usize,
}

fn generate(run: &mut Run, a: &GenerateArgs) -> Result<String> {
    let seeds = SeedRange::new(a.start, a.count);
    run.seed("images", seeds);
    let mut images = Vec::new();
    let mut rows = Vec::new();
    for s in seeds.seeds() {
        let image = run.world.forward(&run.world.z_for_seed(s), &[])?.image;
        let segs = segment(&image, run.world.spec())?;
        for (name, mask) in segs.names.iter().zip(&segs.masks) {
            run.write(&format!("masks/seed-{s}-{name}.pbm"), &encode_pbm(mask))?;
            rows.push(AreaRow {
                seed: s,
                concept: name.clone(),
                pixels: mask.count(),
            });
        }
        run.raster(&format!("images/seed-{s}"), &image)?;
        images.push(image);
    }
    if !images.is_empty() {
        run.raster("grid", &image_grid(&images, 8, 1, 1.0)?)?;
    }
    run.report("generate", "generate", &rows)?;
    run.csv("generate.csv", &rows)?;
    Ok(format!("generate: {} images", a.count))
}

#[derive(Serialize)]
struct UnitRow {
    unit: usize,
    concept: String,
    iou: f64,
    threshold: f64,
    matched: bool,
}

/// A unit's top images with everything outside its thresholded region dimmed.
fn unit_grid(world: &World, report: &DissectionReport, unit: usize) -> Result<Option<Tensor>> {
    let label = &report.units[unit];
    let size = world.image_size();
    let mut tiles = Vec::new();
    for &s in &label.top_seeds {
        let t = world.forward(&world.z_for_seed(s), &[])?;
        let fm = t.layer(report.layer).channel(unit);
        let (h, w) = fm.spatial();
        let up = upsample_nearest(&fm.reshape(vec![1, h, w])?, size, size)?;
        let mut img = t.image.clone();
        for (p, px) in img.data_mut().chunks_exact_mut(3).enumerate() {
            if up.data()[p] <= label.threshold {
                px.iter_mut().for_each(|v| *v *= 0.25);
            }
        }
        tiles.push(img);
    }
    if tiles.is_empty() {
        return Ok(None);
    }
    Ok(Some(image_grid(&tiles, tiles.len(), 1, 1.0)?))
}

fn dissect(run: &mut Run, a: &DissectArgs) -> Result<String> {
    let base = DissectConfig::with_seed(a.seed);
    let cfg = DissectConfig {
        train: SeedRange::new(base.train.start, a.train),
        eval: SeedRange::new(base.eval.start, a.eval),
        iou_floor: a.iou_floor,
        upsampling: match a.upsampling {
            UpsamplingArg::Nearest => Upsampling::Nearest,
            UpsamplingArg::Bilinear => Upsampling::Bilinear,
        },
        ..base
    };
    run.seed("train", cfg.train);
    run.seed("eval", cfg.eval);
    let report = dissect_layer(&run.world, a.layer, &cfg)?;
    run.report("dissect", "dissection", &report)?;
    let rows: Vec<UnitRow> = report
        .units
        .iter()
        .map(|u| UnitRow {
            unit: u.unit,
            concept: u.concept.clone(),
            iou: u.iou,
            threshold: u.threshold,
            matched: u.matched,
        })
        .collect();
    run.csv("dissect.csv", &rows)?;
    #[derive(Serialize)]
    struct CountRow<'a> {
        concept: &'a str,
        units: usize,
    }
    let counts: Vec<CountRow> = report
        .concept_counts
        .iter()
        .map(|(c, &n)| CountRow { concept: c, units: n })
        .collect();
    run.csv("concepts.csv", &counts)?;
    if !a.no_grids {
        for u in 0..report.units.len() {
            if let Some(grid) = unit_grid(&run.world, &report, u)? {
                run.raster(&format!("units/unit-{u:03}"), &grid)?;
            }
        }
    }
    Ok(format!(
        "dissect: layer {}, {}/{} units matched, {} distinct concepts",
        a.layer,
        report.matched_units(),
        report.units.len(),
        report.distinct_concepts()
    ))
}

#[derive(Serialize)]
struct AreaDelta {
    concept: String,
    before: usize,
    after: usize,
    delta: i64,
}

#[derive(Serialize)]
struct InterventionReport {
    seed: u64,
    spec: InterventionSpec,
    areas: Vec<AreaDelta>,
    ace: Option<unitprobe_core::intervene::AceResult>,
}

fn intervene(run: &mut Run, a: &InterveneArgs) -> Result<String> {
    let world = &run.world;
    let spec = edit_spec(world, &a.edit)?;
    let z = world.z_for_seed(a.edit.seed);
    let before = world.forward(&z, &[])?.image;
    let after = world.forward(&z, &[spec.to_edit(world)?])?.image;
    let (sb, sa) = (segment(&before, world.spec())?, segment(&after, world.spec())?);
    let areas: Vec<AreaDelta> = sb
        .names
        .iter()
        .enumerate()
        .map(|(c, n)| AreaDelta {
            concept: n.clone(),
            before: sb.masks[c].count(),
            after: sa.masks[c].count(),
            delta: sa.masks[c].count() as i64 - sb.masks[c].count() as i64,
        })
        .collect();
    let ace_result = match &a.concept {
        None => None,
        Some(concept) => {
            let cfg = AceConfig {
                samples: SeedRange::new(a.sample_start, a.samples),
                policy: match a.radius {
                    Some(radius) => LocationPolicy::Region { radius },
                    None => LocationPolicy::Point,
                },
                ..AceConfig::default()
            };
            run.seed("ace-samples", cfg.samples);
            run.stream("ace-locations", cfg.location_seed);
            Some(match &a.context {
                None => ace(&run.world, a.edit.layer, &a.edit.units, concept, &cfg)?,
                Some(ctx) => conditional_ace(&run.world, a.edit.layer, &a.edit.units, concept, ctx, &cfg)?,
            })
        }
    };
    run.seed("image", SeedRange::new(a.edit.seed, 1));
    run.raster("before", &before)?;
    run.raster("after", &after)?;
    let summary = match &ace_result {
        Some(r) => format!(
            "intervene: ACE of {} units on {} = {}",
            r.units.len(),
            r.concept,
            r.ace.map_or("undefined".to_string(), |v| format!("{v:.4}"))
        ),
        None => format!("intervene: {} units at {} cells", spec.units.len(), spec.locations.len()),
    };
    run.csv("areas.csv", &areas)?;
    let report = InterventionReport {
        seed: a.edit.seed,
        spec,
        areas,
        ace: ace_result,
    };
    run.report("intervention", "intervention", &report)?;
    Ok(summary)
}

#[derive(Serialize)]
struct AlphaRow {
    unit: usize,
    alpha: f64,
    rank: usize,
}

#[derive(Serialize)]
struct TrajectoryRow {
    step: usize,
    objective: f64,
}

fn write_alpha(run: &mut Run, stem: &str, sol: &AlphaSolution) -> Result<()> {
    run.report(stem, "alpha", sol)?;
    let mut rank = vec![0; sol.alpha.len()];
    for (r, &u) in sol.ranking.iter().enumerate() {
        rank[u] = r + 1;
    }
    let rows: Vec<AlphaRow> = sol
        .alpha
        .iter()
        .enumerate()
        .map(|(unit, &alpha)| AlphaRow {
            unit,
            alpha,
            rank: rank[unit],
        })
        .collect();
    run.csv(&format!("{stem}.csv"), &rows)?;
    let traj: Vec<TrajectoryRow> = sol
        .trajectory
        .iter()
        .enumerate()
        .map(|(step, &objective)| TrajectoryRow { step, objective })
        .collect();
    run.csv(&format!("{stem}-trajectory.csv"), &traj)
}

fn optimize(run: &mut Run, a: &OptimizeArgs) -> Result<String> {
    let cfg = a.alpha.config();
    run.stream("alpha-batches", cfg.seed);
    let sol = optimize_alpha(&run.world, a.alpha.layer, &a.concept, &cfg)?;
    write_alpha(run, "alpha", &sol)?;
    let top: Vec<String> = sol.ranking.iter().take(5).map(|u| u.to_string()).collect();
    Ok(format!(
        "optimize: {} lambda {:.4}, top units {}",
        a.concept,
        sol.lambda,
        top.join(",")
    ))
}

#[derive(Serialize)]
struct CurveRow {
    k: usize,
    ranked: f64,
    random_mean: f64,
    random_min: f64,
    random_max: f64,
    at_or_below_random: bool,
}

#[derive(Serialize)]
struct CurveReport {
    concept: String,
    layer: usize,
    ranking: Vec<usize>,
    random_rankings: usize,
    random_seed: u64,
    points: Vec<CurveRow>,
    removal: Vec<unitprobe_core::optimize::RemovalScore>,
}

fn load_envelope<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Envelope<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let env: Envelope<T> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{} is not a {schema} report: {e}", path.display())))?;
    if env.schema != format!("unitprobe.{schema}") {
        return data_err(format!("{} holds a {} report, expected {schema}", path.display(), env.schema));
    }
    Ok(env)
}

fn curve(run: &mut Run, a: &CurveArgs) -> Result<String> {
    let layer = a.alpha.layer;
    let cfg = a.alpha.config();
    let ranking = match &a.alpha_report {
        Some(path) => {
            let env: Envelope<AlphaSolution> = load_envelope(path, "alpha")?;
            if env.world_hash != run.world.hash() || env.report.concept != a.concept || env.report.layer != layer {
                return data_err(format!("{} was computed for a different world, concept or layer", path.display()));
            }
            env.report.ranking
        }
        None => {
            run.stream("alpha-batches", cfg.seed);
            let sol = optimize_alpha(&run.world, layer, &a.concept, &cfg)?;
            write_alpha(run, "alpha", &sol)?;
            sol.ranking
        }
    };
    let seeds = SeedRange::new(CURVE_SEEDS.start, a.samples);
    run.seed("curve", seeds);
    run.stream("random-ranking", a.random_seed);
    let ranked = topk_ablation_curve(&run.world, layer, &ranking, &a.concept, &a.k, seeds)?;
    let d = ranking.len();
    let randoms: Vec<Vec<f64>> = (0..a.random as u64)
        .map(|r| {
            let rr = random_ranking(d, a.random_seed + r);
            Ok(topk_ablation_curve(&run.world, layer, &rr, &a.concept, &a.k, seeds)?
                .iter()
                .map(|p| p.remaining)
                .collect())
        })
        .collect::<Result<_>>()?;
    let points: Vec<CurveRow> = ranked
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let col: Vec<f64> = randoms.iter().map(|r| r[i]).collect();
            let mean = if col.is_empty() { f64::NAN } else { col.iter().sum::<f64>() / col.len() as f64 };
            CurveRow {
                k: p.k,
                ranked: p.remaining,
                random_mean: mean,
                random_min: col.iter().copied().fold(f64::INFINITY, f64::min),
                random_max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                at_or_below_random: p.remaining <= mean,
            }
        })
        .collect();
    let mut removal = Vec::new();
    if let Some(k) = a.removal_k {
        let mut rankings = Vec::new();
        for c in run.world.spec().concept_names() {
            let r = if c == a.concept {
                ranking.clone()
            } else {
                optimize_alpha(&run.world, layer, &c, &cfg)?.ranking
            };
            rankings.push((c, r));
        }
        removal = removal_difficulty(&run.world, layer, &rankings, k, seeds)?;
        run.csv("removal.csv", &removal)?;
    }
    run.csv("curve.csv", &points)?;
    let dominated = points.iter().filter(|p| p.at_or_below_random).count();
    let report = CurveReport {
        concept: a.concept.clone(),
        layer,
        ranking,
        random_rankings: a.random,
        random_seed: a.random_seed,
        points,
        removal,
    };
    run.report("curve", "ablation-curve", &report)?;
    Ok(format!(
        "ablation-curve: {} ranked curve at or below random at {}/{} k",
        a.concept,
        dominated,
        report.points.len()
    ))
}

#[derive(Serialize)]
struct FlagRow {
    unit: usize,
    energy: f64,
    flagged: bool,
}

fn repair_cmd(run: &mut Run, a: &RepairArgs) -> Result<String> {
    let flag_cfg = FlagConfig {
        seeds: SeedRange::new(FlagConfig::default().seeds.start, a.flag_images),
        ..FlagConfig::default()
    };
    let base = RepairConfig::default();
    let cfg = RepairConfig {
        seeds: SeedRange::new(base.seeds.start, a.images),
        reference_seeds: SeedRange::new(base.reference_seeds.start, a.reference_images),
        random_draws: a.random,
        random_seed: a.random_seed,
    };
    run.seed("flag", flag_cfg.seeds);
    run.seed("evaluate", cfg.seeds);
    run.seed("reference", cfg.reference_seeds);
    run.stream("random-ranking", cfg.random_seed);
    let flags = flag_artifact_units(&run.world, a.layer, a.flag, &flag_cfg)?;
    let report = repair(&run.world, a.layer, &flags.flagged, &cfg)?;
    let flag_rows: Vec<FlagRow> = flags
        .evidence
        .iter()
        .map(|e| FlagRow {
            unit: e.unit,
            energy: e.energy,
            flagged: flags.flagged.contains(&e.unit),
        })
        .collect();
    run.report("flags", "artifact-flags", &flags)?;
    run.csv("flags.csv", &flag_rows)?;
    run.report("repair", "repair", &report)?;
    run.csv("repair.csv", &report.rows)?;

    let spec = InterventionSpec::ablate(a.layer, flags.flagged.clone(), all_locations(&run.world, a.layer)?);
    let edits = if flags.flagged.is_empty() { vec![] } else { vec![spec.to_edit(&run.world)?] };
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for s in cfg.seeds.seeds().take(8) {
        let z = run.world.z_for_seed(s);
        before.push(run.world.forward(&z, &[])?.image);
        after.push(run.world.forward(&z, &edits)?.image);
    }
    if !before.is_empty() {
        run.raster("repair-before", &image_grid(&before, 8, 1, 1.0)?)?;
        run.raster("repair-after", &image_grid(&after, 8, 1, 1.0)?)?;
    }
    Ok(format!(
        "repair: flagged {:?}, Frechet {:.4} -> {:.4} ({:.1}% lower), random {:+.1}%",
        report.flagged,
        report.frechet_original,
        report.frechet_repaired,
        100.0 * report.reduction,
        100.0 * report.random_change
    ))
}

fn trace(run: &mut Run, a: &TraceArgs) -> Result<String> {
    let spec = edit_spec(&run.world, &a.edit)?;
    let mags_seeds = SeedRange::new(0, a.magnitude_images);
    run.seed("magnitudes", mags_seeds);
    run.seed("image", SeedRange::new(a.edit.seed, 1));
    let mags = channel_magnitudes(&run.world, mags_seeds)?;
    let t = layer_trace(&run.world, &run.world.z_for_seed(a.edit.seed), &spec, &mags)?;
    #[derive(Serialize)]
    struct TraceRow {
        layer: usize,
        mean_change: f64,
        excluded_channels: usize,
    }
    let rows: Vec<TraceRow> = t
        .profile
        .iter()
        .map(|c| TraceRow {
            layer: c.layer,
            mean_change: c.mean_change,
            excluded_channels: c.excluded_channels.len(),
        })
        .collect();
    run.csv("trace.csv", &rows)?;
    run.report("trace", "layer-trace", &t)?;
    let heat = Tensor::new(vec![t.heatmap_height, t.heatmap_width], t.heatmap.clone())?;
    run.raster("trace-heatmap", &normalize_map(&heat)?)?;
    let last = t.profile.last().map_or(0.0, |c| c.mean_change);
    Ok(format!("trace: {} layers, final-layer change {last:.4}", t.profile.len()))
}

fn compare(cli: &Cli, a: &CompareArgs) -> Result<String> {
    let ea: Envelope<DissectionReport> = load_envelope(&a.a, "dissection")?;
    let eb: Envelope<DissectionReport> = load_envelope(&a.b, "dissection")?;
    let diff = compare_reports(&ea.report, &eb.report)?;
    fs::create_dir_all(&cli.out)?;
    let mut seeds = BTreeMap::new();
    for (k, v) in ea.seeds {
        seeds.insert(format!("a.{k}"), v);
    }
    for (k, v) in eb.seeds {
        seeds.insert(format!("b.{k}"), v);
    }
    let mut run = Run {
        dir: cli.out.clone(),
        png: cli.png,
        world: load_world(cli.world.as_deref())?,
        world_file: None,
        seeds,
        streams: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    let env = Envelope {
        schema: "unitprobe.comparison".to_string(),
        schema_version: ENVELOPE_SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        world: format!("{} vs {}", ea.world, eb.world),
        world_hash: format!("{}+{}", ea.world_hash, eb.world_hash),
        seeds: run.seeds.clone(),
        report: &diff,
    };
    run.write("compare.json", json_string(&env)?.as_bytes())?;
    run.csv("compare.csv", &diff.concepts)?;
    let manifest = run.finish(&cli.command)?;
    Ok(format!(
        "compare: distinct concepts {} -> {} ({:+}), matched units {} -> {} ({}) ({})",
        diff.distinct_a,
        diff.distinct_b,
        diff.distinct_delta,
        diff.matched_a,
        diff.matched_b,
        diff.percent_change.map_or("n/a".to_string(), |p| format!("{p:+.1}%")),
        manifest.display()
    ))
}

fn serve(world: World, from_file: bool, a: &ServeArgs) -> Result<String> {
    let mut worlds = Vec::new();
    if from_file {
        worlds.push((world.spec().name.clone(), world));
    }
    worlds.push(("default".to_string(), World::default_world()));
    let studio = Arc::new(Studio::new(worlds, StudioConfig::default())?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Data(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving on http://{addr}");
    rt.block_on(unitprobe_studio::serve(studio, addr))?;
    Ok("serve: stopped".to_string())
}
