//! Command-line surface: scene generation, map building, feature
//! aggregation, instruction grounding, metric evaluation, and PLY export.
//!
//! Every command exits nonzero with a one-line reason on stderr; outputs
//! embed the effective config so a run can be reproduced from its artifact.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use instmap::config::AblationMode;
use instmap::eval::{
    mean_average_precision, success_rate, EvalGroundTruth, EvalPrediction, RetrievalCase,
};
use instmap::features::file::FileProvider;
use instmap::features::http::HttpProvider;
use instmap::features::synthetic::SyntheticCropProvider;
use instmap::features::{aggregate_all, EmbeddingProvider};
use instmap::geometry::backproject::build_clouds;
use instmap::geometry::voxel::VoxelSet;
use instmap::grounding::{
    assign_labels, ground_instruction, load_trace, save_trace, GroundingOptions, GroundingRecord,
    HttpTextEmbedder, InstanceMap, LabelTable, LlmClient, ScriptedLlm, SyntheticTextEmbedder,
    TextEmbedder, TraceFile, TRACE_FORMAT,
};
use instmap::map_io::{load_map, save_map, save_map_file};
use instmap::merging::run_pipeline;
use instmap::scene::manifest::{LabelFile, QueryFile};
use instmap::scene::{
    load_ground_truth, load_scene, scene_ground_truth, scene_labels, scene_queries,
};
use instmap::synth::{generate_scene, load_spec};
use instmap::{Config, GroundTruth};

#[derive(Parser)]
#[command(
    name = "instmap",
    version,
    about = "3D instance mapping and instruction grounding from posed RGB-D masks"
)]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    /// Debug output; repeat for trace. Debug dumps the pair-consensus table.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic RGB-D scene from a generator spec.
    GenScene {
        /// Generator spec file.
        spec: PathBuf,
        /// Scene directory to create.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fuse a scene's 2D masks into a 3D instance map.
    BuildMap {
        /// Scene directory.
        scene: PathBuf,
        /// Map directory to create.
        #[arg(short, long)]
        out: PathBuf,
        /// Config file overriding defaults key by key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable one side of the merge criterion.
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
    },
    /// Attach aggregated retrieval features to a map's instances.
    Aggregate {
        /// Map directory produced by build-map.
        map: PathBuf,
        /// Embedding source: `synthetic`, `file:<index>`, or `http[:<url>]`.
        #[arg(long)]
        provider: String,
    },
    /// Resolve instructions to map instances and record a trace.
    Ground {
        /// Map directory (aggregated or not).
        map: PathBuf,
        /// Instruction to ground; repeatable.
        #[arg(long)]
        instruction: Vec<String>,
        /// Query file whose instructions are all grounded.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Scripted language model instead of a live endpoint.
        #[arg(long)]
        mock_llm: Option<PathBuf>,
        /// Label vocabulary; defaults to the scene's label file if present.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Skip round 1: embed the raw instruction.
        #[arg(long)]
        no_parsing: bool,
        /// Skip round 2: take the similarity rank-1 candidate.
        #[arg(long)]
        no_selection: bool,
        /// Text embedding source: `synthetic` or `http[:<url>]`.
        #[arg(long, default_value = "synthetic")]
        embedder: String,
        /// Trace file to write (default: <map>/trace.toml).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score artifacts against ground truth.
    Eval {
        #[command(subcommand)]
        what: EvalCmd,
    },
    /// Export a map or scene as a colored point cloud.
    ExportPly {
        /// Map or scene directory.
        input: PathBuf,
        /// PLY file to write.
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Instance-segmentation AP of a map against scene ground truth.
    Map {
        map: PathBuf,
        /// Scene directory or ground-truth file.
        gt: PathBuf,
        /// Also write the report here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Retrieval success rates of grounding traces against scene queries.
    Retrieval {
        /// Trace files, then the scene directory or query file last.
        #[arg(required = true, num_args = 2.., value_name = "TRACES... GT")]
        paths: Vec<PathBuf>,
        /// Also write the report here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblateArg {
    /// Force the semantic rate to 1 (geometry decides alone).
    StructuralOnly,
    /// Force the structural rate to 1 (features decide alone).
    SemanticOnly,
}

impl From<AblateArg> for AblationMode {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::StructuralOnly => AblationMode::StructuralOnly,
            AblateArg::SemanticOnly => AblationMode::SemanticOnly,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenScene { spec, out } => {
            let spec = load_spec(&spec)?;
            let masks = generate_scene(&spec, &out)?;
            println!("scene written: {} ({} frames, {masks} masks)", out.display(), spec.frames);
            Ok(())
        }
        Cmd::BuildMap { scene, out, config, ablate } => build_map(&scene, &out, config, ablate),
        Cmd::Aggregate { map, provider } => aggregate(&map, &provider),
        Cmd::Ground {
            map,
            instruction,
            queries,
            mock_llm,
            labels,
            no_parsing,
            no_selection,
            embedder,
            out,
        } => ground(GroundArgs {
            map,
            instruction,
            queries,
            mock_llm,
            labels,
            no_parsing,
            no_selection,
            embedder,
            out,
        }),
        Cmd::Eval { what } => match what {
            EvalCmd::Map { map, gt, out } => eval_map(&map, &gt, out.as_deref()),
            EvalCmd::Retrieval { paths, out } => eval_retrieval(&paths, out.as_deref()),
        },
        Cmd::ExportPly { input, out } => export_ply(&input, &out),
    }
}

fn build_map(
    scene_dir: &Path,
    out: &Path,
    config: Option<PathBuf>,
    ablate: Option<AblateArg>,
) -> Result<()> {
    let mut cfg = Config::default();
    if let Some(path) = config {
        cfg = cfg.apply_file(&path)?;
    }
    if let Some(mode) = ablate {
        cfg.ablation = mode.into();
    }
    cfg.validate()?;
    let mut scene = load_scene::<f64>(scene_dir, &cfg)?;
    build_clouds(&mut scene, &cfg);
    let instances = run_pipeline(&scene, &cfg)?;
    save_map(out, &instances, &scene_dir.display().to_string(), &cfg, scene.feature_dim)?;
    println!("map written: {} ({} instances)", out.display(), instances.len());
    Ok(())
}

/// `synthetic`, `file:<index>`, `http`, `http:<url>`, or a bare URL.
fn make_provider(spec: &str, scene_dir: &Path) -> Result<Box<dyn EmbeddingProvider<f64>>> {
    if spec == "synthetic" {
        return Ok(Box::new(SyntheticCropProvider::from_scene(scene_dir)?));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        return Ok(Box::new(FileProvider::open(Path::new(path))?));
    }
    if let Some(url) = http_url(spec) {
        return Ok(Box::new(HttpProvider::connect(url)?));
    }
    bail!("unknown provider {spec:?} (expected synthetic, file:<index>, or http[:<url>])")
}

/// Normalizes the http provider/embedder forms to an optional explicit URL.
fn http_url(spec: &str) -> Option<Option<&str>> {
    if spec == "http" {
        return Some(None);
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Some(Some(spec));
    }
    spec.strip_prefix("http:").map(|rest| Some(rest))
}

fn aggregate(map_dir: &Path, provider_spec: &str) -> Result<()> {
    let mut loaded = load_map::<f64>(map_dir)?;
    let cfg = loaded.config.clone();
    let scene_dir = loaded.scene.clone();
    let mut scene = load_scene::<f64>(&scene_dir, &cfg)
        .with_context(|| format!("scene recorded by the map: {}", scene_dir.display()))?;
    build_clouds(&mut scene, &cfg);

    let provider = make_provider(provider_spec, &scene_dir)?;
    let stats = aggregate_all(&mut loaded.instances, &scene, provider.as_ref(), &cfg)?;

    // Semantic labels ride along whenever the scene names a vocabulary and
    // the provider family has a matching text embedder.
    let mut labeled = false;
    if let Some(label_file) = scene_labels(&scene_dir)? {
        let embedder: Option<Box<dyn TextEmbedder<f64>>> = if provider_spec == "synthetic" {
            Some(Box::new(SyntheticTextEmbedder::from_scene(&scene_dir)?))
        } else if let Some(url) = http_url(provider_spec) {
            Some(Box::new(HttpTextEmbedder::connect(url)?))
        } else {
            log::info!("label assignment skipped: no text embedder for a file provider");
            None
        };
        if let Some(embedder) = embedder {
            let table = LabelTable::build(&label_file, embedder.as_ref())?;
            assign_labels(&mut loaded.instances, &table);
            labeled = true;
        }
    }

    let mut file = save_map(
        map_dir,
        &loaded.instances,
        &loaded.file.scene,
        &cfg,
        loaded.feature_dim,
    )?;
    file.aggregation_provider = Some(provider.tag());
    save_map_file(map_dir, &file)?;
    println!(
        "aggregated: {} instances ({} failed, labels {})",
        stats.aggregated,
        stats.failed,
        if labeled { "assigned" } else { "absent" }
    );
    Ok(())
}

struct GroundArgs {
    map: PathBuf,
    instruction: Vec<String>,
    queries: Option<PathBuf>,
    mock_llm: Option<PathBuf>,
    labels: Option<PathBuf>,
    no_parsing: bool,
    no_selection: bool,
    embedder: String,
    out: Option<PathBuf>,
}

fn ground(args: GroundArgs) -> Result<()> {
    let loaded = load_map::<f64>(&args.map)?;
    let cfg = loaded.config.clone();
    let scene_dir = loaded.scene.clone();
    let dim = loaded.feature_dim;
    let map = InstanceMap::new(loaded.instances, dim);

    let embedder: Box<dyn TextEmbedder<f64>> = if args.embedder == "synthetic" {
        Box::new(
            SyntheticTextEmbedder::from_scene(&scene_dir)
                .context("synthetic embedder needs the scene's generator sidecar")?,
        )
    } else if let Some(url) = http_url(&args.embedder) {
        Box::new(HttpTextEmbedder::connect(url)?)
    } else {
        bail!("unknown embedder {:?} (expected synthetic or http[:<url>])", args.embedder)
    };

    let label_file: Option<LabelFile> = match &args.labels {
        Some(path) => Some(read_toml(path)?),
        None => scene_labels(&scene_dir)?,
    };
    let table = match &label_file {
        Some(lf) => Some(LabelTable::build(lf, embedder.as_ref())?),
        None => None,
    };

    let mut llm: Option<Box<dyn LlmClient>> = match &args.mock_llm {
        Some(script) => Some(Box::new(ScriptedLlm::from_file(script)?)),
        None if std::env::var(instmap::grounding::llm::LLM_URL_ENV).is_ok() => {
            Some(Box::new(instmap::grounding::HttpLlm::connect(None)?))
        }
        None => None,
    };
    let llm_tag = llm.as_ref().map(|l| l.tag());

    let mut instructions = args.instruction.clone();
    if let Some(path) = &args.queries {
        let qf: QueryFile = read_toml(path)?;
        instructions.extend(qf.queries.into_iter().map(|q| q.instruction));
    }
    if instructions.is_empty() {
        bail!("nothing to ground: pass --instruction or --queries");
    }

    let opts = GroundingOptions { parsing: !args.no_parsing, selection: !args.no_selection };
    let mut records: Vec<GroundingRecord> = Vec::with_capacity(instructions.len());
    for instruction in &instructions {
        let rec = ground_instruction(
            &map,
            table.as_ref(),
            instruction,
            embedder.as_ref(),
            llm.as_mut().map(|l| l as &mut dyn LlmClient),
            &cfg,
            opts,
        )?;
        let label = rec
            .candidates
            .iter()
            .find(|c| c.instance_id == rec.chosen_instance)
            .and_then(|c| c.label.clone());
        println!(
            "grounded {:?} -> instance {}{}{}",
            instruction,
            rec.chosen_instance,
            label.map(|l| format!(" ({l})")).unwrap_or_default(),
            if rec.llm_fallback { " [fallback]" } else { "" }
        );
        records.push(rec);
    }

    let trace_path = args.out.unwrap_or_else(|| args.map.join("trace.toml"));
    let trace = TraceFile {
        format: TRACE_FORMAT.to_string(),
        map: args.map.display().to_string(),
        text_embedder: embedder.tag(),
        llm: llm_tag,
        parsing: opts.parsing,
        selection: opts.selection,
        config: cfg.to_raw(),
        groundings: records,
    };
    save_trace(&trace_path, &trace)?;
    println!("trace written: {}", trace_path.display());
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parse {}", path.display()))
}

/// Flat metric report: `name split value` per line, diffable in CI.
struct Report {
    lines: Vec<String>,
}

impl Report {
    fn new() -> Self {
        Report { lines: Vec::new() }
    }
    fn count(&mut self, name: &str, split: &str, v: usize) {
        self.lines.push(format!("{name} {split} {v}"));
    }
    fn value(&mut self, name: &str, split: &str, v: f64) {
        self.lines.push(format!("{name} {split} {v:.6}"));
    }
    fn finish(self, out: Option<&Path>) -> Result<()> {
        let text = self.lines.join("\n") + "\n";
        print!("{text}");
        if let Some(path) = out {
            std::fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
        }
        Ok(())
    }
}

fn load_gt_instances(gt: &Path) -> Result<Vec<GroundTruth>> {
    if gt.is_dir() {
        scene_ground_truth::<f64>(gt)?
            .ok_or_else(|| anyhow::anyhow!("{}: scene has no ground truth", gt.display()))
    } else {
        Ok(load_ground_truth::<f64>(gt)?)
    }
}

fn eval_map(map_dir: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let loaded = load_map::<f64>(map_dir)?;
    let voxel = loaded.config.voxel_size;

    let gts: Vec<EvalGroundTruth<f64>> = load_gt_instances(gt)?
        .into_iter()
        .map(|g| EvalGroundTruth {
            id: g.instance_id,
            cloud: VoxelSet::from_points(voxel, g.points.iter().copied()),
            label_id: g.label_id,
        })
        .collect();

    // Class-agnostic ordering: fixed confidence with ties broken by size
    // descending, realized directly as size-valued confidence.
    let agnostic: Vec<EvalPrediction<f64>> = loaded
        .instances
        .iter()
        .map(|i| EvalPrediction {
            id: i.instance_id,
            cloud: i.cloud.clone(),
            confidence: i.cloud.len() as f64,
            label_id: None,
        })
        .collect();

    let mut report = Report::new();
    report.count("instance_count", "pred", agnostic.len());
    report.count("instance_count", "gt", gts.len());
    report.value("ap25", "overall", instmap::eval::average_precision(&agnostic, &gts, 0.25, false));
    report.value("ap50", "overall", instmap::eval::average_precision(&agnostic, &gts, 0.50, false));
    report.value("map50_95", "overall", mean_average_precision(&agnostic, &gts, false));

    // Semantic AP needs labels on both sides plus a label vocabulary to
    // score confidences against; all three exist only on labeled scenes.
    let scene_dir = loaded.scene.clone();
    let have_labels = loaded.instances.iter().all(|i| i.label_id.is_some())
        && gts.iter().all(|g| g.label_id.is_some())
        && !gts.is_empty();
    if have_labels {
        if let (Ok(Some(label_file)), Ok(embedder)) =
            (scene_labels(&scene_dir), SyntheticTextEmbedder::from_scene(&scene_dir))
        {
            let table = LabelTable::build(&label_file, &embedder)?;
            let semantic: Vec<EvalPrediction<f64>> = loaded
                .instances
                .iter()
                .map(|i| {
                    let feature =
                        i.aggregated_feature.as_deref().unwrap_or(&i.representative_feature);
                    EvalPrediction {
                        id: i.instance_id,
                        cloud: i.cloud.clone(),
                        confidence: table.max_similarity(feature).unwrap_or(0.0),
                        label_id: i.label_id,
                    }
                })
                .collect();
            report.value(
                "sem_ap25",
                "overall",
                instmap::eval::semantic_average_precision(&semantic, &gts, 0.25),
            );
            report.value(
                "sem_ap50",
                "overall",
                instmap::eval::semantic_average_precision(&semantic, &gts, 0.50),
            );
            report.value("sem_map50_95", "overall", mean_average_precision(&semantic, &gts, true));
        } else {
            log::info!("semantic AP skipped: no label vocabulary or text embedder for this scene");
        }
    }
    report.finish(out)
}

fn eval_retrieval(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let (gt, trace_paths) = paths.split_last().expect("clap enforces >= 2 paths");
    let queries: QueryFile = if gt.is_dir() {
        scene_queries(gt)?
            .ok_or_else(|| anyhow::anyhow!("{}: scene has no query file", gt.display()))?
    } else {
        read_toml(gt)?
    };

    // First trace mentioning an instruction wins, in argument order.
    let mut by_instruction: BTreeMap<String, GroundingRecord> = BTreeMap::new();
    for path in trace_paths {
        let trace = load_trace(path)?;
        for rec in trace.groundings {
            by_instruction.entry(rec.instruction.clone()).or_insert(rec);
        }
    }

    let mut grounded = 0usize;
    let cases: Vec<RetrievalCase<f64>> = queries
        .queries
        .iter()
        .map(|q| {
            let attempts = match by_instruction.get(&q.instruction) {
                Some(rec) => {
                    grounded += 1;
                    rec.attempts.clone()
                }
                None => {
                    log::warn!("no trace grounds {:?}; scored as a miss", q.instruction);
                    Vec::new()
                }
            };
            RetrievalCase { attempts, gt_center: q.target_center }
        })
        .collect();

    let ks = [1usize, 4, 8, 16];
    let sr = success_rate(&cases, &ks);
    let mut report = Report::new();
    report.count("query_count", "overall", cases.len());
    report.count("grounded_count", "overall", grounded);
    report.value("sr", "overall", sr[&1]);
    report.value("sr_4", "overall", sr[&4]);
    report.value("sr_8", "overall", sr[&8]);
    report.value("sr_16", "overall", sr[&16]);
    report.finish(out)
}

/// Golden-angle hue walk; stable per index, distinct for small maps.
fn palette(i: usize) -> [u8; 3] {
    let h = (i as f64 * 0.618033988749895).fract() * 360.0;
    let s = 0.65;
    let v = 0.95;
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

fn export_ply(input: &Path, out: &Path) -> Result<()> {
    // (x, y, z, rgb) per point; grouped clouds colored by group index.
    let mut points: Vec<([f64; 3], [u8; 3])> = Vec::new();
    if input.join("map.toml").exists() {
        let loaded = load_map::<f64>(input)?;
        for (idx, inst) in loaded.instances.iter().enumerate() {
            let color = palette(idx);
            for cell in inst.cloud.sorted_cells() {
                points.push((cell_center(cell, loaded.config.voxel_size), color));
            }
        }
    } else if input.join("manifest.toml").exists() {
        let cfg = Config::default();
        let mut scene = load_scene::<f64>(input, &cfg)?;
        build_clouds(&mut scene, &cfg);
        for (idx, mask) in scene.masks.values().enumerate() {
            let color = palette(idx);
            for cell in mask.cloud.sorted_cells() {
                points.push((cell_center(cell, cfg.voxel_size), color));
            }
        }
    } else {
        bail!("{}: neither a map nor a scene directory", input.display());
    }

    let mut w = std::io::BufWriter::new(
        std::fs::File::create(out).with_context(|| format!("create {}", out.display()))?,
    );
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}")?;
    }
    writeln!(w, "end_header")?;
    for (p, c) in &points {
        writeln!(w, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2])?;
    }
    w.flush()?;
    println!("ply written: {} ({} points)", out.display(), points.len());
    Ok(())
}

fn cell_center(cell: [i32; 3], voxel: f64) -> [f64; 3] {
    [
        (cell[0] as f64 + 0.5) * voxel,
        (cell[1] as f64 + 0.5) * voxel,
        (cell[2] as f64 + 0.5) * voxel,
    ]
}
