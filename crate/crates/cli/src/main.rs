//! Single binary driving the full workflow: synthetic data generation, hash
//! benchmarking, shape-prior training/eval, shape fitting, detector
//! training/inference/eval, and the gradient-check suite.
//!
//! Every subcommand prints one machine-readable summary line (CSV) on
//! success. Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure.

mod settings;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use voxdet_core::config::ConfigFile;
use voxdet_core::detect::{self, dataset, Detector, MatchMetric, ShapeSupervision};
use voxdet_core::geometry::{Box3D, Vec3};
use voxdet_core::nn::Checkpoint;
use voxdet_core::shape::{
    extract_mesh, fit_shape, preprocess_observed, reconstruct_shape, train_prior, write_obj,
    write_ply, SdfDecoder, ShapeEncoder,
};
use voxdet_core::synth::{generate_scene, prior_shapes, PrimitiveShape, ShapeKind};
use voxdet_core::Error;

#[derive(Parser)]
#[command(
    name = "voxdet",
    about = "Sparse-voxel 3D object detection and SDF shape reconstruction",
    version
)]
struct Cli {
    /// Config file (key = value with [sections]); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value: `section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads (0 = all cores). Env: VOXDET_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Deterministic mode: single-threaded reductions, byte-stable outputs.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Global random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes (clouds, ground-truth boxes, manifests).
    GenData(GenDataArgs),
    /// Benchmark the spatial hashmap: load factor, collisions, throughput.
    BenchHash(BenchHashArgs),
    /// Voxelize a point cloud and report occupancy statistics.
    Voxelize(VoxelizeArgs),
    /// Run the gradient-check suites and print per-layer max errors.
    Gradcheck(GradcheckArgs),
    /// Train the SDF shape prior (encoder + decoder) on analytic primitives.
    TrainPrior(TrainPriorArgs),
    /// Reconstruct each prior shape and report Chamfer / SDF metrics.
    EvalPrior(EvalPriorArgs),
    /// Fit a shape embedding to observed points inside a box; export a mesh.
    FitShape(FitShapeArgs),
    /// Train the detector on a scene directory.
    TrainDetect(TrainDetectArgs),
    /// Run detection over a scene directory, writing box files.
    Detect(DetectArgs),
    /// Evaluate detections against ground truth (mAP at IoU thresholds).
    EvalDetect(EvalDetectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Seed range `a..b` (inclusive start, exclusive end).
    #[arg(long)]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchHashArgs {
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 0.42)]
    load: f64,
}

#[derive(Args)]
struct VoxelizeArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    voxel_size: f64,
    /// Optional output: voxel centers as a binary cloud.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run every suite (default behavior; kept for scripting clarity).
    #[arg(long)]
    all: bool,
    /// Check every coordinate of the end-to-end losses (slow).
    #[arg(long)]
    thorough: bool,
}

#[derive(Args)]
struct TrainPriorArgs {
    /// Comma-separated primitive names (default: config / built-in three).
    #[arg(long)]
    shapes: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Write per-iteration losses to this file.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalPriorArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    shapes: Option<String>,
    #[arg(long, default_value_t = 64)]
    res: usize,
}

#[derive(Args)]
struct FitShapeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    /// Object box: `cx,cy,cz,length,width,height,yaw`.
    #[arg(long, value_name = "PARAMS", allow_hyphen_values = true)]
    r#box: String,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    res: Option<usize>,
    /// Output mesh path (.obj or .ply).
    #[arg(long)]
    out: PathBuf,
    /// Ground plane height for ground-point removal.
    #[arg(long, default_value_t = 0.0)]
    ground_z: f64,
    /// Mirror observed points across the object's longitudinal plane.
    #[arg(long)]
    symmetry: bool,
}

#[derive(Args)]
struct TrainDetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shape-prior checkpoint enabling weak shape supervision.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalDetectArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, default_value = "0.25,0.5")]
    iou: String,
    /// Overlap metric: `yaw` or `aabb`.
    #[arg(long, default_value = "yaw")]
    metric: String,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit 0; real usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(Error::Io { .. }) | Some(Error::Format { .. }) => 2,
        Some(Error::Numerical(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => ConfigFile::from_path(path)?,
        None => ConfigFile::default(),
    };
    for spec in &cli.overrides {
        config.set_override(spec)?;
    }
    config.expect_sections(settings::SECTIONS)?;
    let mut run_settings = settings::load_run(&config)?;
    if let Some(seed) = cli.seed {
        run_settings.seed = seed;
    }
    if let Some(threads) = cli.threads {
        run_settings.threads = threads;
    } else if let Ok(env_threads) = std::env::var("VOXDET_THREADS") {
        if let Ok(n) = env_threads.parse() {
            run_settings.threads = n;
        }
    }
    if cli.deterministic {
        run_settings.deterministic = true;
    }
    let threads = if run_settings.deterministic {
        1
    } else {
        run_settings.threads
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }

    match cli.command {
        Command::GenData(args) => gen_data(&config, &run_settings, args),
        Command::BenchHash(args) => bench_hash(&run_settings, args),
        Command::Voxelize(args) => voxelize_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::TrainPrior(args) => train_prior_cmd(&config, &run_settings, args),
        Command::EvalPrior(args) => eval_prior_cmd(args),
        Command::FitShape(args) => fit_shape_cmd(&config, args),
        Command::TrainDetect(args) => train_detect_cmd(&config, &run_settings, args),
        Command::Detect(args) => detect_cmd(args),
        Command::EvalDetect(args) => eval_detect_cmd(args),
    }
}

fn parse_seed_range(text: &str) -> anyhow::Result<std::ops::Range<u64>> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("--seeds '{text}' is not of the form a..b")))?;
    let start: u64 = a
        .parse()
        .map_err(|_| Error::Config(format!("bad seed range start '{a}'")))?;
    let end: u64 = b
        .parse()
        .map_err(|_| Error::Config(format!("bad seed range end '{b}'")))?;
    if end <= start {
        return Err(Error::Config(format!("empty seed range {start}..{end}")).into());
    }
    Ok(start..end)
}

fn gen_data(
    config: &ConfigFile,
    run: &settings::RunSettings,
    args: GenDataArgs,
) -> anyhow::Result<()> {
    let scene_cfg = settings::load_scene(config)?;
    let seeds = parse_seed_range(&args.seeds)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let hash = dataset::config_hash(&config.to_text());
    let mut total_points = 0usize;
    let mut total_objects = 0usize;
    let count = seeds.end - seeds.start;
    for seed in seeds {
        let scene = generate_scene(&scene_cfg, seed)?;
        total_points += scene.cloud.len();
        total_objects += scene.objects.len();
        dataset::write_scene(&args.out, &format!("scene_{seed:06}"), &scene, hash)?;
    }
    let _ = run;
    println!(
        "gen-data,scenes={},points={},objects={},out={}",
        count,
        total_points,
        total_objects,
        args.out.display()
    );
    Ok(())
}

fn bench_hash(run: &settings::RunSettings, args: BenchHashArgs) -> anyhow::Result<()> {
    use std::collections::HashSet;
    use voxdet_core::sparse::{build_hashmap, VoxelKey};
    if args.n == 0 || !(0.0..1.0).contains(&args.load) || args.load <= 0.0 {
        return Err(Error::Config("bench-hash needs n > 0 and load in (0,1)".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut seen = HashSet::new();
    let mut keys = Vec::with_capacity(args.n);
    while keys.len() < args.n {
        let k = VoxelKey::new(
            rand::Rng::random_range(&mut rng, -512..512),
            rand::Rng::random_range(&mut rng, -512..512),
            rand::Rng::random_range(&mut rng, -512..512),
        );
        if seen.insert(k) {
            keys.push(k);
        }
    }
    let start = std::time::Instant::now();
    let map = build_hashmap(&keys, args.load)?;
    let elapsed = start.elapsed();
    let throughput = args.n as f64 / elapsed.as_secs_f64();
    println!(
        "bench-hash,n={},capacity={},load_factor={:.4},collision_rate={:.4},build_ms={:.3},keys_per_sec={:.0}",
        args.n,
        map.capacity(),
        map.load_factor(),
        map.stats.collision_rate(),
        elapsed.as_secs_f64() * 1e3,
        throughput
    );
    Ok(())
}

fn read_cloud_any(path: &Path) -> anyhow::Result<voxdet_core::geometry::PointCloud> {
    let cloud = if path.extension().is_some_and(|e| e == "ply") {
        voxdet_core::sparse::read_cloud_ply(path)?
    } else {
        voxdet_core::sparse::read_cloud_binary(path)?
    };
    Ok(cloud)
}

fn voxelize_cmd(args: VoxelizeArgs) -> anyhow::Result<()> {
    let cloud = read_cloud_any(&args.cloud)?;
    let (tensor, _) = voxdet_core::sparse::voxelize(&cloud, args.voxel_size)?;
    if let Some(out) = &args.out {
        let centers: Vec<Vec3> = (0..tensor.num_voxels())
            .map(|i| tensor.voxel_center(i))
            .collect();
        voxdet_core::sparse::write_cloud_binary(
            out,
            &voxdet_core::geometry::PointCloud::from_positions(centers),
        )?;
    }
    println!(
        "voxelize,points={},voxels={},voxel_size={},points_per_voxel={:.3}",
        cloud.len(),
        tensor.num_voxels(),
        args.voxel_size,
        cloud.len() as f64 / tensor.num_voxels().max(1) as f64
    );
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> anyhow::Result<()> {
    let _ = args.all;
    let results = voxdet_core::checks::run_gradcheck_suite(args.thorough)?;
    println!("check,max_rel_err,coords,pass");
    let mut all_pass = true;
    for r in &results {
        println!(
            "{},{:.3e},{},{}",
            r.name,
            r.max_rel_err,
            r.coords_checked,
            if r.passes() { "pass" } else { "FAIL" }
        );
        all_pass &= r.passes();
    }
    if !all_pass {
        return Err(Error::Numerical("gradient check exceeded tolerance".into()).into());
    }
    Ok(())
}

fn shapes_from_arg(arg: &Option<String>) -> anyhow::Result<Vec<(ShapeKind, PrimitiveShape)>> {
    match arg {
        None => Ok(prior_shapes()),
        Some(text) => {
            let stock = prior_shapes();
            text.split(',')
                .map(|t| {
                    let kind = ShapeKind::parse(t.trim()).ok_or_else(|| {
                        anyhow::Error::from(Error::Config(format!(
                            "unknown shape '{}'",
                            t.trim()
                        )))
                    })?;
                    stock
                        .iter()
                        .find(|(k, _)| *k == kind)
                        .cloned()
                        .ok_or_else(|| {
                            anyhow::Error::from(Error::Config(format!(
                                "'{}' is not one of the stock prior shapes",
                                t.trim()
                            )))
                        })
                })
                .collect()
        }
    }
}

fn train_prior_cmd(
    config: &ConfigFile,
    run: &settings::RunSettings,
    args: TrainPriorArgs,
) -> anyhow::Result<()> {
    let mut prior = settings::load_prior(config, run.seed)?;
    if let Some(iters) = args.iterations {
        prior.train.iterations = iters;
    }
    let shapes = match &args.shapes {
        Some(_) => shapes_from_arg(&args.shapes)?,
        None => {
            let stock = prior_shapes();
            prior
                .shapes
                .iter()
                .map(|kind| {
                    stock
                        .iter()
                        .find(|(k, _)| k == kind)
                        .cloned()
                        .ok_or_else(|| {
                            anyhow::Error::from(Error::Config(format!(
                                "'{}' is not a stock prior shape",
                                kind.name()
                            )))
                        })
                })
                .collect::<anyhow::Result<Vec<_>>>()?
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut encoder = ShapeEncoder::new(prior.encoder.clone(), &mut rng);
    let mut decoder = SdfDecoder::new(prior.decoder.clone(), &mut rng);
    let start = std::time::Instant::now();
    let losses = train_prior(&shapes, &mut encoder, &mut decoder, &prior.train)?;
    if let Some(log_path) = &args.loss_log {
        let text: String = losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.17e}\n"))
            .collect();
        std::fs::write(log_path, text)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }
    let mut ckpt = Checkpoint::new();
    encoder.save(&mut ckpt);
    decoder.save(&mut ckpt);
    ckpt.set_meta("kind", "prior");
    ckpt.save(&args.out)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "train-prior,iterations={},final_loss={:.6},seconds={:.1},out={}",
        losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        start.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn eval_prior_cmd(args: EvalPriorArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut encoder = ShapeEncoder::load(&ckpt)?;
    let mut decoder = SdfDecoder::load(&ckpt)?;
    let shapes = shapes_from_arg(&args.shapes)?;
    println!("shape,chamfer,mean_abs_sdf,vertices,triangles");
    for (kind, shape) in &shapes {
        let report = reconstruct_shape(&mut encoder, &mut decoder, shape, args.res, 600, 11)?;
        println!(
            "{},{:.5},{:.5},{},{}",
            kind.name(),
            report.chamfer,
            report.mean_abs_sdf_at_vertices,
            report.mesh.vertices.len(),
            report.mesh.triangles.len()
        );
    }
    Ok(())
}

fn parse_box(text: &str) -> anyhow::Result<Box3D> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--box '{text}' has a bad number")))?;
    if parts.len() != 7 {
        return Err(Error::Config(
            "--box wants cx,cy,cz,length,width,height,yaw".into(),
        )
        .into());
    }
    if parts[3] <= 0.0 || parts[4] <= 0.0 || parts[5] <= 0.0 {
        return Err(Error::Config("--box sizes must be positive".into()).into());
    }
    Ok(Box3D::with_yaw(
        Vec3::new(parts[0], parts[1], parts[2]),
        Vec3::new(parts[3], parts[4], parts[5]),
        parts[6],
    ))
}

fn fit_shape_cmd(config: &ConfigFile, args: FitShapeArgs) -> anyhow::Result<()> {
    let (mut fit_cfg, mut resolution) = settings::load_fit(config)?;
    if let Some(delta) = args.delta {
        fit_cfg.constraints = voxdet_core::shape::FitConstraints::RayAugment(delta);
    }
    if let Some(res) = args.res {
        resolution = res;
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut decoder = SdfDecoder::load(&ckpt)?;
    let cloud = read_cloud_any(&args.cloud)?;
    let object_box = parse_box(&args.r#box)?;
    let inside: Vec<Vec3> = cloud
        .positions
        .iter()
        .copied()
        .filter(|&p| voxdet_core::geometry::point_in_box(p, &object_box))
        .collect();
    let (canonical, frame) =
        preprocess_observed(&inside, &object_box, args.ground_z, args.symmetry)?;
    let (embedding, losses) = fit_shape(&canonical, &mut decoder, None, &fit_cfg)?;
    let mesh = extract_mesh(&decoder, &embedding, resolution)?;
    let scene_mesh = mesh.to_scene_frame(&frame);
    if args.out.extension().is_some_and(|e| e == "ply") {
        write_ply(&args.out, &scene_mesh)?;
    } else {
        write_obj(&args.out, &scene_mesh)?;
    }
    println!(
        "fit-shape,points={},queries_final_loss={:.6},vertices={},triangles={},out={}",
        canonical.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        scene_mesh.vertices.len(),
        scene_mesh.triangles.len(),
        args.out.display()
    );
    Ok(())
}

fn train_detect_cmd(
    config: &ConfigFile,
    run: &settings::RunSettings,
    args: TrainDetectArgs,
) -> anyhow::Result<()> {
    let detection_cfg = settings::load_detection(config)?;
    let backbone_cfg = settings::load_backbone(config)?;
    let train_cfg = settings::load_detector_train(config, run.seed)?;

    let scenes = dataset::read_scene_dir(&args.data)?;
    let samples: Vec<_> = scenes.iter().map(|(_, sample)| sample.clone()).collect();

    let mut shape_ctx = match &args.prior {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Some(ShapeSupervision {
                decoder: SdfDecoder::load(&ckpt)?,
                delta: 0.1,
                symmetry_classes: Vec::new(),
                ground_z: 0.0,
            })
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut detector = Detector::new(backbone_cfg, detection_cfg, &mut rng);
    let start = std::time::Instant::now();
    let losses =
        detect::train_detector(&mut detector, &samples, shape_ctx.as_mut(), &train_cfg)?;
    if let Some(log_path) = &args.loss_log {
        let text: String = losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.17e}\n"))
            .collect();
        std::fs::write(log_path, text)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
    }
    let mut ckpt = Checkpoint::new();
    detector.save(&mut ckpt);
    ckpt.set_meta("kind", "detector");
    ckpt.save(&args.out)?;
    let tail = &losses[losses.len().saturating_sub(50)..];
    println!(
        "train-detect,scenes={},iterations={},final_loss={:.6},seconds={:.1},out={}",
        scenes.len(),
        losses.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        start.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn detect_cmd(args: DetectArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut detector = Detector::load(&ckpt)?;
    let scenes = dataset::read_scene_dir(&args.data)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut total = 0usize;
    for (name, sample) in &scenes {
        let detections = detector.predict(&sample.positions)?;
        total += detections.len();
        dataset::write_detections(&args.out.join(format!("{name}.boxes")), &detections)?;
    }
    println!(
        "detect,scenes={},detections={},out={}",
        scenes.len(),
        total,
        args.out.display()
    );
    Ok(())
}

fn eval_detect_cmd(args: EvalDetectArgs) -> anyhow::Result<()> {
    let metric = match args.metric.as_str() {
        "yaw" => MatchMetric::Yaw,
        "aabb" => MatchMetric::AxisAligned,
        other => {
            return Err(Error::Config(format!(
                "--metric '{other}' must be yaw or aabb"
            ))
            .into())
        }
    };
    let thresholds: Vec<f64> = args
        .iou
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("--iou '{}' has a bad number", args.iou)))?;

    // Ground truth defines the scene set; predictions may omit empty scenes.
    let gt_scenes = dataset::read_scene_dir(&args.gt)?;
    let mut detections = Vec::with_capacity(gt_scenes.len());
    let mut ground_truth = Vec::with_capacity(gt_scenes.len());
    for (name, sample) in &gt_scenes {
        let pred_path = args.pred.join(format!("{name}.boxes"));
        let dets = if pred_path.exists() {
            dataset::read_detections(&pred_path)?
        } else {
            Vec::new()
        };
        detections.push(dets);
        ground_truth.push(sample.gt.clone());
    }
    println!("iou,map,per_class");
    for &threshold in &thresholds {
        let report = detect::evaluate_map(&detections, &ground_truth, threshold, metric);
        let per_class = report
            .per_class_ap
            .iter()
            .map(|(c, ap)| format!("{c}:{ap:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("{threshold},{:.4},{per_class}", report.mean_ap);
    }
    Ok(())
}
