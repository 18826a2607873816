use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use i2preg::attention::{finite_difference_gradient, random_features};
use i2preg::cloud::hierarchical_decompose;
use i2preg::finematch::CorrespondenceSet;
use i2preg::geom::RigidTransform;
use i2preg::io;
use i2preg::linalg::Matrix;
use i2preg::metrics::{rre, rte, sweep_grid, MetricsReport, PairRecord};
use i2preg::pipeline::{
    coarse_ground_truth, generate_scene, run_pipeline, run_with, seeded_inputs, PipelineConfig, PipelineOutput,
    SyntheticScene,
};
use i2preg::pose::{consensus, ransac_pnp, PoseEstimate};
use i2preg::supervision::{
    coarse_loss, coarse_loss_and_gradient, coarse_weight_matrix, fine_loss_terms, fine_weight_matrix,
    CoarseWeightMatrix,
};
use i2preg::transport::{add_slack, sinkhorn, ScoreMatrix};

/// A check that ran but failed; exits with status 2.
#[derive(Debug)]
struct Violation(String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant violated: {}", self.0)
    }
}

impl std::error::Error for Violation {}

#[derive(Parser)]
#[command(name = "i2preg", version, about = "Image-to-point-cloud correspondence and registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: cloud, scene description and ground-truth pose.
    Synth(SynthArgs),
    /// Run matching on a scene and write the correspondence CSV.
    Match(MatchArgs),
    /// Estimate a pose from a correspondence CSV.
    Register(RegisterArgs),
    /// Score correspondences and poses against ground truth.
    Eval(EvalArgs),
    /// Recompute the coarse and fine losses with plain loops and compare.
    Losscheck(LosscheckArgs),
    /// Compare the analytic coarse-loss gradient with central differences.
    Gradcheck(GradcheckArgs),
    /// Every stage on one or more generated scenes, as one JSON report.
    E2e(E2eArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Pipeline configuration JSON; missing fields keep the preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size preset instead of the desk preset.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// `oracle` or `random`.
    #[arg(long, value_parser = parse_enum::<i2preg::pipeline::FeatureMode>)]
    features: Option<i2preg::pipeline::FeatureMode>,
    /// `predicted` or `ground_truth`.
    #[arg(long, value_parser = parse_enum::<i2preg::sampling::SampleFrom>)]
    sample_from: Option<i2preg::sampling::SampleFrom>,
    /// `argmax` or `expectation`.
    #[arg(long, value_parser = parse_enum::<i2preg::finematch::ExtractionMode>)]
    extraction: Option<i2preg::finematch::ExtractionMode>,
    #[arg(long)]
    num_points: Option<usize>,
    #[arg(long)]
    ransac_iters: Option<usize>,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let preset = if self.full { PipelineConfig::full() } else { PipelineConfig::desk() };
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let mut base = serde_json::to_value(&preset)?;
                let (Value::Object(b), Value::Object(o)) = (&mut base, overlay) else {
                    bail!("{} must hold a JSON object", path.display());
                };
                b.extend(o);
                serde_json::from_value(base).with_context(|| format!("parsing {}", path.display()))?
            }
            None => preset,
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.features {
            config.features = v;
        }
        if let Some(v) = self.sample_from {
            config.sample_from = v;
        }
        if let Some(v) = self.extraction {
            config.extraction = v;
        }
        if let Some(v) = self.num_points {
            config.num_points = v;
        }
        if let Some(v) = self.ransac_iters {
            config.ransac_iters = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Cloud file format: `ply` or `csv`.
    #[arg(long, default_value = "ply")]
    cloud_format: String,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scene description written by `synth`.
    #[arg(long)]
    scene: PathBuf,
    /// Correspondence CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the coarse transport plan, slack included.
    #[arg(long)]
    dump_scores: Option<PathBuf>,
    /// Also write every sample batch as JSON lines.
    #[arg(long)]
    dump_batches: Option<PathBuf>,
    /// Load attention weights from a flat parameter file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Write the weights used to a flat parameter file.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    correspondences: PathBuf,
    /// Scene description supplying the intrinsics.
    #[arg(long)]
    scene: PathBuf,
    /// Ground-truth pose file; adds RRE and RTE to the summary.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Pose file to write; holds `none` when registration fails.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    gate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Thresholds are read from this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One per pair; the ground truth is the scene's pose.
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    #[arg(long, required = true)]
    correspondences: Vec<PathBuf>,
    #[arg(long, required = true)]
    pose: Vec<PathBuf>,
    /// Inlier gate used to recover each pose's consensus set.
    #[arg(long, default_value_t = 1.0)]
    gate: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threshold-sweep curves.
    #[arg(long)]
    sweep: Option<PathBuf>,
}

#[derive(Args)]
struct LosscheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    scene: PathBuf,
    /// Augmented coarse plan CSV; defaults to the plan the pipeline produces.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Rows and columns of each score matrix, before slack.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct E2eArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run on this scene instead of generating one.
    #[arg(long, conflicts_with = "scenes")]
    scene: Option<PathBuf>,
    /// Number of generated scenes, seeded consecutively from the seed.
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(report: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => write(p, &text),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        },
    }
}

fn scene_for(config: &PipelineConfig) -> Result<SyntheticScene<f64>> {
    Ok(generate_scene(config, &mut ChaCha8Rng::seed_from_u64(config.seed))?)
}

fn read_correspondences(path: &Path) -> Result<CorrespondenceSet<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(CorrespondenceSet::from_csv(&text)?)
}

/// `None` for a pose file that records a failed registration.
fn read_optional_pose(path: &Path) -> Result<Option<RigidTransform<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim().is_empty() || text.trim() == "none" {
        return Ok(None);
    }
    Ok(Some(io::read_pose(path)?))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let config = args.config.load()?;
    let scene = scene_for(&config)?;
    let cloud_name = match args.cloud_format.as_str() {
        "ply" => "cloud.ply",
        "csv" => "cloud.csv",
        other => bail!("unknown cloud format {other:?}"),
    };
    let path = io::write_scene(&args.out, &scene, cloud_name)?;
    write(&args.out.join("config.json"), &serde_json::to_string_pretty(&config)?)?;
    emit(
        &json!({
            "seed": config.seed,
            "scene": path,
            "points": scene.cloud.len(),
            "frustum_fraction": scene.frustum_fraction(),
        }),
        None,
    )
}

fn match_scene(args: &MatchArgs) -> Result<()> {
    let scene: SyntheticScene<f64> = io::read_scene(&args.scene)?;
    let mut config = args.config.load()?;
    if args.config.seed.is_none() {
        config.seed = scene.seed;
    }
    let (features, mut params) = seeded_inputs(&scene, &config)?;
    if let Some(p) = &args.params {
        let (loaded, _) = io::read_params::<f64>(p)?;
        params = loaded;
    }
    if let Some(p) = &args.save_params {
        io::write_params(p, &params, config.seed)?;
    }
    let out = run_with(&scene, &config, &features, &params)?;
    write(&args.out, &out.correspondences.to_csv())?;
    if let Some(p) = &args.dump_scores {
        write(p, &out.coarse_plan.to_csv())?;
    }
    if let Some(p) = &args.dump_batches {
        write(p, &io::batches_to_json_lines(&out.batches)?)?;
    }
    emit(
        &json!({
            "seed": config.seed,
            "correspondences": out.correspondences.len(),
            "matched_proxies": out.matched_proxies,
            "marginal_residual": out.marginal_residual,
        }),
        None,
    )
}

fn register(args: &RegisterArgs) -> Result<()> {
    let scene: SyntheticScene<f64> = io::read_scene(&args.scene)?;
    let k = scene.grid_intrinsics();
    let c = read_correspondences(&args.correspondences)?;
    let gt = args.gt.as_deref().map(io::read_pose::<f64>).transpose()?;
    let summary = match ransac_pnp(&c, &k, args.iters, args.gate, args.seed) {
        Ok(est) => {
            write(&args.out, &format!("{}\n", est.transform.to_pose_line()))?;
            let mut s = json!({
                "seed": args.seed,
                "registered": true,
                "inliers": est.inlier_indices.len(),
                "mean_reproj": est.mean_reprojection_error,
            });
            if let Some(gt) = gt {
                s["rre_vs_gt"] = json!(rre(est.transform.rotation(), gt.rotation()));
                s["rte_vs_gt"] = json!(rte(est.transform.translation(), gt.translation()));
            }
            s
        }
        Err(e @ (i2preg::Error::NoConsensus(_) | i2preg::Error::TooFewPoints { .. })) => {
            write(&args.out, "none\n")?;
            json!({ "seed": args.seed, "registered": false, "error": e.to_string() })
        }
        Err(e) => return Err(e.into()),
    };
    emit(&summary, None)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let n = args.scene.len();
    if args.correspondences.len() != n || args.pose.len() != n {
        bail!("--scene, --correspondences and --pose must be given the same number of times");
    }
    let thresholds = ConfigArgs {
        config: args.config.clone(),
        ..ConfigArgs::default()
    }
    .load()?
    .thresholds;
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let scene: SyntheticScene<f64> = io::read_scene(&args.scene[i])?;
        let k = scene.grid_intrinsics();
        let c = read_correspondences(&args.correspondences[i])?;
        let estimate = read_optional_pose(&args.pose[i])?.map(|t| {
            let (pts, px): (Vec<_>, Vec<_>) = c.entries.iter().map(|e| (e.point, e.pixel)).unzip();
            let (inlier_indices, mean_reprojection_error) = consensus(&k, &t, &pts, &px, args.gate);
            PoseEstimate {
                transform: t,
                inlier_indices,
                mean_reprojection_error,
            }
        });
        pairs.push(PairRecord::evaluate(&c, &k, &scene.gt_pose, estimate.as_ref(), &thresholds));
    }
    let report = MetricsReport::from_pairs(pairs, thresholds)?;
    if let Some(p) = &args.sweep {
        let csv = report.sweep_csv(
            &sweep_grid(2.0 * thresholds.tau_r, 20),
            &sweep_grid(2.0 * thresholds.tau_t, 20),
            &sweep_grid(1.0, 20),
        );
        write(p, &csv)?;
    }
    emit(&serde_json::to_value(&report)?, args.out.as_deref())
}

/// `−Σ W log P / Σ W` over positive weights, written out as loops.
fn nll_loop(plan: &Matrix<f64>, w: &Matrix<f64>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let (wij, pij) = (w[(i, j)], plan[(i, j)]);
            if wij > 0.0 {
                if pij <= 0.0 {
                    return None;
                }
                num -= wij * pij.max(1e-30).ln();
                den += wij;
            }
        }
    }
    Some(if den > 0.0 { num / den } else { 0.0 })
}

fn losscheck(args: &LosscheckArgs) -> Result<()> {
    let scene: SyntheticScene<f64> = io::read_scene(&args.scene)?;
    let mut config = args.config.load()?;
    if args.config.seed.is_none() {
        config.seed = scene.seed;
    }
    let out: PipelineOutput<f64> = run_pipeline(&scene, &config)?;
    let plan = match &args.plan {
        Some(p) => ScoreMatrix::from_csv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => out.coarse_plan.clone(),
    };
    let hier = hierarchical_decompose(scene.cloud.points(), config.level_counts, 0)?;
    let w: CoarseWeightMatrix<f64> = coarse_ground_truth(&scene, &hier.composed())?;
    let k = scene.grid_intrinsics();
    let fine_w = out
        .batches
        .iter()
        .map(|b| fine_weight_matrix(b, &k, &scene.gt_pose, scene.cloud.points(), config.tau))
        .collect::<i2preg::Result<Vec<_>>>()?;

    let coarse = coarse_loss(&plan, &w).ok();
    let coarse_oracle = nll_loop(&plan.values, &w.values);
    let terms = fine_loss_terms(&out.fine_plans, &fine_w).ok();
    let mut worst: f64 = 0.0;
    let mut consistent = coarse.is_some() == coarse_oracle.is_some();
    if let (Some(a), Some(b)) = (coarse, coarse_oracle) {
        worst = worst.max((a - b).abs());
    }
    let mut per_proxy = Vec::with_capacity(out.batches.len());
    let mut fine_total = Some(0.0);
    let mut fine_oracle_total = Some(0.0);
    for (idx, (plan, fw)) in out.fine_plans.iter().zip(&fine_w).enumerate() {
        let value = terms.as_ref().and_then(|t| t[idx]);
        let empty = fw.values.as_slice().iter().all(|&x| x == 0.0);
        let oracle = if empty { None } else { nll_loop(&plan.values, &fw.values) };
        consistent &= terms.is_none() || value.is_some() == oracle.is_some();
        if let (Some(a), Some(b)) = (value, oracle) {
            worst = worst.max((a - b).abs());
        }
        if !empty {
            fine_total = fine_total.zip(value).map(|(s, v)| s + v);
            fine_oracle_total = fine_oracle_total.zip(oracle).map(|(s, v)| s + v);
        }
        per_proxy.push(json!({
            "proxy": out.batches[idx].proxy_index,
            "loss": value,
            "oracle": oracle,
        }));
    }
    if terms.is_none() {
        fine_total = None;
    }
    let report = json!({
        "seed": config.seed,
        "coarse_loss": coarse,
        "fine_loss": fine_total,
        "oracle": { "coarse_loss": coarse_oracle, "fine_loss": fine_oracle_total },
        "per_proxy": per_proxy,
        "max_abs_diff": worst,
    });
    emit(&report, None)?;
    if !consistent || worst > args.tol {
        return Err(Violation(format!("loss differs from the loop oracle by {worst:e}")).into());
    }
    Ok(())
}

/// Column and row ratios of a random assignment of points to patches.
fn random_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<CoarseWeightMatrix<f64>> {
    let raw = random_features::<f64, _>(rows, cols, rng).map(|x| if x > 0.3 { x } else { 0.0 });
    let col_sum: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| raw[(i, j)]).sum::<f64>() * 1.5).collect();
    let row_sum: Vec<f64> = (0..rows).map(|i| raw.row(i).iter().sum::<f64>() * 1.5).collect();
    let r_left = Matrix::from_fn(rows, cols, |i, j| if col_sum[j] > 0.0 { raw[(i, j)] / col_sum[j] } else { 0.0 });
    let r_right = Matrix::from_fn(rows, cols, |i, j| if row_sum[i] > 0.0 { raw[(i, j)] / row_sum[i] } else { 0.0 });
    Ok(coarse_weight_matrix(&r_left, &r_right)?)
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let n = args.size;
    let mut instances = Vec::with_capacity(args.instances);
    let mut worst: f64 = 0.0;
    for t in 0..args.instances {
        let scores = ScoreMatrix::new(random_features::<f64, _>(n, n, &mut rng));
        let z = add_slack(&scores, 0.5)?;
        let w = random_weights(&mut rng, n, n)?;
        let (loss, grad) = coarse_loss_and_gradient(&z, &w, args.iters)?;
        let (rows, cols) = (z.values.rows(), z.values.cols());
        let f = |x: &[f64]| {
            let m = Matrix::new(rows, cols, x.to_vec()).expect("shape");
            let plan = sinkhorn(&ScoreMatrix { values: m, has_slack: true }, args.iters).expect("finite scores");
            coarse_loss(&plan, &w).unwrap_or(f64::NAN)
        };
        let fd = finite_difference_gradient(f, z.values.as_slice(), args.eps)?;
        let diff: f64 = fd.iter().zip(grad.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(grad.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-300);
        let rel = diff / norm;
        worst = worst.max(rel);
        instances.push(json!({ "instance": t, "loss": loss, "relative_error": rel }));
    }
    let pass = worst < args.tol;
    emit(
        &json!({
            "seed": args.seed,
            "size": n,
            "iterations": args.iters,
            "eps": args.eps,
            "instances": instances,
            "max_relative_error": worst,
            "pass": pass,
        }),
        None,
    )?;
    if !pass {
        return Err(Violation(format!("gradient relative error {worst:e} exceeds {:e}", args.tol)).into());
    }
    Ok(())
}

fn pair_report(config: &PipelineConfig, out: &PipelineOutput<f64>, seconds: f64) -> Value {
    json!({
        "seed": config.seed,
        "shapes": out.shapes,
        "matched_proxies": out.matched_proxies.len(),
        "correspondences": out.correspondences.len(),
        "record": out.record,
        "registration_error": out.registration_error,
        "estimate": out.estimate.as_ref().map(|e| e.transform.to_pose_line()),
        "losses": out.losses,
        "marginal_residual": out.marginal_residual,
        "seconds": seconds,
    })
}

fn e2e(args: &E2eArgs) -> Result<()> {
    let base = args.config.load()?;
    let mut runs = Vec::new();
    let mut records = Vec::new();
    let start = Instant::now();
    let scenes: Vec<(PipelineConfig, SyntheticScene<f64>)> = match &args.scene {
        Some(p) => {
            let scene: SyntheticScene<f64> = io::read_scene(p)?;
            let mut c = base.clone();
            if args.config.seed.is_none() {
                c.seed = scene.seed;
            }
            vec![(c, scene)]
        }
        None => (0..args.scenes.max(1))
            .map(|i| {
                let mut c = base.clone();
                c.seed = base.seed + i as u64;
                scene_for(&c).map(|s| (c, s))
            })
            .collect::<Result<_>>()?,
    };
    for (config, scene) in &scenes {
        let t = Instant::now();
        let out = run_pipeline(scene, config)?;
        runs.push(pair_report(config, &out, t.elapsed().as_secs_f64()));
        records.push(out.record);
    }
    let metrics = MetricsReport::from_pairs(records, base.thresholds)?;
    let report = json!({
        "seed": base.seed,
        "config": base,
        "metrics": metrics,
        "runs": runs,
        "seconds": start.elapsed().as_secs_f64(),
    });
    emit(&report, args.out.as_deref())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Violation>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<i2preg::Error>() {
            return match e {
                i2preg::Error::Io(_) | i2preg::Error::Parse(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Match(a) => match_scene(a),
        Command::Register(a) => register(a),
        Command::Eval(a) => eval(a),
        Command::Losscheck(a) => losscheck(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::E2e(a) => e2e(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
