//! `graspcap` — markerless grasp capture from hand-keypoint tracks.
//!
//! Subcommands cover the individual stages (`object-pose`, `sfm`,
//! `fit-hand`, `adjust`, `refine`, `propagate`), the full pipeline
//! (`run`), synthetic dataset generation (`synth`) and result scoring
//! (`evaluate`). Every command exits 0 only when all executed stages
//! converged.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use graspcap::contact::{
    estimate_adjustment, icp_register, refine_grasp, CapsuleProxy, ContactMap, PointCloud,
    TriMesh,
};
use graspcap::fit::{fit_palm_pose, solve_ik};
use graspcap::geom::{CameraIntrinsics, Real, RigidTransform};
use graspcap::hand::{forward_kinematics, HandParams, HandSkeleton, NUM_ANGLES, NUM_LANDMARKS};
use graspcap::pipeline::{
    docfile, export_hand_obj, load_observations, propagate_poses, run_pipeline, select_steady_frames,
    CaptureResult, Document, PipelineConfig, SteadyMode,
};
use graspcap::sfm::{reconstruct, rescale_to_metric, SfMSolution};
use graspcap::synth::{
    evaluate, generate_scene, load_scene, write_dataset, ObjectKind, SynthConfig,
};

#[derive(Parser)]
#[command(
    name = "graspcap",
    about = "Markerless grasp capture: hand pose, object pose and contact-refined grasps",
    version
)]
struct Cli {
    /// Pipeline config document supplying default paths and knobs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: object pose from a depth cloud and the known mesh.
    ObjectPose(ObjectPoseArgs),
    /// Stage 2: structure from motion over the keypoint frames.
    Sfm(SfmArgs),
    /// Stage 3: palm pose and joint angles from a reconstruction.
    FitHand(FitHandArgs),
    /// Grasp-adjustment estimation from the grasp-phase cloud.
    Adjust(AdjustArgs),
    /// Stage 5: contact-map-driven grasp refinement.
    Refine(RefineArgs),
    /// Per-frame object and palm pose propagation.
    Propagate(PropagateArgs),
    /// All stages end to end.
    Run(RunArgs),
    /// Synthetic ground-truth dataset generation.
    Synth(SynthArgs),
    /// Score a capture result against a synthetic scene.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ObjectPoseArgs {
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Coarse initialization pose document.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "object_pose.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct SfmArgs {
    #[arg(long)]
    keypoints_dir: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// `auto` or `<first> <last>` (1-based inclusive).
    #[arg(long)]
    steady: Option<String>,
    #[arg(long, default_value = "sfm.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct FitHandArgs {
    /// Reconstruction document written by `sfm`.
    #[arg(long)]
    sfm: PathBuf,
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[arg(long, default_value = "hand.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct AdjustArgs {
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    grasp_cloud: Option<PathBuf>,
    /// Turntable pose document from `object-pose`.
    #[arg(long)]
    object_pose: PathBuf,
    #[arg(long, default_value = "adjustment.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    /// Hand document from `fit-hand`.
    #[arg(long)]
    hand: PathBuf,
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    contact_map: Option<PathBuf>,
    #[arg(long)]
    object_pose: PathBuf,
    #[arg(long)]
    adjustment: PathBuf,
    #[arg(long)]
    skeleton: Option<PathBuf>,
    #[arg(long, default_value = "hand_refined.txt")]
    out: PathBuf,
    /// Posed-skeleton OBJ dump for inspection.
    #[arg(long)]
    dump_skeleton: Option<PathBuf>,
}

#[derive(Args)]
struct PropagateArgs {
    /// Reconstruction document (camera poses).
    #[arg(long)]
    sfm: PathBuf,
    #[arg(long)]
    object_pose: PathBuf,
    #[arg(long)]
    adjustment: PathBuf,
    /// Hand document (palm pose).
    #[arg(long)]
    hand: PathBuf,
    #[arg(long, default_value = "propagated.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "result.txt")]
    out: PathBuf,
    /// Skip the contact refinement stage.
    #[arg(long)]
    no_contact: bool,
    /// Skip the joint hand+camera refinement.
    #[arg(long)]
    no_joint_refine: bool,
    #[arg(long)]
    dump_skeleton: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: Real,
    #[arg(long, default_value_t = 0.0)]
    dropout: Real,
    /// Scripted grasp-adjustment frames before the steady segment.
    #[arg(long, default_value_t = 0)]
    transient: usize,
    #[arg(long, default_value = "box")]
    object: String,
    #[arg(long, default_value_t = 30.0)]
    orbit_deg: Real,
    #[arg(long, default_value_t = 1.0)]
    palm_scale: Real,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Capture result document from `run`.
    #[arg(long)]
    result: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    scene_dir: PathBuf,
    /// Also write the metrics as a document.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(converged) => {
            if converged {
                ExitCode::SUCCESS
            } else {
                eprintln!("warning: not all stages converged");
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    let base = match &cli.config {
        Some(path) => {
            let mut cfg = PipelineConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
                cfg.solver.seed = seed;
            }
            Some(cfg)
        }
        None => None,
    };

    match cli.command {
        Command::ObjectPose(args) => object_pose(&base, args),
        Command::Sfm(args) => sfm(&base, args),
        Command::FitHand(args) => fit_hand(&base, args),
        Command::Adjust(args) => adjust(&base, args),
        Command::Refine(args) => refine(&base, args),
        Command::Propagate(args) => propagate(args),
        Command::Run(args) => run(base, cli.seed, args),
        Command::Synth(args) => synth(cli.seed, args),
        Command::Evaluate(args) => evaluate_cmd(args),
    }
}

fn base_or_default(base: &Option<PipelineConfig>) -> PipelineConfig {
    base.clone().unwrap_or_else(|| PipelineConfig::with_root(Path::new(".")))
}

fn required_path(flag: Option<PathBuf>, fallback: &Path, what: &str) -> Result<PathBuf> {
    let path = flag.unwrap_or_else(|| fallback.to_path_buf());
    if !path.exists() {
        bail!("{what} not found at {}", path.display());
    }
    Ok(path)
}

fn load_skeleton(path: &Option<PathBuf>) -> Result<HandSkeleton> {
    Ok(match path {
        Some(p) => HandSkeleton::from_file(p)
            .with_context(|| format!("loading skeleton {}", p.display()))?,
        None => HandSkeleton::default_template(),
    })
}

fn read_pose(path: &Path) -> Result<RigidTransform> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading pose {}", path.display()))?;
    Ok(docfile::read_pose_document(&text)?)
}

fn object_pose(base: &Option<PipelineConfig>, args: ObjectPoseArgs) -> Result<bool> {
    let cfg = base_or_default(base);
    let mesh_path = required_path(args.mesh, &cfg.mesh, "mesh")?;
    let cloud_path = required_path(args.cloud, &cfg.turntable_cloud, "point cloud")?;
    let mesh = TriMesh::from_file(&mesh_path)?;
    let cloud = PointCloud::from_file(&cloud_path)?;
    let init = match args.init.or(cfg.object_init.filter(|p| p.exists())) {
        Some(p) => read_pose(&p)?,
        None => RigidTransform::identity(),
    };
    let result = icp_register(&cloud, &mesh, &init, &cfg.icp)?;
    std::fs::write(
        &args.out,
        docfile::pose_document(&result.pose, Some(result.rms), Some(result.converged)),
    )?;
    println!(
        "object pose: rms {:.3e} m after {} iterations ({}) -> {}",
        result.rms,
        result.iterations,
        if result.converged { "converged" } else { "not converged" },
        args.out.display()
    );
    Ok(result.converged)
}

fn sfm_document(solution: &SfMSolution) -> String {
    let mut doc = Document::new();
    doc.section("sfm")
        .entry_usize("frames", solution.num_frames())
        .entry_real("cost", solution.final_cost)
        .entry_real("rms", solution.rms)
        .entry_usize("iterations", solution.iterations)
        .entry_bool("converged", solution.converged);
    doc.section("joints");
    let flat: Vec<Real> =
        solution.joints.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    doc.entry_reals("positions", &flat);
    let observed: Vec<Real> =
        solution.landmark_observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    doc.entry_reals("observed", &observed);
    doc.section("cameras");
    for pose in &solution.camera_poses {
        doc.entry_pose("pose", pose);
    }
    let registered: Vec<Real> =
        solution.registered.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    doc.entry_reals("registered", &registered);
    doc.to_text()
}

struct SfmDocument {
    joints: graspcap::hand::JointSet3D,
    observed: [bool; NUM_LANDMARKS],
    cameras: Vec<RigidTransform>,
    registered: Vec<bool>,
}

fn parse_sfm_document(text: &str) -> Result<SfmDocument> {
    let doc = Document::parse(text)?;
    let flat = doc.require_reals("joints", "positions")?;
    if flat.len() != 3 * NUM_LANDMARKS {
        bail!("joints section must hold {} coordinates", 3 * NUM_LANDMARKS);
    }
    let mut joints = graspcap::hand::JointSet3D::zeros();
    for k in 0..NUM_LANDMARKS {
        joints.points[k] =
            graspcap::geom::Vec3::new(flat[3 * k], flat[3 * k + 1], flat[3 * k + 2]);
    }
    let mut observed = [false; NUM_LANDMARKS];
    for (o, v) in observed.iter_mut().zip(doc.require_reals("joints", "observed")?) {
        *o = v != 0.0;
    }
    let cameras: Vec<RigidTransform> = doc
        .get_all("cameras", "pose")
        .into_iter()
        .map(docfile::parse_pose)
        .collect::<std::result::Result<_, _>>()?;
    let registered: Vec<bool> = doc
        .require_reals("cameras", "registered")?
        .into_iter()
        .map(|v| v != 0.0)
        .collect();
    Ok(SfmDocument { joints, observed, cameras, registered })
}

fn sfm(base: &Option<PipelineConfig>, args: SfmArgs) -> Result<bool> {
    let cfg = base_or_default(base);
    let keypoints_dir = required_path(args.keypoints_dir, &cfg.keypoints_dir, "keypoints dir")?;
    let intrinsics_path = required_path(args.intrinsics, &cfg.intrinsics, "intrinsics")?;
    let intrinsics_text = std::fs::read_to_string(&intrinsics_path)?;
    let intrinsics = CameraIntrinsics::from_text(&intrinsics_text)?;
    let (observations, _) = load_observations(&keypoints_dir, intrinsics)?;

    let steady = match args.steady.as_deref() {
        None => cfg.steady,
        Some("auto") => SteadyMode::Auto,
        Some(range) => {
            let parts: Vec<usize> = range
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .context("steady range must be `<first> <last>`")?;
            if parts.len() != 2 {
                bail!("steady range must be `<first> <last>`");
            }
            SteadyMode::Range(parts[0], parts[1])
        }
    };
    let range = match steady {
        SteadyMode::Auto => select_steady_frames(
            &observations,
            cfg.motion_threshold,
            cfg.solver.confidence_threshold,
        )?,
        SteadyMode::Range(a, b) => (a - 1)..b,
    };
    let steady_obs = observations.slice(range.start, range.end)?;

    let solution = reconstruct(&steady_obs, &cfg.solver)?;
    let skeleton = load_skeleton(&cfg.skeleton)?;
    let (_, raw_scale) = fit_palm_pose(&solution.joints, &skeleton)?;
    let solution = rescale_to_metric(&solution, cfg.hand_scale / raw_scale);

    std::fs::write(&args.out, sfm_document(&solution))?;
    println!(
        "sfm: frames [{}, {}), cost {:.3e} px^2, rms {:.3} px, {} -> {}",
        range.start,
        range.end,
        solution.final_cost,
        solution.rms,
        if solution.converged { "converged" } else { "not converged" },
        args.out.display()
    );
    Ok(solution.converged)
}

fn hand_document(params: &HandParams, converged: bool) -> String {
    let mut doc = Document::new();
    doc.section("hand")
        .entry_pose("palm_pose", &params.palm_pose)
        .entry_real("palm_scale", params.palm_scale)
        .entry_reals("angles", &params.angles)
        .entry_bool("converged", converged);
    doc.to_text()
}

fn parse_hand_document(text: &str) -> Result<HandParams> {
    let doc = Document::parse(text)?;
    let angles_vec = doc.require_reals("hand", "angles")?;
    let angles: [Real; NUM_ANGLES] = angles_vec
        .try_into()
        .map_err(|v: Vec<Real>| anyhow::anyhow!("expected 20 angles, got {}", v.len()))?;
    Ok(HandParams {
        palm_pose: doc.require_pose("hand", "palm_pose")?,
        palm_scale: doc.require_real("hand", "palm_scale")?,
        angles,
    })
}

fn fit_hand(base: &Option<PipelineConfig>, args: FitHandArgs) -> Result<bool> {
    let cfg = base_or_default(base);
    let text = std::fs::read_to_string(&args.sfm)
        .with_context(|| format!("reading {}", args.sfm.display()))?;
    let sfm = parse_sfm_document(&text)?;
    for k in graspcap::hand::RIGID_LANDMARKS {
        if !sfm.observed[k] {
            bail!("rigid landmark {k} was not reconstructed; cannot fit the palm");
        }
    }
    let skeleton = load_skeleton(&args.skeleton.clone().or(cfg.skeleton.clone()))?;
    let (palm_pose, palm_scale) = fit_palm_pose(&sfm.joints, &skeleton)?;
    let ik = solve_ik(&skeleton, &palm_pose, palm_scale, &sfm.joints, &cfg.ik);
    let params = HandParams { palm_pose, palm_scale, angles: ik.angles };
    std::fs::write(&args.out, hand_document(&params, ik.converged))?;
    println!(
        "fit-hand: palm scale {:.4}, ik rms {:.3e} m in {} iterations ({}) -> {}",
        palm_scale,
        ik.rms,
        ik.iterations,
        if ik.converged { "converged" } else { "not converged" },
        args.out.display()
    );
    Ok(ik.converged)
}

fn adjust(base: &Option<PipelineConfig>, args: AdjustArgs) -> Result<bool> {
    let cfg = base_or_default(base);
    let mesh_path = required_path(args.mesh, &cfg.mesh, "mesh")?;
    let cloud_path = required_path(args.grasp_cloud, &cfg.grasp_cloud, "grasp cloud")?;
    let mesh = TriMesh::from_file(&mesh_path)?;
    let cloud = PointCloud::from_file(&cloud_path)?;
    let w_t_o = read_pose(&args.object_pose)?;
    let (adjustment, icp) = estimate_adjustment(&cloud, &mesh, &w_t_o, &cfg.icp)?;
    std::fs::write(
        &args.out,
        docfile::pose_document(&adjustment, Some(icp.rms), Some(icp.converged)),
    )?;
    println!(
        "adjust: rms {:.3e} m ({}) -> {}",
        icp.rms,
        if icp.converged { "converged" } else { "not converged" },
        args.out.display()
    );
    Ok(icp.converged)
}

fn refine(base: &Option<PipelineConfig>, args: RefineArgs) -> Result<bool> {
    let cfg = base_or_default(base);
    let mesh_path = required_path(args.mesh, &cfg.mesh, "mesh")?;
    let cmap_path = required_path(
        args.contact_map,
        cfg.contact_map.as_deref().unwrap_or(Path::new("contact_map.txt")),
        "contact map",
    )?;
    let mesh = TriMesh::from_file(&mesh_path)?;
    let cmap = ContactMap::from_file(&cmap_path, &mesh)?;
    let hand_text = std::fs::read_to_string(&args.hand)?;
    let init = parse_hand_document(&hand_text)?;
    let w_t_o = read_pose(&args.object_pose)?;
    let adjustment = read_pose(&args.adjustment)?;

    let skeleton = load_skeleton(&args.skeleton.clone().or(cfg.skeleton.clone()))?;
    let proxy = CapsuleProxy::from_skeleton(&skeleton);
    let grasped_mesh = mesh.transformed(&adjustment.compose(&w_t_o));
    let result =
        refine_grasp(&skeleton, &init, &proxy, &grasped_mesh, &cmap, &cfg.weights, &cfg.refine);
    std::fs::write(&args.out, hand_document(&result.params, result.converged))?;
    if let Some(dump) = &args.dump_skeleton {
        let joints = forward_kinematics(&skeleton, &result.params);
        export_hand_obj(&skeleton, &joints, &proxy, result.params.palm_scale, dump)?;
    }
    println!(
        "refine: energy {:.3e} -> {:.3e} in {} iterations ({}) -> {}",
        result.initial.total,
        result.final_energy.total,
        result.iterations,
        if result.converged { "converged" } else { "not converged" },
        args.out.display()
    );
    Ok(result.converged)
}

fn propagate(args: PropagateArgs) -> Result<bool> {
    let sfm = parse_sfm_document(&std::fs::read_to_string(&args.sfm)?)?;
    let w_t_o = read_pose(&args.object_pose)?;
    let adjustment = read_pose(&args.adjustment)?;
    let hand = parse_hand_document(&std::fs::read_to_string(&args.hand)?)?;

    let propagated = propagate_poses(&sfm.cameras, &adjustment, &w_t_o, &hand.palm_pose);
    let mut doc = Document::new();
    doc.section("propagated_object");
    for (c_t_o, _) in &propagated {
        doc.entry_pose("pose", c_t_o);
    }
    doc.section("propagated_palm");
    for (_, c_t_p) in &propagated {
        doc.entry_pose("pose", c_t_p);
    }
    let registered: Vec<Real> =
        sfm.registered.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    doc.section("frames").entry_reals("registered", &registered);
    std::fs::write(&args.out, doc.to_text())?;
    println!("propagate: {} frames -> {}", propagated.len(), args.out.display());
    Ok(true)
}

fn run(base: Option<PipelineConfig>, seed: Option<u64>, args: RunArgs) -> Result<bool> {
    let mut cfg = base.context("`run` needs --config pointing at a pipeline document")?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.solver.seed = seed;
    }
    if args.no_contact {
        cfg.enable_contact_refine = false;
    }
    if args.no_joint_refine {
        cfg.enable_joint_refine = false;
    }
    if let Some(dump) = args.dump_skeleton {
        cfg.dump_skeleton = Some(dump);
    }

    let result = run_pipeline(&cfg)?;
    std::fs::write(&args.out, result.to_text())?;

    let d = &result.diagnostics;
    println!("steady range: [{}, {}) of {} frames", d.steady_start, d.steady_end, result.frames.len());
    println!(
        "object pose: icp rms {:.3e} m ({})",
        d.icp_rms,
        converged_str(d.icp_converged)
    );
    println!(
        "sfm: cost {:.3e} px^2, rms {:.3} px, {} iterations ({})",
        d.sfm_cost,
        d.sfm_rms,
        d.sfm_iterations,
        converged_str(d.sfm_converged)
    );
    println!(
        "hand fit: palm scale {:.4}, ik rms {:.3e} m ({})",
        result.hand_pre_contact.palm_scale,
        d.ik_rms,
        converged_str(d.ik_converged)
    );
    println!(
        "adjustment: rms {:.3e} m ({})",
        d.adjust_rms,
        converged_str(d.adjust_converged)
    );
    if let Some(j) = d.joint_refine {
        println!(
            "joint refine: cost {:.3e} -> {:.3e} ({})",
            j.initial_cost,
            j.final_cost,
            converged_str(j.converged)
        );
    }
    if let Some(c) = d.contact_refine {
        println!(
            "contact refine: energy {:.3e} -> {:.3e} ({})",
            c.initial_energy,
            c.final_energy,
            converged_str(c.converged)
        );
    }
    println!("result -> {}", args.out.display());
    Ok(result.all_converged())
}

fn converged_str(converged: bool) -> &'static str {
    if converged {
        "converged"
    } else {
        "not converged"
    }
}

fn synth(seed: Option<u64>, args: SynthArgs) -> Result<bool> {
    let object = ObjectKind::parse(&args.object)
        .with_context(|| format!("unknown object kind `{}` (box|sphere)", args.object))?;
    let config = SynthConfig {
        frames: args.frames,
        noise_sigma: args.noise,
        dropout: args.dropout,
        transient_frames: args.transient,
        orbit_degrees: args.orbit_deg,
        object,
        palm_scale: args.palm_scale,
        ..Default::default()
    };
    let scene = generate_scene(seed.unwrap_or(0), &config);
    write_dataset(&scene, &args.out_dir)?;
    println!(
        "synth: wrote {} frames ({} transient) to {}",
        scene.observations.len(),
        scene.transient_frames,
        args.out_dir.display()
    );
    Ok(true)
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&args.result)
        .with_context(|| format!("reading {}", args.result.display()))?;
    let result = CaptureResult::from_text(&text)?;
    let scene = load_scene(&args.scene_dir)?;
    let metrics = evaluate(&result, &scene);
    println!("{}", metrics.summary());
    if let Some(out) = args.out {
        let mut doc = Document::new();
        doc.section("metrics")
            .entry_real("joint_rmse", metrics.joint_rmse)
            .entry_real("sfm_joint_rmse", metrics.sfm_joint_rmse)
            .entry_real("palm_rotation_error", metrics.palm_rotation_error)
            .entry_real("palm_translation_error", metrics.palm_translation_error)
            .entry_real("mean_angle_error", metrics.mean_angle_error)
            .entry_real("max_angle_error", metrics.max_angle_error)
            .entry_real("object_rotation_error", metrics.object_rotation_error)
            .entry_real("object_translation_error", metrics.object_translation_error)
            .entry_real("grasp_rotation_error", metrics.grasp_rotation_error)
            .entry_real("grasp_translation_error", metrics.grasp_translation_error)
            .entry_real("max_camera_rotation_error", metrics.max_camera_rotation_error())
            .entry_real(
                "max_camera_translation_error",
                metrics.max_camera_translation_error(),
            )
            .entry_real("contact_mean_distance", metrics.contact_mean_distance);
        std::fs::write(&out, doc.to_text())?;
        println!("metrics -> {}", out.display());
    }
    Ok(true)
}
