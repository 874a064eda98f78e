use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cbctseg::fusion::{majority_vote, staple_fuse, FusionConfig, PriorSource};
use cbctseg::grid::{crop, AxisSense, Orientation};
use cbctseg::labels::{LabelTable, RemapDirection, UnknownPolicy};
use cbctseg::metrics::{aggregate, evaluate_case, AggregateOptions, CaseScores};
use cbctseg::nifti::{self, wants_gzip};
use cbctseg::phantom::{generate_phantom, rater_seed, simulate_rater, PhantomSpec, RaterNoise};
use cbctseg::pipeline::{read_reference, run_pipeline, PipelineManifest};
use cbctseg::postprocess::{cleanup, min_voxels_for_volume, AberrancyPolicy, CleanupOrder, Connectivity, PostprocessConfig};
use cbctseg::preprocess::{preprocess_image, PreprocessConfig};
use cbctseg::roi::{compute_phase2_box, merge_phase2, mandible_landmarks, reduction_factor, MergePolicy, RoiExpansion};
use cbctseg::{Error, Result, VoxelBox};

const THREADS_ENV: &str = "CBCTSEG_THREADS";

#[derive(Parser)]
#[command(
    name = "cbctseg",
    version,
    about = "Two-phase CBCT dental segmentation toolkit",
    arg_required_else_help = true,
    after_help = "Set CBCTSEG_THREADS to limit the number of worker threads."
)]
struct Cli {
    /// Print the default pipeline configuration as JSON and exit.
    #[arg(long)]
    dump_defaults: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Clip intensities and resample an image to the target spacing.
    Preprocess(PreprocessArgs),
    /// Convert a label map between challenge and dense ids.
    Remap(RemapArgs),
    /// Fuse K label maps into a consensus.
    Fuse(FuseArgs),
    /// Pharynx relabeling and small-mandible removal.
    Postprocess(PostprocessArgs),
    /// Compute the Phase-2 box from a cleaned label map.
    Roi(RoiArgs),
    /// Merge Phase-2 nerve labels into a Phase-1 map.
    Merge(MergeArgs),
    /// Per-class Dice of predictions against references.
    Evaluate(EvaluateArgs),
    /// Write a synthetic phantom and simulated raters.
    Phantom(PhantomArgs),
    /// Run the whole pipeline from a JSON manifest.
    Run(RunArgs),
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [v] => Ok([*v; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err("expected one value or three comma-separated values".into()),
    }
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let t = parse_triple(s)?;
    if t.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err("dims must be positive integers".into());
    }
    Ok(t.map(|v| v as usize))
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = PreprocessConfig::default().clip_lo, allow_negative_numbers = true)]
    clip_lo: f32,
    #[arg(long, default_value_t = PreprocessConfig::default().clip_hi, allow_negative_numbers = true)]
    clip_hi: f32,
    /// mm, one value or x,y,z
    #[arg(long, value_parser = parse_triple, default_value = "0.6")]
    spacing: [f64; 3],
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    ToDense,
    ToChallenge,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unknown {
    Error,
    Background,
}

#[derive(Args)]
struct TableArgs {
    /// Label table manifest (challenge_id,dense_id,name,ranked); built-in
    /// table when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
}

impl TableArgs {
    fn load(&self) -> Result<LabelTable> {
        match &self.table {
            Some(p) => LabelTable::load(p),
            None => Ok(LabelTable::builtin()),
        }
    }
}

#[derive(Args)]
struct RemapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    #[arg(long, value_enum, default_value = "error")]
    unknown: Unknown,
    #[command(flatten)]
    table: TableArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Staple,
    Vote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prior {
    VoteFrequency,
    Uniform,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, value_enum, default_value = "staple")]
    method: Method,
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write per-label posteriors as a 4D float volume (STAPLE only).
    #[arg(long)]
    posteriors: Option<PathBuf>,
    #[arg(long, default_value_t = FusionConfig::default().max_iterations)]
    max_iters: usize,
    #[arg(long, default_value_t = FusionConfig::default().tolerance)]
    tol: f64,
    /// Label-space size; one past the largest label seen when omitted.
    #[arg(long)]
    num_labels: Option<usize>,
    #[arg(long, value_enum, default_value = "vote-frequency")]
    prior: Prior,
    /// Crop every input to this box (JSON from `roi --box-out`) first.
    #[arg(long)]
    crop_box: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PharynxPolicy {
    NonLargestTouching,
    AnyTouching,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    PharynxFirst,
    MandibleFirst,
}

#[derive(Args)]
struct PostprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 6, 18 or 26
    #[arg(long, default_value_t = 26, value_parser = clap::builder::PossibleValuesParser::new(["6", "18", "26"]).map(|s| s.parse::<u8>().unwrap()))]
    connectivity: u8,
    #[arg(long, conflicts_with = "min_mandible_mm3")]
    min_mandible_voxels: Option<usize>,
    /// Volume threshold, converted to voxels with the input spacing.
    #[arg(long)]
    min_mandible_mm3: Option<f64>,
    #[arg(long, value_enum, default_value = "non-largest-touching")]
    pharynx_policy: PharynxPolicy,
    #[arg(long, value_enum, default_value = "pharynx-first")]
    order: Order,
    #[arg(long, default_value_t = PostprocessConfig::default().pharynx_id)]
    pharynx_id: u16,
    #[arg(long, default_value_t = PostprocessConfig::default().mandible_id)]
    mandible_id: u16,
}

#[derive(Args)]
struct OrientationArgs {
    /// y grows toward anterior instead of posterior.
    #[arg(long)]
    posterior_decreasing: bool,
    /// z grows toward inferior instead of superior.
    #[arg(long)]
    superior_decreasing: bool,
}

impl OrientationArgs {
    fn get(&self) -> Orientation {
        let sense = |flip| if flip { AxisSense::Decreasing } else { AxisSense::Increasing };
        Orientation {
            posterior: sense(self.posterior_decreasing),
            superior: sense(self.superior_decreasing),
        }
    }
}

#[derive(Args)]
struct RoiArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Print the box and landmarks to stdout.
    #[arg(long)]
    print_box: bool,
    /// Write the box as JSON.
    #[arg(long)]
    box_out: Option<PathBuf>,
    #[arg(long, default_value_t = PostprocessConfig::default().mandible_id)]
    mandible_id: u16,
    #[arg(long, default_value_t = RoiExpansion::default().lateral_minus)]
    lateral_minus: usize,
    #[arg(long, default_value_t = RoiExpansion::default().lateral_plus)]
    lateral_plus: usize,
    #[arg(long, default_value_t = RoiExpansion::default().posterior)]
    posterior: usize,
    #[arg(long, default_value_t = RoiExpansion::default().superior)]
    superior: usize,
    #[command(flatten)]
    orientation: OrientationArgs,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    phase1: PathBuf,
    /// Box-sized consensus, or a full-size map that is cropped to the box.
    #[arg(long)]
    phase2: PathBuf,
    /// Box JSON from `roi --box-out`.
    #[arg(long = "box")]
    box_path: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated labels Phase 2 is authoritative for.
    #[arg(long, value_delimiter = ',')]
    nerve_ids: Option<Vec<u16>>,
    /// Keep Phase-1 nerve voxels outside the Phase-2 result.
    #[arg(long)]
    keep_phase1_nerves: bool,
    /// Only write nerves onto background or nerve voxels.
    #[arg(long)]
    no_override: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    ref_dir: PathBuf,
    #[command(flatten)]
    table: TableArgs,
    /// Report path; `.csv` and `.json` are written next to each other.
    #[arg(long)]
    out: PathBuf,
    /// CSV of case_id,fold (1-based); every case is fold 1 when omitted.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Average over all cases, not only those where the class is present.
    #[arg(long)]
    include_absent: bool,
}

#[derive(Args)]
struct PhantomArgs {
    /// one value or x,y,z
    #[arg(long, value_parser = parse_dims, default_value = "80,80,56")]
    dims: [usize; 3],
    /// mm, one value or x,y,z
    #[arg(long, value_parser = parse_triple, default_value = "0.6")]
    spacing: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = PhantomSpec::default().num_teeth)]
    teeth: usize,
    /// Files are written as <prefix>_image.nii.gz, <prefix>_labels.nii.gz,
    /// <prefix>_rater<k>.nii.gz and <prefix>_phantom.json.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long, default_value_t = 5)]
    raters: usize,
    #[arg(long, default_value_t = RaterNoise::default().flip_rate)]
    flip_rate: f64,
    #[arg(long, default_value_t = 0)]
    boundary_steps: usize,
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
}

fn read_box(path: &Path) -> Result<VoxelBox> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bx: VoxelBox = serde_json::from_str(&text)?;
    VoxelBox::new(bx.lo, bx.hi)
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = PreprocessConfig {
        clip_lo: a.clip_lo,
        clip_hi: a.clip_hi,
        target_spacing: a.spacing,
    };
    let img = nifti::read_image(&a.input)?;
    let out = preprocess_image(&img, &cfg)?;
    nifti::write_image(&out, &a.out, wants_gzip(&a.out))
}

fn remap(a: RemapArgs) -> Result<()> {
    let table = a.table.load()?;
    let g = nifti::read_labels(&a.input)?;
    let dir = match a.direction {
        Direction::ToDense => RemapDirection::ToDense,
        Direction::ToChallenge => RemapDirection::ToChallenge,
    };
    let unknown = match a.unknown {
        Unknown::Error => UnknownPolicy::Error,
        Unknown::Background => UnknownPolicy::Background,
    };
    let out = table.apply_remap(&g, dir, unknown)?;
    nifti::write_labels(&out, &a.out, wants_gzip(&a.out))
}

fn fuse(a: FuseArgs) -> Result<()> {
    let bx = a.crop_box.as_deref().map(read_box).transpose()?;
    let raters = a
        .inputs
        .iter()
        .map(|p| {
            let g = nifti::read_labels(p)?;
            match &bx {
                Some(b) => crop(&g, b),
                None => Ok(g),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    match a.method {
        Method::Vote => {
            if a.posteriors.is_some() {
                return Err(Error::InvalidConfig("posteriors need --method staple".into()));
            }
            let out = majority_vote(&raters)?;
            nifti::write_labels(&out, &a.out, wants_gzip(&a.out))
        }
        Method::Staple => {
            let cfg = FusionConfig {
                max_iterations: a.max_iters,
                tolerance: a.tol,
                num_labels: a.num_labels,
                prior: match a.prior {
                    Prior::VoteFrequency => PriorSource::VoteFrequency,
                    Prior::Uniform => PriorSource::Uniform,
                },
                keep_posteriors: a.posteriors.is_some(),
                ..FusionConfig::default()
            };
            let r = staple_fuse(&raters, &cfg)?;
            log::info!(
                "{} iterations over {} patterns, converged={}",
                r.iterations,
                r.num_patterns,
                r.converged
            );
            if !r.converged {
                log::warn!("STAPLE stopped at the iteration cap before converging");
            }
            nifti::write_labels(&r.consensus, &a.out, wants_gzip(&a.out))?;
            if let (Some(path), Some(post)) = (&a.posteriors, &r.posteriors) {
                nifti::write_channels(
                    r.consensus.geometry(),
                    post.num_labels(),
                    |i, c| post.voxel(i)[c] as f32,
                    path,
                    wants_gzip(path),
                )?;
            }
            Ok(())
        }
    }
}

fn postprocess(a: PostprocessArgs) -> Result<()> {
    let g = nifti::read_labels(&a.input)?;
    let min = match (a.min_mandible_voxels, a.min_mandible_mm3) {
        (Some(v), _) => v,
        (None, Some(mm3)) => min_voxels_for_volume(mm3, g.spacing()),
        (None, None) => PostprocessConfig::default().min_mandible_voxels,
    };
    let cfg = PostprocessConfig {
        connectivity: match a.connectivity {
            6 => Connectivity::Six,
            18 => Connectivity::Eighteen,
            _ => Connectivity::TwentySix,
        },
        pharynx_id: a.pharynx_id,
        mandible_id: a.mandible_id,
        min_mandible_voxels: min,
        policy: match a.pharynx_policy {
            PharynxPolicy::NonLargestTouching => AberrancyPolicy::NonLargestTouching,
            PharynxPolicy::AnyTouching => AberrancyPolicy::AnyTouching,
        },
    };
    cfg.validate()?;
    let order = match a.order {
        Order::PharynxFirst => CleanupOrder::PharynxFirst,
        Order::MandibleFirst => CleanupOrder::MandibleFirst,
    };
    let out = cleanup(&g, &cfg, order)?;
    nifti::write_labels(&out, &a.out, wants_gzip(&a.out))
}

fn roi(a: RoiArgs) -> Result<()> {
    let mut g = nifti::read_labels(&a.input)?;
    g.set_orientation(a.orientation.get());
    let exp = RoiExpansion {
        lateral_minus: a.lateral_minus,
        lateral_plus: a.lateral_plus,
        posterior: a.posterior,
        superior: a.superior,
    };
    let bx = compute_phase2_box(&g, a.mandible_id, &exp)?;
    if a.print_box || a.box_out.is_none() {
        let marks = mandible_landmarks(&g, a.mandible_id)?;
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "lo": bx.lo,
                "hi": bx.hi,
                "widths": bx.widths(),
                "anterior": marks.anterior,
                "inferior_z": marks.inferior_z,
                "reduction_factor": reduction_factor(g.dims(), &bx),
            }))?
        );
    }
    if let Some(p) = &a.box_out {
        write_text(p, serde_json::to_string_pretty(&bx)? + "\n")?;
    }
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let p1 = nifti::read_labels(&a.phase1)?;
    let p2 = nifti::read_labels(&a.phase2)?;
    let bx = read_box(&a.box_path)?;
    let p2 = if p2.dims() == p1.dims() && p2.dims() != bx.widths() {
        crop(&p2, &bx)?
    } else {
        p2
    };
    let mut policy = MergePolicy {
        clear_phase1_nerves: !a.keep_phase1_nerves,
        override_all: !a.no_override,
        ..MergePolicy::default()
    };
    if let Some(ids) = a.nerve_ids {
        policy.nerve_ids = ids.into_iter().collect();
    }
    let out = merge_phase2(&p1, &p2, &bx, &policy)?;
    nifti::write_labels(&out, &a.out, wants_gzip(&a.out))
}

/// `case.nii.gz` or `case.nii` → `case`.
fn case_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .map(str::to_string)
}

fn list_volumes(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if let Some(id) = case_id(&p) {
            out.push((id, p));
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let table = a.table.load()?;
    let folds: HashMap<String, usize> = match &a.folds {
        Some(p) => {
            let mut rd = csv::ReaderBuilder::new()
                .has_headers(false)
                .comment(Some(b'#'))
                .from_path(p)?;
            let mut m = HashMap::new();
            for rec in rd.records() {
                let rec = rec?;
                let (Some(id), Some(f)) = (rec.get(0), rec.get(1)) else {
                    return Err(Error::Evaluation(format!("{}: expected case_id,fold rows", p.display())));
                };
                if id.trim() == "case_id" {
                    continue;
                }
                let f: usize = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::Evaluation(format!("bad fold {f:?} for case {id}")))?;
                m.insert(id.trim().to_string(), f);
            }
            m
        }
        None => HashMap::new(),
    };
    let preds = list_volumes(&a.pred_dir)?;
    if preds.is_empty() {
        return Err(Error::Evaluation(format!("no volumes in {}", a.pred_dir.display())));
    }
    let refs: HashMap<String, PathBuf> = list_volumes(&a.ref_dir)?.into_iter().collect();
    let mut cases = Vec::new();
    for (id, p) in preds {
        let r = refs
            .get(&id)
            .ok_or_else(|| Error::Evaluation(format!("no reference for case {id}")))?;
        let reference = read_reference(r, Orientation::default(), &table)?;
        let pred = read_reference(&p, Orientation::default(), &table)?;
        cases.push(CaseScores {
            fold: folds.get(&id).copied().unwrap_or(1),
            scores: evaluate_case(&pred, &reference, &table)?,
            case_id: id,
        });
    }
    let report = aggregate(
        &cases,
        AggregateOptions {
            include_absent: a.include_absent,
        },
    )?;
    let (c, j) = report.write(&a.out)?;
    log::info!("wrote {} and {}", c.display(), j.display());
    Ok(())
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: a.dims,
        spacing: a.spacing,
        seed: a.seed,
        num_teeth: a.teeth,
        ..PhantomSpec::default()
    };
    let p = generate_phantom(&spec)?;
    let prefix = a.out_prefix.to_string_lossy().into_owned();
    if let Some(parent) = a.out_prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    nifti::write_image(&p.image, format!("{prefix}_image.nii.gz"), true)?;
    nifti::write_labels(&p.labels, format!("{prefix}_labels.nii.gz"), true)?;
    let mut raters = Vec::new();
    for k in 0..a.raters {
        let noise = RaterNoise {
            flip_rate: a.flip_rate,
            boundary_steps: a.boundary_steps,
            seed: rater_seed(a.seed, k),
        };
        let r = simulate_rater(&p.labels, &noise)?;
        nifti::write_labels(&r, format!("{prefix}_rater{}.nii.gz", k + 1), true)?;
        raters.push(noise);
    }
    let doc = serde_json::json!({ "phantom": p.description, "raters": raters });
    write_text(
        Path::new(&format!("{prefix}_phantom.json")),
        serde_json::to_string_pretty(&doc)? + "\n",
    )
}

fn run(a: RunArgs) -> Result<bool> {
    let m = PipelineManifest::load(&a.manifest)?;
    let summary = run_pipeline(&m)?;
    if let Some(r) = &summary.report {
        if let Some(mean) = r.overall_mean {
            log::info!("overall mean Dice {mean:.4} over {} cases", r.num_cases);
        }
    }
    Ok(summary.failed() == 0)
}

fn dump_defaults() -> Result<()> {
    let m = PipelineManifest::new(Vec::new(), "out");
    let mut v = serde_json::to_value(&m)?;
    v["phantom"] = serde_json::to_value(PhantomSpec::default())?;
    v["rater_noise"] = serde_json::to_value(RaterNoise::default())?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }

    let result = match cli.command {
        _ if cli.dump_defaults => dump_defaults().map(|_| true),
        None => {
            eprintln!("error: no subcommand given; see --help");
            return ExitCode::from(2);
        }
        Some(Command::Preprocess(a)) => preprocess(a).map(|_| true),
        Some(Command::Remap(a)) => remap(a).map(|_| true),
        Some(Command::Fuse(a)) => fuse(a).map(|_| true),
        Some(Command::Postprocess(a)) => postprocess(a).map(|_| true),
        Some(Command::Roi(a)) => roi(a).map(|_| true),
        Some(Command::Merge(a)) => merge(a).map(|_| true),
        Some(Command::Evaluate(a)) => evaluate(a).map(|_| true),
        Some(Command::Phantom(a)) => phantom(a).map(|_| true),
        Some(Command::Run(a)) => run(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some cases failed; see run_log.json");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
