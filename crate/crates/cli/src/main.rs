use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use monodtr::config::RunConfig;
use monodtr::depthbin::DepthTargetMap;
use monodtr::dtr::{bench_attention, write_bench_csv, AttentionKind};
use monodtr::eval::{evaluate, Frame, Metric};
use monodtr::gradsuite::{run_suite, SuiteOptions};
use monodtr::kittiio::{alpha_from_ry, normalize_angle, parse_calib, parse_labels, preprocess, KittiLabel};
use monodtr::model::ModelError;
use monodtr::synthetic::generate_scenes;
use monodtr::tensor::{read_tensor, read_tensor_file, TENSOR_MAGIC};
use monodtr::train::{evaluate_scenes, train, write_loss_csv};

/// Reference timings of the two kernels at full feature-map resolution on
/// a GPU, reported alongside the benchmark for context only.
const PAPER_MS: [(&str, f64); 2] = [("vanilla", 136.0), ("linear", 37.0)];

/// Alpha and ry may disagree by this much before inspect flags the row.
const ALPHA_SLACK: f64 = 0.05;

#[derive(Parser)]
#[command(name = "monodtr", version, about = "Depth-aware transformer for monocular 3D detection at toy scale")]
struct Cli {
    /// key=value config file; unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every op and block.
    Gradcheck {
        /// Run only checks whose name contains this.
        #[arg(long)]
        only: Option<String>,
    },
    /// Time vanilla against linear attention; CSV on stdout.
    Bench {
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Overfit synthetic scenes and evaluate on them.
    TrainToy,
    /// AP40 of KITTI result files against label files.
    Eval { det_dir: PathBuf, gt_dir: PathBuf },
    /// Print a label, calib, depth-bin or tensor file (or a checkpoint dir).
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_text(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Gradcheck { only } => gradcheck(&cfg, only),
        Command::Bench { out } => bench(&cfg, out.as_deref()),
        Command::TrainToy => train_toy(&cfg),
        Command::Eval { det_dir, gt_dir } => eval(&cfg, &det_dir, &gt_dir),
        Command::Inspect { path } => inspect(&cfg, &path),
    }
}

fn gradcheck(cfg: &RunConfig, only: Option<String>) -> Result<ExitCode> {
    let opts = SuiteOptions {
        only,
        ..SuiteOptions::from_config(cfg)
    };
    let report = run_suite(&opts)?;
    print!("{report}");
    if report.passed() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("gradient check failed: {}", report.failed().join(", "));
    Ok(ExitCode::from(1))
}

fn bench(cfg: &RunConfig, out: Option<&Path>) -> Result<ExitCode> {
    if cfg.parallel {
        bail!("bench times a single thread; unset `parallel`");
    }
    let rows = bench_attention(
        &[AttentionKind::Vanilla, AttentionKind::Linear],
        &cfg.bench_sizes,
        cfg.bench_dim,
        cfg.bench_runs,
        cfg.seed,
    )?;
    let mut csv = Vec::new();
    write_bench_csv(&mut csv, &rows)?;
    print!("{}", String::from_utf8(csv.clone())?);
    let meta = serde_json::json!({
        "dim": cfg.bench_dim,
        "runs": cfg.bench_runs,
        "seed": cfg.seed,
        "threads": 1,
        "paper_reference_ms": PAPER_MS
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::from(*v)))
            .collect::<serde_json::Map<_, _>>(),
    });
    eprintln!("reference only, not a target: {}", meta["paper_reference_ms"]);
    if let Some(path) = out {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        let meta_path = path.with_extension("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train_toy(cfg: &RunConfig) -> Result<ExitCode> {
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let scenes = generate_scenes(cfg)?;
    let outcome = match train(cfg, &scenes) {
        Ok(o) => o,
        Err(ModelError::NonFinite { step, detail }) => {
            let dump = out.join("nonfinite.txt");
            fs::write(&dump, format!("step {step}\n{detail}\n"))?;
            eprintln!("non-finite loss at step {step}; dump in {}", dump.display());
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e.into()),
    };
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &outcome.curve)?;
    fs::write(out.join("loss.csv"), csv)?;
    let mut model = outcome.model;
    model.save(&out.join("checkpoint"))?;
    let report = evaluate_scenes(cfg, &model, &scenes)?;
    fs::write(out.join("eval.json"), report.to_json())?;
    if let (Some(first), Some(last)) = (outcome.curve.get(10.min(outcome.curve.len().saturating_sub(1))), outcome.curve.last()) {
        println!(
            "loss {:.6} -> {:.6} ({:.2}% lower than step {})",
            first.total,
            last.total,
            100.0 * (1.0 - last.total / first.total),
            first.step
        );
    }
    print!("{}", report.summary());
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn read_labels(path: &Path) -> Result<Vec<KittiLabel>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_labels(&text).with_context(|| path.display().to_string())
}

fn load_frame(name: String, det_dir: &Path, gt_dir: &Path) -> Result<Frame> {
    let det = det_dir.join(&name);
    Ok(Frame {
        detections: if det.exists() { read_labels(&det)? } else { Vec::new() },
        ground_truth: read_labels(&gt_dir.join(&name))?,
        name,
    })
}

fn eval(cfg: &RunConfig, det_dir: &Path, gt_dir: &Path) -> Result<ExitCode> {
    if !det_dir.is_dir() {
        bail!("{} is not a directory", det_dir.display());
    }
    let mut names: Vec<String> = fs::read_dir(gt_dir)
        .with_context(|| format!("listing {}", gt_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".txt"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .txt label files in {}", gt_dir.display());
    }
    let frames: Vec<Frame> = if cfg.parallel {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let chunk = names.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = names
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|n| load_frame(n.clone(), det_dir, gt_dir))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("parser thread panicked")?);
            }
            Ok::<_, anyhow::Error>(all)
        })?
    } else {
        names
            .into_iter()
            .map(|n| load_frame(n, det_dir, gt_dir))
            .collect::<Result<_>>()?
    };
    let thresholds: Vec<(Metric, f64)> = cfg
        .eval_ious
        .iter()
        .flat_map(|&t| Metric::ALL.into_iter().map(move |m| (m, t)))
        .collect();
    let report = evaluate(&frames, &cfg.classes, &thresholds, |_| true);
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval.json"), report.to_json())?;
    print!("{}", report.summary());
    println!("{} frames; report in {}", frames.len(), out.join("eval.json").display());
    Ok(ExitCode::SUCCESS)
}

fn inspect(cfg: &RunConfig, path: &Path) -> Result<ExitCode> {
    if path.is_dir() {
        return inspect_dir(path);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let t = read_tensor(&mut bytes.as_slice()).with_context(|| path.display().to_string())?;
        println!("{}", tensor_row(&path.display().to_string(), &t));
        return Ok(ExitCode::SUCCESS);
    }
    let text = String::from_utf8(bytes).with_context(|| format!("{} is neither text nor a tensor", path.display()))?;
    if text.trim_start().starts_with("DBIN") {
        let map = DepthTargetMap::from_text(&text).with_context(|| path.display().to_string())?;
        let (counts, invalid) = map.histogram();
        println!("depth bins {}x{} D={}", map.height, map.width, map.bins);
        println!("{:>4} {:>8}", "bin", "pixels");
        for (b, c) in counts.iter().enumerate() {
            println!("{b:>4} {c:>8}");
        }
        println!("invalid {invalid}");
        return Ok(ExitCode::SUCCESS);
    }
    if text.lines().any(|l| l.trim_start().starts_with("P2:")) {
        let calib = parse_calib(&text).with_context(|| path.display().to_string())?;
        println!("P2");
        for row in calib.p2 {
            println!("  {:>14.6} {:>14.6} {:>14.6} {:>14.6}", row[0], row[1], row[2], row[3]);
        }
        println!("fx {:.4} fy {:.4} cx {:.4} cy {:.4}", calib.fx(), calib.fy(), calib.cx(), calib.cy());
        let t = preprocess(cfg.raw_width, cfg.raw_height, cfg.crop_top, cfg.input_width, cfg.input_height)?;
        let c = t.apply_to_calib(&calib);
        println!(
            "after crop {} and resize to {}x{}: fx {:.4} fy {:.4} cx {:.4} cy {:.4}",
            cfg.crop_top,
            cfg.input_width,
            cfg.input_height,
            c.fx(),
            c.fy(),
            c.cx(),
            c.cy()
        );
        return Ok(ExitCode::SUCCESS);
    }
    let labels = parse_labels(&text).with_context(|| path.display().to_string())?;
    print!("{}", label_table(&labels));
    let problems = label_violations(&labels);
    for p in &problems {
        println!("violation: {p}");
    }
    Ok(if problems.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn inspect_dir(dir: &Path) -> Result<ExitCode> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tnsr"))
        .collect();
    if files.is_empty() {
        bail!("no .tnsr files in {}", dir.display());
    }
    files.sort();
    let mut total = 0;
    for f in &files {
        let t = read_tensor_file(f).with_context(|| f.display().to_string())?;
        total += t.numel();
        let name = f.file_name().unwrap_or_default().to_string_lossy();
        println!("{}", tensor_row(&name, &t));
    }
    println!("{} tensors, {total} values", files.len());
    Ok(ExitCode::SUCCESS)
}

fn tensor_row(name: &str, t: &monodtr::Tensor) -> String {
    let d = t.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    format!("{name:<24} shape {:?} min {min:.4e} max {max:.4e} mean {mean:.4e}", t.shape())
}

fn label_table(labels: &[KittiLabel]) -> String {
    let mut out = format!(
        "{:>3} {:<14} {:>5} {:>3} {:>6} {:>32} {:>17} {:>23} {:>6} {:>6}\n",
        "#", "type", "trunc", "occ", "alpha", "bbox", "h w l", "x y z", "ry", "score"
    );
    for (i, l) in labels.iter().enumerate() {
        let [x1, y1, x2, y2] = l.bbox;
        let [h, w, len] = l.dims;
        let [x, y, z] = l.location;
        let score = l.score.map_or("-".to_string(), |s| format!("{s:.3}"));
        let _ = writeln!(
            out,
            "{i:>3} {:<14} {:>5.2} {:>3} {:>6.2} {x1:>7.2} {y1:>7.2} {x2:>7.2} {y2:>7.2}  {h:>5.2} {w:>5.2} {len:>5.2} {x:>7.2} {y:>7.2} {z:>7.2} {:>6.2} {score:>6}",
            l.kind, l.truncated, l.occluded, l.alpha, l.rotation_y
        );
    }
    out
}

fn label_violations(labels: &[KittiLabel]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, l) in labels.iter().enumerate().filter(|(_, l)| !l.is_dont_care()) {
        let row = i + 1;
        if l.bbox[2] < l.bbox[0] || l.bbox[3] < l.bbox[1] {
            out.push(format!("row {row}: bbox corners out of order"));
        }
        if l.dims.iter().any(|&d| d <= 0.0) {
            out.push(format!("row {row}: non-positive dimensions"));
        }
        if !(0.0..=1.0).contains(&l.truncated) {
            out.push(format!("row {row}: truncation outside [0, 1]"));
        }
        if l.location[2] <= 0.0 {
            out.push(format!("row {row}: object behind the camera"));
        } else if let Ok(a) = alpha_from_ry(l.rotation_y, l.location[0], l.location[2]) {
            if normalize_angle(a - l.alpha).abs() > ALPHA_SLACK {
                out.push(format!("row {row}: alpha {:.3} inconsistent with ry (expected {a:.3})", l.alpha));
            }
        }
    }
    out
}
