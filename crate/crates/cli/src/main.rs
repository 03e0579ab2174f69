//! `east`: every pipeline stage as a subcommand over plain-text quad files,
//! EASTTNSR tensors and PGM/PPM images.

mod fail;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use east::bench::{self, BenchRow};
use east::decode::{decode, DecodeConfig};
use east::formats::{
    format_quad_file, read_quad_file, render_detections, GrayImage, QuadRecord, TensorFile,
};
use east::gradcheck::{check_losses, check_network, micro_config, CheckRow};
use east::labelgen::{generate_labels, LabelConfig};
use east::losses::LossConfig;
use east::nms::{locality_aware_nms, MergeConfig};
use east::pipeline::{
    detect, evaluate_net, label_outputs, outputs_to_tensors, samples, scenes, tensors_to_outputs, DetectConfig,
};
use east::synth::{evaluate, generate_scene, EvalCounts, SceneConfig};
use east::tensor::Tensor;
use east::tinynet::{format_loss_log, train, AdamConfig, Head, NetConfig, TinyNet, TrainConfig};
use east::{Detection, Quad};

use fail::{fail, read_failure, Classify, Kind, Outcome};

#[derive(Parser)]
#[command(name = "east", version, about = "Dense quadrangle text detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Rbox,
    Quad,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Rbox => Head::Rbox,
            HeadArg::Quad => Head::Quad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    /// Boxes of 64 jittered candidates each, as a decoder would emit.
    Clustered,
    /// Exact copies of a single box.
    Duplicates,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize ground-truth quads into score, geometry and mask tensors.
    Labelgen {
        /// Ground-truth quad file.
        #[arg(long)]
        gt: PathBuf,
        /// Image size as HEIGHTxWIDTH.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long, value_enum, default_value = "rbox")]
        head: HeadArg,
        /// Fraction of each reference length cut from every edge.
        #[arg(long, default_value_t = 0.3)]
        shrink: f64,
        /// Output directory for score.tnsr, geometry.tnsr and mask.tnsr.
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold a score map and restore one quad per surviving cell.
    Decode {
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, value_enum, default_value = "rbox")]
        head: HeadArg,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long, default_value_t = east::decode::DEFAULT_SCORE_THRESHOLD)]
        threshold: f64,
        /// Output quad file, in row-major cell order.
        #[arg(long)]
        out: PathBuf,
    },
    /// Locality-aware NMS over a row-ordered candidate file.
    Nms {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = east::nms::DEFAULT_MERGE_IOU)]
        merge_iou: f64,
        #[arg(long, default_value_t = east::nms::DEFAULT_FINAL_NMS_IOU)]
        nms_iou: f64,
        /// Also write merge and IoU counters as CSV.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Time locality-aware NMS against all-pairs NMS over a grid of sizes.
    BenchNms {
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES)]
        sizes: Vec<usize>,
        #[arg(long, value_enum, default_value = "clustered")]
        workload: Workload,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Skip the quadratic baseline (its wall time is reported as 0).
        #[arg(long)]
        no_naive: bool,
    },
    /// Train the network on synthetic scenes.
    Train {
        #[arg(long, default_value_t = 5000)]
        steps: u64,
        /// Seeds both the scenes and the training run.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, value_enum, default_value = "rbox")]
        head: HeadArg,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Scenes 0..N are used for training.
        #[arg(long, default_value_t = 256)]
        train_images: u64,
        /// Scenes N..N+M are scored after training; 0 skips.
        #[arg(long, default_value_t = 32)]
        test_images: u64,
        /// Train on the scenes exactly as generated.
        #[arg(long)]
        no_augment: bool,
        /// Checkpoint directory; also receives loss.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic scenes as PGM images plus ground-truth quad files.
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = 32)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained model on a PGM image or a directory of them.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Quad file, or a directory when the input is one.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = east::decode::DEFAULT_SCORE_THRESHOLD)]
        threshold: f64,
    },
    /// Precision, recall and F of detections against ground truth. Both
    /// paths are files, or both are directories matched by file name.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Per-image CSV destination.
        #[arg(long)]
        per_image: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    CheckGrads {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = east::gradcheck::DEFAULT_POINTS)]
        points: usize,
    },
    /// Draw detections (and optionally ground truth) over a PGM image.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        /// Ground truth, drawn in green.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(h)?, num(w)?))
}

fn read_records(path: &Path) -> Outcome<Vec<QuadRecord>> {
    read_quad_file(path).map_err(|e| read_failure(e, path))
}

fn read_quads(path: &Path) -> Outcome<Vec<Quad>> {
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_quad().data(format!("{}: record {}", path.display(), i + 1)))
        .collect()
}

fn read_dets(path: &Path) -> Outcome<Vec<Detection>> {
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_detection().data(format!("{}: record {}", path.display(), i + 1)))
        .collect()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).usage(format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).usage(format!("writing {}", path.display()))
}

fn write_dets(path: &Path, dets: &[Detection]) -> Outcome<()> {
    let records: Vec<QuadRecord> = dets.iter().map(QuadRecord::from_detection).collect();
    write_file(path, format_quad_file(&records))
}

fn write_tensor(path: &Path, t: &TensorFile) -> Outcome<()> {
    write_file(path, t.encode())
}

fn read_tensor(path: &Path) -> Outcome<TensorFile> {
    TensorFile::read(path).map_err(|e| read_failure(e, path))
}

fn read_pgm(path: &Path) -> Outcome<GrayImage> {
    let bytes = fs::read(path).map_err(|e| read_failure(e.into(), path))?;
    GrayImage::decode_pgm(&bytes).data(format!("decoding {}", path.display()))
}

fn image_tensor(img: &GrayImage) -> Outcome<Tensor> {
    Tensor::from_vec([1, 1, img.height, img.width], img.to_unit()).data("image tensor")
}

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Outcome<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .usage(format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn metric_line(counts: &EvalCounts) -> String {
    let (p, r, f) = counts.metrics();
    format!("P={p:.4} R={r:.4} F={f:.4}")
}

fn cmd_labelgen(
    gt: &Path,
    (h, w): (usize, usize),
    stride: usize,
    head: Head,
    shrink: f64,
    out: &Path,
) -> Outcome<()> {
    let quads = read_quads(gt)?;
    let cfg = LabelConfig::new(h, w).with_stride(stride).with_shrink_ratio(shrink);
    cfg.validate().usage("label settings")?;
    let labels = generate_labels(&quads, &cfg).data("generating labels")?;
    let dense = label_outputs(&labels, head, stride);
    let (score, geometry) = outputs_to_tensors(&dense);
    let valid = match head {
        Head::Rbox => &labels.rbox.valid,
        Head::Quad => &labels.quad.valid,
    };
    let (mh, mw) = valid.shape();
    let mask = TensorFile::new(vec![mh, mw], valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
    write_tensor(&out.join("score.tnsr"), &score)?;
    write_tensor(&out.join("geometry.tnsr"), &geometry)?;
    write_tensor(&out.join("mask.tnsr"), &mask)?;
    let positives = labels.score.iter().filter(|&&v| v > 0.5).count();
    println!("{} quads, {positives} positive cells, {} collapsed", quads.len(), labels.collapsed.len());
    Ok(())
}

fn cmd_decode(score: &Path, geometry: &Path, head: Head, stride: usize, threshold: f64, out: &Path) -> Outcome<()> {
    let dense = tensors_to_outputs(&read_tensor(score)?, &read_tensor(geometry)?, head, stride).data("map tensors")?;
    let decoded = decode(&dense, &DecodeConfig { score_threshold: threshold }).usage("decoding")?;
    write_dets(out, &decoded.detections)?;
    println!("{} candidates, {} cells skipped", decoded.detections.len(), decoded.skipped);
    Ok(())
}

fn cmd_nms(input: &Path, out: &Path, merge_iou: f64, nms_iou: f64, stats_path: Option<&Path>) -> Outcome<()> {
    for t in [merge_iou, nms_iou] {
        if !(t > 0.0 && t < 1.0) {
            return Err(fail(Kind::Usage, anyhow::anyhow!("IoU threshold {t} outside (0, 1)")));
        }
    }
    let dets = read_dets(input)?;
    let cfg = MergeConfig {
        merge_iou_threshold: merge_iou,
        final_nms_iou_threshold: nms_iou,
        counters_enabled: true,
    };
    let (kept, stats) = locality_aware_nms(&dets, &cfg).data("merging")?;
    write_dets(out, &kept)?;
    if let Some(path) = stats_path {
        write_file(
            path,
            format!(
                "input,output,weighted_merge_calls,pairwise_iou_evaluations\n{},{},{},{}\n",
                dets.len(),
                kept.len(),
                stats.weighted_merge_calls,
                stats.pairwise_iou_evaluations
            ),
        )?;
    }
    println!("{} -> {} detections", dets.len(), kept.len());
    Ok(())
}

fn cmd_bench(out: Option<&Path>, sizes: &[usize], workload: Workload, seed: u64, no_naive: bool) -> Outcome<()> {
    let cfg = MergeConfig::default();
    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in sizes {
        let dets = match workload {
            Workload::Clustered => bench::clustered(n, seed),
            Workload::Duplicates => bench::duplicates(n),
        };
        let (row, _) = bench::measure(&dets, &cfg, !no_naive).data("benchmark")?;
        eprintln!("n={n}: {:.3} ms vs {:.3} ms", row.wall_ms, row.naive_wall_ms);
        rows.push(row);
    }
    let csv = bench::format_csv(&rows);
    match out {
        Some(path) => write_file(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

struct TrainArgs {
    steps: u64,
    seed: u64,
    batch: usize,
    head: Head,
    lr: f64,
    train_images: u64,
    test_images: u64,
    augment: bool,
}

fn cmd_train(a: &TrainArgs, out: &Path) -> Outcome<()> {
    if a.train_images == 0 {
        return Err(fail(Kind::Usage, anyhow::anyhow!("--train-images must be positive")));
    }
    let scene_cfg = SceneConfig {
        seed: a.seed,
        ..SceneConfig::default()
    };
    let train_scenes = scenes(&scene_cfg, 0..a.train_images).data("generating scenes")?;
    let data = samples(&train_scenes).data("labelling scenes")?;
    let net_cfg = NetConfig::default().with_head(a.head);
    let adam = AdamConfig {
        lr: a.lr,
        ..AdamConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        seed: a.seed,
        augment: a.augment,
    };
    let (net, log) = train(&data, &net_cfg, &LossConfig::default(), &adam, &train_cfg, |e| {
        if e.step % 500 == 0 || e.step == a.steps {
            eprintln!("step {:>5}  lr {:.0e}  loss {:.4}", e.step, e.lr, e.total);
        }
    })
    .usage("training")?;
    net.save(out).usage(format!("saving checkpoint to {}", out.display()))?;
    write_file(&out.join("loss.csv"), format_loss_log(&log))?;
    if a.test_images > 0 {
        let test = scenes(&scene_cfg, a.train_images..a.train_images + a.test_images).data("generating scenes")?;
        let (counts, _) = evaluate_net(&net, &test, &DetectConfig::default(), 0.5).data("evaluating")?;
        println!("held-out {}", metric_line(&counts));
    }
    Ok(())
}

fn cmd_synth(seed: u64, start: u64, count: u64, out: &Path) -> Outcome<()> {
    let cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    for i in start..start + count {
        let scene = generate_scene(&cfg, i).data(format!("scene {i}"))?;
        let [_, _, h, w] = scene.image.shape();
        let img = GrayImage::from_unit(w, h, scene.image.data());
        write_file(&out.join(format!("scene_{i:05}.pgm")), img.encode_pgm())?;
        let records: Vec<QuadRecord> = scene.gts.iter().map(QuadRecord::from_quad).collect();
        write_file(&out.join(format!("scene_{i:05}.txt")), format_quad_file(&records))?;
    }
    println!("{count} scenes written to {}", out.display());
    Ok(())
}

fn cmd_detect(model: &Path, input: &Path, out: &Path, threshold: f64) -> Outcome<()> {
    let net = TinyNet::load(model).usage(format!("loading model from {}", model.display()))?;
    let mut cfg = DetectConfig::default();
    cfg.decode.score_threshold = threshold;
    let run = |image: &Path, dest: &Path| -> Outcome<usize> {
        let tensor = image_tensor(&read_pgm(image)?)?;
        let dets = detect(&net, &tensor, &cfg).data(format!("detecting in {}", image.display()))?;
        write_dets(dest, &dets)?;
        Ok(dets.len())
    };
    if input.is_dir() {
        let mut total = 0;
        let images = files_with_ext(input, "pgm")?;
        for image in &images {
            let stem = image.file_stem().unwrap_or_default();
            total += run(image, &out.join(stem).with_extension("txt"))?;
        }
        println!("{total} detections over {} images", images.len());
    } else {
        println!("{} detections", run(input, out)?);
    }
    Ok(())
}

fn cmd_eval(dets: &Path, gt: &Path, iou: f64, per_image: Option<&Path>) -> Outcome<()> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (dets.is_dir(), gt.is_dir()) {
        (false, false) => vec![(gt.display().to_string(), dets.to_path_buf(), gt.to_path_buf())],
        (true, true) => files_with_ext(gt, "txt")?
            .into_iter()
            .map(|g| {
                let name = g.file_name().unwrap_or_default().to_string_lossy().into_owned();
                (name.clone(), dets.join(&name), g)
            })
            .collect(),
        _ => {
            return Err(fail(
                Kind::Usage,
                anyhow::anyhow!("--dets and --gt must both be files or both be directories"),
            ))
        }
    };
    let mut total = EvalCounts::default();
    let mut csv = String::from("image,detections,gts,matched,precision,recall,f\n");
    for (name, d, g) in &pairs {
        // A detector that found nothing may have written no file.
        let found = if d.exists() { read_dets(d)? } else { Vec::new() };
        let gts = read_quads(g)?;
        let r = evaluate(&found, &gts, iou);
        let mut one = EvalCounts::default();
        one.add(found.len(), gts.len(), r.matches.len());
        total.add(found.len(), gts.len(), r.matches.len());
        let (p, rc, f) = one.metrics();
        csv.push_str(&format!("{name},{},{},{},{p:.4},{rc:.4},{f:.4}\n", found.len(), gts.len(), r.matches.len()));
    }
    if let Some(path) = per_image {
        write_file(path, csv)?;
    }
    println!("{}", metric_line(&total));
    Ok(())
}

fn cmd_check_grads(seed: u64, points: usize) -> Outcome<()> {
    let mut rows: Vec<CheckRow> = check_losses(seed, points);
    for head in [Head::Rbox, Head::Quad] {
        let mut row = check_network(&micro_config(head), seed, points).data("network check")?;
        row.name = match head {
            Head::Rbox => "network_rbox",
            Head::Quad => "network_quad",
        };
        rows.push(row);
    }
    println!("{:<14} {:>6} {:>14} {:>10}  status", "check", "points", "max_rel_error", "tolerance");
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<14} {:>6} {:>14.3e} {:>10.0e}  {status}",
            r.name, r.points, r.max_rel_error, r.tolerance
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(Kind::Verify, anyhow::anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_render(image: &Path, dets: &Path, gt: Option<&Path>, out: &Path) -> Outcome<()> {
    let img = read_pgm(image)?;
    let found = read_dets(dets)?;
    let mut canvas = render_detections(&img, &found);
    if let Some(gt) = gt {
        for q in read_quads(gt)? {
            canvas.quad(&q, [0, 200, 0]);
        }
    }
    write_file(out, canvas.encode_ppm())
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Labelgen {
            gt,
            size,
            stride,
            head,
            shrink,
            out,
        } => cmd_labelgen(&gt, size, stride, head.into(), shrink, &out),
        Command::Decode {
            score,
            geometry,
            head,
            stride,
            threshold,
            out,
        } => cmd_decode(&score, &geometry, head.into(), stride, threshold, &out),
        Command::Nms {
            input,
            out,
            merge_iou,
            nms_iou,
            stats,
        } => cmd_nms(&input, &out, merge_iou, nms_iou, stats.as_deref()),
        Command::BenchNms {
            out,
            sizes,
            workload,
            seed,
            no_naive,
        } => cmd_bench(out.as_deref(), &sizes, workload, seed, no_naive),
        Command::Train {
            steps,
            seed,
            batch,
            head,
            lr,
            train_images,
            test_images,
            no_augment,
            out,
        } => cmd_train(
            &TrainArgs {
                steps,
                seed,
                batch,
                head: head.into(),
                lr,
                train_images,
                test_images,
                augment: !no_augment,
            },
            &out,
        ),
        Command::Synth { seed, start, count, out } => cmd_synth(seed, start, count, &out),
        Command::Detect {
            model,
            input,
            out,
            threshold,
        } => cmd_detect(&model, &input, &out, threshold),
        Command::Eval {
            dets,
            gt,
            iou,
            per_image,
        } => cmd_eval(&dets, &gt, iou, per_image.as_deref()),
        Command::CheckGrads { seed, points } => cmd_check_grads(seed, points),
        Command::Render { image, dets, gt, out } => cmd_render(&image, &dets, gt.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind as u8)
        }
    }
}
