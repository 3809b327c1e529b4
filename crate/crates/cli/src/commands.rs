use std::path::{Path, PathBuf};

use triresnet_core::eval::{
    assemble_heatmap, comparison_table, evaluate, export_heatmap_image, single_stream_baseline, split_manifest,
    write_heatmap_sidecar, GroundTruthOracle, MalignancyPredictor, MetricsReport, ModelPredictor,
};
use triresnet_core::tensor::Fault;
use triresnet_core::train::{
    load_tile_dataset, run_policy, train_baseline, CheckpointWriter, PolicyObserver, StageId, StageReport,
    TrainingData,
};
use triresnet_core::verify::{run_all, VerifyOptions};
use triresnet_core::wsi::{
    generate_synthetic_slide, load_slide, load_slide_dir, load_synth_spec, sample_balanced_tiles_with,
    DatasetManifest, PyramidalSlide, Split,
};
use triresnet_core::{
    build_triresnet, checkpoint_dtype, load_any_checkpoint, save_any_checkpoint, AnyModel, DType, Element, Error,
    Result, Scale, TriResNet,
};

use crate::config::RunConfig;
use crate::exit;
use crate::ConfigArgs;

/// Defaults, then the config file, then `preset`, then `--set`, then
/// dedicated flags.
fn resolve(args: &ConfigArgs, preset: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.apply_file(path)?;
    }
    preset(&mut rc);
    for s in &args.set {
        rc.apply_assignment(s)?;
    }
    if let Some(seed) = args.seed {
        rc.seed = seed;
    }
    Ok(rc)
}

fn slides_in(dir: &Path) -> Result<Vec<PyramidalSlide>> {
    let slides = load_slide_dir(dir)?;
    if slides.is_empty() {
        return Err(Error::Config(format!("no slide directories under {}", dir.display())));
    }
    Ok(slides)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    }
}

pub fn synth(root: &Path, spec: Option<&Path>, id: Option<String>, seed: Option<u64>, out: Option<PathBuf>) -> Result<u8> {
    let mut s = load_synth_spec(spec)?;
    if let Some(id) = id {
        s.slide_id = id;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let slide = generate_synthetic_slide(&s)?;
    let out = out.unwrap_or_else(|| root.join("slides").join(&s.slide_id));
    slide.save(&out)?;
    std::fs::write(out.join("synth_spec.json"), s.to_json())?;
    let levels: Vec<String> = slide
        .slide
        .levels()
        .iter()
        .map(|l| format!("{}x{}", l.width, l.height))
        .collect();
    println!("wrote {} to {} (levels {})", s.slide_id, out.display(), levels.join(", "));
    Ok(exit::OK)
}

fn print_counts(label: &str, (benign, malignant): (usize, usize)) {
    println!("{label}: benign {benign} malignant {malignant}");
}

#[allow(clippy::too_many_arguments)]
pub fn tile(
    root: &Path,
    slides: &Path,
    count: usize,
    side: Option<usize>,
    split: &[f64],
    by_slide: bool,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> Result<u8> {
    let mut rc = resolve(args, |_| {})?;
    if let Some(side) = side {
        rc.tile_side = side;
    }
    let slides = slides_in(slides)?;
    let mut manifest = sample_balanced_tiles_with(&slides, count, &rc.sampler(), rc.seed)?;
    if !split.is_empty() {
        manifest = split_manifest(&manifest, split, by_slide, rc.seed)?;
    }
    let out = out.unwrap_or_else(|| root.join("tiles.manifest"));
    let dir = parent_dir(&out);
    std::fs::create_dir_all(&dir)?;
    manifest.save(&out)?;
    rc.echo(&dir, "tile")?;
    print_counts("total", manifest.label_counts(None));
    if !split.is_empty() {
        for s in Split::ALL {
            if manifest.split(s).next().is_some() {
                print_counts(s.name(), manifest.label_counts(Some(s)));
            }
        }
    }
    println!("manifest written to {}", out.display());
    Ok(exit::OK)
}

/// Prints every epoch as its stage finishes and, for the staged policy,
/// checkpoints after each stage.
struct Progress {
    writer: CheckpointWriter,
}

fn print_report(report: &StageReport) {
    for e in &report.epochs {
        let val = e.val_acc.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        println!(
            "{} epoch {}: loss {:.4} train_acc {:.4} val_acc {val} lr {}",
            e.stage, e.epoch, e.loss, e.train_acc, e.lr
        );
    }
    println!(
        "{} done in {:.1}s ({} trainable parameters)",
        report.stage,
        report.wall_time.as_secs_f64(),
        report.updated_parameters
    );
}

impl<T: Element> PolicyObserver<T> for Progress {
    fn on_stage_end(&mut self, report: &StageReport, model: &TriResNet<T>) -> Result<()> {
        print_report(report);
        self.writer.on_stage_end(report, model)
    }
}

pub fn train(
    root: &Path,
    manifest: &Path,
    slides: &Path,
    single_stream: bool,
    tiny: bool,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> Result<u8> {
    let rc = resolve(args, |rc| {
        if tiny {
            rc.stage_depths = [1, 1, 1, 1];
            rc.scale = Scale { num: 1, den: 8 };
        }
    })?;
    let out = out.unwrap_or_else(|| root.join("train"));
    match rc.dtype {
        DType::F32 => train_typed::<f32>(&rc, manifest, slides, single_stream, &out),
        DType::F64 => train_typed::<f64>(&rc, manifest, slides, single_stream, &out),
    }
}

fn train_typed<T: Element>(
    rc: &RunConfig,
    manifest: &Path,
    slides: &Path,
    single_stream: bool,
    out: &Path,
) -> Result<u8> {
    let cfg = rc.train();
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest)?;
    let slides = slides_in(slides)?;
    let train = load_tile_dataset::<T>(&manifest, Split::Train, &slides, rc.resize)?;
    if train.is_empty() {
        return Err(Error::Config("manifest has no train records".into()));
    }
    let val = if manifest.split(Split::Val).next().is_some() {
        Some(load_tile_dataset(&manifest, Split::Val, &slides, rc.resize)?)
    } else {
        None
    };
    let data = TrainingData { train, val };
    let stream = rc.stream();
    let seed = rc.seed;
    rc.echo(out, "train")?;
    if single_stream {
        let mut model = single_stream_baseline::<T>(&stream, 2, seed, seed.wrapping_add(3))?;
        let writer = CheckpointWriter::new(out)?;
        let report = train_baseline(&mut model, &data, &cfg)?;
        print_report(&report);
        writer.append_report(&report)?;
        save_any_checkpoint(
            &AnyModel::SingleStream(model),
            &writer.checkpoint_path(StageId::Baseline),
        )?;
    } else {
        let seeds = [seed, seed.wrapping_add(1), seed.wrapping_add(2)];
        let mut model = build_triresnet::<T>(&stream, 2, seeds, seed.wrapping_add(3))?;
        let mut progress = Progress {
            writer: CheckpointWriter::new(out)?,
        };
        run_policy(&mut model, &data, &cfg, &mut progress)?;
    }
    println!("checkpoints and reports.jsonl written to {}", out.display());
    Ok(exit::OK)
}

fn evaluate_checkpoint<T: Element>(
    path: &Path,
    rc: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
    slides: &[PyramidalSlide],
) -> Result<(String, MetricsReport)> {
    let model = load_any_checkpoint::<T>(path)?;
    let predictor = ModelPredictor::new(&model).with_resize(rc.resize);
    let (cm, report) = evaluate(&predictor, manifest, split, slides, rc.threshold)?;
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    println!(
        "{} ({}): tp {} fp {} tn {} fn {}",
        stem,
        model.kind(),
        cm.tp,
        cm.fp,
        cm.tn,
        cm.fn_
    );
    Ok((format!("{}:{stem}", model.kind()), report))
}

pub fn eval(
    checkpoints: &[PathBuf],
    manifest: &Path,
    slides: &Path,
    split: &str,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> Result<u8> {
    let rc = resolve(args, |_| {})?;
    let split: Split = split.parse()?;
    let manifest = DatasetManifest::load(manifest)?;
    let slides = slides_in(slides)?;
    let mut rows = Vec::new();
    for path in checkpoints {
        rows.push(match checkpoint_dtype(path)? {
            DType::F32 => evaluate_checkpoint::<f32>(path, &rc, &manifest, split, &slides)?,
            DType::F64 => evaluate_checkpoint::<f64>(path, &rc, &manifest, split, &slides)?,
        });
    }
    let table = comparison_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        rc.echo(&dir, "eval")?;
        std::fs::write(dir.join("metrics.txt"), &table)?;
    }
    Ok(exit::OK)
}

#[allow(clippy::too_many_arguments)]
pub fn heatmap(
    root: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    slide: &Path,
    side: Option<usize>,
    stride: Option<usize>,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> Result<u8> {
    let mut rc = resolve(args, |_| {})?;
    if let Some(side) = side {
        rc.tile_side = side;
    }
    if stride.is_some() {
        rc.stride = stride;
    }
    let slide = load_slide(slide)?;
    let out = out.unwrap_or_else(|| root.join("heatmaps").join(format!("{}.pgm", slide.id())));
    let render = |predictor: &dyn MalignancyPredictor| -> Result<()> {
        let h = assemble_heatmap(predictor, &slide, rc.tile_side, rc.stride())?;
        let dir = parent_dir(&out);
        std::fs::create_dir_all(&dir)?;
        export_heatmap_image(&h, &out)?;
        write_heatmap_sidecar(&h, slide.id(), &out.with_extension("json"))?;
        rc.echo(&dir, "heatmap")?;
        println!("{}x{} heatmap of {} written to {}", h.rows, h.cols, slide.id(), out.display());
        Ok(())
    };
    match (oracle, checkpoint) {
        (true, _) => render(&GroundTruthOracle)?,
        (false, Some(path)) => match checkpoint_dtype(path)? {
            DType::F32 => {
                let m = load_any_checkpoint::<f32>(path)?;
                render(&ModelPredictor::new(&m).with_resize(rc.resize))?;
            }
            DType::F64 => {
                let m = load_any_checkpoint::<f64>(path)?;
                render(&ModelPredictor::new(&m).with_resize(rc.resize))?;
            }
        },
        (false, None) => return Err(Error::Config("either --checkpoint or --oracle is required".into())),
    }
    Ok(exit::OK)
}

pub fn verify(seed: u64, quick: bool, fault: Option<&str>) -> Result<u8> {
    let fault = match fault {
        None => None,
        Some("relu") => Some(Fault::ReluPassThrough),
        Some(other) => return Err(Error::Config(format!("unknown fault {other:?}"))),
    };
    let sweep = if quick { 100 } else { 1000 };
    let opts = VerifyOptions {
        seed,
        fault,
        otsu_histograms: sweep,
        sampler_tiles: sweep,
        ..VerifyOptions::default()
    };
    let reports = run_all(&opts)?;
    let mut failed = false;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAILED" };
        println!("{}: {} checks, {} failures ... {status}", r.name, r.checks, r.failures.len());
        for f in r.failures.iter().take(10) {
            println!("    {f}");
        }
        if r.failures.len() > 10 {
            println!("    ... {} more", r.failures.len() - 10);
        }
        failed |= !r.passed();
    }
    Ok(if failed { exit::VERIFICATION } else { exit::OK })
}
