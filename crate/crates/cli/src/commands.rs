use std::path::{Path, PathBuf};

use roadseg::dataset::{
    load_sample_unchecked, read_image, read_manifest, write_corpus, write_image, write_mask,
};
use roadseg::eval::{comparison_csv, derive_metrics_with, render_all, render_report, ReportFormat};
use roadseg::infer::{evaluate, overlay, predict_mask};
use roadseg::synth::ROAD_PROFILE;
use roadseg::train::{RunConfig, TrainingHistory};
use roadseg::*;
use serde::{Deserialize, Serialize};

use crate::run::{write_text, CmdResult, Failure, Run};
use crate::{AnalyzeArgs, EvalArgs, PredictArgs, ReportArgs, SynthArgs, TrainArgs};

fn load_schema(path: Option<&Path>) -> CmdResult<LabelSchema> {
    match path {
        Some(p) => Ok(LabelSchema::load(p)?),
        None => Ok(LabelSchema::road()),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Serialize)]
struct ClassShare<'a> {
    id: ClassId,
    name: &'a str,
    pixels: u64,
    fraction: f64,
}

#[derive(Serialize)]
struct DistributionFile<'a> {
    samples: usize,
    total_pixels: u64,
    classes: Vec<ClassShare<'a>>,
    weights: Vec<WeightVector>,
}

pub fn analyze(root: &Path, args: AnalyzeArgs) -> CmdResult {
    let mut run = Run::start("analyze", root, args.out)?;
    let result = load_schema(args.schema.as_deref())
        .and_then(|schema| analyze_into(&mut run, &args.manifest, &schema));
    run.finish(result)
}

fn analyze_into(run: &mut Run, manifest: &Path, schema: &LabelSchema) -> CmdResult {
    let entries = read_manifest(manifest)?;
    let mut problems = Vec::new();
    let mut corpus = Vec::with_capacity(entries.len());
    for entry in &entries {
        match load_sample_unchecked(&entry.image, &entry.mask, schema) {
            Ok(s) => corpus.push(s),
            Err(e) => problems.push(e.to_string()),
        }
    }
    for v in validate_corpus(&corpus, schema).violations {
        problems.push(format!("{}: {}", v.source_id, v.violation));
    }
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("violation: {p}");
        }
        write_text(run, "violations.txt", &(problems.join("\n") + "\n"))?;
        return Err(Failure::data(format!(
            "{} of {} samples are invalid",
            problems.len(),
            entries.len()
        )));
    }
    let dist = compute_class_distribution(&corpus, schema)?;
    write_text(run, "distribution.csv", &dist.to_csv(schema))?;
    let file = DistributionFile {
        samples: corpus.len(),
        total_pixels: dist.total_pixels,
        classes: schema
            .classes()
            .iter()
            .map(|c| ClassShare {
                id: c.id,
                name: &c.name,
                pixels: dist.pixels[c.id as usize],
                fraction: dist.fractions[c.id as usize],
            })
            .collect(),
        weights: [
            WeightScheme::InverseFrequency,
            WeightScheme::MedianFrequency,
            WeightScheme::Uniform,
        ]
        .into_iter()
        .map(|s| compute_class_weights(&dist, s))
        .collect(),
    };
    write_text(run, "distribution.json", &to_json(&file))?;
    println!("{} samples, {} pixels", corpus.len(), dist.total_pixels);
    for c in &file.classes {
        println!("{:<14}{:8.4}%", c.name, c.fraction * 100.0);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    n: Option<usize>,
    width: Option<u32>,
    height: Option<u32>,
    profile: Option<Vec<f64>>,
    noise_level: Option<f64>,
    seed: Option<u64>,
}

pub fn synth(root: &Path, args: SynthArgs) -> CmdResult {
    let mut run = Run::start("synth", root, args.out.clone())?;
    let result = synth_into(&mut run, &args);
    run.finish(result)
}

fn synth_into(run: &mut Run, args: &SynthArgs) -> CmdResult {
    let file: SynthFile = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SynthFile::default(),
    };
    let mut spec = CorpusSpec::new(
        args.n.or(file.n).unwrap_or(20),
        args.width.or(file.width).unwrap_or(128),
        args.height.or(file.height).unwrap_or(128),
        file.profile.as_deref().unwrap_or(&ROAD_PROFILE),
        args.seed.or(file.seed).unwrap_or(0),
    );
    if let Some(noise) = args.noise.or(file.noise_level) {
        spec.noise_level = noise;
    }
    run.set_config(args.config.clone(), Some(spec.seed));
    let corpus = generate_corpus(&spec)?;
    let manifest = write_corpus(run.dir(), &corpus, &LabelSchema::road())?;
    for name in ["images", "masks", "palette.json"] {
        run.artifact(run.dir().join(name));
    }
    run.artifact(manifest.clone());
    write_text(run, "corpus_spec.json", &to_json(&spec))?;
    println!(
        "wrote {} samples; manifest {}",
        corpus.len(),
        manifest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn relative_to(base: Option<&Path>, p: &str) -> PathBuf {
    match base {
        Some(dir) => dir.join(p),
        None => PathBuf::from(p),
    }
}

pub fn train(root: &Path, args: TrainArgs) -> CmdResult {
    let mut run = Run::start("train", root, args.out.clone())?;
    let result = train_into(&mut run, &args);
    run.finish(result)
}

fn train_into(run: &mut Run, args: &TrainArgs) -> CmdResult {
    let mut file = match (&args.config, &args.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig {
            preset: Some(name.clone()),
            ..RunConfig::default()
        },
        (None, None) => return Err(Failure::usage("train needs --config or --preset")),
    };
    if let Some(e) = args.encoder {
        file.encoder = Some(e.into());
    }
    if let Some(e) = args.epochs {
        file.epochs = Some(e);
    }
    file.final_mode |= args.final_mode;
    let base = args.config.as_deref().and_then(Path::parent);
    let manifest = match (&args.manifest, &file.manifest) {
        (Some(m), _) => m.clone(),
        (None, Some(m)) => relative_to(base, m),
        (None, None) => {
            return Err(Failure::usage(
                "no corpus manifest given (--manifest or `manifest` in the run file)",
            ))
        }
    };
    let schema = match (&args.schema, &file.schema) {
        (Some(s), _) => LabelSchema::load(s)?,
        (None, Some(s)) => LabelSchema::load(&relative_to(base, s))?,
        (None, None) => LabelSchema::road(),
    };
    let config = file.resolve(schema.len())?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    run.set_config(args.config.clone(), Some(seed));

    let corpus = roadseg::dataset::load_manifest(&manifest, &schema)?;
    write_text(run, "config.json", &to_json(&config))?;
    let stages = config.stages.len();
    let quiet = args.quiet;
    let mut progress = |r: &train::EpochRecord| {
        if !quiet {
            eprintln!(
                "stage {}/{stages} epoch {:>3}/{}: train loss {:.4}, validation loss {:.4}, accuracy {:.2}%",
                r.stage + 1,
                r.epoch,
                config.stages[r.stage].epochs,
                r.train_loss,
                r.validation_loss,
                r.validation_accuracy * 100.0
            );
        }
    };
    let outcome = run_configuration(&config, &corpus, &schema, seed, &mut progress)?;
    for (i, ck) in outcome.stage_checkpoints.iter().enumerate() {
        let path = run.dir().join(format!("stage{}.ckpt", i + 1));
        ck.save(&path)?;
        run.artifact(path);
    }
    let model_path = run.dir().join("model.ckpt");
    outcome.final_checkpoint.save(&model_path)?;
    run.artifact(model_path);
    write_history(run, &outcome.history, &schema)?;
    write_text(run, "split.json", &to_json(&outcome.split))?;
    write_text(run, "class_weights.json", &to_json(&outcome.class_weights))?;
    for path in render_all(&outcome.report, run.dir(), "report")? {
        run.artifact(path);
    }
    println!("{}", config.name);
    print!("{}", outcome.report.to_table());
    Ok(())
}

fn write_history(run: &mut Run, history: &TrainingHistory, schema: &LabelSchema) -> CmdResult {
    write_text(run, "history.csv", &history.to_csv(schema))?;
    write_text(run, "history.json", &to_json(history))
}

// ---------------------------------------------------------------------------
// eval / predict

fn load_checkpoint(path: &Path) -> CmdResult<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    if ck.model_config.num_classes != ck.schema.len() {
        return Err(Failure::data(format!(
            "{}: model predicts {} classes but its schema has {}",
            path.display(),
            ck.model_config.num_classes,
            ck.schema.len()
        )));
    }
    let model = ck.to_model()?;
    Ok((ck, model))
}

pub fn eval(root: &Path, args: EvalArgs) -> CmdResult {
    let mut run = Run::start("eval", root, args.out)?;
    let result = (|| {
        let (ck, model) = load_checkpoint(&args.checkpoint)?;
        let corpus = roadseg::dataset::load_manifest(&args.manifest, &ck.schema)?;
        let refs: Vec<&SegmentationSample> = corpus.iter().collect();
        let uniform = vec![1.0; ck.schema.len()];
        let e = evaluate(&model, &ck.normalization, &refs, 1, &uniform, 8)?;
        let name = args
            .name
            .clone()
            .unwrap_or_else(|| ck.training_meta.stage_name.clone());
        let report =
            derive_metrics_with(&e.matrix, args.total.into())?.with_names(name, &ck.schema);
        for path in render_all(&report, run.dir(), "report")? {
            run.artifact(path);
        }
        print!("{}", report.to_table());
        Ok(())
    })();
    run.finish(result)
}

pub fn predict(root: &Path, args: PredictArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(Failure::usage(format!(
            "--alpha must lie in [0, 1], got {}",
            args.alpha
        )));
    }
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let (mut run, out) = match args.out.clone() {
        Some(out) => {
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let out_stem = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| stem.clone());
            let manifest = dir.join(format!("{out_stem}.run.json"));
            (Run::with_manifest_path("predict", dir, manifest)?, out)
        }
        None => {
            let run = Run::start("predict", root, None)?;
            let out = run.dir().join(format!("{stem}_mask.png"));
            (run, out)
        }
    };
    let result = (|| {
        let (ck, model) = load_checkpoint(&args.checkpoint)?;
        let image = read_image(&args.image)?;
        let mask = predict_mask(&model, &ck.normalization, &image)?;
        write_mask(&out, &mask, &ck.schema)?;
        run.artifact(out.clone());
        let overlay_path = args.overlay.clone().unwrap_or_else(|| {
            let s = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.with_file_name(format!("{s}_overlay.png"))
        });
        write_image(
            &overlay_path,
            &overlay(&image, &mask, &ck.schema, args.alpha),
        )?;
        run.artifact(overlay_path);
        Ok(())
    })();
    run.finish(result)
}

// ---------------------------------------------------------------------------
// report

pub fn report(root: &Path, args: ReportArgs, formats: Vec<ReportFormat>) -> CmdResult {
    let mut run = Run::start("report", root, args.out)?;
    let result = (|| {
        let mut reports = Vec::with_capacity(args.reports.len());
        for path in &args.reports {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
            let r = MetricsReport::from_json(&text)
                .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
            reports.push((path, r));
        }
        for (i, (path, r)) in reports.iter().enumerate() {
            let base = if r.config_name.is_empty() {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            } else {
                r.config_name.clone()
            };
            let stem = format!("{:02}_{}", i + 1, base.replace(['/', '\\', ' '], "_"));
            for &f in &formats {
                run.artifact(render_report(r, f, run.dir(), &stem)?);
            }
            println!("{base}");
            print!("{}", r.to_table());
        }
        let all: Vec<MetricsReport> = reports.into_iter().map(|(_, r)| r).collect();
        write_text(&mut run, "comparison.csv", &comparison_csv(&all))
    })();
    run.finish(result)
}
