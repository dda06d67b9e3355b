use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use candle_core::DType;
use cmedl::metrics::evaluate::{evaluate, load_eval_cases, Method};
use cmedl::metrics::{feature_separability, kl_translation_fidelity, sensitivity_dropout};
use cmedl::metrics::separability::write_feature_table;
use cmedl::netgraph::{load_checkpoint, LoadedCheckpoint};
use cmedl::synthdata::{generate_corpus, load_image, save_image, save_mask, Image, Manifest, Modality, Split};
use cmedl::trainer::data::{load_cases, normalize};
use cmedl::trainer::{checkpoint_mode, segment, tap_grids, train_on, translate, Corpus, RunOptions, SegmentMode, TapSource, TrainMode};
use cmedl::Error;

use crate::config::RunConfig;
use crate::provenance;
use crate::{Cli, Command, Inputs};

/// 2 config, 3 I/O, 4 non-finite loss, 5 checkpoint/spec mismatch, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Io { .. } => 3,
                Error::NonFinite(_) => 4,
                Error::SpecMismatch(_) => 5,
                _ => continue,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn emit(key: &str, value: impl std::fmt::Display) {
    println!("{key}={value}");
}

struct Ctx {
    cfg: RunConfig,
    hints: bool,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn hint(&self, cmd: String) {
        if self.hints {
            emit("gnuplot", cmd);
        }
    }

    fn manifest_path(&self, data: &Option<PathBuf>) -> PathBuf {
        data.clone().unwrap_or_else(|| self.cfg.paths.manifest())
    }

    fn inputs<'a>(&'a self, extra: &[&'a Path]) -> Vec<&'a Path> {
        let mut v: Vec<&Path> = self.config_path.iter().map(|p| p.as_path()).collect();
        v.extend_from_slice(extra);
        v
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_split(inputs: &Inputs) -> Result<Split> {
    Ok(inputs.split.parse::<Split>()?)
}

fn load_model(dir: &Path) -> Result<LoadedCheckpoint> {
    load_checkpoint(dir, None, DType::F32).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn segment_mode(ck: &LoadedCheckpoint, flag: &Option<String>) -> Result<SegmentMode> {
    match flag {
        Some(s) => Ok(s.parse()?),
        None => Ok(SegmentMode::default_for(checkpoint_mode(&ck.meta)?)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// MRI training images in network intensity space, the reference for KL.
fn reference_mri(manifest: &Manifest) -> Result<Vec<Image>> {
    load_cases(manifest, Modality::Mri, Split::Train, None)?
        .iter()
        .map(|c| Ok(Image::new(c.image.height(), c.image.width(), normalize(&c.image), c.image.spacing, Modality::Mri)?))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(dir) = &cli.workdir {
        std::env::set_current_dir(dir).map_err(|e| Error::io(dir, e)).context("entering --workdir")?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx { cfg, hints: cli.gnuplot_hints, config_path: cli.config.clone() };
    match cli.command {
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
        Command::GenerateData { out } => generate_data(ctx, out),
        Command::Train { mode, out, data, seed, max_epochs, max_steps_per_epoch, translation_checkpoint, resume } => {
            let mut ctx = ctx;
            let t = &mut ctx.cfg.train;
            if let Some(m) = mode {
                t.mode = m.parse::<TrainMode>()?;
            }
            if let Some(s) = seed {
                ctx.cfg.seed = Some(s);
                ctx.cfg.apply_seed();
            }
            let t = &mut ctx.cfg.train;
            if let Some(e) = max_epochs {
                t.max_epochs = e;
            }
            if max_steps_per_epoch.is_some() {
                t.max_steps_per_epoch = max_steps_per_epoch;
            }
            if translation_checkpoint.is_some() {
                t.translation_checkpoint = translation_checkpoint;
            }
            train(ctx, out, data, resume)
        }
        Command::Translate { checkpoint, inputs, out } => translate_cmd(ctx, &checkpoint, &inputs, &out),
        Command::Segment { checkpoint, inputs, segment_mode, out } => segment_cmd(ctx, &checkpoint, &inputs, &segment_mode, &out),
        Command::Evaluate { methods, inputs, tau, out } => {
            let mut ctx = ctx;
            if let Some(t) = tau {
                ctx.cfg.metrics.tau_mm = t;
            }
            evaluate_cmd(ctx, &methods, &inputs, &out)
        }
        Command::Sensitivity { checkpoint, inputs, segment_mode, runs, rate, seed, out } => {
            let mut ctx = ctx;
            let m = &mut ctx.cfg.metrics;
            m.dropout_runs = runs.unwrap_or(m.dropout_runs);
            m.dropout_rate = rate.unwrap_or(m.dropout_rate);
            if let Some(s) = seed {
                ctx.cfg.seed = Some(s);
                ctx.cfg.apply_seed();
            }
            sensitivity_cmd(ctx, &checkpoint, &inputs, &segment_mode, &out)
        }
        Command::ExportFeatures { checkpoint, inputs, source, per_class, out } => {
            let mut ctx = ctx;
            if let Some(n) = per_class {
                ctx.cfg.metrics.separability_per_class = n;
            }
            export_features(ctx, &checkpoint, &inputs, &source, &out)
        }
    }
}

fn generate_data(ctx: Ctx, out: Option<PathBuf>) -> Result<()> {
    ctx.cfg.validate()?;
    let out = out.unwrap_or_else(|| ctx.cfg.paths.data_dir.clone());
    let manifest = generate_corpus(&ctx.cfg.phantom, &out)?;
    let path = out.join(cmedl::synthdata::manifest::MANIFEST_FILE);
    emit("manifest", path.display());
    emit("cases", manifest.entries.len());
    emit("corpus_sha256", provenance::tree_hash(&out)?);
    provenance::write(&out, "generate-data", &ctx.cfg, &ctx.inputs(&[]))?;
    Ok(())
}

fn train(ctx: Ctx, out: Option<PathBuf>, data: Option<PathBuf>, resume: bool) -> Result<()> {
    ctx.cfg.validate()?;
    let t = &ctx.cfg.train;
    let out = out.unwrap_or_else(|| ctx.cfg.paths.out_dir.join(format!("{}_seed{}", t.mode, t.seed)));
    let manifest_path = ctx.manifest_path(&data);
    let manifest = load_manifest(&manifest_path)?;
    let corpus = Corpus::load(&manifest, t.mode)?;
    let mut inputs = vec![manifest.root.as_path()];
    if let Some(p) = &t.translation_checkpoint {
        inputs.push(p.as_path());
    }
    provenance::write(&out, "train", &ctx.cfg, &ctx.inputs(&inputs))?;
    let res = train_on(&corpus, t, &out, RunOptions { resume, ..Default::default() })?;

    let mut epochs = String::from("epoch,train_loss,val_loss,val_dice\n");
    for r in &res.state.history {
        writeln!(epochs, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_dice)?;
    }
    let epochs_path = out.join("epochs.csv");
    write_file(&epochs_path, &epochs)?;

    let best = res.state.best_record().ok_or_else(|| anyhow!("training finished without a validated epoch"))?;
    println!("best_epoch={} val_dice={}", best.epoch, best.val_dice);
    emit("checkpoint", res.best.display());
    emit("last_checkpoint", res.last.display());
    emit("loss_curve", res.curve.display());
    emit("epochs", epochs_path.display());
    ctx.hint(format!(
        "set datafile separator ','; plot '{}' using 1:2 with lines title 'train', '' using 1:4 with lines title 'val dice'",
        epochs_path.display()
    ));
    ctx.hint(format!(
        "set datafile separator ','; set key autotitle columnhead; plot for [i=3:11] '{}' using 1:i with lines",
        res.curve.display()
    ));
    Ok(())
}

fn translate_cmd(ctx: Ctx, checkpoint: &Path, inputs: &Inputs, out: &Path) -> Result<()> {
    let split = load_split(inputs)?;
    let manifest_path = ctx.manifest_path(&inputs.data);
    let manifest = load_manifest(&manifest_path)?;
    let ck = load_model(checkpoint)?;
    create_dir(out)?;
    let mut pmri = Vec::new();
    let mut cbct = Vec::new();
    for e in manifest.select(Modality::Cbct, split) {
        let img = load_image(manifest.resolve(&e.image_path))?;
        let pm = translate(&ck.bundle, &img)?;
        save_image(out.join(format!("{}.cmi", e.case_id)), &pm)?;
        cbct.push(Image::new(img.height(), img.width(), normalize(&img), img.spacing, img.modality)?);
        pmri.push(pm);
    }
    emit("written", pmri.len());
    emit("out", out.display());
    let reference = reference_mri(&manifest)?;
    if !pmri.is_empty() && !reference.is_empty() {
        let r: Vec<&Image> = reference.iter().collect();
        let bins = ctx.cfg.metrics.kl_bins;
        emit("kl_pmri", kl_translation_fidelity(&pmri.iter().collect::<Vec<_>>(), &r, bins)?);
        emit("kl_cbct", kl_translation_fidelity(&cbct.iter().collect::<Vec<_>>(), &r, bins)?);
    }
    provenance::write(out, "translate", &ctx.cfg, &ctx.inputs(&[manifest.root.as_path(), checkpoint]))?;
    Ok(())
}

fn segment_cmd(ctx: Ctx, checkpoint: &Path, inputs: &Inputs, mode: &Option<String>, out: &Path) -> Result<()> {
    let split = load_split(inputs)?;
    let manifest = load_manifest(&ctx.manifest_path(&inputs.data))?;
    let ck = load_model(checkpoint)?;
    let mode = segment_mode(&ck, mode)?;
    create_dir(out)?;
    let mut n = 0;
    for e in manifest.select(Modality::Cbct, split) {
        let img = load_image(manifest.resolve(&e.image_path))?;
        let seg = segment(&ck.bundle, &img, mode)?;
        save_mask(out.join(format!("{}.cms", e.case_id)), &seg.mask)?;
        n += 1;
    }
    emit("written", n);
    emit("segment_mode", mode);
    emit("out", out.display());
    provenance::write(out, "segment", &ctx.cfg, &ctx.inputs(&[manifest.root.as_path(), checkpoint]))?;
    Ok(())
}

fn evaluate_cmd(ctx: Ctx, specs: &[String], inputs: &Inputs, out: &Path) -> Result<()> {
    ctx.cfg.validate()?;
    let split = load_split(inputs)?;
    let manifest = load_manifest(&ctx.manifest_path(&inputs.data))?;
    let mut named = Vec::new();
    for s in specs {
        let (name, path) = s
            .split_once('=')
            .filter(|(n, p)| !n.is_empty() && !p.is_empty())
            .ok_or_else(|| config_err(format!("--method expects name=checkpoint_dir, got `{s}`")))?;
        let ck = load_model(Path::new(path))?;
        let mode = segment_mode(&ck, &None)?;
        named.push((name.to_string(), PathBuf::from(path), ck, mode));
    }
    let methods: Vec<Method> =
        named.iter().map(|(n, _, ck, mode)| Method { name: n.clone(), bundle: &ck.bundle, mode: *mode }).collect();
    let cases = load_eval_cases(&manifest, split)?;
    let reference = reference_mri(&manifest)?;
    let report = evaluate(&methods, &cases, &reference, ctx.cfg.metrics.tau_mm)?;
    create_dir(out)?;
    let (csv, json) = report.write(out)?;
    emit("cases_csv", csv.display());
    emit("summary_json", json.display());
    emit("rows", report.rows.len());
    for (name, s) in &report.summary.per_method {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        emit(&format!("dsc.{name}"), fmt(s.dsc.mean));
        emit(&format!("sdsc.{name}"), fmt(s.sdsc.mean));
        emit(&format!("hd95_mm.{name}"), fmt(s.hd95_mm.mean));
    }
    ctx.hint(format!(
        "set datafile separator ','; set style data boxplot; plot '{}' using (1):3:(0):2 title 'DSC by method'",
        csv.display()
    ));
    let mut paths: Vec<&Path> = vec![manifest.root.as_path()];
    paths.extend(named.iter().map(|n| n.1.as_path()));
    provenance::write(out, "evaluate", &ctx.cfg, &ctx.inputs(&paths))?;
    Ok(())
}

fn sensitivity_cmd(ctx: Ctx, checkpoint: &Path, inputs: &Inputs, mode: &Option<String>, out: &Path) -> Result<()> {
    ctx.cfg.validate()?;
    let split = load_split(inputs)?;
    let manifest = load_manifest(&ctx.manifest_path(&inputs.data))?;
    let ck = load_model(checkpoint)?;
    let mode = segment_mode(&ck, mode)?;
    let cases: Vec<_> = load_eval_cases(&manifest, split)?.into_iter().map(|c| c.case).collect();
    let report = sensitivity_dropout(&ck.bundle, mode, &cases, ctx.cfg.dropout())?;
    create_dir(out)?;
    let json = out.join("sensitivity.json");
    write_file(&json, &serde_json::to_string_pretty(&report)?)?;
    let mut csv = String::from("case_id,sd");
    for r in 0..report.config.runs {
        write!(csv, ",dsc_run{r}")?;
    }
    csv.push('\n');
    for c in &report.cases {
        write!(csv, "{},{}", c.case_id, c.sd)?;
        for d in &c.dsc_runs {
            write!(csv, ",{d}")?;
        }
        csv.push('\n');
    }
    let csv_path = out.join("sensitivity_cases.csv");
    write_file(&csv_path, &csv)?;
    emit("msd", report.msd);
    emit("cases", report.cases.len());
    emit("sensitivity_json", json.display());
    emit("sensitivity_csv", csv_path.display());
    ctx.hint(format!(
        "set datafile separator ','; set style data histogram; plot '{}' using 2:xtic(1) title 'DSC SD under weight dropout'",
        csv_path.display()
    ));
    provenance::write(out, "sensitivity", &ctx.cfg, &ctx.inputs(&[manifest.root.as_path(), checkpoint]))?;
    Ok(())
}

fn export_features(ctx: Ctx, checkpoint: &Path, inputs: &Inputs, source: &str, out: &Path) -> Result<()> {
    ctx.cfg.validate()?;
    let split = load_split(inputs)?;
    let source: TapSource = source.parse()?;
    let manifest = load_manifest(&ctx.manifest_path(&inputs.data))?;
    let ck = load_model(checkpoint)?;
    let cases = load_eval_cases(&manifest, split)?;
    let opts = ctx.cfg.separability();
    let mut tables = Vec::new();
    let mut scores = String::from("case_id,silhouette\n");
    let mut tap_names = Vec::new();
    let mut total = 0.0;
    for (i, c) in cases.iter().enumerate() {
        let grids = tap_grids(&ck.bundle, &c.case, source)?;
        if tap_names.is_empty() {
            tap_names = grids.iter().map(|g| g.name.clone()).collect();
        }
        let mask = c.case.mask.as_ref().ok_or_else(|| anyhow!("case {} has no mask", c.case.id))?;
        let case_opts = cmedl::metrics::SeparabilityOptions { seed: opts.seed.wrapping_add(i as u64), ..opts };
        match feature_separability(&grids, mask, &case_opts) {
            Ok((score, samples)) => {
                writeln!(scores, "{},{score}", c.case.id)?;
                total += score;
                tables.push((c.case.id.clone(), samples));
            }
            Err(e) => log::warn!("skipping {}: {e}", c.case.id),
        }
    }
    if tables.is_empty() {
        return Err(Error::Metric("no case had enough pixels of both classes".into()).into());
    }
    create_dir(out)?;
    let table = out.join("features.cmft");
    let header = write_feature_table(&table, &tap_names, &tables)?;
    let scores_path = out.join("separability.csv");
    write_file(&scores_path, &scores)?;
    emit("silhouette_mean", total / tables.len() as f64);
    emit("scored_cases", tables.len());
    emit("records", header.records);
    emit("features", table.display());
    emit("scores_csv", scores_path.display());
    provenance::write(out, "export-features", &ctx.cfg, &ctx.inputs(&[manifest.root.as_path(), checkpoint]))?;
    Ok(())
}
