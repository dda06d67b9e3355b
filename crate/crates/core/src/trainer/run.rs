//! Epoch loop with validation, early stopping, checkpoints and the loss curve.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, TrainMode};
use super::data::{
    derive_seed, image_batch, load_cases, mask_batch, plan_epoch, prepare, require_nonempty, Case,
};
use super::infer::{predict_cases, threshold, SegmentMode};
use super::pool::PoolState;
use super::step::{Batch, Trainer};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::dsc2d;
use crate::netgraph::{load_checkpoint, save_checkpoint, Adam, ModelBundle};
use crate::synthdata::{Manifest, Modality, Split};

pub const CURVE_FILE: &str = "loss_curve.csv";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
const VAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted total over the epoch's steps.
    pub train_loss: f64,
    /// 1 - mean validation DSC.
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Records an epoch; returns whether it is the new best.
    pub fn accept(&mut self, rec: EpochRecord) -> bool {
        let improved = self.best_val_loss.map_or(true, |b| rec.val_loss < b);
        self.epoch = rec.epoch;
        if improved {
            self.best_val_loss = Some(rec.val_loss);
            self.best_epoch = Some(rec.epoch);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.history.push(rec);
        improved
    }

    pub fn should_stop(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.max_epochs || self.epochs_since_improvement >= cfg.early_stop_patience
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        let e = self.best_epoch?;
        self.history.iter().find(|r| r.epoch == e)
    }
}

/// Cropped cases a run draws from.
pub struct Corpus {
    pub cbct_train: Vec<Case>,
    pub cbct_val: Vec<Case>,
    pub mri_train: Vec<Case>,
}

impl Corpus {
    pub fn load(manifest: &Manifest, mode: TrainMode) -> Result<Self> {
        let corpus = Corpus {
            cbct_train: load_cases(manifest, Modality::Cbct, Split::Train, None)?,
            cbct_val: load_cases(manifest, Modality::Cbct, Split::Val, None)?,
            mri_train: if mode == TrainMode::Cmedl {
                load_cases(manifest, Modality::Mri, Split::Train, None)?
            } else {
                Vec::new()
            },
        };
        require_nonempty(&corpus.cbct_train, "CBCT train")?;
        require_nonempty(&corpus.cbct_val, "CBCT val")?;
        if mode == TrainMode::Cmedl {
            require_nonempty(&corpus.mri_train, "MRI train")?;
        }
        Ok(corpus)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub best: PathBuf,
    pub last: PathBuf,
    pub curve: PathBuf,
    pub state: TrainState,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub dtype: DType,
    /// Continue from `<out>/last` when it exists.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            dtype: DType::F32,
            resume: false,
        }
    }
}

pub fn train(manifest: &Manifest, cfg: &TrainConfig, out: &Path) -> Result<TrainOutput> {
    let corpus = Corpus::load(manifest, cfg.mode)?;
    train_on(&corpus, cfg, out, RunOptions::default())
}

/// Single-segmenter comparison runs; any mode except `cmedl`.
pub fn train_baseline(manifest: &Manifest, cfg: &TrainConfig, out: &Path) -> Result<TrainOutput> {
    if cfg.mode == TrainMode::Cmedl {
        return Err(Error::Config("train_baseline needs a baseline mode, not cmedl".into()));
    }
    train(manifest, cfg, out)
}

/// Builds the batch of step `step` of `epoch`. Augmentation seeds depend only on the
/// position in the schedule, so every mode sees the same CBCT batches.
pub fn make_batch(
    corpus: &Corpus,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
    cbct: &[usize],
    mri: Option<&[usize]>,
    dtype: DType,
) -> Result<Batch> {
    let aug = |tag: &str, j: usize| {
        cfg.augmentation
            .then(|| derive_seed(cfg.seed, tag, &[epoch as u64, step as u64, j as u64]))
    };
    let load = |cases: &[Case], idx: &[usize], tag: &str| -> Result<(Tensor, Tensor)> {
        let pairs = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| prepare(&cases[i], aug(tag, j)))
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<_> = pairs.iter().map(|p| &p.0).collect();
        let masks: Vec<_> = pairs.iter().map(|p| &p.1).collect();
        Ok((image_batch(&imgs, dtype)?, mask_batch(&masks, dtype)?))
    };
    let (xc, yc) = load(&corpus.cbct_train, cbct, "aug_cbct")?;
    let (xm, ym) = match mri {
        Some(idx) => {
            let (x, y) = load(&corpus.mri_train, idx, "aug_mri")?;
            (Some(x), Some(y))
        }
        None => (None, None),
    };
    Ok(Batch { xc, yc, xm, ym })
}

/// Mean DSC of the active segmenter over `cases` (cropped frame, threshold 0.5).
pub fn validate(bundle: &ModelBundle, mode: TrainMode, cases: &[Case]) -> Result<f64> {
    let probs = predict_cases(bundle, SegmentMode::default_for(mode), cases, VAL_CHUNK)?;
    let mut sum = 0.0;
    for (case, p) in cases.iter().zip(&probs) {
        let (h, w) = case.image.shape();
        let pred = threshold(p, h, w, &case.image)?;
        let gt = case
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config(format!("validation case {} has no mask", case.id)))?;
        sum += dsc2d(&pred, gt)?;
    }
    Ok(sum / cases.len() as f64)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn curve_header() -> Vec<String> {
    let mut h = vec!["step".to_string(), "epoch".into(), "split".into()];
    h.extend(LossReport::COLUMNS.iter().map(|s| s.to_string()));
    h.push("val_dice".into());
    h
}

/// Rewrites the curve keeping only rows of completed epochs.
fn truncate_curve(path: &Path, epochs: usize) -> Result<()> {
    let mut keep = Vec::new();
    if path.exists() {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let epoch: usize = rec
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad epoch column", path.display())))?;
            if epoch <= epochs {
                keep.push(rec);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(curve_header()).map_err(|e| csv_err(path, e))?;
    for rec in keep {
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn open_curve(path: &Path) -> Result<csv::Writer<File>> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

fn checkpoint_state(tr: &Trainer, state: &TrainState) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut extra = Vec::new();
    let mut steps = serde_json::Map::new();
    let opts: [(&str, Option<&Adam>); 3] =
        [("g", tr.opt_g.as_ref()), ("d", tr.opt_d.as_ref()), ("s", Some(&tr.opt_s))];
    for (name, opt) in opts {
        if let Some(o) = opt {
            extra.extend(o.export(&format!("opt.{name}"))?);
            steps.insert(name.into(), o.step.into());
        }
    }
    let (pm, tm) = tr.pool_m.export("pool.m");
    let (pc, tc) = tr.pool_c.export("pool.c");
    extra.extend(tm);
    extra.extend(tc);
    let json = serde_json::json!({
        "config": tr.cfg,
        "train_state": state,
        "optimizer_steps": steps,
        "pools": { "m": pm, "c": pc },
    });
    Ok((json, extra))
}

fn save(tr: &Trainer, state: &TrainState, dir: &Path) -> Result<()> {
    let (json, extra) = checkpoint_state(tr, state)?;
    save_checkpoint(dir, &tr.bundle, extra, json)
}

fn restore(tr: &mut Trainer, dir: &Path) -> Result<TrainState> {
    let loaded = load_checkpoint(dir, Some(&tr.cfg.bundle_spec()), tr.dtype())?;
    let st = &loaded.meta.state;
    let stored: TrainConfig = serde_json::from_value(st["config"].clone())?;
    let mut want = tr.cfg.clone();
    want.max_epochs = stored.max_epochs;
    if stored != want {
        return Err(Error::SpecMismatch(format!(
            "{} was written with a different training configuration",
            dir.display()
        )));
    }
    let lookup = |k: &str| loaded.tensors.get(k).cloned();
    tr.bundle.import(&lookup)?;
    let steps: HashMap<String, u64> = serde_json::from_value(st["optimizer_steps"].clone())?;
    let step_of = |n: &str| {
        steps
            .get(n)
            .copied()
            .ok_or_else(|| Error::SpecMismatch(format!("checkpoint lacks optimizer `{n}` state")))
    };
    if let Some(o) = tr.opt_g.as_mut() {
        o.import("opt.g", step_of("g")?, &lookup)?;
    }
    if let Some(o) = tr.opt_d.as_mut() {
        o.import("opt.d", step_of("d")?, &lookup)?;
    }
    tr.opt_s.import("opt.s", step_of("s")?, &lookup)?;
    let pm: PoolState = serde_json::from_value(st["pools"]["m"].clone())?;
    let pc: PoolState = serde_json::from_value(st["pools"]["c"].clone())?;
    tr.pool_m.import("pool.m", &pm, &lookup)?;
    tr.pool_c.import("pool.c", &pc, &lookup)?;
    Ok(serde_json::from_value(st["train_state"].clone())?)
}

fn fmt_row(step: u64, epoch: usize, split: &str, values: Option<[f64; 9]>, dice: Option<f64>) -> Vec<String> {
    let mut row = vec![step.to_string(), epoch.to_string(), split.to_string()];
    match values {
        Some(v) => row.extend(v.iter().map(|x| x.to_string())),
        None => row.extend(std::iter::repeat(String::new()).take(9)),
    }
    row.push(dice.map(|d| d.to_string()).unwrap_or_default());
    row
}

pub fn train_on(corpus: &Corpus, cfg: &TrainConfig, out: &Path, opts: RunOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.cbct_train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "CBCT train split has {} cases, fewer than batch_size {}",
            corpus.cbct_train.len(),
            cfg.batch_size
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let curve = out.join(CURVE_FILE);
    let (best_dir, last_dir) = (out.join(BEST_DIR), out.join(LAST_DIR));
    let mut tr = Trainer::new(cfg.clone(), opts.dtype)?;
    let mut state = TrainState::default();
    if opts.resume && last_dir.join(crate::netgraph::bundle::META_FILE).exists() {
        state = restore(&mut tr, &last_dir)?;
        truncate_curve(&curve, state.epoch)?;
    } else {
        if curve.exists() {
            fs::remove_file(&curve).map_err(|e| Error::io(&curve, e))?;
        }
        truncate_curve(&curve, 0)?;
    }
    let mut writer = open_curve(&curve)?;
    let cmedl = cfg.mode == TrainMode::Cmedl;

    while !state.should_stop(cfg) {
        let epoch = state.epoch + 1;
        let plan = plan_epoch(
            cfg.seed,
            epoch,
            corpus.cbct_train.len(),
            if cmedl { corpus.mri_train.len() } else { 0 },
            cfg.batch_size,
            cfg.max_steps_per_epoch,
        );
        let mut total = 0.0;
        for (s, idx) in plan.cbct.iter().enumerate() {
            let mri = cmedl.then(|| plan.mri[s].as_slice());
            let batch = make_batch(corpus, cfg, epoch, s, idx, mri, opts.dtype)?;
            let report = tr.step(&batch)?;
            state.step += 1;
            total += report.total;
            writer
                .write_record(fmt_row(state.step, epoch, "train", Some(report.values()), None))
                .map_err(|e| csv_err(&curve, e))?;
        }
        let val_dice = validate(&tr.bundle, cfg.mode, &corpus.cbct_val)?;
        writer
            .write_record(fmt_row(state.step, epoch, "val", None, Some(val_dice)))
            .map_err(|e| csv_err(&curve, e))?;
        writer.flush().map_err(|e| Error::io(&curve, e))?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / plan.cbct.len() as f64,
            val_loss: 1.0 - val_dice,
            val_dice,
        };
        log::info!(
            "epoch {epoch}: train_loss={:.4} val_dice={val_dice:.4}",
            rec.train_loss
        );
        if state.accept(rec) {
            save(&tr, &state, &best_dir)?;
        }
        save(&tr, &state, &last_dir)?;
    }
    Ok(TrainOutput {
        best: best_dir,
        last: last_dir,
        curve,
        state,
    })
}
