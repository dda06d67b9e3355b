//! Acceptance criteria. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line to
//! stderr (outside the test harness capture) and fails when its criterion fails.
//! Tests share one CPU lock so timings are not distorted by each other.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use candle_core::DType;
use cmedl::metrics::evaluate::{evaluate, load_eval_cases, EvalCase, Method};
use cmedl::metrics::*;
use cmedl::netgraph::{load_checkpoint, ModelBundle, Preset};
use cmedl::synthdata::{generate_corpus, Image, Manifest, Modality, PhantomConfig, Spacing, Split};
use cmedl::trainer::data::{load_cases, normalize, plan_epoch};
use cmedl::trainer::run::make_batch;
use cmedl::trainer::{tap_grids, train_on, translate, Corpus, RunOptions, SegmentMode, TapSource, TrainConfig, TrainMode, Trainer};
use common::losses::{gradient_suite, identity_checks, FD_TOLERANCE};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

static CPU: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {id:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn cpu() -> std::sync::MutexGuard<'static, ()> {
    CPU.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn c01_metric_oracle_equivalence() {
    let _g = cpu();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sdsc, mut worst_hd, mut dsc_mismatch) = (0f64, 0f64, 0usize);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let density = rng.gen_range(0.05..0.7);
        let a = random_mask(&mut rng, h, w, density, Spacing::UNIT);
        let b = random_mask(&mut rng, h, w, density, Spacing::UNIT);
        let (va, vb) = (VolumeMask::single(a.clone()), VolumeMask::single(b.clone()));
        dsc_mismatch += (dsc(&va, &vb).unwrap() != brute_dsc(&a, &b)) as usize;
        for tau in [0.0, 1.0, 2.5] {
            worst_sdsc = worst_sdsc.max((surface_dsc(&va, &vb, tau).unwrap() - brute_surface_dsc(&a, &b, tau)).abs());
        }
        if a.count() > 0 && b.count() > 0 {
            worst_hd = worst_hd.max((hd95(&va, &vb).unwrap() - brute_hd95(&a, &b)).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_sdsc <= 1e-9 && worst_hd <= 1e-9 && dsc_mismatch == 0 && secs < 60.0;
    report(1, "metric oracle equivalence", pass, &format!(
        "1000 pairs, max |sdsc diff| {worst_sdsc:e}, max |hd95 diff| {worst_hd:e}, dsc mismatches {dsc_mismatch}, {secs:.2}s"
    ));
}

#[test]
fn c02_gradient_suite() {
    let _g = cpu();
    let t = Instant::now();
    let suite = gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let worst = suite.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = suite.iter().all(|(_, e)| *e <= FD_TOLERANCE) && secs < 300.0;
    report(2, "gradient suite", pass, &format!(
        "{} losses, worst {} rel err {:e} (limit {FD_TOLERANCE:e}), {secs:.2}s", suite.len(), worst.0, worst.1
    ));
}

#[test]
fn c03_loss_identities() {
    let _g = cpu();
    let checks = identity_checks();
    let failed: Vec<String> = checks.iter().filter(|c| !c.1).map(|c| format!("{} ({})", c.0, c.2)).collect();
    let detail = if failed.is_empty() {
        checks.iter().map(|c| format!("{}: {}", c.0, c.2)).collect::<Vec<_>>().join("; ")
    } else {
        format!("failed: {}", failed.join("; "))
    };
    report(3, "loss identities", failed.is_empty(), &detail);
}

fn small_corpus(dir: &Path, n_cbct: usize) -> Manifest {
    let cfg = PhantomConfig { image_size: 32, n_cbct, n_mri: 24, n_cbct_val: 4, n_cbct_test: 4, tumor_radius_range: (3.0, 6.0), ..Default::default() };
    generate_corpus(&cfg, dir).unwrap()
}

fn tiny(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig { mode, preset: Preset::Tiny, seed, replay_pool: 8, ..Default::default() }
}

#[test]
fn c04_update_isolation() {
    let _g = cpu();
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(dir.path(), 108);
    let cfg = tiny(TrainMode::Cmedl, 3);
    let corpus = Corpus::load(&m, cfg.mode).unwrap();
    let mut tr = Trainer::new(cfg.clone(), DType::F32).unwrap();
    let plan = plan_epoch(cfg.seed, 1, corpus.cbct_train.len(), corpus.mri_train.len(), cfg.batch_size, Some(50));
    let mut violations = Vec::new();
    let changed = |a: &[(String, String)], b: &[(String, String)]| -> Vec<String> {
        a.iter().zip(b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect()
    };
    let expect = [vec!["g_c2m", "g_m2c"], vec!["d_m", "d_c"], vec!["s_teacher", "s_student"]];
    for s in 0..plan.cbct.len() {
        let b = make_batch(&corpus, &cfg, 1, s, &plan.cbct[s], Some(&plan.mri[s]), DType::F32).unwrap();
        let d0 = tr.bundle.digests().unwrap();
        let g = tr.generator_phase(&b).unwrap();
        let d1 = tr.bundle.digests().unwrap();
        tr.discriminator_phase(&b, &g).unwrap();
        let d2 = tr.bundle.digests().unwrap();
        tr.segmenter_phase(&b).unwrap();
        let d3 = tr.bundle.digests().unwrap();
        for (phase, (x, y)) in [(&d0, &d1), (&d1, &d2), (&d2, &d3)].iter().enumerate() {
            let got = changed(x, y);
            if got != expect[phase] {
                violations.push(format!("step {s} phase {phase}: {got:?}"));
            }
        }
    }
    let pass = violations.is_empty() && plan.cbct.len() == 50;
    report(4, "update isolation", pass, &format!(
        "{} steps x 3 phases hashed; violations: {}", plan.cbct.len(), if violations.is_empty() { "none".into() } else { violations.join(", ") }
    ));
}

// ---- shared desk-scale experiment for criteria 5 to 8 ----

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 6;
const STEPS_PER_EPOCH: usize = 150;
const DROPOUT_RUNS: usize = 10;
const SEP_PER_CLASS: usize = 100;

#[derive(Clone, Debug, Default)]
struct MethodOutcome {
    dsc: f64,
    hd95: f64,
    hd95_failures: usize,
    msd: f64,
    silhouette: f64,
    silhouette_cases: usize,
}

#[derive(Clone, Debug)]
struct SeedOutcome {
    seed: u64,
    cmedl: MethodOutcome,
    cbct: MethodOutcome,
    kl_pmri: f64,
    kl_cbct: f64,
}

struct Experiment {
    seeds: Vec<SeedOutcome>,
    seconds: f64,
}

fn normalized(img: &Image) -> Image {
    Image::new(img.height(), img.width(), normalize(img), img.spacing, img.modality).unwrap()
}

/// Empty predictions have no HD95; they are charged the frame diagonal.
fn method_outcome(bundle: &ModelBundle, cases: &[EvalCase], report: &MetricsReport, name: &str, seed: u64) -> MethodOutcome {
    let rows: Vec<_> = report.rows.iter().filter(|r| r.method == name).collect();
    let (h, w) = cases[0].truth.shape();
    let sp = cases[0].truth.spacing;
    let diag = ((h as f64 * sp.row as f64).powi(2) + (w as f64 * sp.col as f64).powi(2)).sqrt();
    let n = rows.len() as f64;
    let plain: Vec<_> = cases.iter().map(|c| c.case.clone()).collect();
    let sens = sensitivity_dropout(bundle, SegmentMode::Student, &plain, DropoutConfig { rate: 0.5, runs: DROPOUT_RUNS, seed }).unwrap();
    let mut sil = Vec::new();
    for (i, c) in plain.iter().enumerate() {
        let grids = tap_grids(bundle, c, TapSource::Student).unwrap();
        let opts = SeparabilityOptions { roi_size: None, per_class: SEP_PER_CLASS, seed: seed * 1000 + i as u64 };
        if let Ok((s, _)) = feature_separability(&grids, c.mask.as_ref().unwrap(), &opts) {
            sil.push(s);
        }
    }
    MethodOutcome {
        dsc: rows.iter().map(|r| r.dsc.unwrap_or(0.0)).sum::<f64>() / n,
        hd95: rows.iter().map(|r| r.hd95_mm.unwrap_or(diag)).sum::<f64>() / n,
        hd95_failures: rows.iter().filter(|r| r.hd95_mm.is_none()).count(),
        msd: sens.msd,
        silhouette: sil.iter().sum::<f64>() / sil.len().max(1) as f64,
        silhouette_cases: sil.len(),
    }
}

fn run_experiment() -> Experiment {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&PhantomConfig::default(), &dir.path().join("data")).unwrap();
    let test = load_eval_cases(&manifest, Split::Test).unwrap();
    let mri: Vec<Image> = load_cases(&manifest, Modality::Mri, Split::Train, None).unwrap().iter().map(|c| normalized(&c.image)).collect();
    let mri_refs: Vec<&Image> = mri.iter().collect();
    let cbct_norm: Vec<Image> = test.iter().map(|c| normalized(&c.case.image)).collect();
    let kl_cbct = kl_translation_fidelity(&cbct_norm.iter().collect::<Vec<_>>(), &mri_refs, 256).unwrap();

    let mut seeds = Vec::new();
    for &seed in &SEEDS {
        let mut trained = BTreeMap::new();
        for mode in [TrainMode::Cmedl, TrainMode::CbctOnly] {
            let cfg = TrainConfig {
                max_epochs: EPOCHS,
                early_stop_patience: EPOCHS,
                max_steps_per_epoch: Some(STEPS_PER_EPOCH),
                ..tiny(mode, seed)
            };
            let corpus = Corpus::load(&manifest, mode).unwrap();
            let out = train_on(&corpus, &cfg, &dir.path().join(format!("{}_{seed}", mode.name())), RunOptions::default()).unwrap();
            let bundle = load_checkpoint(&out.best, None, DType::F32).unwrap().bundle;
            trained.insert(mode.name(), bundle);
        }
        let (cm, cb) = (&trained["cmedl"], &trained["cbct_only"]);
        let methods = [
            Method { name: "cmedl".into(), bundle: cm, mode: SegmentMode::Student },
            Method { name: "cbct_only".into(), bundle: cb, mode: SegmentMode::Student },
        ];
        let rep = evaluate(&methods, &test, &[], DEFAULT_TAU_MM).unwrap();
        let pmri: Vec<Image> = test.iter().map(|c| translate(cm, &c.case.image).unwrap()).collect();
        let kl_pmri = kl_translation_fidelity(&pmri.iter().collect::<Vec<_>>(), &mri_refs, 256).unwrap();
        let outcome = SeedOutcome {
            seed,
            cmedl: method_outcome(cm, &test, &rep, "cmedl", seed),
            cbct: method_outcome(cb, &test, &rep, "cbct_only", seed),
            kl_pmri,
            kl_cbct,
        };
        let _ = std::io::stderr().write_all(format!("experiment seed {seed}: {outcome:?} ({:.0}s elapsed)\n", t.elapsed().as_secs_f64()).as_bytes());
        seeds.push(outcome);
    }
    Experiment { seeds, seconds: t.elapsed().as_secs_f64() }
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(run_experiment)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c05_segmentation_ordering() {
    let _g = cpu();
    let e = experiment();
    let (dc, db) = (mean(e.seeds.iter().map(|s| s.cmedl.dsc)), mean(e.seeds.iter().map(|s| s.cbct.dsc)));
    let (hc, hb) = (mean(e.seeds.iter().map(|s| s.cmedl.hd95)), mean(e.seeds.iter().map(|s| s.cbct.hd95)));
    let pass = dc >= db + 0.02 && hc <= hb && e.seconds <= 3600.0;
    report(5, "segmentation ordering", pass, &format!(
        "mean DSC cmedl {dc:.4} vs cbct_only {db:.4} (need +0.02); mean HD95 {hc:.2} vs {hb:.2} mm (empty predictions {} vs {}); per-seed DSC {:?}; experiment {:.0}s",
        e.seeds.iter().map(|s| s.cmedl.hd95_failures).sum::<usize>(),
        e.seeds.iter().map(|s| s.cbct.hd95_failures).sum::<usize>(),
        e.seeds.iter().map(|s| (s.seed, (s.cmedl.dsc * 1e4).round() / 1e4, (s.cbct.dsc * 1e4).round() / 1e4)).collect::<Vec<_>>(),
        e.seconds
    ));
}

#[test]
fn c06_translation_fidelity() {
    let _g = cpu();
    let e = experiment();
    let wins = e.seeds.iter().filter(|s| s.kl_pmri < s.kl_cbct).count();
    report(6, "translation fidelity", wins == e.seeds.len(), &format!(
        "KL(pMRI||MRI) per seed {:?} vs KL(CBCT||MRI) {:.4}",
        e.seeds.iter().map(|s| (s.kl_pmri * 1e4).round() / 1e4).collect::<Vec<_>>(),
        e.seeds[0].kl_cbct
    ));
}

#[test]
fn c07_dropout_sensitivity() {
    let _g = cpu();
    let e = experiment();
    let wins = e.seeds.iter().filter(|s| s.cmedl.msd <= s.cbct.msd).count();
    report(7, "dropout sensitivity", wins >= 2, &format!(
        "mSD cmedl <= cbct_only in {wins}/3 seeds: {:?}",
        e.seeds.iter().map(|s| ((s.cmedl.msd * 1e4).round() / 1e4, (s.cbct.msd * 1e4).round() / 1e4)).collect::<Vec<_>>()
    ));
}

#[test]
fn c08_feature_separability() {
    let _g = cpu();
    let e = experiment();
    let wins = e.seeds.iter().filter(|s| s.cmedl.silhouette > s.cbct.silhouette).count();
    report(8, "feature separability", wins >= 2, &format!(
        "silhouette cmedl > cbct_only in {wins}/3 seeds: {:?}",
        e.seeds.iter().map(|s| ((s.cmedl.silhouette * 1e4).round() / 1e4, (s.cbct.silhouette * 1e4).round() / 1e4, s.cmedl.silhouette_cases)).collect::<Vec<_>>()
    ));
}

#[test]
fn c09_statistics() {
    let _g = cpu();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    let mut trials = 0;
    for n in 5..=10 {
        for _ in 0..100 {
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-8i32..=8) as f64 * 0.25).collect();
            let got = wilcoxon_paired(&d, &vec![0.0; n]).unwrap().p_value;
            worst = worst.max((got - enumerated_wilcoxon_p(&d)).abs());
            trials += 1;
        }
    }
    let holm_cases: [(&[f64], &[f64]); 3] = [
        (&[0.01, 0.04, 0.03], &[0.03, 0.06, 0.06]),
        (&[0.01, 0.02, 0.03, 0.04], &[0.04, 0.06, 0.06, 0.06]),
        (&[0.04, 0.001, 0.03], &[0.06, 0.003, 0.06]),
    ];
    let holm_ok = holm_cases.iter().all(|(p, want)| holm_bonferroni(p).unwrap().iter().zip(*want).all(|(g, w)| (g - w).abs() < 1e-15));
    let six = wilcoxon_paired(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]).unwrap().p_value;
    let pass = worst < 1e-12 && holm_ok && six == 0.03125;
    report(9, "statistics", pass, &format!(
        "{trials} samples n=5..10 vs 2^n enumeration, max |p diff| {worst:e}; n=6 all-positive p={six}; Holm hand examples {}",
        if holm_ok { "match" } else { "differ" }
    ));
}

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn c10_reproducibility() {
    let _g = cpu();
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("data"), 24);
    let cfg = TrainConfig { max_epochs: 2, max_steps_per_epoch: Some(4), ..tiny(TrainMode::Cmedl, 5) };
    let corpus = Corpus::load(&m, cfg.mode).unwrap();
    let a = train_on(&corpus, &cfg, &dir.path().join("a"), RunOptions::default()).unwrap();
    let b = train_on(&corpus, &cfg, &dir.path().join("b"), RunOptions::default()).unwrap();
    let (ha, hb) = (hash_tree(&dir.path().join("a")), hash_tree(&dir.path().join("b")));
    let curves_equal = fs::read(&a.curve).unwrap() == fs::read(&b.curve).unwrap();
    let pass = curves_equal && ha == hb && ha.len() > 2;
    report(10, "reproducibility", pass, &format!(
        "loss curves identical: {curves_equal}; {} files hashed, identical: {}", ha.len(), ha == hb
    ));
}
