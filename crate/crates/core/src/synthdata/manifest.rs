use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Modality;
use super::io::{save_image, save_mask};
use super::phantom::{generate_phantom, PhantomConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train|val|test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub modality: Modality,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anatomy_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.case_id, e.split) {
                if prev != e.split {
                    return Err(Error::Config(format!(
                        "case `{}` appears in both {} and {}",
                        e.case_id,
                        prev.name(),
                        e.split.name()
                    )));
                }
                return Err(Error::Config(format!("duplicate case `{}`", e.case_id)));
            }
        }
        Ok(())
    }

    pub fn select(&self, modality: Modality, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.modality == modality && e.split == split)
            .collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn anatomy_seeds(&self, modality: Modality) -> BTreeSet<u64> {
        self.entries
            .iter()
            .filter(|e| e.modality == modality)
            .filter_map(|e| e.anatomy_seed)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Accepts either the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Manifest> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }
}

fn cbct_split(i: usize, cfg: &PhantomConfig) -> Split {
    let n_train = cfg.n_cbct - cfg.n_cbct_val - cfg.n_cbct_test;
    if i < n_train {
        Split::Train
    } else if i < n_train + cfg.n_cbct_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `images/` and `masks/` plus `manifest.json` under `out_dir`.
///
/// CBCT case `i` uses anatomy seed `anatomy_seed + i` and MRI case `j` uses
/// `anatomy_seed + n_cbct + j`, so the two modalities never share an anatomy.
pub fn generate_corpus(cfg: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    let mask_dir = out_dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let jobs = (0..cfg.n_cbct)
        .map(|i| {
            (
                Modality::Cbct,
                format!("cbct-{i:04}"),
                cfg.anatomy_seed + i as u64,
                cbct_split(i, cfg),
            )
        })
        .chain((0..cfg.n_mri).map(|j| {
            (
                Modality::Mri,
                format!("mri-{j:04}"),
                cfg.anatomy_seed + (cfg.n_cbct + j) as u64,
                Split::Train,
            )
        }));

    let mut entries = Vec::with_capacity(cfg.n_cbct + cfg.n_mri);
    for (modality, case_id, seed, split) in jobs {
        let (img, mask) = generate_phantom(seed, cfg, modality)?;
        let image_path = PathBuf::from("images").join(format!("{case_id}.cmi"));
        let mask_path = PathBuf::from("masks").join(format!("{case_id}.cms"));
        save_image(out_dir.join(&image_path), &img)?;
        save_mask(out_dir.join(&mask_path), &mask)?;
        entries.push(ManifestEntry {
            case_id,
            image_path,
            mask_path: Some(mask_path),
            modality,
            split,
            anatomy_seed: Some(seed),
        });
    }
    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}
