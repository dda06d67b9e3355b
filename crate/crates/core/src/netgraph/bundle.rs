//! The set of networks trained together, and its checkpoint format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::extractor::CxExtractor;
use super::nets::{Generator, Network, PatchDiscriminator};
use super::segnets::{DenseFcn, Unet};
use super::spec::{BundleSpec, NetKind, NetSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "checkpoint.json";

pub fn build_segmenter(
    spec: &NetSpec,
    dtype: DType,
    seed: u64,
    role: &str,
) -> Result<Box<dyn Network>> {
    Ok(match spec.kind {
        NetKind::Unet => Box::new(Unet::new(spec, dtype, seed, role)?),
        NetKind::Densefcn => Box::new(DenseFcn::new(spec, dtype, seed, role)?),
        other => return Err(Error::Config(format!("{other:?} is not a segmenter"))),
    })
}

/// The two generators and two discriminators of the translation stage.
pub struct Translation {
    pub g_c2m: Generator,
    pub g_m2c: Generator,
    pub d_m: PatchDiscriminator,
    pub d_c: PatchDiscriminator,
}

/// Which sub-networks a bundle carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub translation: bool,
    pub teacher: bool,
    pub student: bool,
}

impl Components {
    pub const ALL: Components = Components {
        translation: true,
        teacher: true,
        student: true,
    };
}

pub struct ModelBundle {
    pub spec: BundleSpec,
    pub seed: u64,
    pub translation: Option<Translation>,
    pub s_teacher: Option<Box<dyn Network>>,
    pub s_student: Option<Box<dyn Network>>,
    /// Only built alongside the translation stage.
    pub cx_extractor: Option<CxExtractor>,
}

impl ModelBundle {
    /// Every network draws its initial weights from `(seed, role)`, so a component
    /// starts identically whatever else the bundle contains.
    pub fn new(spec: &BundleSpec, components: Components, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let translation = if components.translation {
            Some(Translation {
                g_c2m: Generator::new(&spec.generator, dtype, seed, "g_c2m")?,
                g_m2c: Generator::new(&spec.generator, dtype, seed, "g_m2c")?,
                d_m: PatchDiscriminator::new(&spec.discriminator, dtype, seed, "d_m")?,
                d_c: PatchDiscriminator::new(&spec.discriminator, dtype, seed, "d_c")?,
            })
        } else {
            None
        };
        let cx_extractor = match components.translation {
            true => Some(CxExtractor::new(&spec.cx_extractor, dtype, seed)?),
            false => None,
        };
        let seg = |on: bool, role: &str| -> Result<Option<Box<dyn Network>>> {
            if on {
                Ok(Some(build_segmenter(&spec.segmenter, dtype, seed, role)?))
            } else {
                Ok(None)
            }
        };
        Ok(ModelBundle {
            spec: spec.clone(),
            seed,
            translation,
            s_teacher: seg(components.teacher, "s_teacher")?,
            s_student: seg(components.student, "s_student")?,
            cx_extractor,
        })
    }

    pub fn components(&self) -> Components {
        Components {
            translation: self.translation.is_some(),
            teacher: self.s_teacher.is_some(),
            student: self.s_student.is_some(),
        }
    }

    /// Named networks in a fixed order.
    pub fn networks(&self) -> Vec<(&'static str, &dyn Network)> {
        let mut out: Vec<(&'static str, &dyn Network)> = Vec::new();
        if let Some(t) = &self.translation {
            out.push(("g_c2m", &t.g_c2m));
            out.push(("g_m2c", &t.g_m2c));
            out.push(("d_m", &t.d_m));
            out.push(("d_c", &t.d_c));
        }
        if let Some(s) = &self.s_teacher {
            out.push(("s_teacher", s.as_ref()));
        }
        if let Some(s) = &self.s_student {
            out.push(("s_student", s.as_ref()));
        }
        if let Some(cx) = &self.cx_extractor {
            out.push(("cx_extractor", cx));
        }
        out
    }

    pub fn network(&self, name: &str) -> Option<&dyn Network> {
        self.networks()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, n)| n)
    }

    pub fn translation(&self) -> Result<&Translation> {
        self.translation
            .as_ref()
            .ok_or_else(|| Error::SpecMismatch("bundle has no translation networks".into()))
    }

    pub fn teacher(&self) -> Result<&dyn Network> {
        self.s_teacher
            .as_deref()
            .ok_or_else(|| Error::SpecMismatch("bundle has no teacher segmenter".into()))
    }

    pub fn student(&self) -> Result<&dyn Network> {
        self.s_student
            .as_deref()
            .ok_or_else(|| Error::SpecMismatch("bundle has no student segmenter".into()))
    }

    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.networks()
            .into_iter()
            .flat_map(|(name, net)| net.store().export(name))
            .collect()
    }

    pub fn import(&self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, net) in self.networks() {
            net.store().import(name, lookup)?;
        }
        Ok(())
    }

    /// Digest per network, for isolation and reproducibility checks.
    pub fn digests(&self) -> Result<Vec<(String, String)>> {
        self.networks()
            .into_iter()
            .map(|(n, net)| Ok((n.to_string(), net.store().digest()?)))
            .collect()
    }
}

/// Sidecar describing a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub bundle: BundleSpec,
    pub components: Components,
    pub seed: u64,
    /// Trainer-owned state (loss weights, counters, RNG states, config).
    #[serde(default)]
    pub state: serde_json::Value,
}

/// Writes `weights.safetensors` (bundle tensors plus `extra`) and `checkpoint.json`.
pub fn save_checkpoint(
    dir: &Path,
    bundle: &ModelBundle,
    extra: Vec<(String, Tensor)>,
    state: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut map: HashMap<String, Tensor> = bundle.export().into_iter().collect();
    for (k, t) in extra {
        if map.insert(k.clone(), t).is_some() {
            return Err(Error::Config(format!("duplicate checkpoint key `{k}`")));
        }
    }
    let weights = dir.join(WEIGHTS_FILE);
    candle_core::safetensors::save(&map, &weights)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        bundle: bundle.spec.clone(),
        components: bundle.components(),
        seed: bundle.seed,
        state,
    };
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub struct LoadedCheckpoint {
    pub bundle: ModelBundle,
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::SpecMismatch(format!(
            "checkpoint format {} (expected {CHECKPOINT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Restores a bundle. With `expected`, the stored architecture must match it exactly.
pub fn load_checkpoint(
    dir: &Path,
    expected: Option<&BundleSpec>,
    dtype: DType,
) -> Result<LoadedCheckpoint> {
    let meta = read_meta(dir)?;
    if let Some(want) = expected {
        if *want != meta.bundle {
            return Err(Error::SpecMismatch(describe_mismatch(want, &meta.bundle)));
        }
    }
    let bundle = ModelBundle::new(&meta.bundle, meta.components, meta.seed, dtype)?;
    let weights = dir.join(WEIGHTS_FILE);
    if !weights.exists() {
        return Err(Error::io(
            &weights,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let tensors = candle_core::safetensors::load(&weights, &Device::Cpu)?;
    bundle.import(&|k| tensors.get(k).cloned())?;
    Ok(LoadedCheckpoint {
        bundle,
        meta,
        tensors,
    })
}

fn describe_mismatch(want: &BundleSpec, got: &BundleSpec) -> String {
    let pairs = [
        ("generator", &want.generator, &got.generator),
        ("discriminator", &want.discriminator, &got.discriminator),
        ("segmenter", &want.segmenter, &got.segmenter),
        ("cx_extractor", &want.cx_extractor, &got.cx_extractor),
    ];
    for (name, w, g) in pairs {
        if w != g {
            return format!(
                "{name}: requested {}, checkpoint has {}",
                serde_json::to_string(w).unwrap_or_default(),
                serde_json::to_string(g).unwrap_or_default()
            );
        }
    }
    "architectures differ".into()
}
