//! Procedural two-modality thorax-like phantoms.
//!
//! Geometry (body ellipse, one lobulated tumor, elongated distractor structures) is drawn
//! from the anatomy seed alone, so every modality renders the same anatomy. Intensities
//! and noise are modality-specific: the MRI rendering separates tumor from distractors,
//! the CBCT rendering makes them look alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::{Image, Mask, Modality, Spacing};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 100;
const BODY_INTENSITY: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub n_cbct: usize,
    pub n_mri: usize,
    /// CBCT cases assigned to the validation split; the rest of the CBCT cases are
    /// split between test (`n_cbct_test`) and train.
    pub n_cbct_val: usize,
    pub n_cbct_test: usize,
    pub anatomy_seed: u64,
    pub noise_cbct: f32,
    pub noise_mri: f32,
    pub contrast_cbct: f32,
    pub contrast_mri: f32,
    pub tumor_radius_range: (f32, f32),
    pub n_distractors: usize,
    pub spacing: (f32, f32),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 64,
            n_cbct: 420,
            n_mri: 200,
            n_cbct_val: 60,
            n_cbct_test: 60,
            anatomy_seed: 1,
            noise_cbct: 0.15,
            noise_mri: 0.05,
            contrast_cbct: 0.2,
            contrast_mri: 0.8,
            tumor_radius_range: (5.0, 9.0),
            n_distractors: 3,
            spacing: (1.0, 1.0),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} < 32", self.image_size));
        }
        if !(self.contrast_mri > self.contrast_cbct) {
            return bad(format!(
                "contrast_mri ({}) must exceed contrast_cbct ({})",
                self.contrast_mri, self.contrast_cbct
            ));
        }
        if self.contrast_cbct < 0.0 || self.noise_cbct < 0.0 || self.noise_mri < 0.0 {
            return bad("contrast and noise levels must be non-negative".into());
        }
        let (lo, hi) = self.tumor_radius_range;
        if !(lo >= 1.0 && hi >= lo && hi < self.image_size as f32 * 0.25) {
            return bad(format!(
                "tumor_radius_range ({lo}, {hi}) must satisfy 1 <= min <= max < image_size/4"
            ));
        }
        if self.n_cbct_val + self.n_cbct_test > self.n_cbct {
            return bad(format!(
                "val ({}) + test ({}) exceed n_cbct ({})",
                self.n_cbct_val, self.n_cbct_test, self.n_cbct
            ));
        }
        Spacing::new(self.spacing.0, self.spacing.1).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn spacing(&self) -> Spacing {
        Spacing {
            row: self.spacing.0,
            col: self.spacing.1,
        }
    }

    fn contrast(&self, modality: Modality) -> f32 {
        match modality {
            Modality::Mri | Modality::Pmri => self.contrast_mri,
            Modality::Cbct | Modality::Pcbct => self.contrast_cbct,
        }
    }

    fn noise(&self, modality: Modality) -> f32 {
        match modality {
            Modality::Mri | Modality::Pmri => self.noise_mri,
            Modality::Cbct | Modality::Pcbct => self.noise_cbct,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cr: f32,
    cc: f32,
    a: f32,
    b: f32,
    angle: f32,
}

impl Ellipse {
    fn contains(&self, r: f32, c: f32) -> bool {
        let (s, co) = self.angle.sin_cos();
        let dr = r - self.cr;
        let dc = c - self.cc;
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cr: f32,
    cc: f32,
    radius: f32,
    lobes: u32,
    lobe_amp: f32,
    phase: f32,
}

impl Blob {
    fn contains(&self, r: f32, c: f32) -> bool {
        let dr = r - self.cr;
        let dc = c - self.cc;
        let theta = dr.atan2(dc);
        let rad =
            self.radius * (1.0 + self.lobe_amp * (self.lobes as f32 * theta + self.phase).sin());
        dr * dr + dc * dc <= rad * rad
    }
}

struct Anatomy {
    body: Ellipse,
    tumor: Blob,
    distractors: Vec<Ellipse>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn sample_anatomy(seed: u64, cfg: &PhantomConfig) -> Result<Anatomy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size as f32;
    let mid = (s - 1.0) / 2.0;
    let body = Ellipse {
        cr: mid + uniform(&mut rng, -0.03, 0.03) * s,
        cc: mid + uniform(&mut rng, -0.03, 0.03) * s,
        a: uniform(&mut rng, 0.30, 0.36) * s,
        b: uniform(&mut rng, 0.38, 0.44) * s,
        angle: uniform(&mut rng, -0.15, 0.15),
    };

    let tumor = place_tumor(&mut rng, &body, cfg)?;
    let rmax = cfg.tumor_radius_range.1;

    let mut distractors = Vec::with_capacity(cfg.n_distractors);
    for _ in 0..cfg.n_distractors {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let len = uniform(&mut rng, 0.8, 1.4) * rmax;
            let e = Ellipse {
                cr: uniform(&mut rng, body.cr - body.a, body.cr + body.a),
                cc: uniform(&mut rng, body.cc - body.b, body.cc + body.b),
                a: len,
                b: len * uniform(&mut rng, 0.3, 0.45),
                angle: uniform(&mut rng, 0.0, std::f32::consts::PI),
            };
            let margin = rmax * 0.5;
            let clear =
                (e.cr - tumor.cr).hypot(e.cc - tumor.cc) > tumor.radius * 1.25 + e.a + margin;
            let inside = [(-e.a, 0.0), (e.a, 0.0), (0.0, -e.a), (0.0, e.a)]
                .iter()
                .all(|&(dr, dc)| body.contains(e.cr + dr, e.cc + dc));
            if clear && inside {
                distractors.push(e);
                break;
            }
        }
    }
    Ok(Anatomy {
        body,
        tumor,
        distractors,
    })
}

fn place_tumor(rng: &mut ChaCha8Rng, body: &Ellipse, cfg: &PhantomConfig) -> Result<Blob> {
    let (rmin, rmax) = cfg.tumor_radius_range;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let candidate = Blob {
            cr: uniform(rng, body.cr - body.a, body.cr + body.a),
            cc: uniform(rng, body.cc - body.b, body.cc + body.b),
            radius: uniform(rng, rmin, rmax),
            lobes: rng.gen_range(2..5),
            lobe_amp: uniform(rng, 0.05, 0.2),
            phase: uniform(rng, 0.0, std::f32::consts::TAU),
        };
        if blob_inside(&candidate, body, cfg.image_size) {
            return Ok(candidate);
        }
    }
    Err(Error::Generation(format!(
        "tumor could not be placed inside the body after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn blob_inside(blob: &Blob, body: &Ellipse, size: usize) -> bool {
    let reach = blob.radius * (1.0 + blob.lobe_amp) + 1.0;
    let r0 = (blob.cr - reach).floor().max(0.0) as usize;
    let c0 = (blob.cc - reach).floor().max(0.0) as usize;
    let r1 = ((blob.cr + reach).ceil() as usize).min(size - 1);
    let c1 = ((blob.cc + reach).ceil() as usize).min(size - 1);
    if blob.cr - reach < 0.0 || blob.cc - reach < 0.0 {
        return false;
    }
    let mut any = false;
    for r in r0..=r1 {
        for c in c0..=c1 {
            if blob.contains(r as f32, c as f32) {
                any = true;
                // keep one pixel of body around the tumor
                let ring = [(0.0, 0.0), (-1.5, 0.0), (1.5, 0.0), (0.0, -1.5), (0.0, 1.5)];
                if !ring
                    .iter()
                    .all(|&(dr, dc)| body.contains(r as f32 + dr, c as f32 + dc))
                {
                    return false;
                }
            }
        }
    }
    any && (blob.cr + reach) < size as f32 && (blob.cc + reach) < size as f32
}

/// Per-modality tissue offsets relative to the body intensity.
fn distractor_offset(modality: Modality, cfg: &PhantomConfig) -> f32 {
    match modality {
        // distractors read as dark flow voids on MRI
        Modality::Mri | Modality::Pmri => -0.35,
        // and as tumor-like soft tissue on CBCT
        Modality::Cbct | Modality::Pcbct => cfg.contrast_cbct * 0.85,
    }
}

fn noise_rng(seed: u64, modality: Modality) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + modality.tag() as u64);
    rng
}

/// Renders the anatomy drawn from `seed` in the given modality. Deterministic in
/// `(seed, cfg, modality)`; the mask depends only on `(seed, cfg)`.
pub fn generate_phantom(
    seed: u64,
    cfg: &PhantomConfig,
    modality: Modality,
) -> Result<(Image, Mask)> {
    cfg.validate()?;
    let anatomy = sample_anatomy(seed, cfg)?;
    let n = cfg.image_size;
    let spacing = cfg.spacing();
    let contrast = cfg.contrast(modality);
    let d_off = distractor_offset(modality, cfg);

    let mut clean = vec![0f32; n * n];
    let mut mask = Mask::zeros(n, n, spacing);
    for r in 0..n {
        for c in 0..n {
            let (rf, cf) = (r as f32, c as f32);
            if !anatomy.body.contains(rf, cf) {
                continue;
            }
            let mut v = BODY_INTENSITY;
            if anatomy.distractors.iter().any(|d| d.contains(rf, cf)) {
                v += d_off;
            }
            if anatomy.tumor.contains(rf, cf) {
                v = BODY_INTENSITY + contrast;
                mask.set(r, c, true);
            }
            clean[r * n + c] = v;
        }
    }

    let mut rng = noise_rng(seed, modality);
    let sigma = cfg.noise(modality);
    let mut px = smooth3(&clean, n);
    for v in px.iter_mut() {
        let z: f32 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    let img = Image::new(n, n, px, spacing, modality)?;
    Ok((img, mask.with_modality(Some(modality))))
}

/// Light 3x3 binomial blur to soften rasterized edges.
fn smooth3(src: &[f32], n: usize) -> Vec<f32> {
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let at = |r: isize, c: isize| -> f32 {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        src[r * n + c]
    };
    let mut out = vec![0f32; n * n];
    for r in 0..n as isize {
        for c in 0..n as isize {
            let mut acc = 0.0;
            for (i, kr) in K.iter().enumerate() {
                for (j, kc) in K.iter().enumerate() {
                    acc += kr * kc * at(r + i as isize - 1, c + j as isize - 1);
                }
            }
            out[r as usize * n + c as usize] = acc;
        }
    }
    out
}
