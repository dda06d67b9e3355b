use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use cmedl::synthdata::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn small() -> PhantomConfig {
    PhantomConfig { image_size: 32, n_cbct: 12, n_mri: 6, n_cbct_val: 3, n_cbct_test: 3, tumor_radius_range: (3.0, 6.0), ..Default::default() }
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
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
fn regenerated_corpus_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_corpus(&small(), a.path()).unwrap();
    generate_corpus(&small(), b.path()).unwrap();
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    assert!(ha.len() > 18 && ha.contains_key("manifest.json"));
    assert_eq!(ha, hb);

    assert_eq!(ma.entries.len(), 18);
    let cbct = ma.anatomy_seeds(Modality::Cbct);
    let mri = ma.anatomy_seeds(Modality::Mri);
    assert!(cbct.is_disjoint(&mri));
    let mut per_split: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for e in &ma.entries {
        per_split.entry(format!("{:?}", e.split)).or_default().insert(e.case_id.clone());
    }
    let sets: Vec<_> = per_split.values().collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            assert!(sets[i].is_disjoint(sets[j]));
        }
    }
}

#[test]
fn image_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cmi");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let modalities = [Modality::Cbct, Modality::Mri, Modality::Pmri, Modality::Pcbct];
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(16..40), rng.gen_range(16..40));
        let px: Vec<f32> = (0..h * w).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff) * if rng.gen() { 1.0 } else { -1.0 }).collect();
        let sp = Spacing::new(rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0)).unwrap();
        let img = Image::new(h, w, px, sp, modalities[rng.gen_range(0..4)]).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.spacing, img.spacing);
        assert_eq!(back.modality, img.modality);
        assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

fn binary_image(m: &Mask) -> Image {
    let px = m.pixels().iter().map(|&v| v as f32).collect();
    Image::new(m.height(), m.width(), px, m.spacing, Modality::Cbct).unwrap()
}

/// Image and mask share one mapping: the transformed mask never extends past the
/// transformed frame, and thresholding the bilinearly warped mask image agrees
/// with the warped mask everywhere except next to its boundary.
#[test]
fn augmentation_is_geometry_consistent_and_area_preserving() {
    let cfg = PhantomConfig::default();
    for seed in 0..1000u64 {
        let (img, mask) = generate_phantom(seed, &cfg, Modality::Cbct).unwrap();
        let ones = Mask::from_fn(64, 64, mask.spacing, |_, _| true);
        let area = mask.count() as f64;
        let params = AugmentParams::sample(seed ^ 0xabc, 64, 64);
        let (_, warped) = augment::apply(&img, &mask, &params).unwrap();
        assert!(warped.pixels().iter().all(|&v| v <= 1));
        assert!((warped.count() as f64 - area).abs() <= 0.25 * area, "seed {seed}: {} vs {area}", warped.count());

        let (_, frame) = augment::apply(&img, &ones, &params).unwrap();
        let (soft, _) = augment::apply(&binary_image(&mask), &mask, &params).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                assert!(!warped.get(r, c) || frame.get(r, c));
                if (soft.get(r, c) >= 0.5) != warped.get(r, c) {
                    let near_edge = (r.saturating_sub(1)..=(r + 1).min(63))
                        .flat_map(|rr| (c.saturating_sub(1)..=(c + 1).min(63)).map(move |cc| (rr, cc)))
                        .any(|(rr, cc)| warped.get(rr, cc) != warped.get(r, c));
                    assert!(near_edge, "seed {seed}: disagreement away from the boundary at ({r}, {c})");
                }
            }
        }
    }
}

#[test]
fn augmentation_is_deterministic_per_seed() {
    let (img, mask) = generate_phantom(5, &PhantomConfig::default(), Modality::Mri).unwrap();
    for seed in [0u64, 1, 99, u64::MAX] {
        let a = augment(&img, &mask, seed).unwrap();
        let b = augment(&img, &mask, seed).unwrap();
        assert_eq!(a, b);
    }
    let (i2, m2) = augment::apply(&img, &mask, &AugmentParams::identity()).unwrap();
    assert_eq!((i2, m2), (img, mask));
}
