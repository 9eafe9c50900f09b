//! Synthetic ambiguous-boundary images and simulated per-clinician labels.
//!
//! Each phantom is a smooth radially decaying blob plus bounded seeded noise.
//! A clinician is a boundary threshold: they label every pixel at or above
//! their threshold as foreground, so a lower threshold means a more generous
//! (over-segmenting) annotator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::mask::{BinaryMask, Rle};
use crate::rng::{derive_seed, rng_from_seed, stream};

/// Upper bound on `|intensity - smooth blob|` before clamping.
pub const NOISE_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomImage {
    pub height: usize,
    pub width: usize,
    pub intensities: Vec<f64>,
    /// `(row, col)` of the blob peak used at generation time.
    pub blob_center: (f64, f64),
    /// Gaussian radius of the blob, in pixels.
    pub blob_scale: f64,
}

impl PhantomImage {
    /// Wraps an arbitrary grayscale grid (values in `[0, 1]`).
    pub fn from_intensities(height: usize, width: usize, intensities: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image must be non-empty"));
        }
        if intensities.len() != height * width {
            return Err(shape(format!("{} intensities for a {height}x{width} image", intensities.len())));
        }
        if intensities.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("intensities must lie in [0, 1]"));
        }
        let (blob_center, blob_scale) = centroid_and_spread(height, width, &intensities);
        Ok(Self { height, width, intensities, blob_center, blob_scale })
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.intensities[h * self.width + w]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.intensities.iter().sum::<f64>() / self.intensities.len() as f64
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let pixels: Vec<u8> = self.intensities.iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .ok_or_else(|| shape("pixel buffer does not match image size"))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Intensity-weighted centroid and radial spread of a grid.
fn centroid_and_spread(height: usize, width: usize, data: &[f64]) -> ((f64, f64), f64) {
    let total: f64 = data.iter().sum();
    if total <= 0.0 {
        return (((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0), 1.0);
    }
    let (mut ch, mut cw) = (0.0, 0.0);
    for h in 0..height {
        for w in 0..width {
            let v = data[h * width + w];
            ch += v * h as f64;
            cw += v * w as f64;
        }
    }
    ch /= total;
    cw /= total;
    let mut spread = 0.0;
    for h in 0..height {
        for w in 0..width {
            let v = data[h * width + w];
            spread += v * ((h as f64 - ch).powi(2) + (w as f64 - cw).powi(2));
        }
    }
    ((ch, cw), (spread / (2.0 * total)).sqrt().max(1.0))
}

/// Smooth blob with bounded noise, fully determined by `seed`.
pub fn generate_phantom(seed: u64, height: usize, width: usize) -> Result<PhantomImage> {
    if height < 8 || width < 8 {
        return Err(invalid(format!("phantom needs at least 8x8 pixels, got {height}x{width}")));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::PHANTOM]));
    let (hf, wf) = (height as f64, width as f64);
    let side = hf.min(wf);
    let center = (
        (hf - 1.0) / 2.0 + rng.random_range(-0.06..0.06) * hf,
        (wf - 1.0) / 2.0 + rng.random_range(-0.06..0.06) * wf,
    );
    let scale = rng.random_range(0.13..0.19) * side;

    // Three low-frequency modes (total amplitude 0.03) plus white noise (0.02).
    let modes: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                0.01,
            )
        })
        .collect();
    let mut intensities = Vec::with_capacity(height * width);
    for h in 0..height {
        for w in 0..width {
            let r2 = (h as f64 - center.0).powi(2) + (w as f64 - center.1).powi(2);
            let base = (-r2 / (2.0 * scale * scale)).exp();
            let smooth: f64 = modes
                .iter()
                .map(|&(fy, fx, phase, amp)| {
                    amp * (std::f64::consts::TAU * (fy * h as f64 / hf + fx * w as f64 / wf) + phase).cos()
                })
                .sum();
            let white = rng.random_range(-0.02..0.02);
            intensities.push((base + smooth + white).clamp(0.0, 1.0));
        }
    }
    Ok(PhantomImage { height, width, intensities, blob_center: center, blob_scale: scale })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicianProfile {
    pub id: u32,
    /// Intensity level labelled as the foreground boundary, in `(0, 1)`.
    pub threshold: f64,
    /// Minimal Dice at which this clinician accepts a prediction, in `[0, 1]`.
    pub approval_dice: f64,
}

impl ClinicianProfile {
    pub fn new(id: u32, threshold: f64, approval_dice: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid(format!("clinician threshold {threshold} outside (0,1)")));
        }
        if !(0.0..=1.0).contains(&approval_dice) {
            return Err(invalid(format!("approval Dice {approval_dice} outside [0,1]")));
        }
        Ok(Self { id, threshold, approval_dice })
    }

    /// The three-annotator training panel (under-, mid- and over-segmenting).
    pub fn training_panel() -> Vec<ClinicianProfile> {
        [0.35, 0.5, 0.65]
            .iter()
            .enumerate()
            .map(|(i, &t)| ClinicianProfile { id: i as u32 + 1, threshold: t, approval_dice: 0.9 })
            .collect()
    }
}

/// Foreground iff intensity >= the clinician's threshold. Thresholds outside
/// `(0, 1)` are accepted here so callers can build degenerate annotators.
pub fn annotate(profile: &ClinicianProfile, image: &PhantomImage) -> BinaryMask {
    annotate_at(profile.threshold, image)
}

pub fn annotate_at(threshold: f64, image: &PhantomImage) -> BinaryMask {
    BinaryMask::new(
        image.height,
        image.width,
        image.intensities.iter().map(|&v| v >= threshold).collect(),
    )
    .expect("image buffer matches its own shape")
}

/// Weighted per-pixel vote binarized at 0.5; an average of exactly 0.5 is
/// foreground. `weights` defaults to uniform and must lie on the simplex.
pub fn fuse_annotations(masks: &[BinaryMask], weights: Option<&[f64]>) -> Result<BinaryMask> {
    let first = masks.first().ok_or_else(|| invalid("cannot fuse an empty mask list"))?;
    if let Some(m) = masks.iter().find(|m| m.shape() != first.shape()) {
        return Err(shape(format!("fusing {:?} with {:?}", first.shape(), m.shape())));
    }
    let (h, w) = first.shape();
    match weights {
        None => {
            let n = masks.len();
            Ok(BinaryMask::from_fn(h, w, |r, c| {
                let votes = masks.iter().filter(|m| m.get(r, c)).count();
                2 * votes >= n
            }))
        }
        Some(ws) => {
            if ws.len() != masks.len() {
                return Err(shape(format!("{} weights for {} masks", ws.len(), masks.len())));
            }
            let total: f64 = ws.iter().sum();
            if ws.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(invalid("fusion weights must lie on the simplex"));
            }
            Ok(BinaryMask::from_fn(h, w, |r, c| {
                let avg: f64 = masks.iter().zip(ws).filter(|(m, _)| m.get(r, c)).map(|(_, x)| x).sum();
                avg >= 0.5 - 1e-12
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub image_id: String,
    pub masks: BTreeMap<u32, BinaryMask>,
}

impl AnnotationSet {
    pub fn mask(&self, clinician: u32) -> Result<&BinaryMask> {
        self.masks
            .get(&clinician)
            .ok_or_else(|| invalid(format!("no annotation from clinician {clinician} for {}", self.image_id)))
    }
}

/// One phantom with its identifier, generation seed and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub id: String,
    pub seed: u64,
    pub image: PhantomImage,
    pub annotations: AnnotationSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub height: usize,
    pub width: usize,
    pub clinicians: Vec<ClinicianProfile>,
    pub cases: Vec<PhantomCase>,
}

impl PhantomDataset {
    /// `count` phantoms, image `i` seeded from `derive_seed(seed, [i])`.
    pub fn generate(
        count: usize,
        height: usize,
        width: usize,
        seed: u64,
        clinicians: &[ClinicianProfile],
    ) -> Result<Self> {
        let cases = (0..count)
            .map(|i| {
                let image_seed = derive_seed(seed, &[i as u64]);
                let image = generate_phantom(image_seed, height, width)?;
                let id = format!("phantom-{i:04}");
                let masks = clinicians.iter().map(|c| (c.id, annotate(c, &image))).collect();
                Ok(PhantomCase {
                    id: id.clone(),
                    seed: image_seed,
                    image,
                    annotations: AnnotationSet { image_id: id, masks },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { height, width, clinicians: clinicians.to_vec(), cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn case(&self, id: &str) -> Option<&PhantomCase> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Writes `<id>.png` per image and a `manifest.json` with RLE annotations.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut images = Vec::with_capacity(self.cases.len());
        for case in &self.cases {
            let file = format!("{}.png", case.id);
            fs::write(dir.join(&file), case.image.to_png_bytes()?)?;
            images.push(ManifestImage {
                id: case.id.clone(),
                file,
                seed: case.seed,
                blob_center: [case.image.blob_center.0, case.image.blob_center.1],
                blob_scale: case.image.blob_scale,
                annotations: case
                    .annotations
                    .masks
                    .iter()
                    .map(|(id, m)| (id.to_string(), m.to_rle()))
                    .collect(),
            });
        }
        let manifest = Manifest {
            version: 1,
            height: self.height,
            width: self.width,
            clinicians: self.clinicians.clone(),
            images,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a directory written by [`PhantomDataset::export`]. Intensities
    /// come back quantized to 8 bits.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != 1 {
            return Err(Error::Decode(format!("unsupported manifest version {}", manifest.version)));
        }
        let cases = manifest
            .images
            .into_iter()
            .map(|entry| {
                let gray = image::open(dir.join(&entry.file))?.into_luma8();
                let (w, h) = gray.dimensions();
                let intensities = gray.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
                let mut image = PhantomImage::from_intensities(h as usize, w as usize, intensities)?;
                image.blob_center = (entry.blob_center[0], entry.blob_center[1]);
                image.blob_scale = entry.blob_scale;
                let masks = entry
                    .annotations
                    .iter()
                    .map(|(k, rle)| {
                        let id: u32 = k.parse().map_err(|_| Error::Decode(format!("bad clinician id {k}")))?;
                        Ok((id, rle.decode()?))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Ok(PhantomCase {
                    id: entry.id.clone(),
                    seed: entry.seed,
                    image,
                    annotations: AnnotationSet { image_id: entry.id, masks },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { height: manifest.height, width: manifest.width, clinicians: manifest.clinicians, cases })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    height: usize,
    width: usize,
    clinicians: Vec<ClinicianProfile>,
    images: Vec<ManifestImage>,
}

#[derive(Serialize, Deserialize)]
struct ManifestImage {
    id: String,
    file: String,
    seed: u64,
    blob_center: [f64; 2],
    blob_scale: f64,
    annotations: BTreeMap<String, Rle>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(1, 64, 64).unwrap();
        let b = generate_phantom(1, 64, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_phantom(2, 64, 64).unwrap());
    }

    #[test]
    fn center_brighter_than_corner() {
        for seed in 0..20 {
            let img = generate_phantom(seed, 64, 64).unwrap();
            let (ch, cw) = img.blob_center;
            assert!(img.get(ch.round() as usize, cw.round() as usize) > img.get(0, 0));
            assert!(img.intensities.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mean_intensity_golden() {
        let img = generate_phantom(1, 64, 64).unwrap();
        // noise-free oracle: the blob alone, from the recorded centre and scale;
        // the zero-mean noise moves the mean by well under 0.01
        let (ch, cw) = img.blob_center;
        let s2 = 2.0 * img.blob_scale * img.blob_scale;
        let blob: f64 = (0..64 * 64)
            .map(|i| (-(((i / 64) as f64 - ch).powi(2) + ((i % 64) as f64 - cw).powi(2)) / s2).exp())
            .sum::<f64>()
            / 4096.0;
        assert!((img.mean_intensity() - blob).abs() < 0.01, "{} vs {blob}", img.mean_intensity());
        assert_eq!(format!("{:.10}", img.mean_intensity()), "0.1800980937");
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(generate_phantom(0, 7, 64).is_err());
        assert!(generate_phantom(0, 64, 4).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let img = PhantomImage::from_intensities(2, 2, vec![0.1, 0.4, 0.9, 1.0]).unwrap();
        let all = annotate_at(0.0, &img);
        assert_eq!(all.count_ones(), 4);
        let none = annotate_at(1.0 + 1e-9, &img);
        assert_eq!(none.count_ones(), 0);
    }

    #[test]
    fn profile_validation() {
        assert!(ClinicianProfile::new(1, 0.0, 0.9).is_err());
        assert!(ClinicianProfile::new(1, 0.5, 0.0).is_ok());
        assert!(ClinicianProfile::new(1, 0.5, -0.1).is_err());
        assert!(ClinicianProfile::new(1, 0.5, 1.01).is_err());
        assert!(ClinicianProfile::new(1, 0.5, 1.0).is_ok());
    }

    #[test]
    fn fusion_examples() {
        let a = BinaryMask::new(1, 2, vec![true, false]).unwrap();
        assert_eq!(fuse_annotations(std::slice::from_ref(&a), None).unwrap(), a);

        let ones = BinaryMask::filled(1, 1, true);
        let zero = BinaryMask::filled(1, 1, false);
        let fused = fuse_annotations(&[ones.clone(), ones.clone(), zero.clone()], None).unwrap();
        assert!(fused.get(0, 0));
        // a 1-vs-1 split averages to exactly 0.5 and resolves to foreground
        assert!(fuse_annotations(&[ones.clone(), zero.clone()], None).unwrap().get(0, 0));
        assert!(fuse_annotations(&[ones.clone(), zero.clone()], Some(&[0.5, 0.5])).unwrap().get(0, 0));
        assert!(!fuse_annotations(&[ones, zero], Some(&[0.4, 0.6])).unwrap().get(0, 0));
    }

    #[test]
    fn fusion_errors() {
        assert!(fuse_annotations(&[], None).is_err());
        let a = BinaryMask::filled(1, 2, true);
        let b = BinaryMask::filled(2, 1, true);
        assert!(matches!(fuse_annotations(&[a.clone(), b], None), Err(Error::ShapeMismatch(_))));
        assert!(fuse_annotations(&[a.clone(), a], Some(&[0.7, 0.7])).is_err());
    }

    #[test]
    fn dataset_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = PhantomDataset::generate(3, 16, 16, 5, &ClinicianProfile::training_panel()).unwrap();
        ds.export(dir.path()).unwrap();
        let back = PhantomDataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.clinicians, ds.clinicians);
        for (a, b) in ds.cases.iter().zip(&back.cases) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.annotations, b.annotations);
            for (x, y) in a.image.intensities.iter().zip(&b.image.intensities) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn annotations_are_nested(seed in 0u64..10_000, t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let img = generate_phantom(seed, 16, 16).unwrap();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(annotate_at(hi, &img).is_subset_of(&annotate_at(lo, &img)));
        }

        #[test]
        fn fusion_permutation_and_copies(bits in proptest::collection::vec(any::<bool>(), 5 * 12), k in 1usize..6, rot in 0usize..5) {
            let masks: Vec<BinaryMask> = bits.chunks(12).map(|c| BinaryMask::new(3, 4, c.to_vec()).unwrap()).collect();
            let mut rotated = masks.clone();
            rotated.rotate_left(rot);
            prop_assert_eq!(fuse_annotations(&masks, None).unwrap(), fuse_annotations(&rotated, None).unwrap());
            let copies = vec![masks[0].clone(); k];
            prop_assert_eq!(fuse_annotations(&copies, None).unwrap(), masks[0].clone());
        }
    }
}
