//! Fifteen common image corruptions at severities 1 to 5.
//!
//! Parameter tables follow the ImageNet-C benchmark. Noise, glass, motion,
//! snow, frost, fog and elastic draw from a generator keyed by
//! [`CorruptionSpec::seed`]; the remaining kinds ignore the seed. Frost uses
//! a procedural texture instead of photographic overlays.

mod field;
mod kinds;
mod textures;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::ImageInput;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, hash_str, rng_from};
use field::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    ElasticTransform,
    Pixelate,
    JpegCompression,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::GlassBlur,
        Self::MotionBlur,
        Self::ZoomBlur,
        Self::Snow,
        Self::Frost,
        Self::Fog,
        Self::Brightness,
        Self::Contrast,
        Self::ElasticTransform,
        Self::Pixelate,
        Self::JpegCompression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::GlassBlur => "glass_blur",
            Self::MotionBlur => "motion_blur",
            Self::ZoomBlur => "zoom_blur",
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::ElasticTransform => "elastic_transform",
            Self::Pixelate => "pixelate",
            Self::JpegCompression => "jpeg_compression",
        }
    }

    /// Short column label used in result tables.
    pub fn abbrev(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gauss",
            Self::ShotNoise => "shot",
            Self::ImpulseNoise => "impul",
            Self::DefocusBlur => "defoc",
            Self::GlassBlur => "glass",
            Self::MotionBlur => "motn",
            Self::ZoomBlur => "zoom",
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::Fog => "fog",
            Self::Brightness => "brigh",
            Self::Contrast => "cont",
            Self::ElasticTransform => "elast",
            Self::Pixelate => "pixel",
            Self::JpegCompression => "jpeg",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Whether the output depends on the spec seed.
    pub fn is_seeded(self) -> bool {
        matches!(
            self,
            Self::GaussianNoise
                | Self::ShotNoise
                | Self::ImpulseNoise
                | Self::GlassBlur
                | Self::MotionBlur
                | Self::Snow
                | Self::Frost
                | Self::Fog
                | Self::ElasticTransform
        )
    }

    /// Smallest height and width accepted at `severity`.
    pub fn min_size(self, severity: u8) -> usize {
        match self {
            _ if severity == 0 => 1,
            Self::GlassBlur => kinds::glass_blur_min_size(severity),
            Self::Pixelate => kinds::pixelate_min_size(severity),
            _ => 2,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    /// Accepts either the full name or the abbreviation.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.abbrev() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Apply one corruption. Severity 0 is accepted and returns the input.
pub fn corrupt(image: &ImageInput, spec: &CorruptionSpec) -> Result<ImageInput> {
    let s = spec.severity;
    if s > 5 {
        spec.validate()?;
    }
    if s == 0 {
        return Ok(image.clone());
    }
    let min = spec.kind.min_size(s);
    if image.height() < min || image.width() < min {
        return Err(Error::UnsupportedSize {
            kind: spec.kind.name(),
            width: image.width(),
            height: image.height(),
            min,
        });
    }
    use CorruptionKind as K;
    if spec.kind == K::JpegCompression {
        return kinds::jpeg_compression(image, s);
    }
    let x = Field::from_image(image);
    let mut rng = rng_from(derive_seed(spec.seed, &[spec.kind.index() as u64]));
    let rng = &mut rng;
    let y = match spec.kind {
        K::GaussianNoise => kinds::gaussian_noise(x, s, rng),
        K::ShotNoise => kinds::shot_noise(x, s, rng),
        K::ImpulseNoise => kinds::impulse_noise(x, s, rng),
        K::DefocusBlur => kinds::defocus_blur(x, s),
        K::GlassBlur => kinds::glass_blur(x, s, rng),
        K::MotionBlur => kinds::motion_blur(x, s, rng),
        K::ZoomBlur => kinds::zoom_blur(x, s),
        K::Snow => kinds::snow(x, s, rng),
        K::Frost => kinds::frost(x, s, rng),
        K::Fog => kinds::fog(x, s, rng),
        K::Brightness => kinds::brightness(x, s),
        K::Contrast => kinds::contrast(x, s),
        K::ElasticTransform => kinds::elastic_transform(x, s, rng),
        K::Pixelate => kinds::pixelate(x, s),
        K::JpegCompression => unreachable!(),
    };
    y.to_image(image)
}

/// Peak signal-to-noise ratio in dB between two equally sized 8-bit images.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageInput, b: &ImageInput) -> Result<f64> {
    if a.pixels().len() != b.pixels().len() {
        return Err(Error::Arity {
            expected: a.pixels().len(),
            got: b.pixels().len(),
        });
    }
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    })
}

/// Seed used for one (image, kind, severity) cell of a dataset sweep.
pub fn dataset_seed(seed: u64, image_id: &str, kind: CorruptionKind, severity: u8) -> u64 {
    derive_seed(seed, &[hash_str(image_id), kind.index() as u64, u64::from(severity)])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedEntry {
    pub source_id: String,
    pub spec: CorruptionSpec,
    pub abbrev: String,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorruptionManifest {
    pub entries: Vec<CorruptedEntry>,
    /// `(source id, kind, severity, message)` for every cell that failed.
    pub failures: Vec<(String, CorruptionKind, u8, String)>,
}

impl CorruptionManifest {
    /// Entries grouped by table column label, kinds in canonical order.
    pub fn by_abbrev(&self) -> Vec<(&'static str, Vec<&CorruptedEntry>)> {
        CorruptionKind::ALL
            .iter()
            .filter_map(|k| {
                let v: Vec<_> = self.entries.iter().filter(|e| e.spec.kind == *k).collect();
                (!v.is_empty()).then_some((k.abbrev(), v))
            })
            .collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Corrupt every image at every (kind, severity), writing PNGs under
/// `out_dir/<kind>/<severity>/<id>.png` and a JSONL manifest. Output is
/// a pure function of the inputs, so reruns overwrite files with identical
/// bytes.
pub fn corrupt_dataset(
    images: &[ImageInput],
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
    out_dir: &Path,
) -> Result<CorruptionManifest> {
    for &s in severities {
        CorruptionSpec::new(CorruptionKind::Brightness, s, 0)?;
    }
    let mut manifest = CorruptionManifest::default();
    for &kind in kinds {
        for &severity in severities {
            for img in images {
                let spec = CorruptionSpec {
                    kind,
                    severity,
                    seed: dataset_seed(seed, &img.id, kind, severity),
                };
                let rel = PathBuf::from(kind.name())
                    .join(severity.to_string())
                    .join(format!("{}.png", sanitize(&img.id)));
                match write_one(img, &spec, &out_dir.join(&rel)) {
                    Ok(sha256) => manifest.entries.push(CorruptedEntry {
                        source_id: img.id.clone(),
                        spec,
                        abbrev: kind.abbrev().to_string(),
                        path: rel.to_string_lossy().replace('\\', "/"),
                        sha256,
                    }),
                    Err(e) => {
                        log::warn!("{} {kind} s{severity}: {e}", img.id);
                        manifest.failures.push((img.id.clone(), kind, severity, e.to_string()));
                    }
                }
            }
        }
    }
    let mut lines = String::new();
    for e in &manifest.entries {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    crate::pipeline::io::write_atomic(&out_dir.join(MANIFEST_FILE), lines.as_bytes())?;
    Ok(manifest)
}

fn write_one(img: &ImageInput, spec: &CorruptionSpec, path: &Path) -> Result<String> {
    let out = corrupt(img, spec)?;
    let bytes = encode_png(&out)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crate::pipeline::io::write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn encode_png(img: &ImageInput) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.to_rgb_image()
        .write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<CorruptedEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: u8) -> ImageInput {
        ImageInput::from_fn("g", 24, 24, |_, _, _| v).unwrap()
    }

    fn textured() -> ImageInput {
        ImageInput::from_fn("t", 32, 32, |y, x, c| ((y * 7 + x * 3 + c * 50) % 256) as u8).unwrap()
    }

    #[test]
    fn names_and_abbrevs_parse() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
            assert_eq!(k.abbrev().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!("speckle_noise".parse::<CorruptionKind>().is_err());
        let mut abbrevs: Vec<_> = CorruptionKind::ALL.iter().map(|k| k.abbrev()).collect();
        abbrevs.sort();
        assert_eq!(
            abbrevs,
            [
                "brigh", "cont", "defoc", "elast", "fog", "frost", "gauss", "glass", "impul", "jpeg", "motn",
                "pixel", "shot", "snow", "zoom"
            ]
        );
    }

    #[test]
    fn severity_bounds() {
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 0, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 6, 0).is_err());
        let img = textured();
        let zero = CorruptionSpec {
            kind: CorruptionKind::Snow,
            severity: 0,
            seed: 1,
        };
        assert_eq!(corrupt(&img, &zero).unwrap(), img);
    }

    #[test]
    fn brightness_mean_increases() {
        let img = gray(128);
        let means: Vec<f64> = (1..=5)
            .map(|s| {
                let out = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Brightness, s, 0).unwrap()).unwrap();
                out.pixels().iter().map(|&p| f64::from(p)).sum::<f64>() / out.pixels().len() as f64
            })
            .collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    }

    #[test]
    fn seeded_kinds_repeat_and_vary() {
        let img = textured();
        for kind in CorruptionKind::ALL.into_iter().filter(|k| k.is_seeded()) {
            let a = corrupt(&img, &CorruptionSpec::new(kind, 3, 5).unwrap()).unwrap();
            let b = corrupt(&img, &CorruptionSpec::new(kind, 3, 5).unwrap()).unwrap();
            let c = corrupt(&img, &CorruptionSpec::new(kind, 3, 6).unwrap()).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_ne!(a, c, "{kind}");
        }
    }

    #[test]
    fn unseeded_kinds_ignore_seed() {
        let img = textured();
        for kind in CorruptionKind::ALL.into_iter().filter(|k| !k.is_seeded()) {
            let a = corrupt(&img, &CorruptionSpec::new(kind, 2, 5).unwrap()).unwrap();
            let b = corrupt(&img, &CorruptionSpec::new(kind, 2, 99).unwrap()).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn tiny_images_are_rejected() {
        let img = ImageInput::from_fn("tiny", 3, 3, |_, _, _| 10).unwrap();
        let err = corrupt(&img, &CorruptionSpec::new(CorruptionKind::GlassBlur, 5, 0).unwrap());
        assert!(matches!(err, Err(Error::UnsupportedSize { min: 10, .. })));
    }

    #[test]
    fn psnr_basics() {
        let a = gray(100);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = gray(110);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (65025.0f64 / 100.0).log10()).abs() < 1e-12);
    }
}
