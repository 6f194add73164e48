//! Point-annotation data model, on-disk formats, and a synthetic
//! perspective-scene generator with exact-count ground truth.
//!
//! Scenes place people on a ground plane and project them through a pinhole
//! camera whose horizon sits at the top image row, so image row y is a
//! strictly monotonic function of depth: far people land high in the frame
//! and appear denser, near people land low and appear sparser.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointAnnotation {
    /// Horizontal pixel coordinate, origin at the left edge. Sub-pixel allowed.
    pub x: f64,
    /// Vertical pixel coordinate, origin at the top edge; y indexes rows.
    pub y: f64,
}

/// Grayscale intensities in [0,1], row-major, height x width.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub width: usize,
    pub height: usize,
    pub points: Vec<PointAnnotation>,
    pub image: Option<ImageTensor>,
}

impl AnnotatedImage {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    fn check_bounds(&self) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.x < self.width as f64 && p.y >= 0.0 && p.y < self.height as f64)
            {
                return Err(Error::OutOfBoundsPoint {
                    index,
                    x: p.x,
                    y: p.y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    /// Center-crop to the largest dimensions divisible by `multiple`,
    /// dropping points that fall outside the crop. Returns self unchanged
    /// when the dimensions already conform.
    pub fn crop_to_multiple(&self, multiple: usize) -> AnnotatedImage {
        let new_h = (self.height / multiple) * multiple;
        let new_w = (self.width / multiple) * multiple;
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let off_y = (self.height - new_h) / 2;
        let off_x = (self.width - new_w) / 2;
        let points = self
            .points
            .iter()
            .filter_map(|p| {
                let x = p.x - off_x as f64;
                let y = p.y - off_y as f64;
                (x >= 0.0 && x < new_w as f64 && y >= 0.0 && y < new_h as f64)
                    .then_some(PointAnnotation { x, y })
            })
            .collect();
        let image = self.image.as_ref().map(|img| {
            let mut pixels = Vec::with_capacity(new_h * new_w);
            for i in 0..new_h {
                let row = (i + off_y) * img.width + off_x;
                pixels.extend_from_slice(&img.pixels[row..row + new_w]);
            }
            ImageTensor {
                height: new_h,
                width: new_w,
                pixels,
            }
        });
        AnnotatedImage {
            width: new_w,
            height: new_h,
            points,
            image,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSceneConfig {
    pub width: usize,
    pub height: usize,
    /// Camera height above the ground plane, world units.
    pub camera_height: f64,
    /// Focal length in pixels.
    pub focal: f64,
    /// [z_near, z_far] depth range of the ground strip people stand on.
    pub ground_depth_range: [f64; 2],
    pub person_count_range: [usize; 2],
    /// Number of crowd clusters; 0 means uniform placement.
    pub cluster_count: usize,
    /// Rendered head blob standard deviation at z_near, pixels.
    pub dot_sigma_at_near: f64,
}

impl SynthSceneConfig {
    /// A camera geometry that fills rows from near the top of the frame down
    /// to the bottom edge for the given image size.
    pub fn standard(width: usize, height: usize) -> SynthSceneConfig {
        let focal = height as f64;
        let camera_height = 3.0;
        let z_near = focal * camera_height / (height as f64 - 1.0);
        // Farthest people project to about 1/8 of the image height.
        let z_far = focal * camera_height / (height as f64 / 8.0);
        SynthSceneConfig {
            width,
            height,
            camera_height,
            focal,
            ground_depth_range: [z_near, z_far],
            person_count_range: [20, 100],
            cluster_count: 0,
            dot_sigma_at_near: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [z_near, z_far] = self.ground_depth_range;
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::Config(format!(
                "image dims {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        if !(z_near > 0.0 && z_near < z_far) {
            return Err(Error::Config(format!(
                "depth range [{z_near}, {z_far}] must satisfy 0 < z_near < z_far"
            )));
        }
        if self.person_count_range[0] > self.person_count_range[1] {
            return Err(Error::Config("person_count_range is empty".into()));
        }
        if self.focal <= 0.0 || self.camera_height <= 0.0 || self.dot_sigma_at_near <= 0.0 {
            return Err(Error::Config(
                "focal, camera_height and dot_sigma_at_near must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
}

pub fn load_annotations(path: &Path) -> Result<AnnotatedImage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: AnnotationJson = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let ann = AnnotatedImage {
        width: parsed.width,
        height: parsed.height,
        points: parsed
            .points
            .iter()
            .map(|&[x, y]| PointAnnotation { x, y })
            .collect(),
        image: None,
    };
    ann.check_bounds()?;
    Ok(ann)
}

pub fn save_annotations(ann: &AnnotatedImage, path: &Path) -> Result<()> {
    let json = AnnotationJson {
        width: ann.width,
        height: ann.height,
        points: ann.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    let text = serde_json::to_string(&json).expect("annotation serialization");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const IMAGE_MAGIC: &[u8; 4] = b"IMG1";

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + img.pixels.len() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    for &v in &img.pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != IMAGE_MAGIC {
        return Err(Error::FormatMismatch(format!(
            "{}: expected IMG1 magic",
            path.display()
        )));
    }
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    if data.len() != height * width * 4 {
        return Err(Error::FormatMismatch(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            height * width * 4,
            data.len()
        )));
    }
    let pixels = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ImageTensor {
        height,
        width,
        pixels,
    })
}

const RETRY_BUDGET: usize = 100;

/// Generate one synthetic scene. Deterministic for a fixed (cfg, seed).
pub fn synth_scene(cfg: &SynthSceneConfig, seed: u64) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [z_near, z_far] = cfg.ground_depth_range;
    let count = rng.gen_range(cfg.person_count_range[0]..=cfg.person_count_range[1]);

    // Visible half-width of the ground strip at depth z, with a small margin
    // so sampled x projects strictly inside the frame.
    let half_width = |z: f64| 0.48 * cfg.width as f64 * z / cfg.focal;

    let clusters: Vec<(f64, f64)> = (0..cfg.cluster_count)
        .map(|_| {
            let z = rng.gen_range(z_near..z_far);
            let x = rng.gen_range(-half_width(z)..half_width(z));
            (x, z)
        })
        .collect();
    let z_spread = (z_far - z_near) / 12.0;
    let x_spread = half_width(z_far) / 12.0;

    let mut points = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    for index in 0..count {
        let mut placed = false;
        for _ in 0..RETRY_BUDGET {
            let (x_w, z) = if clusters.is_empty() {
                let z = rng.gen_range(z_near..z_far);
                (rng.gen_range(-half_width(z)..half_width(z)), z)
            } else {
                let (cx, cz) = clusters[rng.gen_range(0..clusters.len())];
                (
                    cx + gauss(&mut rng) * x_spread,
                    cz + gauss(&mut rng) * z_spread,
                )
            };
            if z < z_near || z >= z_far {
                continue;
            }
            let y = cfg.focal * cfg.camera_height / z;
            let x = cfg.width as f64 / 2.0 + cfg.focal * x_w / z;
            if x >= 0.0 && x < cfg.width as f64 && y >= 0.0 && y < cfg.height as f64 {
                points.push(PointAnnotation { x, y });
                depths.push(z);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::DegenerateProjection {
                index,
                retries: RETRY_BUDGET,
            });
        }
    }

    // Render: one normalized Gaussian dot per person, apparent size shrinking
    // with depth, then clamp to [0,1].
    let mut canvas = DensityMap::zeros(cfg.height, cfg.width);
    for (p, &z) in points.iter().zip(&depths) {
        let sigma = cfg.dot_sigma_at_near * z_near / z;
        canvas.splat_gaussian(p, sigma)?;
    }
    let pixels = canvas
        .values
        .iter()
        .map(|&v| v.clamp(0.0, 1.0) as f32)
        .collect();

    Ok(AnnotatedImage {
        width: cfg.width,
        height: cfg.height,
        points,
        image: Some(ImageTensor {
            height: cfg.height,
            width: cfg.width,
            pixels,
        }),
    })
}

/// Box-Muller; two uniform draws per sample keeps the stream deterministic.
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub annotation: String,
    pub image: String,
    pub count: usize,
}

pub type Manifest = Vec<ManifestEntry>;

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialization");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolve a manifest-relative path against the manifest's directory.
pub fn resolve_entry(manifest_path: &Path, entry: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(entry),
        None => PathBuf::from(entry),
    }
}

/// Write `n` scenes (annotation + image + manifest) under `out_dir`.
/// Scene i uses seed + i, so individual scenes are regenerable.
pub fn synth_dataset(cfg: &SynthSceneConfig, seed: u64, n: usize, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Config("synth_dataset requires n >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let scene = synth_scene(cfg, seed.wrapping_add(i as u64))?;
        let ann_name = format!("scene_{i:04}.json");
        let img_name = format!("scene_{i:04}.img");
        save_annotations(&scene, &out_dir.join(&ann_name))?;
        save_image(scene.image.as_ref().unwrap(), &out_dir.join(&img_name))?;
        manifest.push(ManifestEntry {
            annotation: ann_name,
            image: img_name,
            count: scene.count(),
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&manifest, &manifest_path)?;
    Ok(manifest_path)
}

/// Load a manifest entry's annotation together with its rendered image.
pub fn load_entry(manifest_path: &Path, entry: &ManifestEntry) -> Result<AnnotatedImage> {
    let mut ann = load_annotations(&resolve_entry(manifest_path, &entry.annotation))?;
    let img = load_image(&resolve_entry(manifest_path, &entry.image))?;
    if img.height != ann.height || img.width != ann.width {
        return Err(Error::Shape(format!(
            "image {}x{} does not match annotation {}x{}",
            img.height, img.width, ann.height, ann.width
        )));
    }
    ann.image = Some(img);
    Ok(ann)
}
