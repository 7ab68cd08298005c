//! Synthetic shapes dataset: generation, on-disk format, loading.
//!
//! A dataset directory holds `manifest.json` and `images.bin`. The blob is a
//! sequence of frames in manifest order, each a little-endian `u32` byte length
//! followed by `C·H·W` unsigned bytes in planar (channel-major, then row-major)
//! layout. The manifest records boxes in absolute pixels with an exclusive max
//! corner, the blob length and its CRC-32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::detector::Annotation;
use crate::error::{Error, Result};
use crate::io::{read_file, write_files_atomic};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const DEFAULT_CLASSES: [&str; 3] = ["circle", "square", "triangle"];
pub const MIN_IMAGE_SIZE: usize = 36;
pub const CHANNELS: usize = 3;

const MARGIN: usize = 2;
const SMALL_SIDE: (usize, usize) = (12, 31);
const LARGE_MIN_SIDE: usize = 32;
const LARGE_MAX_SIDE: usize = 48;
const NOISE: i64 = 8;
const PLACEMENT_TRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_id: usize,
    /// `[xmin, ymin, xmax, ymax]` in pixels, max exclusive.
    pub bbox: [u32; 4],
}

impl ObjectRecord {
    pub fn area(&self) -> u64 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0) as u64 * (y1 - y0) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub image_count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    pub small_fraction: f64,
    pub images_bytes: u64,
    pub images_crc32: u32,
    pub records: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Planar `C×H×W` bytes.
    pub pixels: Vec<u8>,
    /// Normalized corner boxes, 1-based classes.
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    /// `[len(indices), C, H, W]` batch scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let s = self.image_size();
        let plane = CHANNELS * s * s;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            let px = &self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample {i} out of range")))?
                .pixels;
            data.extend(px.iter().map(|&b| b as f32 / 255.0));
        }
        Tensor::new(vec![indices.len(), CHANNELS, s, s], data)
    }

    pub fn annotations(&self, indices: &[usize]) -> Vec<Vec<Annotation>> {
        indices
            .iter()
            .map(|&i| self.samples[i].annotations.clone())
            .collect()
    }

    /// Serialized `(manifest.json, images.bin)` contents.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let blob = encode_blob(&self.samples);
        let mut manifest = self.manifest.clone();
        manifest.images_bytes = blob.len() as u64;
        manifest.images_crc32 = crc32fast::hash(&blob);
        Ok((manifest_bytes(&manifest)?, blob))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (m, b) = self.to_bytes()?;
        write_files_atomic(dir, &[(MANIFEST_FILE, &m), (IMAGES_FILE, &b)])
    }
}

fn manifest_bytes(m: &DatasetManifest) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(m)?;
    v.push(b'\n');
    Ok(v)
}

fn encode_blob(samples: &[Sample]) -> Vec<u8> {
    let mut blob = Vec::with_capacity(samples.iter().map(|s| s.pixels.len() + 4).sum());
    for s in samples {
        blob.extend_from_slice(&(s.pixels.len() as u32).to_le_bytes());
        blob.extend_from_slice(&s.pixels);
    }
    blob
}

struct Canvas {
    size: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(size: usize, color: [u8; 3]) -> Self {
        let mut px = vec![0u8; CHANNELS * size * size];
        for (c, plane) in px.chunks_mut(size * size).enumerate() {
            plane.fill(color[c]);
        }
        Self { size, px }
    }

    fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let s = self.size;
        for (c, &v) in color.iter().enumerate() {
            self.px[c * s * s + y * s + x] = v;
        }
    }
}

/// Whether pixel (px, py) of a `side`-square box is covered by the shape.
/// Tests the pixel center in box-local coordinates.
pub fn shape_covers(class_id: usize, side: usize, px: usize, py: usize) -> bool {
    let s = side as f64;
    let x = px as f64 + 0.5;
    let y = py as f64 + 0.5;
    match class_id {
        // circle inscribed in the box
        1 => {
            let r = s / 2.0;
            (x - r).powi(2) + (y - r).powi(2) <= r * r
        }
        2 => true,
        // apex at top center, base along the bottom edge
        3 => {
            let half = y / 2.0 + 0.5;
            (x - s / 2.0).abs() <= half
        }
        _ => false,
    }
}

fn random_color(rng: &mut Rng) -> [u8; 3] {
    [0; 3].map(|_: u8| rng.below(256) as u8)
}

fn contrasting_color(rng: &mut Rng, bg: [u8; 3]) -> [u8; 3] {
    loop {
        let c = random_color(rng);
        let dist: i32 = c
            .iter()
            .zip(&bg)
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .sum();
        if dist >= 160 {
            return c;
        }
    }
}

fn overlaps_with_gap(a: &[u32; 4], b: &[u32; 4], gap: u32) -> bool {
    !(a[2] + gap <= b[0] || b[2] + gap <= a[0] || a[3] + gap <= b[1] || b[3] + gap <= a[1])
}

/// Generates a dataset in memory.
///
/// Each image has a uniform background and 1–4 non-overlapping square-bounded
/// shapes kept `2` px from the border. Every object independently is small
/// (side 12–31, area < 32²) with probability `small_fraction`, otherwise large
/// (side 32 up to 48 or what fits). All randomness comes from one [`Rng`]
/// seeded with `seed`, consumed in a fixed order.
pub fn generate_dataset(
    seed: u64,
    n_images: usize,
    image_size: usize,
    small_fraction: f64,
) -> Result<Dataset> {
    if n_images == 0 {
        return Err(Error::invalid("dataset needs at least one image"));
    }
    if !(0.0..=1.0).contains(&small_fraction) {
        return Err(Error::invalid(format!(
            "small fraction must be in [0,1], got {small_fraction}"
        )));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::invalid(format!(
            "image size {image_size} cannot host a shape; minimum is {MIN_IMAGE_SIZE}"
        )));
    }
    let large_max = LARGE_MAX_SIDE.min(image_size - 2 * MARGIN);
    let mut rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(n_images);
    let mut records = Vec::with_capacity(n_images);
    for id in 0..n_images {
        let bg = random_color(&mut rng);
        let mut canvas = Canvas::new(image_size, bg);
        let wanted = rng.range_inclusive(1, 4) as usize;
        let mut objects: Vec<ObjectRecord> = Vec::with_capacity(wanted);
        while objects.len() < wanted {
            let class_id = rng.range_inclusive(1, 3) as usize;
            let small = rng.uniform() < small_fraction;
            let side = if small {
                rng.range_inclusive(SMALL_SIDE.0 as i64, SMALL_SIDE.1 as i64)
            } else {
                rng.range_inclusive(LARGE_MIN_SIDE as i64, large_max as i64)
            } as usize;
            let span = (image_size - 2 * MARGIN - side) as i64;
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let x0 = (MARGIN as i64 + rng.range_inclusive(0, span)) as u32;
                let y0 = (MARGIN as i64 + rng.range_inclusive(0, span)) as u32;
                let b = [x0, y0, x0 + side as u32, y0 + side as u32];
                if objects
                    .iter()
                    .all(|o| !overlaps_with_gap(&o.bbox, &b, MARGIN as u32))
                {
                    placed = Some(b);
                    break;
                }
            }
            // an image that cannot fit another object keeps what it has
            let Some(bbox) = placed else { break };
            let color = contrasting_color(&mut rng, bg);
            for py in 0..side {
                for px in 0..side {
                    if shape_covers(class_id, side, px, py) {
                        canvas.set(bbox[0] as usize + px, bbox[1] as usize + py, color);
                    }
                }
            }
            objects.push(ObjectRecord { class_id, bbox });
        }
        for v in canvas.px.iter_mut() {
            let noise = rng.range_inclusive(-NOISE, NOISE);
            *v = (*v as i64 + noise).clamp(0, 255) as u8;
        }
        let annotations = normalize(&objects, image_size)?;
        samples.push(Sample {
            pixels: canvas.px,
            annotations,
        });
        records.push(ImageRecord { id, objects });
    }
    let blob = encode_blob(&samples);
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        image_count: n_images,
        image_size,
        channels: CHANNELS,
        classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        seed,
        small_fraction,
        images_bytes: blob.len() as u64,
        images_crc32: crc32fast::hash(&blob),
        records,
    };
    Ok(Dataset { manifest, samples })
}

fn normalize(objects: &[ObjectRecord], size: usize) -> Result<Vec<Annotation>> {
    let s = size as f64;
    objects
        .iter()
        .map(|o| {
            let [x0, y0, x1, y1] = o.bbox.map(|v| v as f64 / s);
            Ok(Annotation {
                class_id: o.class_id,
                bbox: BBox::new(x0, y0, x1, y1)?,
            })
        })
        .collect()
}

/// Reads and fully validates a dataset directory before returning anything.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let bpath = dir.join(IMAGES_FILE);
    let mbytes = read_file(&mpath)?;
    let manifest: DatasetManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| Error::format(&mpath, format!("invalid manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let bad = |d: String| Error::format(&mpath, d);
    if manifest.channels != CHANNELS || manifest.image_size < MIN_IMAGE_SIZE {
        return Err(bad(format!(
            "unsupported geometry {}×{}×{}",
            manifest.channels, manifest.image_size, manifest.image_size
        )));
    }
    if manifest.records.len() != manifest.image_count || manifest.image_count == 0 {
        return Err(bad(format!(
            "{} records for {} images",
            manifest.records.len(),
            manifest.image_count
        )));
    }
    let blob = read_file(&bpath)?;
    if blob.len() as u64 != manifest.images_bytes {
        return Err(Error::format(
            &bpath,
            format!(
                "size {} does not match manifest ({})",
                blob.len(),
                manifest.images_bytes
            ),
        ));
    }
    if crc32fast::hash(&blob) != manifest.images_crc32 {
        return Err(Error::format(&bpath, "checksum mismatch"));
    }
    let s = manifest.image_size;
    let plane = CHANNELS * s * s;
    let ncls = manifest.classes.len();
    let mut samples = Vec::with_capacity(manifest.image_count);
    let mut pos = 0usize;
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.id != i {
            return Err(bad(format!("record {i} has id {}", rec.id)));
        }
        let frame = blob
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format(&bpath, format!("truncated before image {i}")))?;
        let len = u32::from_le_bytes(frame.try_into().expect("4 bytes")) as usize;
        if len != plane {
            return Err(Error::format(
                &bpath,
                format!("image {i} has {len} bytes, expected {plane}"),
            ));
        }
        let pixels = blob
            .get(pos + 4..pos + 4 + len)
            .ok_or_else(|| Error::format(&bpath, format!("image {i} truncated")))?
            .to_vec();
        pos += 4 + len;
        for o in &rec.objects {
            let [x0, y0, x1, y1] = o.bbox;
            if o.class_id == 0
                || o.class_id > ncls
                || x0 >= x1
                || y0 >= y1
                || x1 as usize > s
                || y1 as usize > s
            {
                return Err(bad(format!("image {i}: invalid object {o:?}")));
            }
        }
        samples.push(Sample {
            pixels,
            annotations: normalize(&rec.objects, s)?,
        });
    }
    if pos != blob.len() {
        return Err(Error::format(
            &bpath,
            format!("{} trailing bytes", blob.len() - pos),
        ));
    }
    Ok(Dataset { manifest, samples })
}

/// Generates and writes a dataset; returns it as well.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    n_images: usize,
    image_size: usize,
    small_fraction: f64,
) -> Result<Dataset> {
    let ds = generate_dataset(seed, n_images, image_size, small_fraction)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.save(dir)?;
    Ok(ds)
}
