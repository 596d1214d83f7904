//! Bag manifests, PPM image I/O, preprocessing, and synthetic
//! fixture generation.
//!
//! A dataset is a JSON manifest of bags; each bag carries image paths
//! (relative to the manifest's directory) and captions. Images are
//! binary PPM (P6, maxval 255) only.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Where a bag's figures were collected from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pubmed,
    Books,
}

/// One figure bag: images that share a set of captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub source: Source,
    pub images: Vec<String>,
    pub captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    bags: Vec<Bag>,
}

/// A loaded manifest: surviving bags in file order, plus the directory
/// that image paths resolve against.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub bags: Vec<Bag>,
    pub dropped: usize,
}

impl Manifest {
    /// Absolute-ish path of one image of one bag.
    pub fn image_path(&self, bag: &Bag, index: usize) -> PathBuf {
        self.root.join(&bag.images[index])
    }
}

/// Parses a manifest and drops unusable bags.
///
/// A bag is dropped (with one stderr line each) when any of its image
/// files is missing or it has no images or no captions. Duplicate bag
/// ids and zero surviving bags are errors; so is malformed JSON, which
/// is reported with its byte offset.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    let parsed: ManifestFile = serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        Error::Data(format!(
            "{}: malformed manifest at byte {offset} (line {}, column {}): {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let root = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();

    let mut seen = BTreeSet::new();
    for bag in &parsed.bags {
        if !seen.insert(bag.id.as_str()) {
            return Err(Error::Data(format!(
                "{}: duplicate bag id {:?}",
                path.display(),
                bag.id
            )));
        }
    }

    let mut bags = Vec::new();
    let mut dropped = 0;
    for bag in parsed.bags {
        let reason = if bag.images.is_empty() {
            Some("no images".to_string())
        } else if bag.captions.is_empty() {
            Some("no captions".to_string())
        } else {
            bag.images
                .iter()
                .find(|img| !root.join(img.as_str()).is_file())
                .map(|img| format!("missing image {img}"))
        };
        match reason {
            Some(reason) => {
                eprintln!("dropping bag {}: {reason}", bag.id);
                dropped += 1;
            }
            None => bags.push(bag),
        }
    }
    if bags.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable bags ({dropped} dropped)",
            path.display()
        )));
    }
    Ok(Manifest {
        root,
        bags,
        dropped,
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

/// Decoded 8-bit RGB image, row-major, origin top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, `3 * width * height` bytes.
    pub pixels: Vec<u8>,
}

/// Reads a binary PPM (P6, maxval 255) file.
pub fn decode_ppm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    parse_ppm(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses PPM bytes. Header fields may be separated by whitespace and
/// `#` comments.
pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)
        .ok_or_else(|| Error::Data("ppm magic: missing".to_string()))?;
    if magic != b"P6" {
        return Err(Error::Data(format!(
            "ppm magic: expected \"P6\", found {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Data(format!(
            "ppm maxval: unsupported value {maxval} (only 255)"
        )));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Data(
            "ppm header: missing separator before pixel data".to_string(),
        ));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Data("ppm dimensions: overflow".to_string()))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(Error::Data(format!(
            "ppm pixel data: truncated, need {need} bytes, found {have}"
        )));
    }
    Ok(RawImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(bytes[start..*pos].to_vec())
    } else {
        None
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok =
        header_token(bytes, pos).ok_or_else(|| Error::Data(format!("ppm {field}: missing")))?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0 || field == "maxval")
        .ok_or_else(|| {
            Error::Data(format!(
                "ppm {field}: invalid value {:?}",
                String::from_utf8_lossy(&tok)
            ))
        })
}

/// Writes a binary PPM (P6, maxval 255) file.
pub fn write_ppm(path: &Path, image: &RawImage) -> Result<()> {
    if image.pixels.len() != 3 * image.width * image.height {
        return Err(Error::InvalidArgument(format!(
            "ppm write: {} pixels bytes for {}x{}",
            image.pixels.len(),
            image.width,
            image.height
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    fs::write(path, out).map_err(|e| Error::Io(path.display().to_string(), e))
}

/// Preprocessed image: three square f64 planes in [-1, 1],
/// channel-major layout (`data[c][y][x]` flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub size: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.size * self.size + y * self.size + x]
    }
}

/// Nearest-neighbor resize to `target` x `target`, then maps bytes
/// through x/255 and (v - 0.5)/0.5, landing in [-1, 1].
pub fn preprocess_image(raw: &RawImage, target: usize) -> Result<ImageTensor> {
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::InvalidArgument(
            "preprocess: image has a zero dimension".to_string(),
        ));
    }
    if target == 0 {
        return Err(Error::InvalidArgument(
            "preprocess: target extent must be positive".to_string(),
        ));
    }
    let mut data = vec![0.0; 3 * target * target];
    for y in 0..target {
        let sy = y * raw.height / target;
        for x in 0..target {
            let sx = x * raw.width / target;
            let px = 3 * (sy * raw.width + sx);
            for c in 0..3 {
                let v = f64::from(raw.pixels[px + c]) / 255.0;
                data[c * target * target + y * target + x] = (v - 0.5) / 0.5;
            }
        }
    }
    Ok(ImageTensor { size: target, data })
}

/// Words available to the fixture caption grammar. The color and
/// pattern slots also drive the rendered image.
const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [200, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [50, 80, 200]),
    ("yellow", [220, 200, 40]),
    ("purple", [140, 60, 180]),
    ("orange", [230, 140, 30]),
    ("teal", [30, 160, 160]),
    ("gray", [120, 120, 120]),
];
const PATTERNS: [&str; 3] = ["stripes", "checkerboard", "gradient"];
const SCALES: [&str; 3] = ["fine", "coarse", "broad"];
/// Compass placements of the patterned block; offsets are multiples of
/// the default patch size, so moving the block rearranges patches
/// without changing their contents. A mean-pooled encoder is blind to
/// the rearrangement; an attention encoder with positional tables is
/// not, which is what the encoder ablation leans on.
const POSITIONS: [(&str, (usize, usize)); 8] = [
    ("northwest", (0, 0)),
    ("north", (8, 0)),
    ("northeast", (16, 0)),
    ("west", (0, 8)),
    ("east", (16, 8)),
    ("southwest", (0, 16)),
    ("south", (8, 16)),
    ("southeast", (16, 16)),
];
const BACKGROUND: [u8; 3] = [240, 240, 235];
const FIXTURE_EXTENT: usize = 32;
const BLOCK: usize = 16;

/// Writes `pairs` procedurally patterned PPM images plus a
/// manifest.json into `out_dir`. Each bag holds one image and one
/// caption; captions are pairwise distinct and the whole tree is a
/// pure function of (pairs, seed).
pub fn synth_fixture(out_dir: &Path, pairs: usize, seed: u64) -> Result<Manifest> {
    if pairs == 0 {
        return Err(Error::InvalidArgument(
            "fixture needs at least one pair".to_string(),
        ));
    }
    let capacity = COLORS.len() * PATTERNS.len() * SCALES.len() * POSITIONS.len();
    if pairs > capacity {
        return Err(Error::InvalidArgument(format!(
            "caption grammar supports at most {capacity} distinct pairs, asked for {pairs}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::Io(out_dir.display().to_string(), e))?;

    let mut rng = rng::labeled(seed, "synth");
    let mut used = BTreeSet::new();
    let mut bags = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let mut guard = 0;
        let (color, pattern, scale, position) = loop {
            let pick = (
                rng.gen_range(0..COLORS.len()),
                rng.gen_range(0..PATTERNS.len()),
                rng.gen_range(0..SCALES.len()),
                rng.gen_range(0..POSITIONS.len()),
            );
            if used.insert(pick) {
                break pick;
            }
            guard += 1;
            if guard > 10_000 {
                return Err(Error::InvalidArgument(
                    "caption grammar exhausted while sampling distinct pairs".to_string(),
                ));
            }
        };
        let caption = format!(
            "a {} {} tile with {} grain at {} .",
            COLORS[color].0, PATTERNS[pattern], SCALES[scale], POSITIONS[position].0
        );
        let image_name = format!("img{i:04}.ppm");
        let image = render_pattern(pattern, scale, COLORS[color].1, POSITIONS[position].1);
        write_ppm(&out_dir.join(&image_name), &image)?;
        bags.push(Bag {
            id: format!("bag{i:04}"),
            source: if i % 2 == 0 {
                Source::Pubmed
            } else {
                Source::Books
            },
            images: vec![image_name],
            captions: vec![caption],
        });
    }

    let file = ManifestFile { bags };
    let mut json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    json.push('\n');
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, json)
        .map_err(|e| Error::Io(manifest_path.display().to_string(), e))?;
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        bags: file.bags,
        dropped: 0,
    })
}

fn render_pattern(pattern: usize, scale: usize, fg: [u8; 3], block_at: (usize, usize)) -> RawImage {
    let n = FIXTURE_EXTENT;
    let (bx, by) = block_at;
    let mut pixels = vec![0u8; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let inside = x >= bx && x < bx + BLOCK && y >= by && y < by + BLOCK;
            // Pattern coordinates are block-local, so the block's
            // pixel content is identical at every position.
            let (lx, ly) = (x.wrapping_sub(bx), y.wrapping_sub(by));
            let rgb = if !inside {
                BACKGROUND
            } else {
                match pattern {
                    // stripes: horizontal bands of width 2/4/8
                    0 => {
                        let w = [2, 4, 8][scale];
                        if (ly / w) % 2 == 0 {
                            fg
                        } else {
                            BACKGROUND
                        }
                    }
                    // checkerboard: square cells of side 2/4/8
                    1 => {
                        let c = [2, 4, 8][scale];
                        if (lx / c + ly / c) % 2 == 0 {
                            fg
                        } else {
                            BACKGROUND
                        }
                    }
                    // gradient: background toward fg along x, y, or x+y
                    _ => {
                        let t = match scale {
                            0 => lx as f64 / (BLOCK - 1) as f64,
                            1 => ly as f64 / (BLOCK - 1) as f64,
                            _ => (lx + ly) as f64 / (2 * BLOCK - 2) as f64,
                        };
                        let mut rgb = [0u8; 3];
                        for c in 0..3 {
                            let v = f64::from(BACKGROUND[c])
                                + t * (f64::from(fg[c]) - f64::from(BACKGROUND[c]));
                            rgb[c] = v.round() as u8;
                        }
                        rgb
                    }
                }
            };
            let px = 3 * (y * n + x);
            pixels[px..px + 3].copy_from_slice(&rgb);
        }
    }
    RawImage {
        width: n,
        height: n,
        pixels,
    }
}

/// Human-readable one-line summary used by the command line.
pub fn describe_manifest(m: &Manifest) -> String {
    let mut s = String::new();
    let images: usize = m.bags.iter().map(|b| b.images.len()).sum();
    let captions: usize = m.bags.iter().map(|b| b.captions.len()).sum();
    let _ = write!(
        s,
        "{} bags, {images} images, {captions} captions ({} dropped)",
        m.bags.len(),
        m.dropped
    );
    s
}
