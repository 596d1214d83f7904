//! Image-to-text alignment: a similarity matrix between images and
//! captions, rendered as CSV plus a green-to-blue PPM heatmap.
//!
//! Both sides of the comparison live in token-embedding space. A
//! caption's vector is the mean embedding of its word tokens, fixed
//! regardless of pairing. An image's vector is the mean embedding of
//! the caption the model itself generates for it — an image-only
//! computation, since generation starts from BOS and consumes nothing
//! but the image. The entry is then a plain cosine rescaled to
//! [0, 100]; no caption is ever scored by its likelihood under the
//! image, so the score stays a genuine cross-modal comparison.

use std::path::Path;

use crate::data::{write_ppm, ImageTensor, RawImage};
use crate::decode::{encode_to_tensor, greedy_decode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Parameters;
use crate::text::{self, Vocabulary, BOS, EOS, PAD};

/// Pixel edge of one rendered matrix cell.
const CELL: usize = 16;

/// Similarity scores, one row per image and one column per caption,
/// each in [0, 100].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_images: usize,
    n_captions: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n_images: usize, n_captions: usize, values: Vec<f64>) -> Result<SimilarityMatrix> {
        if n_images == 0 || n_captions == 0 {
            return Err(Error::InvalidArgument(
                "similarity matrix needs at least one image and one caption".into(),
            ));
        }
        if values.len() != n_images * n_captions {
            return Err(Error::InvalidArgument(format!(
                "similarity matrix {n_images}x{n_captions} expects {} values, got {}",
                n_images * n_captions,
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=100.0).contains(*v)))
        {
            return Err(Error::Numeric(format!(
                "similarity entry {bad} is outside [0, 100]"
            )));
        }
        Ok(SimilarityMatrix {
            n_images,
            n_captions,
            values,
        })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_captions(&self) -> usize {
        self.n_captions
    }

    pub fn at(&self, image: usize, caption: usize) -> f64 {
        self.values[image * self.n_captions + caption]
    }

    /// Column index of the largest entry in one row (first on ties).
    pub fn row_argmax(&self, image: usize) -> usize {
        let row = &self.values[image * self.n_captions..(image + 1) * self.n_captions];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

fn cosine(a: &[f64], b: &[f64], what: &str) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        eprintln!("heatmap: zero-norm vector for {what}; cosine treated as 0");
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Mean token embedding over word ids; sequence markers (pad, bos,
/// eos) are excluded so the vector depends only on the words. An
/// all-marker sequence yields the zero vector.
fn embedding_mean(params: &Parameters, cfg: &ModelConfig, ids: &[u32]) -> Result<Vec<f64>> {
    // Same word budget as caption encoding, so a generated and a
    // written form of one caption produce the same vector.
    let words: Vec<u32> = ids
        .iter()
        .copied()
        .filter(|&id| id != PAD && id != BOS && id != EOS)
        .take(cfg.max_caption_len.saturating_sub(2))
        .collect();
    let emb = params.get("tok_emb")?;
    let d = cfg.d_model;
    let mut mean = vec![0.0; d];
    for &id in &words {
        let row = &emb.data()[id as usize * d..(id as usize + 1) * d];
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    if !words.is_empty() {
        for m in &mut mean {
            *m /= words.len() as f64;
        }
    }
    Ok(mean)
}

/// Mean token embedding of a caption string.
fn caption_vector(
    params: &Parameters,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    caption: &str,
) -> Result<Vec<f64>> {
    let ids = text::encode(vocab, caption, cfg.max_caption_len)?;
    embedding_mean(params, cfg, &ids)
}

/// Mean token embedding of the caption the model generates for an
/// image (greedy decoding). A function of the image and parameters
/// alone.
fn image_vector(params: &Parameters, cfg: &ModelConfig, img: &ImageTensor) -> Result<Vec<f64>> {
    let memory = encode_to_tensor(params, cfg, img)?;
    let ids = greedy_decode(params, cfg, &memory)?;
    embedding_mean(params, cfg, &ids)
}

/// Scores every image against every caption.
///
/// An image's vector is the mean word-token embedding of its own
/// generated caption; a caption's vector is its mean word-token
/// embedding, independent of any image. Each entry is
/// 50 * (1 + cosine), so 50 marks orthogonality (or a zero-norm
/// vector, which warns).
pub fn similarity_matrix(
    params: &Parameters,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    images: &[ImageTensor],
    captions: &[String],
) -> Result<SimilarityMatrix> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity matrix needs at least one image and one caption".into(),
        ));
    }
    let image_vectors: Vec<Vec<f64>> = images
        .iter()
        .map(|img| image_vector(params, cfg, img))
        .collect::<Result<_>>()?;
    let caption_vectors: Vec<Vec<f64>> = captions
        .iter()
        .map(|c| caption_vector(params, cfg, vocab, c))
        .collect::<Result<_>>()?;

    let mut values = Vec::with_capacity(images.len() * captions.len());
    for (i, iv) in image_vectors.iter().enumerate() {
        for (j, cv) in caption_vectors.iter().enumerate() {
            let cos = cosine(iv, cv, &format!("image {i} / caption {j}"));
            values.push((50.0 * (1.0 + cos)).clamp(0.0, 100.0));
        }
    }
    SimilarityMatrix::new(images.len(), captions.len(), values)
}

/// Row-major CSV with six decimal places per entry.
pub fn matrix_to_csv(m: &SimilarityMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.n_images {
        let row: Vec<String> = (0..m.n_captions)
            .map(|j| format!("{:.6}", m.at(i, j)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reads a matrix back from its CSV form.
pub fn parse_heatmap_csv(text: &str) -> Result<SimilarityMatrix> {
    let mut values = Vec::new();
    let mut n_captions = None;
    let mut n_images = 0;
    for (lineno, line) in text.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("heatmap csv line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match n_captions {
            None => n_captions = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Data(format!(
                    "heatmap csv line {}: expected {w} cells, got {}",
                    lineno + 1,
                    row.len()
                )));
            }
            Some(_) => {}
        }
        values.extend(row);
        n_images += 1;
    }
    let n_captions = n_captions.ok_or_else(|| Error::Data("heatmap csv is empty".into()))?;
    SimilarityMatrix::new(n_images, n_captions, values)
}

/// Color of one cell: green (0,200,0) at the matrix minimum fading
/// linearly to blue (0,0,200) at the maximum; a constant matrix stays
/// green.
fn cell_color(value: f64, min: f64, max: f64) -> [u8; 3] {
    let t = if max > min {
        (value - min) / (max - min)
    } else {
        0.0
    };
    [
        0,
        (200.0 * (1.0 - t)).round() as u8,
        (200.0 * t).round() as u8,
    ]
}

/// Renders a matrix into an RGB image with one 16x16 block per cell.
pub fn render_image(m: &SimilarityMatrix) -> RawImage {
    let min = m.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = m.n_captions * CELL;
    let height = m.n_images * CELL;
    let mut pixels = vec![0u8; 3 * width * height];
    for i in 0..m.n_images {
        for j in 0..m.n_captions {
            let rgb = cell_color(m.at(i, j), min, max);
            for dy in 0..CELL {
                for dx in 0..CELL {
                    let p = 3 * ((i * CELL + dy) * width + j * CELL + dx);
                    pixels[p..p + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    RawImage {
        width,
        height,
        pixels,
    }
}

/// Writes `sim.csv` and `sim.ppm` into a directory.
pub fn render_heatmap(m: &SimilarityMatrix, out_dir: &Path) -> Result<()> {
    let csv_path = out_dir.join("sim.csv");
    std::fs::write(&csv_path, matrix_to_csv(m))
        .map_err(|e| Error::Io(csv_path.display().to_string(), e))?;
    write_ppm(&out_dir.join("sim.ppm"), &render_image(m))
}
