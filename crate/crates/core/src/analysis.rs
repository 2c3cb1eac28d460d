//! Memory introspection: per-class slot preferences, class correlations,
//! top slots, decoding single slots to images, disabling memories and
//! grayscale image grids.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::layers::{CompositionKind, Mode};
use crate::model::{decode, decode_from, decode_mean, encode, sample_latent, Nets};

/// Class-averaged attention of one memory layer, each row normalized to sum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceMatrix {
    /// 1-based layer index, counted from the data.
    pub layer: usize,
    pub classes: usize,
    pub slots: usize,
    /// Row-major `[classes × slots]`.
    pub values: Vec<f64>,
    /// Row sums before normalization.
    pub raw_row_sums: Vec<f64>,
}

impl PreferenceMatrix {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.slots..(class + 1) * self.slots]
    }

    /// Tab-separated rows, one per class.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for c in 0..self.classes {
            let row: Vec<String> = self.row(c).iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Averages attention over each class on the path `x → q → z → p`, one
/// matrix per memory layer.
pub fn slot_preferences<T: Real>(
    nets: &Nets<T>,
    data: &Tensor<T>,
    labels: &[u8],
    rng: &mut RngStream,
) -> Result<Vec<PreferenceMatrix>> {
    if labels.len() != data.rows() || labels.is_empty() {
        return Err(Error::shape("slot_preferences", format!("{} labels for {} images", labels.len(), data.rows())));
    }
    let classes = *labels.iter().max().unwrap() as usize + 1;
    let layers: Vec<(usize, usize)> = nets
        .model
        .generative
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.memory.as_ref().map(|m| (i, m.slots)))
        .collect();
    if layers.is_empty() {
        return Err(Error::invalid("model has no memory layers"));
    }
    let mut sums: Vec<Vec<f64>> = layers.iter().map(|&(_, s)| vec![0.0; classes * s]).collect();
    let mut counts = vec![0usize; classes];
    let idx: Vec<usize> = (0..data.rows()).collect();
    for rows in idx.chunks(256) {
        let batch = data.select_rows(rows)?;
        let mut g = Graph::new(&nets.params);
        let x = g.constant(batch);
        let enc = encode(&mut g, &nets.model, x, Mode::Eval)?;
        let s = sample_latent(&mut g, &enc, rng, 1)?;
        let dec = decode(&mut g, &nets.model, s.z, Mode::Eval, &[])?;
        for (li, &(layer, slots)) in layers.iter().enumerate() {
            let h_a = g.value(dec.attention[layer].expect("memory layer attention"));
            for (r, &datum) in rows.iter().enumerate() {
                let c = labels[datum] as usize;
                for (acc, v) in sums[li][c * slots..(c + 1) * slots].iter_mut().zip(h_a.row(r)) {
                    *acc += v.as_f64();
                }
            }
        }
        for &datum in rows {
            counts[labels[datum] as usize] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {empty} has no examples")));
    }
    layers
        .iter()
        .zip(sums)
        .map(|(&(layer, slots), mut values)| {
            let mut raw_row_sums = Vec::with_capacity(classes);
            for c in 0..classes {
                let row = &mut values[c * slots..(c + 1) * slots];
                for v in row.iter_mut() {
                    *v /= counts[c] as f64;
                }
                let total: f64 = row.iter().sum();
                if total <= 0.0 {
                    return Err(Error::domain("slot_preferences", format!("class {c} has zero total attention")));
                }
                raw_row_sums.push(total);
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok(PreferenceMatrix { layer: layer + 1, classes, slots, values, raw_row_sums })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCorrelation {
    pub classes: usize,
    /// Row-major symmetric `[classes × classes]`.
    pub matrix: Vec<f64>,
    /// `(i, j, r)` for `i < j`, by decreasing `r`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl ClassCorrelation {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.classes + j]
    }

    pub fn edges_tsv(&self) -> String {
        self.edges.iter().map(|(i, j, r)| format!("{i}\t{j}\t{r:.6}\n")).collect()
    }
}

/// Pearson correlation between every pair of preference rows.
pub fn class_correlations(pref: &PreferenceMatrix) -> Result<ClassCorrelation> {
    if pref.slots < 2 {
        return Err(Error::invalid("correlations need at least two slots"));
    }
    let n = pref.classes;
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let row = pref.row(c);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(c) = norms.iter().position(|&s| s == 0.0) {
        return Err(Error::domain("class_correlations", format!("class {c} has a constant preference row")));
    }
    let mut matrix = vec![0.0; n * n];
    let mut edges = Vec::new();
    for i in 0..n {
        matrix[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            matrix[i * n + j] = r;
            matrix[j * n + i] = r;
            edges.push((i, j, r));
        }
    }
    edges.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(ClassCorrelation { classes: n, matrix, edges })
}

/// The `k` strongest slots per class, ties to the lower slot index.
pub fn top_slots(pref: &PreferenceMatrix, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if k > pref.slots {
        return Err(Error::invalid(format!("asked for {k} of {} slots", pref.slots)));
    }
    Ok((0..pref.classes)
        .map(|c| {
            let mut ranked: Vec<(usize, f64)> = pref.row(c).iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            ranked
        })
        .collect())
}

/// Decodes one memory slot: at `layer` (1-based) the generative information
/// is zero and the memory read is column `slot` of `M`; lower layers run
/// normally. Needs summation composition.
pub fn slot_image<T: Real>(nets: &Nets<T>, layer: usize, slot: usize) -> Result<Tensor<T>> {
    let layers = &nets.model.generative.layers;
    let block = layer
        .checked_sub(1)
        .and_then(|i| layers.get(i))
        .and_then(|l| l.memory.as_ref())
        .ok_or_else(|| Error::invalid(format!("layer {layer} has no memory")))?;
    if block.composition_kind != CompositionKind::Summation {
        return Err(Error::invalid("slot images need summation composition; element-wise MLP slots are not images"));
    }
    if slot >= block.slots {
        return Err(Error::invalid(format!("slot {slot} out of range for {} slots", block.slots)));
    }
    let m = nets.params.get(block.memory);
    let column: Vec<T> = (0..block.width).map(|r| m.data()[r * block.slots + slot]).collect();
    let mut g = Graph::new(&nets.params);
    let h_g = g.constant(Tensor::zeros(&[1, block.width]));
    let h_m = g.constant(Tensor::new(&[1, block.width], column)?);
    let dec = decode_from(&mut g, &nets.model, layer, h_g, Mode::Eval, &[], Some((h_g, h_m)))?;
    Ok(g.value(dec.mean).clone())
}

/// Eval-mode decode of `z` with the memories of `disabled` (1-based) off.
pub fn generate_memory_disabled<T: Real>(nets: &Nets<T>, z: &Tensor<T>, disabled: &[usize]) -> Result<Tensor<T>> {
    let n = nets.model.generative.layers.len();
    if let Some(bad) = disabled.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::invalid(format!("layer {bad} out of range 1..={n}")));
    }
    decode_mean(nets, z, disabled)
}

/// Separator intensity between grid cells.
pub const SEPARATOR: f64 = 0.5;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale grid of images in row-major cell order, one-pixel separators at
/// mid gray, encoded as binary PGM. Unused cells are black.
pub fn image_grid(images: &[Vec<f64>], rows: usize, cols: usize, cell_h: usize, cell_w: usize) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || cell_h == 0 || cell_w == 0 {
        return Err(Error::invalid("grid dimensions must be positive"));
    }
    if images.len() > rows * cols {
        return Err(Error::invalid(format!("{} images do not fit a {rows}×{cols} grid", images.len())));
    }
    if let Some(i) = images.iter().position(|im| im.len() != cell_h * cell_w) {
        return Err(Error::shape("image_grid", format!("image {i} has {} pixels, cells hold {}", images[i].len(), cell_h * cell_w)));
    }
    let height = rows * cell_h + rows - 1;
    let width = cols * cell_w + cols - 1;
    let mut pixels = vec![quantize(SEPARATOR); height * width];
    for r in 0..rows {
        for c in 0..cols {
            let image = images.get(r * cols + c);
            for y in 0..cell_h {
                for x in 0..cell_w {
                    let v = image.map_or(0, |im| quantize(im[y * cell_w + x]));
                    pixels[(r * (cell_h + 1) + y) * width + c * (cell_w + 1) + x] = v;
                }
            }
        }
    }
    Ok(encode_pgm(width, height, &pixels))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255; returns `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { offset: pos as u64, detail: "truncated PGM header".into() });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(Error::Parse { offset: 0, detail: format!("expected P5, found `{}`", fields[0].1) });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].1.parse().map_err(|_| Error::Parse { offset: fields[i].0 as u64, detail: format!("bad number `{}`", fields[i].1) })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Parse { offset: fields[3].0 as u64, detail: format!("unsupported maxval {maxval}") });
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(Error::Parse { offset: (pos + 1) as u64, detail: format!("expected {} pixels, found {}", w * h, body.len()) });
    }
    Ok((w, h, body.to_vec()))
}
