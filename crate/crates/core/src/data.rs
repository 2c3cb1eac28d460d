//! Dataset loading: MNIST IDX files, flat binary blobs described by a TOML
//! manifest, stochastic binarization and seeded splits.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, RngStream, Tensor};
use crate::error::{Error, Result};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "MEMDGM_DATA_DIR";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as rows of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Option<Vec<u8>>, height: usize, width: usize) -> Result<Self> {
        if images.ndim() != 2 || images.cols() != height * width {
            return Err(Error::shape("dataset", format!("images {:?} for {height}×{width} pixels", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::invalid(format!("{} labels for {} images", l.len(), images.rows())));
            }
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain("dataset", format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self { name: name.into(), images, labels, height, width })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn subset(&self, rows: &[usize], name: impl Into<String>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            images: self.images.select_rows(rows)?,
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            height: self.height,
            width: self.width,
        })
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows, self.name.clone())
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse { offset: offset as u64, detail: "truncated header".into() })
}

/// Parsed IDX image file: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse { offset: 0, detail: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}") });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Parse {
            offset: 16 + body.len().min(need) as u64,
            detail: format!("expected {need} pixel bytes for {count} images of {rows}×{cols}, found {}", body.len()),
        });
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse { offset: 0, detail: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}") });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Parse {
            offset: 8 + body.len().min(count) as u64,
            detail: format!("expected {count} label bytes, found {}", body.len()),
        });
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn bytes_to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Quantizes intensities back to bytes, `round(255·v)`.
pub fn to_bytes(intensities: &[f32]) -> Vec<u8> {
    intensities.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Loads an IDX image file (optionally gzip-compressed) and its labels.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let img = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = match labels_path {
        Some(p) => {
            let l = parse_idx_labels(&read_maybe_gz(p)?)?;
            if l.len() != img.count {
                return Err(Error::invalid(format!("{} labels for {} images", l.len(), img.count)));
            }
            Some(l)
        }
        None => None,
    };
    let name = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let images = Tensor::new(&[img.count, img.rows * img.cols], bytes_to_unit(&img.pixels))?;
    Dataset::new(name, images, labels, img.rows, img.cols)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    U8,
    F32,
}

/// Description of a flat binary dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatManifest {
    pub name: String,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: ElementType,
    /// Image blob, relative to the manifest's directory.
    pub images: PathBuf,
    /// One byte per image.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

/// Loads a flat-binary dataset described by a TOML manifest.
pub fn load_flat(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let m: FlatManifest = toml::from_str(&text).map_err(|e| Error::config(manifest_path.display().to_string(), e.message().to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let raw = read_maybe_gz(&base.join(&m.images))?;
    let count = m.n * m.height * m.width;
    let data: Vec<f32> = match m.dtype {
        ElementType::U8 => {
            if raw.len() != count {
                return Err(Error::Parse { offset: raw.len().min(count) as u64, detail: format!("expected {count} bytes, found {}", raw.len()) });
            }
            bytes_to_unit(&raw)
        }
        ElementType::F32 => {
            if raw.len() != 4 * count {
                return Err(Error::Parse {
                    offset: raw.len().min(4 * count) as u64,
                    detail: format!("expected {} bytes, found {}", 4 * count, raw.len()),
                });
            }
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        }
    };
    let labels = match &m.labels {
        Some(p) => {
            let l = read_maybe_gz(&base.join(p))?;
            if l.len() != m.n {
                return Err(Error::invalid(format!("{} labels for {} images", l.len(), m.n)));
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(m.name, Tensor::new(&[m.n, m.height * m.width], data)?, labels, m.height, m.width)
}

/// Independent Bernoulli draw per pixel with the pixel intensity as mean.
pub fn binarize<T: Real>(batch: &Tensor<T>, rng: &mut RngStream) -> Result<Tensor<T>> {
    rng.bernoulli(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub parts: Vec<(String, usize)>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(parts: &[(&str, usize)], seed: u64) -> Self {
        Self { parts: parts.iter().map(|(n, s)| (n.to_string(), *s)).collect(), seed }
    }
}

/// Seeded shuffle, then consecutive blocks of the requested sizes.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Vec<Dataset>> {
    let total: usize = spec.parts.iter().map(|p| p.1).sum();
    if total > data.len() {
        return Err(Error::invalid(format!("split sizes sum to {total} but the dataset has {}", data.len())));
    }
    let order = RngStream::new(spec.seed, "split").permutation(data.len());
    let mut start = 0;
    spec.parts
        .iter()
        .map(|(name, size)| {
            let part = data.subset(&order[start..start + size], format!("{}/{name}", data.name));
            start += size;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx() -> Vec<u8> {
        encode_idx_images(&IdxImages { count: 1, rows: 2, cols: 2, pixels: vec![0, 255, 128, 64] })
    }

    #[test]
    fn idx_scaling_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        fs::write(&p, tiny_idx()).unwrap();
        let d = load_idx(&p, None).unwrap();
        let want = [0.0, 1.0, 0.501_96, 0.250_98];
        for (a, b) in d.images.data().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        assert_eq!(to_bytes(d.images.data()), vec![0, 255, 128, 64]);

        let mut bad = tiny_idx();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Parse { offset: 0, .. })));
        let short = &tiny_idx()[..18];
        assert!(matches!(parse_idx_images(short), Err(Error::Parse { offset: 18, .. })));
        assert!(matches!(parse_idx_images(&tiny_idx()[..6]), Err(Error::Parse { offset: 4, .. })));
        let labels = encode_idx_labels(&[3, 1]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![3, 1]);
        let lp = dir.path().join("lab");
        fs::write(&lp, labels).unwrap();
        assert!(load_idx(&p, Some(&lp)).is_err());
    }

    #[test]
    fn flat_manifests() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("u8.bin"), [0u8, 51, 255, 102, 7, 9]).unwrap();
        fs::write(dir.path().join("u8.lab"), [1u8, 2, 3]).unwrap();
        let manifest = "name = \"toy\"\nn = 3\nheight = 1\nwidth = 2\ndtype = \"u8\"\nimages = \"u8.bin\"\nlabels = \"u8.lab\"\n";
        fs::write(dir.path().join("u8.toml"), manifest).unwrap();
        let d = load_flat(&dir.path().join("u8.toml")).unwrap();
        assert_eq!((d.len(), d.input_dim()), (3, 2));
        assert_eq!(d.labels.as_deref(), Some(&[1u8, 2, 3][..]));

        let vals: Vec<u8> = [0.5f32, 1.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("f.bin"), vals).unwrap();
        let manifest = "name = \"f\"\nn = 1\nheight = 1\nwidth = 2\ndtype = \"f32\"\nimages = \"f.bin\"\n";
        fs::write(dir.path().join("f.toml"), manifest).unwrap();
        assert!(matches!(load_flat(&dir.path().join("f.toml")), Err(Error::Domain { .. })));

        let manifest = "name = \"f\"\nn = 1\nheight = 1\nwidth = 2\ndtype = \"f64\"\nimages = \"f.bin\"\n";
        fs::write(dir.path().join("g.toml"), manifest).unwrap();
        assert!(matches!(load_flat(&dir.path().join("g.toml")), Err(Error::Config { .. })));

        let manifest = "name = \"u\"\nn = 4\nheight = 1\nwidth = 2\ndtype = \"u8\"\nimages = \"u8.bin\"\n";
        fs::write(dir.path().join("h.toml"), manifest).unwrap();
        assert!(matches!(load_flat(&dir.path().join("h.toml")), Err(Error::Parse { .. })));
    }

    #[test]
    fn binarize_moments() {
        let mut rng = RngStream::new(1, "binarize");
        let x = Tensor::<f32>::from_f64(&[1, 3], &[0.0, 1.0, 0.3]).unwrap();
        let mut hits = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let b = binarize(&x, &mut rng).unwrap();
            assert_eq!((b.data()[0], b.data()[1]), (0.0, 1.0));
            hits += b.data()[2] as f64;
        }
        assert!((hits / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let images = Tensor::from_fn(&[1965, 1], |i| (i as f32) / 1965.0);
        let d = Dataset::new("frey", images, None, 1, 1).unwrap();
        let spec = SplitSpec::new(&[("train", 1865), ("test", 100)], 9);
        let parts = split(&d, &spec).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (1865, 100));
        let mut all: Vec<f32> = parts.iter().flat_map(|p| p.images.data().to_vec()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        assert_eq!(all.len(), 1965);
        assert_eq!(split(&d, &spec).unwrap(), parts);
        assert!(split(&d, &SplitSpec::new(&[("a", 2000)], 0)).is_err());
    }
}
