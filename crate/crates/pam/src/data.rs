//! CIFAR binary datasets: reading, writing and conversion to normalised tensors.

use std::fs;
use std::path::{Path, PathBuf};

use pam_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Record layout of a CIFAR binary file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarFormat {
    /// `<label byte><3072 pixel bytes>`, files `data_batch_*.bin` and `test_batch.bin`.
    Cifar10,
    /// `<coarse byte><fine byte><3072 pixel bytes>`, files `train.bin` and `test.bin`.
    Cifar100,
}

impl CifarFormat {
    fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }
}

/// Images as CHW u8 planes with one class id each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn indices_of(&self, classes: &[u32]) -> Vec<usize> {
        pam_core::stream::indices_for(&self.labels, classes)
    }
}

pub fn parse_cifar(bytes: &[u8], format: CifarFormat) -> Result<(Vec<u8>, Vec<u32>)> {
    let skip = format.label_bytes();
    let record = skip + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Ingestion(format!(
            "{} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(record) {
        labels.push(r[skip - 1] as u32);
        images.extend_from_slice(&r[skip..]);
    }
    Ok((images, labels))
}

pub fn encode_cifar(images: &[u8], labels: &[u32], format: CifarFormat) -> Result<Vec<u8>> {
    if images.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::Format(format!("{} pixel bytes for {} labels", images.len(), labels.len())));
    }
    let mut out = Vec::with_capacity(labels.len() * (CIFAR_PIXELS + 2));
    for (i, &l) in labels.iter().enumerate() {
        let l = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in one byte")))?;
        if format == CifarFormat::Cifar100 {
            out.push(0);
        }
        out.push(l);
        out.extend_from_slice(&images[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
    }
    Ok(out)
}

fn read_names(path: &Path) -> Option<Vec<String>> {
    let text = fs::read_to_string(path).ok()?;
    Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Resolves the extracted archive directory if `root` is its parent.
fn dataset_dir(root: &Path, format: CifarFormat) -> PathBuf {
    let nested = match format {
        CifarFormat::Cifar10 => root.join("cifar-10-batches-bin"),
        CifarFormat::Cifar100 => root.join("cifar-100-binary"),
    };
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_files(files: &[PathBuf], format: CifarFormat, names: Vec<String>) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(io_err(f))?;
        let (i, l) = parse_cifar(&bytes, format).map_err(|e| Error::Ingestion(format!("{}: {e}", f.display())))?;
        images.extend(i);
        labels.extend(l);
    }
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let class_names = if names.len() > max { names } else { (0..=max).map(|c| format!("class_{c}")).collect() };
    Ok(Dataset { images, labels, class_names })
}

/// Loads the train and test splits of a CIFAR binary directory.
pub fn load_cifar(root: &Path, format: CifarFormat) -> Result<(Dataset, Dataset)> {
    let dir = dataset_dir(root, format);
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "dataset directory {} does not exist; set data.root or PAM_DATA_ROOT, or create a corpus with `pam synth`",
            dir.display()
        )));
    }
    let (train_files, test_files, names) = match format {
        CifarFormat::Cifar10 => {
            let mut train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.is_file()).collect();
            train.sort();
            (train, vec![dir.join("test_batch.bin")], read_names(&dir.join("batches.meta.txt")))
        }
        CifarFormat::Cifar100 => {
            (vec![dir.join("train.bin")], vec![dir.join("test.bin")], read_names(&dir.join("fine_label_names.txt")))
        }
    };
    if train_files.is_empty() || !train_files.iter().chain(&test_files).all(|p| p.is_file()) {
        return Err(Error::Ingestion(format!("{} is missing CIFAR binary batch files", dir.display())));
    }
    let names = names.unwrap_or_default();
    let train = read_files(&train_files, format, names.clone())?;
    let test = read_files(&test_files, format, names)?;
    let (a, b) = (train.classes(), test.classes());
    if a != b {
        return Err(Error::Ingestion(format!("train split has classes {a:?} but test split has {b:?}")));
    }
    Ok((train, test))
}

/// Writes a CIFAR-10 style directory (one training batch).
pub fn write_cifar10_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    write("data_batch_1.bin", encode_cifar(&train.images, &train.labels, CifarFormat::Cifar10)?)?;
    write("test_batch.bin", encode_cifar(&test.images, &test.labels, CifarFormat::Cifar10)?)?;
    let mut names = train.class_names.join("\n");
    names.push('\n');
    write("batches.meta.txt", names.into_bytes())
}

/// Per-channel normalisation constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] }
    }
}

/// Converts the selected images to an `N x 3 x side x side` tensor, resizing bilinearly if needed.
pub fn to_tensor(data: &Dataset, indices: &[usize], norm: &Normalization, side: usize) -> Result<Tensor> {
    let plane = side * side;
    let mut out = vec![0.0f32; indices.len() * 3 * plane];
    for (n, &i) in indices.iter().enumerate() {
        if i >= data.len() {
            return Err(Error::Ingestion(format!("sample index {i} out of range")));
        }
        let img = data.image(i);
        for c in 0..3 {
            let src = &img[c * CIFAR_SIDE * CIFAR_SIDE..(c + 1) * CIFAR_SIDE * CIFAR_SIDE];
            let dst = &mut out[(n * 3 + c) * plane..(n * 3 + c + 1) * plane];
            if side == CIFAR_SIDE {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s as f32 / 255.0 - norm.mean[c]) / norm.std[c];
                }
            } else {
                resize_bilinear(src, CIFAR_SIDE, side, dst);
                for d in dst.iter_mut() {
                    *d = (*d / 255.0 - norm.mean[c]) / norm.std[c];
                }
            }
        }
    }
    Ok(Tensor::from_vec([indices.len(), 3, side, side], out)?)
}

fn resize_bilinear(src: &[u8], from: usize, to: usize, dst: &mut [f32]) {
    let scale = from as f32 / to as f32;
    for y in 0..to {
        let fy = ((y as f32 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f32);
        let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(from - 1);
        for x in 0..to {
            let fx = ((x as f32 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f32);
            let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(from - 1);
            let p = |yy: usize, xx: usize| src[yy * from + xx] as f32;
            let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
            let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
            dst[y * to + x] = top * (1.0 - wy) + bottom * wy;
        }
    }
}
