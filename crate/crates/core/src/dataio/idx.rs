use std::path::Path;

use super::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC_LABELS: u32 = 0x0000_0801;
const MAGIC_IMAGES: u32 = 0x0000_0803;

/// Decoded unsigned-byte IDX payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX buffer: a big-endian `u32` magic (`0x0000_08NN`, type byte
/// `0x08` = unsigned byte, `NN` = rank), `NN` big-endian `u32` dimensions,
/// then the payload.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let fail = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fail(format!("truncated header at offset {at}")))
    };
    let magic = word(0)?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(fail(format!("bad magic 0x{magic:08x}")));
    }
    let rank = (magic & 0xff) as usize;
    if rank == 0 {
        return Err(fail("bad magic: rank 0".into()));
    }
    let dims = (0..rank)
        .map(|i| word(4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() < n {
        return Err(fail(format!(
            "truncated payload: header declares {n} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > n {
        return Err(fail(format!(
            "{} trailing bytes after payload",
            payload.len() - n
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: payload.to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes, path)
}

/// Serializes an unsigned-byte IDX array.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&(0x0800u32 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Loads an image/label IDX pair of any image size. Pixels are scaled to `[0, 1]`.
pub fn load_idx_pair(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    n_classes: usize,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_idx(ip)?;
    let labels = read_idx(lp)?;
    if images.magic != MAGIC_IMAGES {
        return Err(Error::Format {
            path: ip.to_path_buf(),
            message: format!("bad magic 0x{:08x} for an image file", images.magic),
        });
    }
    if labels.magic != MAGIC_LABELS {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            message: format!("bad magic 0x{:08x} for a label file", labels.magic),
        });
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            message: format!(
                "count mismatch: {} images vs {} labels",
                images.dims[0], labels.dims[0]
            ),
        });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let pixels = images.data.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            message: format!("label {bad} outside [0, {n_classes})"),
        });
    }
    Dataset::new(Tensor::from_parts(vec![n, 1, h, w], pixels), labels, n_classes)
}

/// Loads MNIST-format files and checks the 28×28 geometry.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ds = load_idx_pair(&images_path, labels_path, 10)?;
    if ds.image_shape() != [1, 28, 28] {
        return Err(Error::Format {
            path: images_path.as_ref().to_path_buf(),
            message: format!("expected 28x28 images, got {:?}", &ds.image_shape()[1..]),
        });
    }
    Ok(ds)
}

/// Loads `(train, test)` from a directory with the standard MNIST file names.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_mnist_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test.with_tag(SplitKind::Test)))
}
