//! IDX (MNIST-style) and CIFAR binary readers and writers.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_3D: u32 = 0x0000_0803;
const IDX_IMAGES_4D: u32 = 0x0000_0804;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, format!("truncated header at byte {at}")))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an IDX image file (`0x00000803` `[N,H,W]`, or `0x00000804`
/// `[N,C,H,W]`) and its IDX label file (`0x00000801`).
pub fn load_idx(images_path: &Path, labels_path: &Path, class_count: usize) -> Result<Dataset> {
    let img = read(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    let rank = match magic {
        IDX_IMAGES_3D => 3,
        IDX_IMAGES_4D => 4,
        _ => {
            return Err(format_err(
                images_path,
                format!("bad image magic {:02x?}, expected 00 00 08 03", &img[..4]),
            ))
        }
    };
    let dims: Vec<usize> = (0..rank)
        .map(|i| be_u32(&img, 4 + 4 * i, images_path).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let (n, c, h, w) = match dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => unreachable!(),
    };
    let header = 4 + 4 * rank;
    let payload = n * c * h * w;
    if img.len() < header + payload {
        return Err(format_err(
            images_path,
            format!("truncated: {} pixel bytes declared, {} present", payload, img.len().saturating_sub(header)),
        ));
    }
    let pixels: Vec<f32> = img[header..header + payload].iter().map(|&b| b as f32 / 255.0).collect();

    let lab = read(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS {
        return Err(format_err(
            labels_path,
            format!("bad label magic {:02x?}, expected 00 00 08 01", &lab[..4]),
        ));
    }
    let count = be_u32(&lab, 4, labels_path)? as usize;
    if count != n {
        return Err(format_err(labels_path, format!("{count} labels for {n} images")));
    }
    if lab.len() < 8 + n {
        return Err(format_err(labels_path, format!("truncated: {} label bytes present, {n} declared", lab.len() - 8)));
    }
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(format_err(labels_path, format!("label {bad} out of range for {class_count} classes")));
    }
    let images = Tensor::new(vec![n, c, h, w], pixels)?;
    Dataset::new(images, labels, class_count, Split::Train)
}

/// Writes `ds` as an IDX image/label pair. Pixels are quantized to bytes.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    let n = ds.len();
    let mut img = Vec::with_capacity(20 + ds.images().len());
    if c == 1 {
        img.extend_from_slice(&IDX_IMAGES_3D.to_be_bytes());
        for d in [n, h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        img.extend_from_slice(&IDX_IMAGES_4D.to_be_bytes());
        for d in [n, c, h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    img.extend(ds.images().data().iter().map(|&v| to_byte(v)));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in ds.labels()? {
        lab.push(u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?);
    }
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Loads a CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.
pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    let record = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(format_err(
            path,
            format!("truncated: {} bytes is not a whole number of {record}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (record - 1));
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(format_err(path, format!("record {i}: label {label} out of range")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, Split::Train)
}

pub fn write_cifar_binary(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::shape("write_cifar_binary", format!("images are {:?}", ds.image_shape())));
    }
    let labels = ds.labels()?;
    let mut out = Vec::with_capacity(ds.len() * 3073);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l as u8);
        out.extend(ds.image(i).iter().map(|&v| to_byte(v)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_idx(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img.idx");
        let lab = dir.join("lab.idx");
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 128, 1, 2, 3, 4, 5]);
        fs::write(&img, b).unwrap();
        fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        (img, lab)
    }

    #[test]
    fn hand_built_idx_parses() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture_idx(dir.path());
        let ds = load_idx(&img, &lab, 10).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images().data()[1], 1.0);
        assert_eq!(ds.labels().unwrap(), &[1, 0]);
    }

    #[test]
    fn bad_magic_names_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture_idx(dir.path());
        let mut b = fs::read(&img).unwrap();
        b[3] = 0x07;
        fs::write(&img, b).unwrap();
        let err = load_idx(&img, &lab, 10).unwrap_err().to_string();
        assert!(err.contains("00, 00, 08, 07"), "{err}");
    }

    #[test]
    fn truncated_and_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture_idx(dir.path());
        assert!(load_idx(&img, &lab, 1).is_err());
        let b = fs::read(&img).unwrap();
        fs::write(&img, &b[..b.len() - 1]).unwrap();
        assert!(matches!(load_idx(&img, &lab, 10), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(i);
            bytes.extend((0..3072).map(|j| ((j + i as usize * 7) % 256) as u8));
        }
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&path).unwrap();
        assert_eq!(ds.images().shape(), &[3, 3, 32, 32]);
        assert_eq!(ds.images().data()[255], 1.0);
        let out = dir.path().join("again.bin");
        write_cifar_binary(&ds, &out).unwrap();
        assert_eq!(fs::read(out).unwrap(), bytes);

        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_cifar_binary(&path).is_err());
        bytes[0] = 10;
        fs::write(&path, &bytes).unwrap();
        assert!(load_cifar_binary(&path).is_err());
    }
}
