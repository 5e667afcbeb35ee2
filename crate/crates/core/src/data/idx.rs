use std::path::Path;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {at} (file has {} bytes)", bytes.len())))
}

fn check_magic(bytes: &[u8], want: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != want {
        return Err(Error::Format(format!("{what}: magic 0x{magic:08x}, expected 0x{want:08x}")));
    }
    Ok(())
}

/// Parses an IDX3 image file: `(N, H, W, u8 pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "images")?;
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Length(format!("images: payload has {} bytes, header implies {need}", payload.len())));
    }
    Ok((n, h, w, &payload[..need]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, IDX_LABELS_MAGIC, "labels")?;
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Length(format!("labels: payload has {} bytes, header implies {n}", payload.len())));
    }
    Ok(&payload[..n])
}

/// Loads an image/label IDX pair; pixels are scaled to `[0, 1]` by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImages> {
    let img_bytes = std::fs::read(images_path.as_ref()).map_err(|e| Error::io(images_path.as_ref(), e))?;
    let lbl_bytes = std::fs::read(labels_path.as_ref()).map_err(|e| Error::io(labels_path.as_ref(), e))?;
    let (n, h, w, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Length("IDX file contains no images".into()));
    }
    let images = Tensor::new(vec![n, 1, h, w], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledImages::new(images, labels, classes.max(10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        dims.iter().for_each(|d| v.extend_from_slice(&d.to_be_bytes()));
        v
    }

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn handcrafted_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[1, 2, 2]);
        img.extend_from_slice(&[0, 255, 0, 255]);
        let mut lbl = header(IDX_LABELS_MAGIC, &[1]);
        lbl.push(7);
        let data = load_idx(write(&dir, "i", &img), write(&dir, "l", &lbl)).unwrap();
        assert_eq!(data.images.shape(), &[1, 1, 2, 2]);
        assert_eq!(data.images.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(data.labels, vec![7]);
    }

    #[test]
    fn bad_magic_cites_observed_value() {
        let mut img = header(0x0000_0802, &[1, 2, 2]);
        img.extend_from_slice(&[0; 4]);
        match parse_idx_images(&img) {
            Err(Error::Format(msg)) => assert!(msg.contains("0x00000802"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_inconsistent() {
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[0; 5]);
        assert!(matches!(parse_idx_images(&img), Err(Error::Length(_))));
        assert!(matches!(parse_idx_images(&img[..6]), Err(Error::Length(_))));

        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 1, 1]);
        img.extend_from_slice(&[0, 1]);
        let mut lbl = header(IDX_LABELS_MAGIC, &[3]);
        lbl.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(
            load_idx(write(&dir, "i", &img), write(&dir, "l", &lbl)),
            Err(Error::Consistency(_))
        ));
    }

    /// Runs only when a real MNIST directory is supplied.
    #[test]
    fn real_mnist_when_present() {
        let Ok(dir) = std::env::var("OODPROBE_MNIST_DIR") else { return };
        let dir = std::path::Path::new(&dir);
        let data = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")).unwrap();
        assert_eq!(data.len(), 60000);
        assert_eq!(data.image_shape(), [1, 28, 28]);
    }
}
