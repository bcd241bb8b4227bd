//! Big-endian IDX files as distributed for MNIST and Fashion-MNIST.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{GrayImage, MNIST_SIDE};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn check_magic<R: Read>(r: &mut R, expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32(r)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{}: magic number {magic:#010x}, expected {expected:#010x}",
            path.display()
        )));
    }
    Ok(())
}

/// Reads an image file; returns `(rows, cols, pixel buffers)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, IMAGES_MAGIC, path)?;
    let n = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact(&mut data)?;
    let images = if rows * cols == 0 { vec![Vec::new(); n] } else { data.chunks_exact(rows * cols).map(<[u8]>::to_vec).collect() };
    Ok((rows, cols, images))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, LABELS_MAGIC, path)?;
    let n = read_u32(&mut r)? as usize;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)?;
    Ok(labels)
}

/// Loads a paired image/label file set into 28×28 grayscale images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<GrayImage>> {
    let (rows, cols, images) = read_idx_images(images_path)?;
    if (rows, cols) != (MNIST_SIDE, MNIST_SIDE) {
        return Err(Error::Format(format!("{}: images are {rows}x{cols}, expected 28x28", images_path.display())));
    }
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != images.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels ({} / {})",
            images.len(),
            labels.len(),
            images_path.display(),
            labels_path.display()
        )));
    }
    images.into_iter().zip(labels).map(|(px, l)| GrayImage::new(px, l)).collect()
}

/// Which half of a standard MNIST-layout directory to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Standard file names (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ...).
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Vec<GrayImage>> {
    let (images, labels) = split_paths(dir, split);
    load_idx(&images, &labels)
}

pub fn write_idx_images(path: &Path, images: &[GrayImage]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(images.len() as u32).to_be_bytes())?;
    w.write_all(&(MNIST_SIDE as u32).to_be_bytes())?;
    w.write_all(&(MNIST_SIDE as u32).to_be_bytes())?;
    for img in images {
        w.write_all(img.pixels())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}
