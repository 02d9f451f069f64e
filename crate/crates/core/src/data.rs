//! Image-directory datasets.

use std::path::{Path, PathBuf};

use crate::error::{ensure, DormError, Result};
use crate::image::ImageTensor;

/// A small set of target images, all at one resolution, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    pub images: Vec<ImageTensor>,
    pub paths: Vec<PathBuf>,
}

impl FewShotDataset {
    pub fn from_images(images: Vec<ImageTensor>) -> Result<Self> {
        ensure!(!images.is_empty(), "dataset is empty");
        let (h, w) = (images[0].height(), images[0].width());
        ensure!(
            images.iter().all(|i| i.height() == h && i.width() == w),
            "dataset images differ in size"
        );
        Ok(Self {
            images,
            paths: Vec::new(),
        })
    }

    /// Every PNG/JPEG in `dir` (sorted by file name), resized to `resolution`.
    pub fn from_dir(dir: &Path, resolution: usize) -> Result<Self> {
        let paths = image_files(dir)?;
        ensure!(!paths.is_empty(), "no PNG or JPEG files in {}", dir.display());
        let images = paths
            .iter()
            .map(|p| ImageTensor::load(p, resolution))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, paths })
    }

    /// The first `n` images only.
    pub fn take(mut self, n: usize) -> Result<Self> {
        ensure!(n >= 1, "need at least one image");
        self.images.truncate(n);
        self.paths.truncate(n);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images[0].resolution()
    }
}

pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DormError::NotFound(format!("directory {}", dir.display())),
        _ => DormError::Io(e),
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
