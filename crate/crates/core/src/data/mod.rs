//! Data plumbing: netpbm codecs, synthetic dataset generation, manifests,
//! training-time augmentation, and checkpoint serialization.

pub mod augment;
pub mod checkpoint;
pub mod manifest;
pub mod netpbm;
pub mod synth;

use std::path::Path;

use crate::tensor::{Elem, Result, Tensor, TensorError};

/// One image/mask pair in memory. Image is [3, H, W] in [0, 1]; mask is
/// [1, H, W] with values exactly 0 or 1.
#[derive(Debug, Clone)]
pub struct Frame<E> {
    pub image: Tensor<E>,
    pub mask: Tensor<E>,
}

/// A training or evaluation sample: a single frame for image datasets, or
/// an ordered clip of frames for video datasets.
#[derive(Debug, Clone)]
pub struct LoadedSample<E> {
    /// Stem used to name prediction outputs; first frame's stem for clips.
    pub name: String,
    /// Per-frame output stems, parallel to `frames`.
    pub frame_names: Vec<String>,
    pub frames: Vec<Frame<E>>,
}

impl<E: Elem> LoadedSample<E> {
    /// Stack the clip's images into one [T, 3, H, W] tensor.
    pub fn image_stack(&self) -> Result<Tensor<E>> {
        stack_frames(self.frames.iter().map(|f| &f.image))
    }

    /// Stack the clip's masks into one [T, 1, H, W] tensor.
    pub fn mask_stack(&self) -> Result<Tensor<E>> {
        stack_frames(self.frames.iter().map(|f| &f.mask))
    }
}

/// Stack same-shaped [C, H, W] tensors into [N, C, H, W].
pub fn stack_frames<'a, E: Elem>(
    frames: impl Iterator<Item = &'a Tensor<E>>,
) -> Result<Tensor<E>> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut count = 0;
    for t in frames {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) => {
                if t.shape() != &s[..] {
                    return Err(TensorError::Invalid(format!(
                        "cannot stack frames of shapes {:?} and {:?}",
                        s,
                        t.shape()
                    )));
                }
            }
        }
        data.extend_from_slice(t.data());
        count += 1;
    }
    let s = shape.ok_or_else(|| TensorError::Invalid("cannot stack zero frames".into()))?;
    let mut full = vec![count];
    full.extend_from_slice(&s);
    Tensor::new(&full, data)
}

/// Read every sample named by a manifest into memory.
pub fn load_samples<E: Elem>(manifest_path: &Path, video: bool) -> Result<Vec<LoadedSample<E>>> {
    let blocks = manifest::read_manifest(manifest_path, video)?;
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        let name = block[0].name.clone();
        let frame_names: Vec<String> = block.iter().map(|e| e.name.clone()).collect();
        let mut frames = Vec::with_capacity(block.len());
        for entry in &block {
            let image = netpbm::read_ppm(&entry.image)?;
            let mask = netpbm::read_mask(&entry.mask)?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(TensorError::Invalid(format!(
                    "{}: image {:?} and mask {:?} disagree on size",
                    entry.image.display(),
                    image.shape(),
                    mask.shape()
                )));
            }
            frames.push(Frame { image, mask });
        }
        out.push(LoadedSample {
            name,
            frame_names,
            frames,
        });
    }
    Ok(out)
}
