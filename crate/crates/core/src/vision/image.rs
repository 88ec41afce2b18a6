use crate::error::{Error, Result};

/// Channel-major (`C x H x W`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Values outside `[0, 1]` are clamped; NaN is rejected.
    pub fn new(channels: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{channels}x{height}x{width} image with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Data("NaN pixel value".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Grayscale is replicated into every requested channel; RGB can only stay RGB.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => Ok(Self {
                channels: 3,
                height: self.height,
                width: self.width,
                data: self.data.repeat(3),
            }),
            (a, b) => Err(Error::dim(format!("cannot convert {a}-channel image to {b} channels"))),
        }
    }
}

/// Row-major grid of flattened patches; each patch is `channels x h x w`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        &self.patches[row * self.cols + col]
    }

    /// Inverse of [`patchify`] on the covered region.
    pub fn reassemble(&self) -> Result<ImageTensor> {
        let (h, w) = (self.rows * self.patch_h, self.cols * self.patch_w);
        let mut data = vec![0.0; self.channels * h * w];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let p = self.patch(r, c);
                for ch in 0..self.channels {
                    for y in 0..self.patch_h {
                        for x in 0..self.patch_w {
                            let src = (ch * self.patch_h + y) * self.patch_w + x;
                            let (iy, ix) = (r * self.patch_h + y, c * self.patch_w + x);
                            data[(ch * h + iy) * w + ix] = p[src];
                        }
                    }
                }
            }
        }
        ImageTensor::new(self.channels, h, w, data)
    }
}

/// Cuts `image` into a `floor(H/h) x floor(W/w)` grid; pixels past the grid are dropped.
pub fn patchify(image: &ImageTensor, h: usize, w: usize) -> Result<PatchGrid> {
    if h == 0 || w == 0 {
        return Err(Error::dim("patch extents must be >= 1"));
    }
    if h > image.height || w > image.width {
        return Err(Error::dim(format!(
            "{h}x{w} patch does not fit a {}x{} image",
            image.height, image.width
        )));
    }
    let (rows, cols) = (image.height / h, image.width / w);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = Vec::with_capacity(image.channels * h * w);
            for ch in 0..image.channels {
                for y in 0..h {
                    let start = (ch * image.height + r * h + y) * image.width + c * w;
                    p.extend_from_slice(&image.data[start..start + w]);
                }
            }
            patches.push(p);
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_h: h,
        patch_w: w,
        channels: image.channels,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        ImageTensor::new(1, h, w, data).unwrap()
    }

    #[test]
    fn patch_counts_follow_floor() {
        assert_eq!(patchify(&gray(224, 224), 16, 16).unwrap().len(), 196);
        let g = patchify(&gray(17, 17), 16, 16).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (1, 1, 1));
    }

    #[test]
    fn patch_indexing() {
        let img = gray(32, 48);
        let g = patchify(&img, 16, 16).unwrap();
        assert_eq!((g.rows, g.cols), (2, 3));
        let p = g.patch(1, 2);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(p[y * 16 + x], img.pixel(0, 16 + y, 32 + x));
            }
        }
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(matches!(patchify(&gray(8, 8), 9, 4), Err(Error::Dimension(_))));
        assert!(patchify(&gray(8, 8), 0, 4).is_err());
    }

    #[test]
    fn ingestion_clamps_and_replicates() {
        let img = ImageTensor::new(1, 1, 2, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        let rgb = img.with_channels(3).unwrap();
        assert_eq!(rgb.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(rgb.with_channels(1).is_err());
    }

    proptest! {
        #[test]
        fn reassemble_is_lossless_on_aligned_images(
            gr in 1usize..4, gc in 1usize..4, ph in 1usize..5, pw in 1usize..5,
            ch in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()
        ) {
            let (h, w) = (gr * ph, gc * pw);
            let data = (0..ch * h * w)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 256) as f64 / 255.0)
                .collect();
            let img = ImageTensor::new(ch, h, w, data).unwrap();
            let back = patchify(&img, ph, pw).unwrap().reassemble().unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
