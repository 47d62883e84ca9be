use std::path::Path;

use crate::error::{GeolocError, Result};
use crate::store::{read_tensor, write_tensor, TensorMeta};

/// An `h × w × c` grid of feature vectors. Cell `(i, j)` covers source
/// pixels `[j*stride, (j+1)*stride) × [i*stride, (i+1)*stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    stride: u32,
    source_width: u32,
    source_height: u32,
}

impl DenseFeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        stride: u32,
        source_width: u32,
        source_height: u32,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(GeolocError::Dimension(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(GeolocError::Dimension(format!(
                "{height}x{width}x{channels} feature map needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if stride == 0 {
            return Err(GeolocError::Contract("stride must be at least 1".into()));
        }
        let r = stride as usize;
        if height * r > source_height as usize + r || width * r > source_width as usize + r {
            return Err(GeolocError::Dimension(format!(
                "{height}x{width} cells at stride {stride} do not tile a {source_width}x{source_height} image"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(GeolocError::Contract(format!(
                "feature value at flat index {pos} is not finite"
            )));
        }
        Ok(DenseFeatureMap {
            height,
            width,
            channels,
            data,
            stride,
            source_width,
            source_height,
        })
    }

    /// A map whose source image is exactly `height*stride × width*stride`.
    pub fn with_stride(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        stride: u32,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            data,
            stride,
            (width as u32) * stride,
            (height as u32) * stride,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn source_width(&self) -> u32 {
        self.source_width
    }

    pub fn source_height(&self) -> u32 {
        self.source_height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Average-pools to at most `max_cells` cells per side. The stride grows
    /// by the pooling factor so pixel bookkeeping stays valid.
    pub fn pooled_to(&self, max_cells: usize) -> DenseFeatureMap {
        let factor = self.height.max(self.width).div_ceil(max_cells.max(1)).max(1);
        if factor == 1 {
            return self.clone();
        }
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        let c = self.channels;
        let mut data = vec![0.0f32; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let out = &mut data[(i * w + j) * c..(i * w + j + 1) * c];
                let mut n = 0.0f32;
                for ii in i * factor..((i + 1) * factor).min(self.height) {
                    for jj in j * factor..((j + 1) * factor).min(self.width) {
                        for (o, v) in out.iter_mut().zip(self.cell(ii, jj)) {
                            *o += v;
                        }
                        n += 1.0;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
        DenseFeatureMap {
            height: h,
            width: w,
            channels: c,
            data,
            stride: self.stride * factor as u32,
            source_width: self.source_width,
            source_height: self.source_height,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = TensorMeta {
            stride: Some(self.stride),
            source_width: Some(self.source_width),
            source_height: Some(self.source_height),
            layer: Some("dense_features".into()),
            ..Default::default()
        };
        write_tensor(path, &self.data, &[self.height, self.width, self.channels], &meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rec = read_tensor(path)?;
        let &[h, w, c] = rec.dims.as_slice() else {
            return Err(GeolocError::Format(format!(
                "{}: dense features must be rank 3 (h, w, c), got dims {:?}",
                path.display(),
                rec.dims
            )));
        };
        let stride = rec.meta.stride.ok_or_else(|| {
            GeolocError::Format(format!("{}: metadata lacks stride", path.display()))
        })?;
        let sw = rec.meta.source_width.unwrap_or(w as u32 * stride);
        let sh = rec.meta.source_height.unwrap_or(h as u32 * stride);
        DenseFeatureMap::new(h, w, c, rec.data, stride, sw, sh)
    }
}
