use crate::error::{shape_mismatch, Result};
use crate::imaging::Field;

/// A single-sample `channels × height × width` activation, planar `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_mismatch(
                format!("{} values", channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Same planar layout as [`Field`], narrowed to `f32`.
    pub fn from_field(field: &Field) -> Self {
        Self {
            channels: field.channels(),
            height: field.height(),
            width: field.width(),
            data: field.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_field(&self) -> Field {
        Field::from_vec(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("consistent shape")
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

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let (h, w) = (parts[0].height, parts[0].width);
        if let Some(bad) = parts.iter().find(|t| (t.height, t.width) != (h, w)) {
            return Err(shape_mismatch(format!("{h}x{w}"), format!("{}x{}", bad.height, bad.width)));
        }
        let channels = parts.iter().map(|t| t.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Copies channels `start..start + count`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor {
        let n = self.plane();
        Tensor {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
