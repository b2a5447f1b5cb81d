use crate::autodiff::Tensor;
use crate::error::{CastError, Result};

/// Planar RGB image, `[3, height, width]`, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(CastError::shape(
                "image",
                format!("{}x{} RGB needs {} values, got {}", height, width, 3 * height * width, data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("image layout is [3,H,W]")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] => Image::new(*h, *w, t.to_vec()),
            s => Err(CastError::shape("image", format!("expected [3,H,W], got {:?}", s))),
        }
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_byte(*v) as f32 / 255.0;
        }
    }
}

#[inline]
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
