//! Minimal channels-first tensor used inside the network stack. Row-major
//! per channel; this is deliberately not a general tensor library.

use crate::grid::{Grid, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Tensor {
            c: 1,
            h: img.side(),
            w: img.side(),
            data: img.values().to_vec(),
        }
    }

    pub fn into_image(self) -> Image {
        assert_eq!(self.c, 1, "into_image requires a single channel");
        assert_eq!(self.h, self.w);
        Image::from_values(self.h, self.data).expect("tensor shape is a valid image")
    }

    #[inline]
    pub fn channel(&self, k: usize) -> &[f64] {
        let plane = self.h * self.w;
        &self.data[k * plane..(k + 1) * plane]
    }

    #[inline]
    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let plane = self.h * self.w;
        &mut self.data[k * plane..(k + 1) * plane]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
