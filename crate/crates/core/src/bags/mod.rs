//! Source images, augmentation, tiling into bags and dataset plumbing.

mod dataset;
pub mod imageio;
mod synth;
mod tiling;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use dataset::{load_dataset, split_train_val};
pub use synth::{synth_generate, SynthConfig, SynthSample};
pub use tiling::{tile, Bag, TilingSpec};

/// An 8-bit RGB image with a binary label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
    pub label: bool,
    pub id: String,
}

impl SourceImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>, label: bool, id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(SourceImage {
            width,
            height,
            data,
            label,
            id: id.into(),
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Exact pixel permutations used for augmentation. Rotations are clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::HFlip,
        Transform::VFlip,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown transform {s:?}")))
    }
}

/// Apply `transform` to the whole image; the label is carried over.
pub fn augment(image: &SourceImage, transform: Transform) -> SourceImage {
    let (w, h) = (image.width, image.height);
    let (out_w, out_h) = match transform {
        Transform::Rot90 | Transform::Rot270 => (h, w),
        _ => (w, h),
    };
    let mut data = Vec::with_capacity(image.data.len());
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = match transform {
                Transform::Identity => (x, y),
                Transform::HFlip => (w - 1 - x, y),
                Transform::VFlip => (x, h - 1 - y),
                Transform::Rot90 => (y, h - 1 - x),
                Transform::Rot180 => (w - 1 - x, h - 1 - y),
                Transform::Rot270 => (w - 1 - y, x),
            };
            data.extend_from_slice(&image.pixel(sx, sy));
        }
    }
    SourceImage {
        width: out_w,
        height: out_h,
        data,
        label: image.label,
        id: image.id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> SourceImage {
        let data = (0..w * h * 3).map(|i| (i * 7 % 251) as u8).collect();
        SourceImage::new(w, h, data, true, "g").unwrap()
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(SourceImage::new(2, 2, vec![0; 11], false, "x").is_err());
    }

    #[test]
    fn rot90_moves_top_left_to_top_right() {
        let img = gradient(3, 2);
        let r = augment(&img, Transform::Rot90);
        assert_eq!((r.width, r.height), (2, 3));
        assert_eq!(r.pixel(1, 0), img.pixel(0, 0));
        assert_eq!(r.pixel(0, 0), img.pixel(0, 1));
    }

    #[test]
    fn group_identities_hold_on_non_square_images() {
        let img = gradient(5, 3);
        let apply = |ts: &[Transform]| ts.iter().fold(img.clone(), |acc, &t| augment(&acc, t));
        use Transform::*;
        assert_eq!(apply(&[HFlip, HFlip]), img);
        assert_eq!(apply(&[VFlip, VFlip]), img);
        assert_eq!(apply(&[Rot90, Rot90, Rot90, Rot90]), img);
        assert_eq!(apply(&[Rot180, Rot180]), img);
        assert_eq!(apply(&[Rot90, Rot270]), img);
        assert_eq!(apply(&[Rot270, Rot90]), img);
        assert_eq!(apply(&[Identity]), img);
        assert_eq!(apply(&[HFlip, VFlip]), augment(&img, Rot180));
        assert_eq!(apply(&[Rot90, Rot90]), augment(&img, Rot180));
    }

    #[test]
    fn transform_names_roundtrip() {
        for t in Transform::ALL {
            assert_eq!(t.as_str().parse::<Transform>().unwrap(), t);
        }
    }
}
