//! Voxel grids and the volume records passed between pipeline stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "SYNTH_MR")]
    SynthMr,
    #[serde(rename = "SYNTH_CT")]
    SynthCt,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::SynthMr => "SYNTH_MR",
            Modality::SynthCt => "SYNTH_CT",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::SynthMr => 0,
            Modality::SynthCt => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Modality::SynthMr),
            1 => Some(Modality::SynthCt),
            _ => None,
        }
    }
}

/// Intensity window applied before quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Window {
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "CT_BRAIN")]
    CtBrain,
    #[serde(rename = "CT_BLOOD")]
    CtBlood,
    #[serde(rename = "CT_BONE")]
    CtBone,
}

impl Window {
    pub const CT: [Window; 3] = [Window::CtBrain, Window::CtBlood, Window::CtBone];
    pub const ALL: [Window; 4] = [Window::Mr, Window::CtBrain, Window::CtBlood, Window::CtBone];

    pub fn as_str(self) -> &'static str {
        match self {
            Window::Mr => "MR",
            Window::CtBrain => "CT_BRAIN",
            Window::CtBlood => "CT_BLOOD",
            Window::CtBone => "CT_BONE",
        }
    }
}

/// Dense `(depth, height, width)` grid in row-major `z, y, x` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "grid3",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[2];
        let y = (i / self.shape[2]) % self.shape[1];
        let z = i / (self.shape[1] * self.shape[2]);
        [z, y, x]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirror along `axis` (0 = z, 1 = y, 2 = x).
    pub fn flip(&self, axis: usize) -> Self {
        let s = self.shape;
        Self::from_fn(s, |z, y, x| {
            let mut c = [z, y, x];
            c[axis] = s[axis] - 1 - c[axis];
            self.get(c[0], c[1], c[2])
        })
    }

    /// Output axis `i` takes input axis `perm[i]`.
    pub fn permute(&self, perm: [usize; 3]) -> Self {
        let s = self.shape;
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        Self::from_fn(out_shape, |a, b, c| {
            let mut src = [0usize; 3];
            src[perm[0]] = a;
            src[perm[1]] = b;
            src[perm[2]] = c;
            self.get(src[0], src[1], src[2])
        })
    }
}

impl Grid3<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub voxels: Grid3<f32>,
    /// `(z, y, x)` voxel spacing in millimetres.
    pub spacing_mm: [f64; 3],
    pub modality: Modality,
    pub acquisition_axis: usize,
}

impl RawVolume {
    pub fn validate(&self) -> Result<()> {
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.voxels.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("volume contains non-finite voxels".into()));
        }
        if self.acquisition_axis > 2 {
            return Err(Error::InvalidSpec(format!(
                "acquisition axis {}",
                self.acquisition_axis
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.voxels.shape()
    }
}

/// Quantized, windowed volume with its foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocVolume {
    pub codes: Grid3<u8>,
    pub window: Window,
    pub modality: Modality,
    pub bit_width: u8,
    pub foreground: Grid3<bool>,
    pub dequant_scale: f64,
    pub dequant_offset: f64,
}

impl PreprocVolume {
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bit_width) - 1) as u8
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_width != 4 && self.bit_width != 8 {
            return Err(Error::InvalidSpec(format!("bit width {}", self.bit_width)));
        }
        if self.codes.shape() != self.foreground.shape() {
            return Err(Error::shape(
                "preproc_volume",
                format!(
                    "codes {:?} vs foreground {:?}",
                    self.codes.shape(),
                    self.foreground.shape()
                ),
            ));
        }
        let max = self.max_code();
        if self.codes.data().iter().any(|&c| c > max) {
            return Err(Error::InvalidSpec(format!(
                "code exceeds {max} for {}-bit volume",
                self.bit_width
            )));
        }
        Ok(())
    }

    pub fn dequantize(&self, code: u8) -> f64 {
        f64::from(code) * self.dequant_scale + self.dequant_offset
    }
}
