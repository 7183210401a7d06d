//! Minimal differentiable layers and the fully-convolutional heatmap network.
//!
//! Everything is generic over [`Real`] so that training runs in `f32` while
//! gradient checks run the identical code in `f64`.

mod layers;
mod network;

use std::fmt::Debug;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{
    conv2d_backward, conv2d_forward, maxpool2_ceil, maxpool2_ceil_backward, relu,
    relu_backward, ConvCache, ConvGrads, PoolCache,
};
pub use network::ForwardCache;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
}

/// Floating-point element type with a GEMM kernel.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    /// `C ← A·B + beta·C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: strides are non-negative and every addressed element
                // lies inside the slices, checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Channel-major activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != channels * height * width {
            return Err(NnError::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_image(img: &crate::GrayImage) -> Self {
        Self {
            channels: 1,
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Architecture of the heatmap network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each shared conv→relu→pool stage.
    pub trunk_channels: Vec<usize>,
    pub heatmap_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: crate::CROP_SIZE,
            in_channels: 1,
            trunk_channels: vec![8, 16, 32, 32, 32],
            heatmap_size: 5,
        }
    }
}

impl ArchConfig {
    /// Spatial size after the trunk's ceil-mode pooling stages.
    pub fn pooled_size(&self) -> usize {
        self.trunk_channels
            .iter()
            .fold(self.input_size, |s, _| s.div_ceil(2))
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(NnError::Arch("input size and channels must be positive".into()));
        }
        if self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return Err(NnError::Arch("trunk needs at least one non-empty stage".into()));
        }
        let pooled = self.pooled_size();
        if pooled != self.heatmap_size {
            return Err(NnError::Arch(format!(
                "{} pooling stages take {} to {pooled}, not heatmap size {}",
                self.trunk_channels.len(),
                self.input_size,
                self.heatmap_size
            )));
        }
        Ok(())
    }

    /// Channels feeding the two final convolutions.
    pub fn feature_channels(&self) -> usize {
        *self.trunk_channels.last().expect("validated trunk")
    }
}

/// 3×3 convolution weights (`out × in × 3 × 3`) and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub const KERNEL: usize = 3;

impl<T: Real> ConvBlock<T> {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            weight: vec![T::zero(); out_channels * in_channels * KERNEL * KERNEL],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * KERNEL * KERNEL
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.out_channels == other.out_channels && self.in_channels == other.in_channels
    }

    pub fn cast<U: Real>(&self) -> ConvBlock<U> {
        ConvBlock {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            weight: self.weight.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Shared trunk plus one final convolution per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: ArchConfig,
    pub trunk: Vec<ConvBlock<T>>,
    pub head: ConvBlock<T>,
    pub tail: ConvBlock<T>,
}

impl<T: Real> NetworkParams<T> {
    pub fn zeros(arch: &ArchConfig) -> Result<Self, NnError> {
        arch.validate()?;
        let mut trunk = Vec::with_capacity(arch.trunk_channels.len());
        let mut in_ch = arch.in_channels;
        for &out_ch in &arch.trunk_channels {
            trunk.push(ConvBlock::zeros(out_ch, in_ch));
            in_ch = out_ch;
        }
        Ok(Self {
            arch: arch.clone(),
            trunk,
            head: ConvBlock::zeros(1, in_ch),
            tail: ConvBlock::zeros(1, in_ch),
        })
    }

    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self, NnError> {
        let mut params = Self::zeros(arch)?;
        for block in params.blocks_mut() {
            let std = (2.0 / block.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in block.weight.iter_mut() {
                *w = T::from_f64(normal.sample(rng));
            }
        }
        Ok(params)
    }

    /// Blocks in canonical order: trunk stages, then head, then tail.
    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        self.trunk.iter().chain([&self.head, &self.tail])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock<T>> {
        self.trunk.iter_mut().chain([&mut self.head, &mut self.tail])
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().map(|b| b.weight.len() + b.bias.len()).sum()
    }

    /// Checks channel chaining and that both keypoint blocks match.
    pub fn validate(&self) -> Result<(), NnError> {
        self.arch.validate()?;
        if self.trunk.len() != self.arch.trunk_channels.len() {
            return Err(NnError::Shape(format!(
                "{} trunk blocks for {} stages",
                self.trunk.len(),
                self.arch.trunk_channels.len()
            )));
        }
        let mut in_ch = self.arch.in_channels;
        for (i, (block, &out_ch)) in self.trunk.iter().zip(&self.arch.trunk_channels).enumerate() {
            if block.in_channels != in_ch || block.out_channels != out_ch {
                return Err(NnError::Shape(format!(
                    "trunk block {i} is {}→{}, expected {in_ch}→{out_ch}",
                    block.in_channels, block.out_channels
                )));
            }
            in_ch = out_ch;
        }
        for (name, block) in [("head", &self.head), ("tail", &self.tail)] {
            if block.in_channels != in_ch || block.out_channels != 1 {
                return Err(NnError::Shape(format!(
                    "{name} block is {}→{}, expected {in_ch}→1",
                    block.in_channels, block.out_channels
                )));
            }
        }
        for block in self.blocks() {
            if block.weight.len() != block.out_channels * block.fan_in()
                || block.bias.len() != block.out_channels
            {
                return Err(NnError::Shape("block storage length".into()));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch).expect("architecture already validated")
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += *y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for block in self.blocks_mut() {
            block.weight.iter_mut().for_each(|x| *x = *x * factor);
            block.bias.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            trunk: self.trunk.iter().map(ConvBlock::cast).collect(),
            head: self.head.cast(),
            tail: self.tail.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .all(|b| b.weight.iter().chain(&b.bias).all(|v| v.is_finite()))
    }
}
