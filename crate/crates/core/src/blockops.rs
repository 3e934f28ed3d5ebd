//! Tensor-to-block (T2B) and block-to-tensor (B2T) rearrangement.
//!
//! T2B cuts every image into non-overlapping `b×b` tiles and stacks them on
//! the batch axis: image-major, then row-major over the tile grid. B2T is the
//! exact inverse. The flatten adapters turn a stack of blocks into the
//! per-block `(b², c)` matrices attention works on.

use crate::error::{Result, XabaError};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub source: Shape,
}

impl BlockGeometry {
    pub fn new(source: Shape, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(XabaError::precondition("block size must be at least 1"));
        }
        if !source.height.is_multiple_of(block_size) || !source.width.is_multiple_of(block_size) {
            return Err(XabaError::precondition(format!(
                "{}x{} is not divisible into {block_size}x{block_size} blocks",
                source.height, source.width
            )));
        }
        Ok(BlockGeometry {
            block_size,
            rows: source.height / block_size,
            cols: source.width / block_size,
            source,
        })
    }

    pub fn blocks_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_blocks(&self) -> usize {
        self.source.batch * self.blocks_per_image()
    }

    /// Shape of the stacked-block tensor.
    pub fn block_shape(&self) -> Shape {
        Shape::new(
            self.num_blocks(),
            self.source.channels,
            self.block_size,
            self.block_size,
        )
    }

    /// `(image, grid row, grid col)` of block `index`.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let per = self.blocks_per_image();
        let within = index % per;
        (index / per, within / self.cols, within % self.cols)
    }
}

/// Moves whole `b`-wide rows between the image and block layouts. `to_blocks`
/// picks the direction; both share the same index map so they are inverses.
fn permute<T: Scalar>(src: &[T], dst: &mut [T], g: &BlockGeometry, to_blocks: bool) {
    let b = g.block_size;
    let s = g.source;
    for img in 0..s.batch {
        for gr in 0..g.rows {
            for gc in 0..g.cols {
                let block = (img * g.rows + gr) * g.cols + gc;
                for c in 0..s.channels {
                    for y in 0..b {
                        let image_off =
                            ((img * s.channels + c) * s.height + gr * b + y) * s.width + gc * b;
                        let block_off = ((block * s.channels + c) * b + y) * b;
                        if to_blocks {
                            dst[block_off..block_off + b]
                                .copy_from_slice(&src[image_off..image_off + b]);
                        } else {
                            dst[image_off..image_off + b]
                                .copy_from_slice(&src[block_off..block_off + b]);
                        }
                    }
                }
            }
        }
    }
}

pub fn t2b<T: Scalar>(x: &Tensor<T>, block_size: usize) -> Result<(Tensor<T>, BlockGeometry)> {
    let g = BlockGeometry::new(x.shape(), block_size)?;
    let mut out = Tensor::zeros(g.block_shape());
    permute(x.data(), out.data_mut(), &g, true);
    Ok((out, g))
}

pub fn b2t<T: Scalar>(blocks: &Tensor<T>, geometry: &BlockGeometry) -> Result<Tensor<T>> {
    if blocks.shape() != geometry.block_shape() {
        return Err(XabaError::config(format!(
            "blocks of shape {} do not match geometry expecting {}",
            blocks.shape(),
            geometry.block_shape()
        )));
    }
    let mut out = Tensor::zeros(geometry.source);
    permute(blocks.data(), out.data_mut(), geometry, false);
    Ok(out)
}

/// `(n, c, b, b)` blocks → `(n, 1, b², c)` matrices; row `i` is the channel
/// vector of pixel `i` in row-major order within the block.
pub fn flatten_blocks<T: Scalar>(blocks: &Tensor<T>) -> Result<Tensor<T>> {
    let s = blocks.shape();
    if s.height != s.width {
        return Err(XabaError::config(format!(
            "blocks must be square, got {}x{}",
            s.height, s.width
        )));
    }
    let (pix, c) = (s.plane(), s.channels);
    let mut out = Tensor::zeros(Shape::new(s.batch, 1, pix, c));
    let src = blocks.data();
    let dst = out.data_mut();
    for n in 0..s.batch {
        let base = n * pix * c;
        for ch in 0..c {
            for p in 0..pix {
                dst[base + p * c + ch] = src[base + ch * pix + p];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`flatten_blocks`] for square blocks of side `block_size`.
pub fn unflatten_blocks<T: Scalar>(matrices: &Tensor<T>, block_size: usize) -> Result<Tensor<T>> {
    let s = matrices.shape();
    let pix = block_size * block_size;
    if s.channels != 1 || s.height != pix {
        return Err(XabaError::config(format!(
            "matrices of shape {} cannot form {block_size}x{block_size} blocks",
            s
        )));
    }
    let c = s.width;
    let mut out = Tensor::zeros(Shape::new(s.batch, c, block_size, block_size));
    let src = matrices.data();
    let dst = out.data_mut();
    for n in 0..s.batch {
        let base = n * pix * c;
        for ch in 0..c {
            for p in 0..pix {
                dst[base + ch * pix + p] = src[base + p * c + ch];
            }
        }
    }
    Ok(out)
}
