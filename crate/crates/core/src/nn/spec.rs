use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub maxpool2: bool,
}

impl ConvBlock {
    /// 3×3, stride 1, pad 1, ReLU.
    pub fn same3x3(out_channels: usize, maxpool2: bool) -> Self {
        ConvBlock {
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            relu: true,
            maxpool2,
        }
    }
}

/// How the last conv block's output is reduced before the linear head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadPool {
    GlobalAverage,
    Flatten,
}

/// Layout of a conv stack followed by a linear classifier head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input `(channels, height, width)`.
    pub input: [usize; 3],
    pub conv_blocks: Vec<ConvBlock>,
    pub head_pool: HeadPool,
    pub num_classes: usize,
    /// Conv block whose post-activation output is tapped for saliency.
    pub cam_layer: usize,
}

/// Shapes `(channels, height, width)` seen at one conv block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShapes {
    pub input: [usize; 3],
    /// Post-activation, pre-pool.
    pub conv_out: [usize; 3],
    /// After the optional 2×2 max-pool.
    pub output: [usize; 3],
}

impl NetworkSpec {
    /// Four 3×3 conv blocks of width 8/16/16/32 with a single max-pool after
    /// the first, global average pooling and a linear head. Saliency is read
    /// from the last block at half the input resolution.
    pub fn mnist_default(input: [usize; 3], num_classes: usize) -> Self {
        Self::four_block(input, num_classes, [8, 16, 16, 32], &[0])
    }

    /// Four 3×3 "same" conv blocks, max-pooling after the blocks listed in
    /// `pool_after`, saliency on the last block.
    pub fn four_block(input: [usize; 3], num_classes: usize, widths: [usize; 4], pool_after: &[usize]) -> Self {
        let conv_blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ConvBlock::same3x3(w, pool_after.contains(&i)))
            .collect();
        NetworkSpec {
            input,
            conv_blocks,
            head_pool: HeadPool::GlobalAverage,
            num_classes,
            cam_layer: 3,
        }
    }

    /// Checks structural validity and returns per-block shapes.
    pub fn block_shapes(&self) -> Result<Vec<BlockShapes>> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("network needs at least one conv block".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.cam_layer >= self.conv_blocks.len() {
            return Err(Error::Config(format!(
                "cam_layer {} out of range for {} conv blocks",
                self.cam_layer,
                self.conv_blocks.len()
            )));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input)));
        }
        let mut shapes = Vec::with_capacity(self.conv_blocks.len());
        let mut cur = self.input;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel_size == 0 || b.stride == 0 {
                return Err(Error::shape(i, "zero channels, kernel or stride"));
            }
            let [c, h, w] = cur;
            let ph = h + 2 * b.padding;
            let pw = w + 2 * b.padding;
            if ph < b.kernel_size || pw < b.kernel_size {
                return Err(Error::shape(
                    i,
                    format!("kernel {} larger than padded input {ph}x{pw}", b.kernel_size),
                ));
            }
            let oh = (ph - b.kernel_size) / b.stride + 1;
            let ow = (pw - b.kernel_size) / b.stride + 1;
            let conv_out = [b.out_channels, oh, ow];
            let output = if b.maxpool2 {
                if oh < 2 || ow < 2 {
                    return Err(Error::shape(i, format!("cannot max-pool a {oh}x{ow} map")));
                }
                [b.out_channels, oh / 2, ow / 2]
            } else {
                conv_out
            };
            shapes.push(BlockShapes {
                input: [c, h, w],
                conv_out,
                output,
            });
            cur = output;
        }
        Ok(shapes)
    }

    /// Width of the vector fed to the linear head.
    pub fn head_features(&self) -> Result<usize> {
        let shapes = self.block_shapes()?;
        let [c, h, w] = shapes.last().expect("nonempty").output;
        Ok(match self.head_pool {
            HeadPool::GlobalAverage => c,
            HeadPool::Flatten => c * h * w,
        })
    }

    /// `(channels, height, width)` of the saliency feature maps.
    pub fn cam_shape(&self) -> Result<[usize; 3]> {
        Ok(self.block_shapes()?[self.cam_layer].conv_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mnist_shapes() {
        let spec = NetworkSpec::mnist_default([3, 28, 28], 2);
        let s = spec.block_shapes().unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].conv_out, [8, 28, 28]);
        assert_eq!(s[0].output, [8, 14, 14]);
        assert_eq!(s[3].output, [32, 14, 14]);
        assert_eq!(spec.cam_shape().unwrap(), [32, 14, 14]);
        assert_eq!(spec.head_features().unwrap(), 32);
    }

    #[test]
    fn wider_pooling_layout() {
        let spec = NetworkSpec::four_block([3, 28, 28], 2, [16, 32, 64, 128], &[0, 1, 2]);
        let s = spec.block_shapes().unwrap();
        assert_eq!(s[2].output, [64, 3, 3]);
        assert_eq!(spec.cam_shape().unwrap(), [128, 3, 3]);
    }

    #[test]
    fn cam_layer_must_exist() {
        let mut spec = NetworkSpec::mnist_default([3, 28, 28], 2);
        spec.cam_layer = 4;
        assert!(matches!(spec.block_shapes(), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_kernel_names_layer() {
        let mut spec = NetworkSpec::mnist_default([1, 4, 4], 2);
        spec.conv_blocks[2].padding = 0;
        spec.conv_blocks[2].kernel_size = 5;
        match spec.block_shapes() {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
