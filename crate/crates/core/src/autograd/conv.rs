use crate::scalar::Scalar;

/// Patch-extraction geometry for a square-kernel convolution over NHWC
/// feature maps with "same" padding: the output spatial size is
/// `ceil(in / stride)`, and when the total padding is odd the extra pixel
/// goes to the bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_height: usize,
    pub out_width: usize,
}

fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, needed / 2)
}

impl ConvGeometry {
    pub fn same(
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1 && height >= 1 && width >= 1);
        let (out_height, pad_top) = same_padding(height, kernel, stride);
        let (out_width, pad_left) = same_padding(width, kernel, stride);
        ConvGeometry {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            pad_top,
            pad_left,
            out_height,
            out_width,
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn cols_shape(&self) -> [usize; 2] {
        [
            self.batch * self.out_height * self.out_width,
            self.kernel * self.kernel * self.channels,
        ]
    }

    /// Input row/column feeding kernel tap `(ky, kx)` at output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }

    pub(crate) fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let c = self.channels;
        let row_len = self.kernel * self.kernel * c;
        let mut row = 0;
        for n in 0..self.batch {
            let img = &input[n * self.height * self.width * c..];
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let dst = &mut cols[row * row_len..(row + 1) * row_len];
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let off = (ky * self.kernel + kx) * c;
                            match self.source(oy, ox, ky, kx) {
                                Some((iy, ix)) => {
                                    let src = (iy * self.width + ix) * c;
                                    dst[off..off + c].copy_from_slice(&img[src..src + c]);
                                }
                                None => dst[off..off + c].fill(T::zero()),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters patch rows back onto
    /// the input grid, summing overlaps.
    pub(crate) fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        let c = self.channels;
        let row_len = self.kernel * self.kernel * c;
        out.fill(T::zero());
        let mut row = 0;
        for n in 0..self.batch {
            let base = n * self.height * self.width * c;
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let src = &cols[row * row_len..(row + 1) * row_len];
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                let off = (ky * self.kernel + kx) * c;
                                let dst = base + (iy * self.width + ix) * c;
                                for (d, s) in out[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                    *d += *s;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
