//! 3x3 stride-1 convolution with zero "same" padding on channel-major
//! (`C x H x W`) buffers.

use crate::linalg::{gemm, Trans};

/// Geometry of one same-padding 3x3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Source pixel for output `(y, x)` and tap `(dy, dx)`, if inside the image.
    #[inline]
    fn tap(&self, y: usize, x: usize, dy: usize, dx: usize) -> Option<usize> {
        let sy = (y + dy).checked_sub(1)?;
        let sx = (x + dx).checked_sub(1)?;
        (sy < self.height && sx < self.width).then_some(sy * self.width + sx)
    }
}

/// Direct nested-loop convolution for a single input.
pub(crate) fn forward_direct(g: &ConvGeometry, kernel: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), g.input_len(), "conv input length");
    let plane = g.plane();
    let mut out = vec![0.0; g.output_len()];
    for o in 0..g.out_channels {
        let krow = &kernel[o * g.in_channels * 9..(o + 1) * g.in_channels * 9];
        for y in 0..g.height {
            for x in 0..g.width {
                let mut acc = bias[o];
                for i in 0..g.in_channels {
                    let src = &input[i * plane..(i + 1) * plane];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            if let Some(s) = g.tap(y, x, dy, dx) {
                                acc += krow[i * 9 + dy * 3 + dx] * src[s];
                            }
                        }
                    }
                }
                out[o * plane + y * g.width + x] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`forward_direct`] with respect to its input.
pub(crate) fn input_grad_direct(g: &ConvGeometry, kernel: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let plane = g.plane();
    let mut gin = vec![0.0; g.input_len()];
    for o in 0..g.out_channels {
        let krow = &kernel[o * g.in_channels * 9..(o + 1) * g.in_channels * 9];
        for y in 0..g.height {
            for x in 0..g.width {
                let go = grad_out[o * plane + y * g.width + x];
                if go == 0.0 {
                    continue;
                }
                for i in 0..g.in_channels {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            if let Some(s) = g.tap(y, x, dy, dx) {
                                gin[i * plane + s] += krow[i * 9 + dy * 3 + dx] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Accumulates kernel and bias gradients for a single input.
pub(crate) fn param_grad_direct(
    g: &ConvGeometry,
    input: &[f64],
    grad_out: &[f64],
    gkernel: &mut [f64],
    gbias: &mut [f64],
) {
    let plane = g.plane();
    for o in 0..g.out_channels {
        for y in 0..g.height {
            for x in 0..g.width {
                let go = grad_out[o * plane + y * g.width + x];
                if go == 0.0 {
                    continue;
                }
                gbias[o] += go;
                for i in 0..g.in_channels {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            if let Some(s) = g.tap(y, x, dy, dx) {
                                gkernel[o * g.in_channels * 9 + i * 9 + dy * 3 + dx] +=
                                    go * input[i * plane + s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds an input into `(in_channels * 9) x (H * W)` patch columns.
pub(crate) fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let plane = g.plane();
    debug_assert_eq!(cols.len(), g.in_channels * 9 * plane);
    for i in 0..g.in_channels {
        let src = &input[i * plane..(i + 1) * plane];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[(i * 9 + dy * 3 + dx) * plane..(i * 9 + dy * 3 + dx + 1) * plane];
                for y in 0..g.height {
                    for x in 0..g.width {
                        row[y * g.width + x] = g.tap(y, x, dy, dx).map_or(0.0, |s| src[s]);
                    }
                }
            }
        }
    }
}

/// Folds patch-column gradients back onto the input (adjoint of [`im2col`]).
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let plane = g.plane();
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..g.in_channels {
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[(i * 9 + dy * 3 + dx) * plane..(i * 9 + dy * 3 + dx + 1) * plane];
                for y in 0..g.height {
                    for x in 0..g.width {
                        if let Some(s) = g.tap(y, x, dy, dx) {
                            out[i * plane + s] += row[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
}

/// im2col + gemm forward for one input, written into `out`.
pub(crate) fn forward_gemm(
    g: &ConvGeometry,
    kernel: &[f64],
    bias: &[f64],
    input: &[f64],
    cols: &mut [f64],
    out: &mut [f64],
) {
    let plane = g.plane();
    im2col(g, input, cols);
    gemm(
        g.out_channels,
        g.in_channels * 9,
        plane,
        1.0,
        kernel,
        Trans::No,
        cols,
        Trans::No,
        0.0,
        out,
    );
    for (o, b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}
