//! Token placement on a rectangular spot grid and the channelwise 3×3
//! convolution evaluated over it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of taps in a 3×3 kernel. Tap `t` covers offset
/// `(t / 3 - 1, t % 3 - 1)` in (row, col).
pub const TAPS: usize = 9;

/// Maps tokens to grid cells and back. Cells without a token read as zero.
#[derive(Debug, Clone)]
pub struct GridLayout {
    positions: Vec<(usize, usize)>,
    /// For every token and every tap, the index of the neighbouring token if
    /// that cell is occupied.
    neighbours: Vec<[Option<usize>; TAPS]>,
}

impl GridLayout {
    pub fn new(positions: &[(usize, usize)]) -> Result<Self> {
        let mut cell: HashMap<(usize, usize), usize> = HashMap::with_capacity(positions.len());
        for (i, &p) in positions.iter().enumerate() {
            if let Some(j) = cell.insert(p, i) {
                return Err(Error::arg(format!(
                    "tokens {j} and {i} share grid position {p:?}"
                )));
            }
        }
        let neighbours = positions
            .iter()
            .map(|&(r, c)| {
                let mut nb = [None; TAPS];
                for (t, slot) in nb.iter_mut().enumerate() {
                    let dr = (t / 3) as isize - 1;
                    let dc = (t % 3) as isize - 1;
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr >= 0 && cc >= 0 {
                        *slot = cell.get(&(rr as usize, cc as usize)).copied();
                    }
                }
                nb
            })
            .collect();
        Ok(Self {
            positions: positions.to_vec(),
            neighbours,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    fn check(&self, x: &Tensor, kernel: &Tensor) -> Result<()> {
        if x.rows() != self.len() {
            return Err(Error::dim("grid_conv", x.shape(), &[self.len()]));
        }
        if kernel.rows() != TAPS || kernel.cols() != x.cols() {
            return Err(Error::dim("grid_conv", x.shape(), kernel.shape()));
        }
        Ok(())
    }

    /// Scatter `x` onto the grid, cross-correlate each channel with its
    /// column of `kernel` (zero padding), and gather the result back.
    pub fn conv(&self, x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        self.check(x, kernel)?;
        let d = x.cols();
        let mut out = vec![0.0; self.len() * d];
        for (i, nb) in self.neighbours.iter().enumerate() {
            let orow = &mut out[i * d..(i + 1) * d];
            for (t, src) in nb.iter().enumerate() {
                if let Some(j) = *src {
                    let k = kernel.row(t);
                    for ((o, &kv), &xv) in orow.iter_mut().zip(k).zip(x.row(j)) {
                        *o += kv * xv;
                    }
                }
            }
        }
        Tensor::matrix(self.len(), d, out)
    }

    /// Returns `(d_x, d_kernel)` for upstream gradient `dy`.
    pub fn conv_backward(
        &self,
        x: &Tensor,
        kernel: &Tensor,
        dy: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = x.cols();
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; kernel.len()];
        for (i, nb) in self.neighbours.iter().enumerate() {
            let g = &dy[i * d..(i + 1) * d];
            for (t, src) in nb.iter().enumerate() {
                if let Some(j) = *src {
                    let k = kernel.row(t);
                    let xr = x.row(j);
                    for c in 0..d {
                        dx[j * d + c] += k[c] * g[c];
                        dk[t * d + c] += xr[c] * g[c];
                    }
                }
            }
        }
        (dx, dk)
    }
}
