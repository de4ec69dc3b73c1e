//! Positional encoding for tokens laid out on an irregular spot grid.
//!
//! Tokens are scattered to their grid cells, a learned channelwise 3×3
//! convolution runs over the grid with empty cells reading as zero, and the
//! result is gathered back and added to the input.

use std::rc::Rc;

use crate::error::Result;
use crate::numerics::{GridLayout, Tape, Tensor, Var};

pub fn apeg_on(tape: &mut Tape, tokens: Var, layout: Rc<GridLayout>, kernel: Var) -> Result<Var> {
    let conv = tape.grid_conv(tokens, kernel, layout)?;
    tape.add(tokens, conv)
}

/// `tokens + conv3x3(scatter(tokens))` gathered back to token order.
pub fn apeg_encode(tokens: &Tensor, grid_positions: &[(usize, usize)], kernel: &Tensor) -> Result<Tensor> {
    let layout = Rc::new(GridLayout::new(grid_positions)?);
    let mut t = Tape::new();
    let x = t.constant(tokens.clone());
    let k = t.constant(kernel.clone());
    let y = apeg_on(&mut t, x, layout, k)?;
    Ok(t.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grid::TAPS;

    #[test]
    fn zero_kernel_is_identity() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = apeg_encode(&x, &[(0, 0), (0, 1)], &Tensor::zeros(&[TAPS, 2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn isolated_spot_sees_only_centre_tap() {
        let x = Tensor::from_rows(&[vec![2.0, -3.0]]).unwrap();
        let k = Tensor::matrix(TAPS, 2, (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let y = apeg_encode(&x, &[(4, 7)], &k).unwrap();
        let c = k.row(4);
        assert_eq!(y.data(), &[2.0 + c[0] * 2.0, -3.0 + c[1] * -3.0]);
    }

    #[test]
    fn hand_computed_2x2() {
        // Single channel, cells a=(0,0) b=(0,1) c=(1,0) d=(1,1).
        // Kernel taps laid out row-major over offsets (-1..=1, -1..=1):
        //   1 2 3
        //   4 5 6
        //   7 8 9
        // out(a) = 5a + 6b + 8c + 9d, out(b) = 4a + 5b + 7c + 8d,
        // out(c) = 2a + 3b + 5c + 6d, out(d) = 1a + 2b + 4c + 5d.
        let (a, b, c, d) = (1.0, 10.0, 100.0, 1000.0);
        let x = Tensor::matrix(4, 1, vec![a, b, c, d]).unwrap();
        let k = Tensor::matrix(TAPS, 1, (1..=9).map(f64::from).collect()).unwrap();
        let y = apeg_encode(&x, &[(0, 0), (0, 1), (1, 0), (1, 1)], &k).unwrap();
        let conv = [
            5.0 * a + 6.0 * b + 8.0 * c + 9.0 * d,
            4.0 * a + 5.0 * b + 7.0 * c + 8.0 * d,
            2.0 * a + 3.0 * b + 5.0 * c + 6.0 * d,
            a + 2.0 * b + 4.0 * c + 5.0 * d,
        ];
        let expect: Vec<f64> = [a, b, c, d].iter().zip(conv).map(|(x, k)| x + k).collect();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn duplicate_positions_rejected() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(apeg_encode(&x, &[(1, 1), (1, 1)], &Tensor::zeros(&[TAPS, 1])).is_err());
    }
}
