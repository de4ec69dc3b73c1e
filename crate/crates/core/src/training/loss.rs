//! Fused, per-branch and total losses, on plain tensors and on the tape.

use crate::error::{Error, Result};
use crate::model::SpotVars;
use crate::numerics::{Tape, Tensor, Var};

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda = {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    if a.len() == 0 {
        return Err(Error::arg(format!("{op} of empty vectors")));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Mean squared error between the fused prediction and the label.
pub fn loss_fused(p_f: &Tensor, g: &Tensor) -> Result<f64> {
    mse(p_f, g, "loss_fused")
}

/// `(1 − λ)·mse(p_i, g) + λ·mse(p_i, p_f)`.
pub fn loss_branch(p_i: &Tensor, g: &Tensor, p_f: &Tensor, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let to_label = mse(p_i, g, "loss_branch")?;
    let to_fused = mse(p_i, p_f, "loss_branch")?;
    Ok((1.0 - lambda) * to_label + lambda * to_fused)
}

/// Predictions of one spot; dropped branches are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub fused: Tensor,
    pub spot: Option<Tensor>,
    pub ctx: Option<Tensor>,
    pub global: Option<Tensor>,
}

/// Loss terms of one spot or averaged over several. Absent branches are
/// `None` and contribute nothing to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub fused: f64,
    pub spot: Option<f64>,
    pub ctx: Option<f64>,
    pub global: Option<f64>,
}

impl LossParts {
    pub fn branches(&self) -> [Option<f64>; 3] {
        [self.spot, self.ctx, self.global]
    }
}

/// Sum of the present branch losses plus the fused loss.
pub fn loss_total(p: &Predictions, g: &Tensor, lambda: f64) -> Result<LossParts> {
    check_lambda(lambda)?;
    let fused = loss_fused(&p.fused, g)?;
    let branch = |b: &Option<Tensor>| b.as_ref().map(|b| loss_branch(b, g, &p.fused, lambda)).transpose();
    let (spot, ctx, global) = (branch(&p.spot)?, branch(&p.ctx)?, branch(&p.global)?);
    let total = [spot, ctx, global].iter().flatten().sum::<f64>() + fused;
    Ok(LossParts {
        total,
        fused,
        spot,
        ctx,
        global,
    })
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub fused: Var,
    pub spot: Option<Var>,
    pub ctx: Option<Var>,
    pub global: Option<Var>,
}

impl LossVars {
    pub fn read(&self, tape: &Tape) -> LossParts {
        let s = |v: Var| tape.value(v).data()[0];
        LossParts {
            total: s(self.total),
            fused: s(self.fused),
            spot: self.spot.map(s),
            ctx: self.ctx.map(s),
            global: self.global.map(s),
        }
    }
}

/// Branch loss on the tape. With `detach` no gradient reaches `p_f` through
/// the agreement term.
pub fn loss_branch_on(tape: &mut Tape, p_i: Var, g: Var, p_f: Var, lambda: f64, detach: bool) -> Result<Var> {
    check_lambda(lambda)?;
    let target = if detach { tape.detach(p_f) } else { p_f };
    let a = tape.mse(p_i, g)?;
    let b = tape.mse(p_i, target)?;
    let a = tape.scale(a, 1.0 - lambda);
    let b = tape.scale(b, lambda);
    tape.add(a, b)
}

pub fn loss_total_on(tape: &mut Tape, p: &SpotVars, g: Var, lambda: f64, detach: bool) -> Result<LossVars> {
    let fused = tape.mse(p.fused, g)?;
    let mut branch = |b: Option<Var>| -> Result<Option<Var>> {
        b.map(|b| loss_branch_on(tape, b, g, p.fused, lambda, detach)).transpose()
    };
    let spot = branch(p.spot.as_ref().map(|b| b.prediction))?;
    let ctx = branch(p.ctx.as_ref().map(|b| b.prediction))?;
    let global = branch(p.global)?;
    let mut parts = vec![fused];
    parts.extend([spot, ctx, global].into_iter().flatten());
    let total = tape.sum(&parts)?;
    Ok(LossVars {
        total,
        fused,
        spot,
        ctx,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_trivia() {
        let g = Tensor::vector(vec![1.0, -2.0, 3.5]);
        assert_eq!(loss_fused(&g, &g).unwrap(), 0.0);
        assert_eq!(loss_fused(&g.map(|v| v + 1.0), &g).unwrap(), 1.0);
        assert!(loss_fused(&g, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn branch_bounds() {
        let g = Tensor::vector(vec![1.0, 2.0]);
        let p = Tensor::vector(vec![0.0, 0.0]);
        assert!(loss_branch(&p, &g, &p, 1.5).is_err());
        assert!(loss_branch(&p, &g, &p, -0.1).is_err());
        assert_eq!(loss_branch(&p, &g, &p, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn dropped_branches_contribute_nothing() {
        let g = Tensor::vector(vec![1.0]);
        let p = Predictions {
            fused: Tensor::vector(vec![0.0]),
            spot: None,
            ctx: Some(Tensor::vector(vec![2.0])),
            global: None,
        };
        let l = loss_total(&p, &g, 0.0).unwrap();
        assert_eq!(l.total, 2.0);
        assert_eq!(l.spot, None);
    }
}
