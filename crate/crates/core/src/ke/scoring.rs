//! Triplet scoring functions and the negative-sampling loss.
//!
//! Every scorer maps `(h, r, t)` vectors to a plausibility where higher is
//! better. Inside the loss, distance is the negated score.

use kepler_autograd::{log_sigmoid, Norm, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreFn {
    /// `-||h + r - t||_1`.
    TransE,
    /// `sum h_i r_i t_i`.
    DistMult,
    /// `Re(sum h_i r_i conj(t_i))`; vectors hold real parts then imaginary parts.
    ComplEx,
    /// `-||h * r - t||_2` with `r_k = exp(i theta_k)`; relation vectors hold the phases.
    RotatE,
    /// Half the sum of the forward and inverse trilinear products. Entity
    /// vectors hold the head part then the tail part; relation vectors hold
    /// the forward then the inverse relation.
    SimplE,
}

fn check_dims(h: &[f64], r: &[f64], t: &[f64], r_len: usize) -> Result<()> {
    if h.len() != t.len() || r.len() != r_len {
        return Err(Error::Config(format!(
            "dimension mismatch: head {}, relation {}, tail {}",
            h.len(),
            r.len(),
            t.len()
        )));
    }
    Ok(())
}

fn check_even(d: usize) -> Result<()> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("complex-valued model needs an even dimension, got {d}")));
    }
    Ok(())
}

/// `||h + r - t||_p`.
pub fn lp_distance(h: &[f64], r: &[f64], t: &[f64], p: f64) -> Result<f64> {
    check_dims(h, r, t, h.len())?;
    let terms = h.iter().zip(r).zip(t).map(|((a, b), c)| (a + b - c).abs());
    Ok(if p == 1.0 {
        terms.sum()
    } else {
        terms.map(|x| x.powf(p)).sum::<f64>().powf(1.0 / p)
    })
}

pub fn transe_distance(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    lp_distance(h, r, t, 1.0)
}

/// `-log sigmoid(gamma - d_pos) - mean_i log sigmoid(d_neg_i - gamma)`.
pub fn ke_loss(pos_distance: f64, neg_distances: &[f64], gamma: f64) -> Result<f64> {
    if neg_distances.is_empty() {
        return Err(Error::Config("ke loss needs at least one negative".into()));
    }
    let neg: f64 = neg_distances.iter().map(|&d| log_sigmoid(d - gamma)).sum();
    Ok(-log_sigmoid(gamma - pos_distance) - neg / neg_distances.len() as f64)
}

/// Batched loss averaged over `batch` positives. `distances` holds the
/// positive distances first, then `n_neg` negatives per positive in order.
pub fn ke_loss_var<'a>(distances: &Var<'a>, batch: usize, n_neg: usize, gamma: f64) -> Result<Var<'a>> {
    let total = batch * (1 + n_neg);
    if batch == 0 || n_neg == 0 || distances.shape() != [total] {
        return Err(Error::Config(format!(
            "expected {total} distances for {batch} positives with {n_neg} negatives each, got shape {:?}",
            distances.shape()
        )));
    }
    let tape = distances.tape();
    let mut sign = vec![-1.0; batch];
    sign.resize(total, 1.0);
    let mut shift = vec![gamma; batch];
    shift.resize(total, -gamma);
    let mut weight = vec![-1.0 / batch as f64; batch];
    weight.resize(total, -1.0 / (batch * n_neg) as f64);
    let c = |v: Vec<f64>| tape.constant(Tensor::vector(v));
    Ok(distances
        .mul(&c(sign))?
        .add(&c(shift))?
        .log_sigmoid()
        .mul(&c(weight))?
        .sum())
}

impl ScoreFn {
    pub fn is_complex(self) -> bool {
        matches!(self, ScoreFn::ComplEx | ScoreFn::RotatE)
    }

    /// Relation vector length for entity vectors of length `entity_dim`.
    pub fn relation_dim(self, entity_dim: usize) -> usize {
        match self {
            ScoreFn::RotatE => entity_dim / 2,
            _ => entity_dim,
        }
    }

    pub fn score(self, h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
        check_dims(h, r, t, self.relation_dim(h.len()))?;
        let d = h.len();
        Ok(match self {
            ScoreFn::TransE => -transe_distance(h, r, t)?,
            ScoreFn::DistMult => h.iter().zip(r).zip(t).map(|((a, b), c)| a * b * c).sum(),
            ScoreFn::ComplEx => {
                check_even(d)?;
                let k = d / 2;
                let mut acc = 0.0;
                for i in 0..k {
                    let (hr, hi, rr, ri, tr, ti) = (h[i], h[k + i], r[i], r[k + i], t[i], t[k + i]);
                    acc += (hr * rr - hi * ri) * tr + (hr * ri + hi * rr) * ti;
                }
                acc
            }
            ScoreFn::RotatE => {
                check_even(d)?;
                let k = d / 2;
                let mut acc = 0.0;
                for i in 0..k {
                    let (c, s) = (r[i].cos(), r[i].sin());
                    let re = h[i] * c - h[k + i] * s - t[i];
                    let im = h[i] * s + h[k + i] * c - t[k + i];
                    acc += re * re + im * im;
                }
                -acc.sqrt()
            }
            ScoreFn::SimplE => {
                check_even(d)?;
                let k = d / 2;
                let mut fwd = 0.0;
                let mut inv = 0.0;
                for i in 0..k {
                    fwd += h[i] * r[i] * t[k + i];
                    inv += t[i] * r[k + i] * h[k + i];
                }
                0.5 * (fwd + inv)
            }
        })
    }

    /// Row-wise distances (negated scores) of gathered `(h, r, t)` rows.
    pub fn distance_var<'a>(self, h: &Var<'a>, r: &Var<'a>, t: &Var<'a>) -> Result<Var<'a>> {
        let d = h.shape()[1];
        if self != ScoreFn::TransE && self != ScoreFn::DistMult {
            check_even(d)?;
        }
        let k = d / 2;
        let half = |x: &Var<'a>, i: usize| x.slice_cols(i * k, (i + 1) * k);
        Ok(match self {
            ScoreFn::TransE => h.add(r)?.sub(t)?.row_norm(Norm::L1),
            ScoreFn::DistMult => h.mul(r)?.mul(t)?.sum_rows().scale(-1.0),
            ScoreFn::ComplEx => {
                let (hr, hi, rr, ri, tr, ti) = (half(h, 0)?, half(h, 1)?, half(r, 0)?, half(r, 1)?, half(t, 0)?, half(t, 1)?);
                let re = hr.mul(&rr)?.sub(&hi.mul(&ri)?)?;
                let im = hr.mul(&ri)?.add(&hi.mul(&rr)?)?;
                re.mul(&tr)?.add(&im.mul(&ti)?)?.sum_rows().scale(-1.0)
            }
            ScoreFn::RotatE => {
                let (hr, hi, tr, ti) = (half(h, 0)?, half(h, 1)?, half(t, 0)?, half(t, 1)?);
                let (c, s) = (r.cos(), r.sin());
                let re = hr.mul(&c)?.sub(&hi.mul(&s)?)?.sub(&tr)?;
                let im = hr.mul(&s)?.add(&hi.mul(&c)?)?.sub(&ti)?;
                Var::concat_cols(&[re, im])?.row_norm(Norm::L2)
            }
            ScoreFn::SimplE => {
                let fwd = half(h, 0)?.mul(&half(r, 0)?)?.mul(&half(t, 1)?)?;
                let inv = half(t, 0)?.mul(&half(r, 1)?)?.mul(&half(h, 1)?)?;
                fwd.add(&inv)?.sum_rows().scale(-0.5)
            }
        })
    }
}
