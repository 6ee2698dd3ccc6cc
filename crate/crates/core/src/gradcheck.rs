//! Central finite-difference gradient checking (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{GradFault, Gradients, Graph};
use crate::error::{Error, Result};
use crate::model::{DstModel, LossTerm, TrainingExample};
use crate::param::ParamSet;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates_checked: usize,
}

/// Which coordinates of each parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per parameter, drawn with the seed.
    Sample { per_param: usize, seed: u64 },
}

/// Compares analytic gradients from `loss_fn` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, using relative error with denominator
/// `max(|a|, |n|, 1e-8)`. Frozen parameters are skipped.
pub fn grad_check<L>(
    params: &mut ParamSet<f64>,
    mut loss_fn: L,
    eps: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamSet<f64>) -> Result<(f64, Gradients<f64>)>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Contract(format!("gradcheck eps {eps} outside [1e-6, 1e-4]")));
    }
    let (f0, analytic) = loss_fn(params)?;
    let (f1, _) = loss_fn(params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::NonDeterministic {
            first: f0,
            second: f1,
        });
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).trainable {
            continue;
        }
        let n = params.get(id).value().numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_param, seed } if per_param < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9));
                let mut v = sample(&mut rng, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        for i in coords {
            let orig = params.get(id).value().data()[i];
            params.get_mut(id).value_mut().data_mut()[i] = orig + eps;
            let plus = loss_fn(params)?.0;
            params.get_mut(id).value_mut().data_mut()[i] = orig - eps;
            let minus = loss_fn(params)?.0;
            params.get_mut(id).value_mut().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates_checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Gradient check of one loss term of the tracker on a fixed batch. `fault`
/// swaps in a deliberately wrong backward rule.
pub fn check_model_gradients(
    model: &DstModel<f64>,
    batch: &[TrainingExample],
    term: LossTerm,
    eps: f64,
    coverage: Coverage,
    fault: Option<GradFault>,
) -> Result<GradCheckReport> {
    let mut params = model.params().clone();
    let spec = model.reuse().clone();
    grad_check(
        &mut params,
        |ps| {
            let mut g = Graph::new(ps).with_fault(fault);
            let loss = model.batch_term_loss(&mut g, batch, &spec, term)?;
            Ok((g.value(loss).item(), g.backward(loss)?))
        },
        eps,
        coverage,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, GradFault, OpKind};
    use crate::mask::AttentionMask;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use std::cell::Cell;

    fn quadratic(ps: &ParamSet<f64>) -> Result<(f64, Gradients<f64>)> {
        let mut g = Graph::new(ps);
        let w = g.param(ps.id("w").unwrap());
        let sq = g.mul(w, w)?;
        let loss = g.sum(sq);
        Ok((g.value(loss).item(), g.backward(loss)?))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap()).unwrap();
        let r = grad_check(&mut ps, quadratic, 1e-5, Coverage::All).unwrap();
        assert!(r.max_relative_error < 1e-7, "{r:?}");
        assert_eq!(r.coordinates_checked, 3);
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_f64(&[2], &[0.5, 1.0]).unwrap()).unwrap();
        let frozen = ps.add_constant("frozen", &[5], 1.0).unwrap();
        ps.get_mut(frozen).trainable = false;
        let r = grad_check(&mut ps, quadratic, 1e-5, Coverage::All).unwrap();
        assert_eq!(r.coordinates_checked, 2);
    }

    #[test]
    fn eps_range_enforced() {
        let mut ps = ParamSet::new();
        ps.add_constant("w", &[1], 1.0).unwrap();
        assert!(grad_check(&mut ps, quadratic, 1e-3, Coverage::All).is_err());
    }

    #[test]
    fn nondeterministic_loss_rejected() {
        let mut ps = ParamSet::new();
        ps.add_constant("w", &[1], 1.0).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            &mut ps,
            |p| {
                calls.set(calls.get() + 1.0);
                let (f, g) = quadratic(p)?;
                Ok((f + calls.get(), g))
            },
            1e-5,
            Coverage::All,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    /// Single-head attention over three rows feeding a cross-entropy loss.
    fn tiny_attention(ps: &ParamSet<f64>, fault: Option<GradFault>) -> Result<(f64, Gradients<f64>)> {
        let mut g = Graph::new(ps).with_fault(fault);
        let x = g.param(ps.id("x").unwrap());
        let wq = g.param(ps.id("wq").unwrap());
        let wk = g.param(ps.id("wk").unwrap());
        let wv = g.param(ps.id("wv").unwrap());
        let gain = g.param(ps.id("gain").unwrap());
        let bias = g.param(ps.id("bias").unwrap());
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 0.5);
        let mask = AttentionMask::from_fn(3, 3, |i, j| j <= i)?;
        let p = g.masked_softmax(s, &mask)?;
        let h = g.matmul(p, v)?;
        let h = g.gelu(h);
        let h = g.layer_norm(h, gain, bias, 1e-5)?;
        let loss = g.cross_entropy(h, &[0, 3, 1])?;
        Ok((g.value(loss).item(), g.backward(loss)?))
    }

    fn tiny_params() -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.add_normal("x", &[3, 4], 1.0, &mut rng).unwrap();
        for name in ["wq", "wk", "wv"] {
            ps.add_normal(name, &[4, 4], 0.5, &mut rng).unwrap();
        }
        ps.add_normal("gain", &[4], 1.0, &mut rng).unwrap();
        ps.add_normal("bias", &[4], 1.0, &mut rng).unwrap();
        ps
    }

    #[test]
    fn tiny_attention_passes() {
        let mut ps = tiny_params();
        let r = grad_check(&mut ps, |p| tiny_attention(p, None), 1e-5, Coverage::All).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut ps = tiny_params();
        let fault = GradFault {
            op: OpKind::Gelu,
            factor: 1.05,
        };
        let r = grad_check(&mut ps, |p| tiny_attention(p, Some(fault)), 1e-5, Coverage::All).unwrap();
        assert!(r.max_relative_error > 1e-3, "{r:?}");
    }
}
