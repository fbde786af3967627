use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so entries whose true gradient is
/// numerically zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Step that balances truncation and round-off for f64 transformer losses.
pub const DEFAULT_EPS: f64 = 3e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `f` with central differences,
/// Richardson-extrapolated from steps `eps` and `eps / 2`.
///
/// `f` returns the loss and one gradient tensor per parameter. Parameters
/// with more than `max_per_param` entries are checked on a fixed random
/// sample of that many entries.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    eps: f64,
    max_per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::invalid("gradient count does not match parameter count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let ids: Vec<_> = (0..params.len()).map(super::ParamId).collect();
    for id in ids {
        let len = params.tensor(id).len();
        let entries: Vec<usize> = if len <= max_per_param {
            (0..len).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, len, max_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for idx in entries {
            let orig = params.tensor(id).data()[idx];
            let mut central = |h: f64| -> Result<f64> {
                work.tensor_mut(id).data_mut()[idx] = orig + h;
                let (plus, _) = f(&work)?;
                work.tensor_mut(id).data_mut()[idx] = orig - h;
                let (minus, _) = f(&work)?;
                work.tensor_mut(id).data_mut()[idx] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite("grad_check objective".into()));
                }
                Ok((plus - minus) / (2.0 * h))
            };
            let (coarse, fine) = (central(eps)?, central(eps / 2.0)?);
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[id.0].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(params.get(id).name.clone());
                report.worst_index = idx;
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("x", Tensor::from_vec(1, n, values).unwrap()).unwrap();
        s
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let s = store(vec![0.3, -1.2, 2.0, 0.7]);
        let report = grad_check(&s, 1e-3, 100, |p| {
            let mut g = Graph::new(p);
            let x = g.param(super::super::ParamId(0));
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            let loss = g.value(l).to_scalar();
            Ok((loss, g.backward(l)?.into_param_grads(p)))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let s = store(vec![1.0, 2.0]);
        let report = grad_check(&s, 1e-3, 100, |p| Ok((5.0, p.zeros_like()))).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let s = store(vec![1.0]);
        assert!(grad_check(&s, 1e-3, 100, |p| Ok((f64::NAN, p.zeros_like()))).is_err());
    }
}
