use super::{Data, Tape, Tensor, Var, C64};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-6;

/// Compares the tape gradient of `graph` with respect to `param` against
/// central finite differences.
///
/// `graph` receives a fresh tape and the parameter leaf and must return a
/// real scalar. Complex parameters are perturbed along their real and
/// imaginary parts separately. The result is the normwise relative error
/// `max_i |analytic_i − numeric_i| / (max_i |analytic_i| + 1e-12)`; an
/// elementwise ratio would be dominated by round-off on entries many orders
/// below the largest one.
pub fn finite_diff_check<F>(graph: F, param: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let p = tape.param(param.clone());
    let loss = graph(&mut tape, p)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads
        .take(p)
        .unwrap_or_else(|| match param.data() {
            Data::Real(_) => Tensor::zeros(param.shape()),
            Data::Complex(_) => Tensor::zeros_complex(param.shape()),
        });

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(t);
        let loss = graph(&mut tape, p)?;
        tape.value(loss).item()
    };

    let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
    let mut check = |a: f64, plus: Tensor, minus: Tensor| -> Result<()> {
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        diff = diff.max((a - numeric).abs());
        scale = scale.max(a.abs());
        Ok(())
    };

    match param.data() {
        Data::Real(v) => {
            let g = analytic.as_real().expect("real parameter has a real gradient");
            for i in 0..v.len() {
                let mut plus = v.clone();
                let mut minus = v.clone();
                plus[i] += eps;
                minus[i] -= eps;
                check(
                    g[i],
                    Tensor::real(param.shape(), plus)?,
                    Tensor::real(param.shape(), minus)?,
                )?;
            }
        }
        Data::Complex(v) => {
            let g = analytic.as_complex().expect("complex parameter has a complex gradient");
            for i in 0..v.len() {
                for (dir, a) in [(C64::new(eps, 0.0), g[i].re), (C64::new(0.0, eps), g[i].im)] {
                    let mut plus = v.clone();
                    let mut minus = v.clone();
                    plus[i] += dir;
                    minus[i] -= dir;
                    check(
                        a,
                        Tensor::complex(param.shape(), plus)?,
                        Tensor::complex(param.shape(), minus)?,
                    )?;
                }
            }
        }
    }
    Ok(diff / (scale + 1e-12))
}
