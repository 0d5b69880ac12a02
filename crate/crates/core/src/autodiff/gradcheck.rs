//! Central finite-difference checks of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements whose difference quotient changed with the step size, i.e. a
    /// kink (relu, max-pool tie) lies within `h` of the point.
    pub skipped: usize,
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Compare analytic gradients of a scalar function of `params` against
/// central differences with step `h`.
///
/// `build` records the function on a fresh graph given one leaf per parameter.
pub fn check_gradients<F>(params: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .ok_or_else(|| Error::Numeric("parameter received no gradient".into()))
        })
        .collect::<Result<_>>()?;

    let mut work = params.to_vec();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            let mut at = |x: f64| -> Result<f64> {
                work[pi].data_mut()[ei] = x;
                eval(&work)
            };
            let fd = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            let fd_half = (at(orig + h / 2.0)? - at(orig - h / 2.0)?) / h;
            work[pi].data_mut()[ei] = orig;
            if rel_err(fd, fd_half) > 5e-5 {
                out.skipped += 1;
                continue;
            }
            out.checked += 1;
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic[pi].data()[ei], fd));
        }
    }
    Ok(out)
}
