use crate::error::Result;
use crate::tensor::{grad_check_mixed, GradCheckReport, Tape, Tensor, Var};

use super::params::ParamStore;

/// Grad-checks a float32 model against float64 central differences, both
/// with respect to the input `x` and to every trainable parameter.
///
/// `f_lo` and `f_hi` are the same scalar-valued function written against
/// the float32 store and its float64 cast. Returns one report per checked
/// tensor, the input first (named `"input"`).
pub fn grad_check_store<F, G>(
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    f_lo: F,
    f_hi: G,
    eps: f64,
    tol: f64,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: Fn(&mut Tape<f32>, &super::Bound, Var) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &super::Bound, Var) -> Result<Var>,
{
    let hi = store.cast::<f64>();
    let x_hi = x.cast::<f64>();
    let mut out = Vec::new();
    let r = grad_check_mixed(
        |t, v| {
            let p = store.bind(t, false);
            f_lo(t, &p, v)
        },
        |t, v| {
            let p = hi.bind(t, false);
            f_hi(t, &p, v)
        },
        x,
        eps,
        tol,
    )?;
    out.push(("input".to_string(), r));
    for id in store.ids() {
        let param = store.get(id);
        if !param.trainable {
            continue;
        }
        let r = grad_check_mixed(
            |t, v| {
                let mut p = store.bind(t, false);
                p.set(id, v);
                let xv = t.constant(x);
                f_lo(t, &p, xv)
            },
            |t, v| {
                let mut p = hi.bind(t, false);
                p.set(id, v);
                let xv = t.constant(&x_hi);
                f_hi(t, &p, xv)
            },
            &param.value,
            eps,
            tol,
        )?;
        out.push((param.name.clone(), r));
    }
    Ok(out)
}

/// Largest relative error over a set of reports, with the offending name.
pub fn worst(reports: &[(String, GradCheckReport)]) -> (&str, f64) {
    reports
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a })
}
