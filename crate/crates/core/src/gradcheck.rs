//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Estimates combine central differences at steps h and h/2 so the leading
//! truncation term cancels. When any probe lands on a different smooth piece
//! than the base point (a relu changes sign, hard mining picks another pair),
//! the step shrinks tenfold, up to [`MAX_SHRINKS`] times. Coordinates that
//! still straddle a kink are counted as skipped rather than compared.

use crate::autodiff::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Worst disagreement found by a check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates sitting on a kink at every step tried.
    pub coords_skipped: usize,
}

pub const MAX_SHRINKS: usize = 3;

impl GradReport {
    fn empty() -> Self {
        GradReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            coords_skipped: 0,
        }
    }

    fn observe(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if err > self.max_rel_error || self.coords_checked == 1 {
            self.max_rel_error = err;
            self.worst = at;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item().as_f64())
}

/// Loss value and branch signature of one evaluation.
type Eval = (f64, u64);

/// Richardson-extrapolated central difference of `eval` (which sets the
/// coordinate to the given value) around `orig`: combining steps h and h/2
/// cancels the h^2 truncation term. `None` if no step keeps all four probes
/// on the base point's smooth piece.
fn central<T: Real>(mut eval: impl FnMut(T) -> Result<Eval>, orig: T, step: f64, base: u64) -> Result<Option<f64>> {
    let mut diff = |h: f64| -> Result<Option<f64>> {
        let h = T::lit(h);
        let (plus, sp) = eval(orig + h)?;
        let (minus, sm) = eval(orig - h)?;
        // the realised step, so rounding of orig +- h does not bias the estimate
        let span = ((orig + h) - (orig - h)).as_f64();
        Ok((sp == base && sm == base).then(|| (plus - minus) / span))
    };
    let mut step = step;
    for _ in 0..=MAX_SHRINKS {
        if let Some(coarse) = diff(step)? {
            if let Some(fine) = diff(step / 2.0)? {
                return Ok(Some((4.0 * fine - coarse) / 3.0));
            }
        }
        step /= 10.0;
    }
    Ok(None)
}

/// Compares `backward()` against central differences for every coordinate
/// of every input. `f` records a scalar function of the input variables.
pub fn finite_diff_check_many<T, F>(f: F, inputs: &[Tensor<T>], step: f64) -> Result<GradReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    scalar_of(&g, loss)?;
    let base = g.branch_signature();
    g.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<Eval> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((scalar_of(&g, loss)?, g.branch_signature()))
    };

    let mut report = GradReport::empty();
    let mut work = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let orig = input.data()[c];
            let numeric = central(
                |v| {
                    work[ti].data_mut()[c] = v;
                    eval(&work)
                },
                orig,
                step,
                base,
            )?;
            work[ti].data_mut()[c] = orig;
            match numeric {
                Some(n) => report.observe((ti, c), analytic[ti][c].as_f64(), n),
                None => report.coords_skipped += 1,
            }
        }
    }
    Ok(report)
}

/// Single-input form: worst relative error between the recorded gradient
/// of `f` at `x` and its central-difference estimate.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), step).map(|r| r.max_rel_error)
}

/// Checks gradients with respect to the trainable entries of a parameter
/// store. `f` binds whatever parameters it needs through [`Graph::param`].
/// `stride` > 1 checks every `stride`-th coordinate of each entry (the first
/// coordinate of each entry is always included).
pub fn finite_diff_check_params<T, F>(f: F, store: &ParamStore<T>, step: f64, stride: usize) -> Result<GradReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    finite_diff_check_params_where(f, store, step, stride, |_| true)
}

/// [`finite_diff_check_params`] restricted to parameters whose name passes
/// `keep`.
pub fn finite_diff_check_params_where<T, F, K>(f: F, store: &ParamStore<T>, step: f64, stride: usize, keep: K) -> Result<GradReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
    K: Fn(&str) -> bool,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    scalar_of(&g, loss)?;
    let base = g.branch_signature();
    g.backward(loss)?;
    let mut analytic: Vec<Option<Vec<T>>> = vec![None; store.len()];
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = Some(grad.to_vec());
    }

    let eval = |s: &ParamStore<T>| -> Result<Eval> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok((scalar_of(&g, loss)?, g.branch_signature()))
    };

    let mut report = GradReport::empty();
    let mut work = store.clone();
    for id in store.ids().filter(|&id| store.is_trainable(id) && keep(store.name(id))) {
        let n = store.get(id).len();
        for c in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).data()[c];
            let numeric = central(
                |v| {
                    work.get_mut(id).data_mut()[c] = v;
                    eval(&work)
                },
                orig,
                step,
                base,
            )?;
            work.get_mut(id).data_mut()[c] = orig;
            let a = analytic[id.index()].as_ref().map_or(0.0, |v| v[c].as_f64());
            match numeric {
                Some(n) => report.observe((id.index(), c), a, n),
                None => report.coords_skipped += 1,
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Fault;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * 0.37 - 1.0);
        let err = finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_sum_is_constant() {
        let x = Tensor::<f64>::from_fn(&[2, 4], |i| (i as f64).sin());
        let err = finite_diff_check(
            |g, v| {
                let s = g.softmax_rows(v)?;
                Ok(g.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        // analytic gradient ~0 and numeric ~0 both sit under the 1e-8 floor
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.7);
        let b = Tensor::<f64>::from_fn(&[3, 2], |i| 1.0 - i as f64 * 0.2);
        let r = finite_diff_check_many(
            |g, v| {
                g.inject_fault(Fault::MatmulBackward);
                let y = g.matmul(v[0], v[1])?;
                let y = g.mul(y, y)?;
                Ok(g.sum(y))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.05, "{r:?}");
        assert_eq!(r.worst.0, 0);
    }

    #[test]
    fn kink_crossings_shrink_the_step() {
        // relu(x - 0.3) at x = 0.3005: a 1e-3 step crosses the kink, 1e-4 does not
        let x = Tensor::<f64>::from_f64(&[1], &[0.3005]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let c = g.constant(Tensor::from_f64(&[1], &[0.3])?);
            let d = g.sub(v[0], c)?;
            let r = g.relu(d);
            let r = g.mul(r, r)?;
            Ok(g.sum(r))
        };
        let r = finite_diff_check_many(f, std::slice::from_ref(&x), 1e-3).unwrap();
        assert_eq!((r.coords_checked, r.coords_skipped), (1, 0));
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn coordinates_on_a_kink_are_skipped() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 0.5]).unwrap();
        let r = finite_diff_check_many(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            std::slice::from_ref(&x),
            1e-4,
        )
        .unwrap();
        assert_eq!((r.coords_checked, r.coords_skipped), (1, 1));
        assert!(r.max_rel_error < 1e-8);
    }
}
