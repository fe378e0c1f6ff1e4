//! Central finite-difference gradient verification.

use super::array::Tensor;
use super::params::{Graph, ParamStore};
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Magnitude below which errors are measured absolutely rather than relative
/// to the gradient size.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub tol: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

struct Worst {
    rel: f64,
    abs: f64,
    at: String,
    checked: usize,
}

impl Worst {
    fn new() -> Self {
        Worst { rel: 0.0, abs: 0.0, at: String::new(), checked: 0 }
    }

    fn observe(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let rel = relative_error(analytic, numeric);
        self.abs = self.abs.max((analytic - numeric).abs());
        self.checked += 1;
        if rel > self.rel || self.at.is_empty() {
            self.rel = rel;
            self.at = at();
        }
    }

    fn report(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.rel,
            max_abs_err: self.abs,
            checked: self.checked,
            worst: self.at,
            tol,
            passed: self.rel < tol,
        }
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", format!("function must be scalar-valued, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares the tape gradient of scalar `f(x)` against central differences
/// with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.variable(t.clone())?;
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let v = tape.variable(x.clone())?;
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = Worst::new();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst.observe(analytic[i], (plus - minus) / (2.0 * h), || format!("x[{i}]"));
    }
    Ok(worst.report(tol))
}

/// Finite-difference check of every parameter in `store` for the scalar
/// built by `f` on an evaluation (dropout-free) graph.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::eval(s);
        let out = f(&mut g)?;
        scalar_of(&g.tape, out)
    };
    let mut g = Graph::eval(store);
    let out = f(&mut g)?;
    scalar_of(&g.tape, out)?;
    let grads = g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads);

    let mut worst = Worst::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).value.len();
        for i in 0..n {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let a = analytic.get(id).grad.data()[i];
            worst.observe(a, (plus - minus) / (2.0 * h), || format!("{}[{i}]", store.get(id).name));
        }
    }
    Ok(worst.report(tol))
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("shape matches data")
}

/// Weighted sum with fixed random weights, so every output coordinate
/// contributes a distinct gradient.
fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = t.value(v).len();
    let mut rng = Rng::new(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    t.weighted_sum(v, &w)
}

/// Gradient check of every differentiable tape operation on small random
/// inputs, one report per case.
pub fn check_all_ops(h: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);
    let other = random(&[3, 4], 21);
    let pos = Tensor::new(&[3, 4], random(&[3, 4], 22).data().iter().map(|v| v.abs() + 0.5).collect())?;
    let w = random(&[5, 4], 23);
    let bias = random(&[5], 24);
    let gain = random(&[4], 25);
    let row = random(&[4], 26);
    let mut target = vec![0.0; 12];
    for r in 0..3 {
        target[r * 4 + r] = 0.7;
        target[r * 4 + 3] += 0.3;
    }
    let target = Tensor::new(&[3, 4], target)?;
    let cases: Vec<Case> = vec![
        ("matmul", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.transposed()?)?; let y = t.matmul(x, b)?; project(t, y, 1) } })),
        ("matmul_nt", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.matmul_nt(x, b)?; project(t, y, 1) } })),
        ("matmul_nt_rhs", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let a = t.constant(o.clone())?; let y = t.matmul_nt(a, x)?; project(t, y, 1) } })),
        ("linear_x", vec![3, 4], Box::new({ let (w, b) = (w.clone(), bias.clone()); move |t, x| { let w = t.constant(w.clone())?; let b = t.constant(b.clone())?; let y = t.linear(x, w, Some(b))?; project(t, y, 2) } })),
        ("linear_w", vec![5, 4], Box::new({ let (o, b) = (other.clone(), bias.clone()); move |t, w| { let x = t.constant(o.clone())?; let b = t.constant(b.clone())?; let y = t.linear(x, w, Some(b))?; project(t, y, 2) } })),
        ("linear_b", vec![5], Box::new({ let (o, w) = (other.clone(), w.clone()); move |t, b| { let x = t.constant(o.clone())?; let w = t.constant(w.clone())?; let y = t.linear(x, w, Some(b))?; project(t, y, 2) } })),
        ("add", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.add(x, b)?; project(t, y, 3) } })),
        ("sub", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.sub(b, x)?; project(t, y, 3) } })),
        ("mul", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.mul(x, b)?; project(t, y, 3) } })),
        ("div_num", vec![3, 4], Box::new({ let p = pos.clone(); move |t, x| { let b = t.constant(p.clone())?; let y = t.div(x, b)?; project(t, y, 3) } })),
        ("div_den", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let a = t.constant(o.clone())?; let sq = t.mul(x, x)?; let d = t.add_scalar(sq, 0.5)?; let y = t.div(a, d)?; project(t, y, 3) } })),
        ("add_row", vec![4], Box::new({ let o = other.clone(); move |t, r| { let x = t.constant(o.clone())?; let y = t.add_row(x, r)?; project(t, y, 4) } })),
        ("scale", vec![3, 4], Box::new(|t, x| { let y = t.scale(x, -2.5)?; project(t, y, 5) })),
        ("relu", vec![3, 4], Box::new(|t, x| { let y = t.relu(x)?; project(t, y, 5) })),
        ("sigmoid", vec![3, 4], Box::new(|t, x| { let y = t.sigmoid(x)?; project(t, y, 5) })),
        ("abs", vec![3, 4], Box::new(|t, x| { let y = t.abs(x)?; project(t, y, 5) })),
        ("maximum", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.maximum(x, b)?; project(t, y, 6) } })),
        ("minimum", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.minimum(b, x)?; project(t, y, 6) } })),
        ("softmax_rows", vec![3, 4], Box::new(|t, x| { let y = t.softmax(x, 1)?; project(t, y, 7) })),
        ("softmax_cols", vec![3, 4], Box::new(|t, x| { let y = t.softmax(x, 0)?; project(t, y, 7) })),
        ("layer_norm_x", vec![3, 4], Box::new({ let (g, r) = (gain.clone(), row.clone()); move |t, x| { let g = t.constant(g.clone())?; let b = t.constant(r.clone())?; let y = t.layer_norm(x, g, b, 1e-5)?; project(t, y, 8) } })),
        ("layer_norm_gain", vec![4], Box::new({ let (o, r) = (other.clone(), row.clone()); move |t, g| { let x = t.constant(o.clone())?; let b = t.constant(r.clone())?; let y = t.layer_norm(x, g, b, 1e-5)?; project(t, y, 8) } })),
        ("layer_norm_bias", vec![4], Box::new({ let (o, g) = (other.clone(), gain.clone()); move |t, b| { let x = t.constant(o.clone())?; let g = t.constant(g.clone())?; let y = t.layer_norm(x, g, b, 1e-5)?; project(t, y, 8) } })),
        ("cross_entropy", vec![3, 4], Box::new({ let tg = target.clone(); move |t, x| t.cross_entropy_rows(x, &tg, &[0.5, 0.0, 2.0]) })),
        ("bce", vec![4], Box::new(|t, x| { let p = t.sigmoid(x)?; t.bce_rows(p, &[1.0, 0.0, 1.0, 0.0], &[1.0, 0.5, 0.0, 2.0]) })),
        ("concat_rows", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.concat(&[b, x, x], 0)?; project(t, y, 9) } })),
        ("concat_cols", vec![3, 4], Box::new({ let o = other.clone(); move |t, x| { let b = t.constant(o.clone())?; let y = t.concat(&[x, b], 1)?; project(t, y, 9) } })),
        ("slice_rows", vec![3, 4], Box::new(|t, x| { let y = t.slice(x, 0, 1, 2)?; project(t, y, 10) })),
        ("slice_cols", vec![3, 4], Box::new(|t, x| { let y = t.slice(x, 1, 1, 2)?; project(t, y, 10) })),
        ("gather_rows", vec![3, 4], Box::new(|t, x| { let y = t.gather_rows(x, &[2, 0, 2, 1])?; project(t, y, 11) })),
        ("reshape", vec![3, 4], Box::new(|t, x| { let y = t.reshape(x, &[2, 6])?; project(t, y, 12) })),
        ("transpose", vec![3, 4], Box::new(|t, x| { let y = t.transpose(x)?; project(t, y, 12) })),
        ("mean", vec![3, 4], Box::new(|t, x| { let sq = t.mul(x, x)?; t.mean(sq) })),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, shape, f)) in cases.into_iter().enumerate() {
        let x = random(&shape, 1000 + i as u64);
        out.push((name, grad_check(f, &x, h, tol)?));
    }
    Ok(out)
}
