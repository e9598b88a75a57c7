//! Central finite differences against the tape's analytic gradients.
//!
//! The error of coordinate `i` of an input is
//! `|a_i − n_i| / max(|a_i|, |n_i|, ‖a‖_∞)`, i.e. relative to the largest
//! analytic component of that input: with `ε = 1e-3` on f32 values the
//! difference quotient carries an absolute rounding error near
//! `ulp(loss) / ε`, which no per-coordinate relative measure can absorb for
//! components far below the gradient's scale. Coordinates whose one-sided
//! differences disagree, or whose perturbed evaluations take a different
//! ReLU or max branch than the unperturbed one, straddle a kink and are
//! counted separately instead of compared. Losses are read through
//! `Graph::scalar_f64` so the loss value itself is not rounded to f32.

use dasnet::Tensor;

pub const EPS: f32 = 1e-3;
const KINK: f64 = 1e-2;

#[derive(Clone, Copy, Debug, Default)]
pub struct Report {
    pub max_rel: f64,
    /// Analytic and numeric value at the worst coordinate.
    pub worst: (f64, f64),
    pub checked: usize,
    pub kinks: usize,
}

impl Report {
    pub fn merge(&mut self, o: Report) {
        if o.max_rel > self.max_rel {
            self.max_rel = o.max_rel;
            self.worst = o.worst;
        }
        self.checked += o.checked;
        self.kinks += o.kinks;
    }
}

pub fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    let d = a.abs().max(n.abs()).max(scale);
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// One evaluation of the function under test.
pub struct Eval {
    pub loss: f64,
    /// Analytic gradient of every input.
    pub grads: Vec<Vec<f32>>,
    /// `Graph::branch_pattern` of the evaluation, or empty when unknown.
    pub branches: Vec<bool>,
}

/// `f` evaluates the scalar loss and the analytic gradient of every input.
pub fn check(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> (f64, Vec<Vec<f32>>)) -> Report {
    check_at(
        inputs,
        |t| (0..inputs[t].numel()).collect(),
        |t| {
            let (loss, grads) = f(t);
            Eval {
                loss,
                grads,
                branches: Vec::new(),
            }
        },
    )
}

/// [`check`] over the coordinates `coords(t)` of each input `t` only.
pub fn check_at(
    inputs: &[Tensor],
    coords: impl Fn(usize) -> Vec<usize>,
    f: impl Fn(&[Tensor]) -> Eval,
) -> Report {
    let Eval {
        loss: l0,
        grads,
        branches,
    } = f(inputs);
    assert_eq!(grads.len(), inputs.len(), "one gradient per input");
    let mut r = Report::default();
    let mut work = inputs.to_vec();
    for (t, grad) in grads.iter().enumerate() {
        assert_eq!(grad.len(), inputs[t].numel());
        let scale = grad.iter().fold(0.0f64, |m, &g| m.max(g.abs() as f64));
        for i in coords(t) {
            let x = inputs[t].data()[i];
            let (xp, xm) = (x + EPS, x - EPS);
            work[t].data_mut()[i] = xp;
            let p = f(&work);
            work[t].data_mut()[i] = xm;
            let m = f(&work);
            work[t].data_mut()[i] = x;
            let (lp, lm) = (p.loss, m.loss);
            let (hp, hm) = ((xp - x) as f64, (x - xm) as f64);
            let (plus, minus) = ((lp - l0) / hp, (l0 - lm) / hm);
            let n = (lp - lm) / (hp + hm);
            let switched = p.branches != branches || m.branches != branches;
            if switched || (plus - minus).abs() > KINK * scale.max(n.abs()) {
                r.kinks += 1;
                continue;
            }
            let e = rel_err(grad[i] as f64, n, scale);
            if e > r.max_rel {
                r.max_rel = e;
                r.worst = (grad[i] as f64, n);
            }
            r.checked += 1;
        }
    }
    r
}
