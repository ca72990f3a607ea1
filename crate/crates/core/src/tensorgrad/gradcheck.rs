use super::tape::{Tape, TensorId};
use super::Result;

const FD_STEP: f64 = 1e-5;

/// One parameter tensor fed to a gradient check.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamSpec {
    pub fn new(name: &str, shape: &[usize], values: Vec<f64>) -> Self {
        ParamSpec { name: name.to_string(), shape: shape.to_vec(), values }
    }
}

/// Per-parameter worst relative error between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|(_, e)| *e <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn eval<F>(f: &F, params: &[ParamSpec], requires_grad: bool) -> Result<(Tape<f64>, Vec<TensorId>, TensorId)>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::<f64>::new();
    let mut ids = Vec::with_capacity(params.len());
    for p in params {
        ids.push(tape.leaf(&p.shape, p.values.clone(), requires_grad)?);
    }
    let loss = f(&mut tape, &ids)?;
    Ok((tape, ids, loss))
}

/// Compare analytic gradients of a scalar-valued tape program against central
/// finite differences in f64.
pub fn grad_check<F>(f: &F, params: &[ParamSpec], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    grad_check_with_corruption(f, params, tol, false)
}

/// Same as [`grad_check`] but optionally negates the analytic gradients
/// before comparison. The corrupted mode is a negative control: it simulates
/// a sign error in a backward rule and must fail on any non-degenerate
/// program.
pub fn grad_check_with_corruption<F>(
    f: &F,
    params: &[ParamSpec],
    tol: f64,
    corrupt_sign: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let (mut tape, ids, loss) = eval(f, params, true)?;
    tape.backward(loss)?;
    let sign = if corrupt_sign { -1.0 } else { 1.0 };
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.iter().map(|&v| sign * v).collect())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();

    let mut per_param = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for (ei, &exact) in analytic[pi].iter().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].values[ei] += FD_STEP;
            let (tp, _, lp) = eval(f, &plus, false)?;
            let mut minus = params.to_vec();
            minus[pi].values[ei] -= FD_STEP;
            let (tm, _, lm) = eval(f, &minus, false)?;
            let numeric = (tp.value(lp) - tm.value(lm)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(exact, numeric));
        }
        per_param.push((p.name.clone(), worst));
    }
    Ok(GradCheckReport { tol, per_param })
}
