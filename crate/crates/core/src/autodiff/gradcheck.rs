use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this, times `max(1, |loss|)`, are compared absolutely
/// rather than relatively; central-difference roundoff grows with `|loss|`.
const REL_FLOOR: f64 = 1e-6;
/// ReLU inputs closer than this to zero make finite differences straddle the kink.
const KINK_MARGIN: f64 = 1e-3;
const MAX_COORDS_PER_TENSOR: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// How many times parameters were jittered to move ReLU inputs off their kink.
    pub kink_retries: usize,
    pub passed: bool,
}

fn eval<F>(params: &[Tensor], loss_fn: &mut F) -> Result<(Tape, Vec<Var>, Var), AutodiffError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` receives the tape and one leaf per entry of `params` and must
/// return a scalar. Up to 64 evenly spaced coordinates per tensor are probed.
/// If any ReLU input sits within 1e-3 of zero, the parameters are jittered
/// (deterministically) until the probe points are away from the kink; the
/// jittered values are written back into `params`.
pub fn gradient_check<F>(
    params: &mut [Tensor],
    mut loss_fn: F,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(tolerance > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "gradient_check",
            reason: format!("tolerance must be positive, got {tolerance}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut kink_retries = 0;
    let (mut tape, mut vars, mut loss) = eval(params, &mut loss_fn)?;
    while tape.min_kink_distance() < KINK_MARGIN && kink_retries < 50 {
        for p in params.iter_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-1e-2..1e-2);
            }
        }
        kink_retries += 1;
        (tape, vars, loss) = eval(params, &mut loss_fn)?;
    }
    let floor = REL_FLOOR * tape.item(loss).abs().max(1.0);
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for t in 0..params.len() {
        let n = params[t].numel();
        let stride = n.div_ceil(MAX_COORDS_PER_TENSOR).max(1);
        for k in (0..n).step_by(stride) {
            let orig = params[t].data()[k];
            params[t].data_mut()[k] = orig + FD_STEP;
            let plus = {
                let (tp, _, l) = eval(params, &mut loss_fn)?;
                tp.item(l)
            };
            params[t].data_mut()[k] = orig - FD_STEP;
            let minus = {
                let (tp, _, l) = eval(params, &mut loss_fn)?;
                tp.item(l)
            };
            params[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[t].data()[k];
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance,
        checked,
        kink_retries,
        passed: max_rel_error < tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    AddBias,
    SubBias,
    MulBias,
    DivPositive,
    Relu,
    ExpScaled,
    LogSigmoid,
    Softmax,
    LogSoftmax,
    DoubleTranspose,
    ConcatMix,
    OuterMix,
    Reshape,
    StopGradientBranch,
    DoubleReversal,
    RowSum,
}

const STEPS: [Step; 16] = [
    Step::AddBias,
    Step::SubBias,
    Step::MulBias,
    Step::DivPositive,
    Step::Relu,
    Step::ExpScaled,
    Step::LogSigmoid,
    Step::Softmax,
    Step::LogSoftmax,
    Step::DoubleTranspose,
    Step::ConcatMix,
    Step::OuterMix,
    Step::Reshape,
    Step::StopGradientBranch,
    Step::DoubleReversal,
    Step::RowSum,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    CrossEntropy,
    KlDiv,
    SquaredError,
    BinaryCrossEntropy,
    Sum,
    MeanAxis,
}

const HEADS: [Head; 6] = [
    Head::CrossEntropy,
    Head::KlDiv,
    Head::SquaredError,
    Head::BinaryCrossEntropy,
    Head::Sum,
    Head::MeanAxis,
];

/// A seeded random computation graph for gradient checking.
///
/// Parameters are `x [n,d]`, `w [d,k]`, `b [n,k]`, `m [2k,k]` and `v [k]`.
/// The graph starts from `x·w`, applies a random chain of elementwise,
/// structural and reduction steps that keep an `[n,k]` state, and ends in a
/// random scalar head. Over a few dozen seeds every public op is exercised.
/// Gradient-modifying ops appear only in forms whose finite-difference
/// derivative equals the analytic one: reversals come in cancelling pairs
/// and stopped branches are scaled by zero.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub params: Vec<Tensor>,
    steps: Vec<Step>,
    head: Head,
    temperature: f64,
    lambda: f64,
    targets: Tensor,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0067_7261_7068);
        let n = rng.random_range(2..=5);
        let d = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let rand = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
                .expect("non-empty shape")
        };
        let params = vec![
            rand(&[n, d], &mut rng),
            rand(&[d, k], &mut rng),
            rand(&[n, k], &mut rng),
            rand(&[2 * k, k], &mut rng),
            rand(&[k], &mut rng),
        ];
        let len = rng.random_range(3..=8);
        let steps = (0..len).map(|_| STEPS[rng.random_range(0..STEPS.len())]).collect();
        let head = HEADS[rng.random_range(0..HEADS.len())];
        let raw: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut targets = Tensor::new(vec![n, k], raw).expect("non-empty shape");
        for r in 0..n {
            let s: f64 = targets.row(r).iter().sum();
            for j in 0..k {
                targets.data_mut()[r * k + j] /= s;
            }
        }
        Self {
            params,
            steps,
            head,
            temperature: rng.random_range(0.5..2.0),
            lambda: rng.random_range(0.5..2.0),
            targets,
        }
    }

    /// Records the graph on `tape`; `p` holds one leaf per entry of `params`.
    pub fn build(&self, tape: &mut Tape, p: &[Var]) -> Result<Var, AutodiffError> {
        let (x, w, b, m, v) = (p[0], p[1], p[2], p[3], p[4]);
        let shape = tape.shape(b).to_vec();
        let mut h = tape.matmul(x, w)?;
        for step in &self.steps {
            h = match step {
                Step::AddBias => tape.add(h, b)?,
                Step::SubBias => tape.sub(h, b)?,
                Step::MulBias => tape.mul(h, b)?,
                Step::DivPositive => {
                    let e = tape.exp(b);
                    let one = tape.constant(Tensor::full(&shape, 1.0));
                    let den = tape.add(one, e)?;
                    tape.div(h, den)?
                }
                Step::Relu => {
                    let r = tape.relu(h);
                    tape.add(r, h)?
                }
                Step::ExpScaled => {
                    let s = tape.scale(h, 0.3);
                    tape.exp(s)
                }
                Step::LogSigmoid => {
                    let s = tape.sigmoid(h);
                    tape.log(s)
                }
                Step::Softmax => {
                    let s = tape.softmax(h, self.temperature)?;
                    tape.scale(s, 3.0)
                }
                Step::LogSoftmax => tape.log_softmax(h, self.temperature)?,
                Step::DoubleTranspose => {
                    let t = tape.transpose(h)?;
                    tape.transpose(t)?
                }
                Step::ConcatMix => {
                    let c = tape.concat(&[h, b], 1)?;
                    let z = tape.matmul(c, m)?;
                    tape.scale(z, 0.5)
                }
                Step::OuterMix => {
                    let col = tape.mean_axis(h, 0)?;
                    let o = tape.outer(col, v)?;
                    let z = tape.matmul(h, o)?;
                    let z = tape.scale(z, 0.5);
                    tape.add(h, z)?
                }
                Step::Reshape => {
                    let flat = tape.reshape(h, vec![shape[0] * shape[1]])?;
                    tape.reshape(flat, shape.clone())?
                }
                Step::StopGradientBranch => {
                    let s = tape.stop_gradient(h);
                    let z = tape.scale(s, 0.0);
                    tape.add(h, z)?
                }
                Step::DoubleReversal => {
                    let r = tape.grad_reverse(h, self.lambda);
                    tape.grad_reverse(r, 1.0 / self.lambda)
                }
                Step::RowSum => {
                    let s = tape.sum_axis(h, 1)?;
                    let s = tape.reshape(s, vec![shape[0], 1])?;
                    let ones = tape.constant(Tensor::full(&[1, shape[1]], 1.0));
                    let s = tape.matmul(s, ones)?;
                    let s = tape.scale(s, 0.25);
                    tape.add(h, s)?
                }
            };
        }
        match self.head {
            Head::CrossEntropy => {
                let t = tape.constant(self.targets.clone());
                tape.cross_entropy(h, t)
            }
            Head::KlDiv => {
                let pq = tape.softmax(h, 1.0)?;
                let t = tape.constant(self.targets.clone());
                let rows = tape.kl_div_rows(t, pq)?;
                Ok(tape.mean(rows))
            }
            Head::SquaredError => {
                let rows = tape.squared_error_rows(h, b)?;
                Ok(tape.mean(rows))
            }
            Head::BinaryCrossEntropy => {
                let s = tape.sigmoid(h);
                let t = tape.constant(self.targets.clone());
                let e = tape.binary_cross_entropy(s, t)?;
                Ok(tape.mean(e))
            }
            Head::Sum => {
                let s = tape.sigmoid(h);
                Ok(tape.sum(s))
            }
            Head::MeanAxis => {
                let s = tape.mean_axis(h, 1)?;
                let sq = tape.mul(s, s)?;
                Ok(tape.sum(sq))
            }
        }
    }

    /// Gradient check of this graph at its own parameters.
    pub fn check(&self, tolerance: f64) -> Result<GradCheckReport, AutodiffError> {
        let mut params = self.params.clone();
        gradient_check(&mut params, |t, p| self.build(t, p), tolerance)
    }
}
