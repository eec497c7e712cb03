//! Per-primitive gradient checks against central differences.
//!
//! Each case maps a flat input vector to a scalar through exactly one
//! primitive under test (plus slicing to split operands) followed by a
//! fixed weighted sum of squares, so both first- and second-order rules of
//! the primitive are exercised.

use crate::error::Result;
use crate::gradcheck::{check_gradient, check_second_order};
use crate::kernels::AxisRange;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FIRST_ORDER_TOLERANCE: f64 = 1e-5;
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-4;

type Build = fn(&mut Tape, Var) -> Result<Var>;

/// One primitive under test.
#[derive(Clone, Copy)]
pub struct PrimitiveCase {
    pub name: &'static str,
    pub input_len: usize,
    pub build: Build,
    /// Moves a random draw away from points where the primitive is not
    /// differentiable.
    pub condition: Option<fn(&mut Tensor)>,
}

#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub first_order: f64,
    pub second_order: f64,
}

impl CaseOutcome {
    pub fn passes(&self) -> bool {
        self.first_order <= FIRST_ORDER_TOLERANCE && self.second_order <= SECOND_ORDER_TOLERANCE
    }
}

/// SplitMix64; enough for reproducible test inputs.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draws in `[lo, hi)`.
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut state = seed;
    Tensor::from_fn(shape, |_| {
        let u = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    })
}

/// Splits off `count` entries of the flat input starting at `start` and
/// reshapes them.
fn part(tape: &mut Tape, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
    let count = shape.iter().product();
    let p = tape.narrow(x, 0, start, count)?;
    tape.reshape(p, shape)
}

/// `sum(w * y * y)` with fixed, position-dependent weights `w`.
fn weighted_square(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0);
    let w = tape.constant(w);
    let sq = tape.mul(y, y)?;
    let weighted = tape.mul(sq, w)?;
    tape.sum(weighted)
}

fn away_from_zero(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 };
        }
    }
}

fn binary(tape: &mut Tape, x: Var, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<Var> {
    let a = part(tape, x, 0, &[2, 3])?;
    let b = part(tape, x, 6, &[2, 3])?;
    let y = f(tape, a, b)?;
    weighted_square(tape, y)
}

fn unary(tape: &mut Tape, x: Var, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<Var> {
    let a = part(tape, x, 0, &[2, 4])?;
    let y = f(tape, a)?;
    weighted_square(tape, y)
}

fn conv(tape: &mut Tape, x: Var, pad: (usize, usize)) -> Result<Var> {
    let input = part(tape, x, 0, &[2, 2, 5, 4])?;
    let kernel = part(tape, x, 80, &[3, 2, 3, 3])?;
    let y = tape.conv2d(input, kernel, pad)?;
    weighted_square(tape, y)
}

fn xcorr(tape: &mut Tape, x: Var, pad: (usize, usize)) -> Result<Var> {
    let input = part(tape, x, 0, &[2, 3, 6, 5])?;
    let kernel = part(tape, x, 180, &[2, 3, 3, 2])?;
    let y = tape.depthwise_xcorr(input, kernel, pad)?;
    weighted_square(tape, y)
}

/// Separates values within each row of a `[3, 4]` block so the maximum is
/// isolated by more than the difference step.
fn separate_rows(t: &mut Tensor) {
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += 0.25 * ((i * 5) % 4) as f64;
    }
}

/// All primitive cases.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn case(name: &'static str, input_len: usize, build: Build) -> PrimitiveCase {
        PrimitiveCase { name, input_len, build, condition: None }
    }
    vec![
        case("add", 12, |t, x| binary(t, x, Tape::add)),
        case("sub", 12, |t, x| binary(t, x, Tape::sub)),
        case("mul", 12, |t, x| binary(t, x, Tape::mul)),
        case("matmul", 12, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let b = part(t, x, 6, &[3, 2])?;
            let y = t.matmul(a, b)?;
            weighted_square(t, y)
        }),
        case("conv2d", 134, |t, x| conv(t, x, (1, 1))),
        case("conv2d_valid", 134, |t, x| conv(t, x, (0, 0))),
        case("depthwise_xcorr", 216, |t, x| xcorr(t, x, (0, 0))),
        case("depthwise_xcorr_padded", 216, |t, x| xcorr(t, x, (1, 1))),
        PrimitiveCase {
            name: "relu",
            input_len: 8,
            build: |t, x| unary(t, x, Tape::relu),
            condition: Some(away_from_zero),
        },
        case("sigmoid", 8, |t, x| unary(t, x, Tape::sigmoid)),
        case("tanh", 8, |t, x| unary(t, x, Tape::tanh)),
        case("exp", 8, |t, x| unary(t, x, Tape::exp)),
        case("log", 8, |t, x| {
            let a = part(t, x, 0, &[2, 4])?;
            let shifted = t.exp(a)?;
            let y = t.log(shifted)?;
            let z = t.mul(y, shifted)?;
            weighted_square(t, z)
        }),
        case("softplus", 8, |t, x| unary(t, x, Tape::softplus)),
        case("scale", 8, |t, x| unary(t, x, |t, a| t.scale(a, -1.5))),
        case("sum", 24, |t, x| {
            let a = part(t, x, 0, &[2, 3, 4])?;
            let y = t.sum_axes(a, &[0, 2])?;
            weighted_square(t, y)
        }),
        case("mean", 24, |t, x| {
            let a = part(t, x, 0, &[2, 3, 4])?;
            let y = t.mean_axes(a, &[1])?;
            weighted_square(t, y)
        }),
        case("reshape", 12, |t, x| {
            let a = part(t, x, 0, &[3, 4])?;
            let y = t.reshape(a, &[2, 6])?;
            let y = t.tanh(y)?;
            weighted_square(t, y)
        }),
        case("slice", 14, |t, x| {
            let a = part(t, x, 0, &[2, 7])?;
            let y = t.slice(a, AxisRange { axis: 1, start: 1, count: 3, step: 2 })?;
            weighted_square(t, y)
        }),
        case("embed", 6, |t, x| {
            let a = part(t, x, 0, &[2, 3])?;
            let y = t.embed(a, AxisRange { axis: 1, start: 0, count: 3, step: 3 }, 8)?;
            weighted_square(t, y)
        }),
        case("concat", 18, |t, x| {
            let a = part(t, x, 0, &[2, 1, 3])?;
            let b = part(t, x, 6, &[2, 2, 3])?;
            let y = t.concat(&[a, b], 1)?;
            weighted_square(t, y)
        }),
        case("broadcast", 3, |t, x| {
            let a = part(t, x, 0, &[3, 1])?;
            let y = t.broadcast(a, &[3, 4])?;
            weighted_square(t, y)
        }),
        case("broadcast_scalar", 1, |t, x| {
            let a = t.reshape(x, &[])?;
            let y = t.broadcast(a, &[2, 2])?;
            weighted_square(t, y)
        }),
        PrimitiveCase {
            name: "max_axis",
            input_len: 12,
            build: |t, x| {
                let a = part(t, x, 0, &[3, 4])?;
                let y = t.max_axis(a, 1)?;
                weighted_square(t, y)
            },
            condition: Some(separate_rows),
        },
        case("permute", 24, |t, x| {
            let a = part(t, x, 0, &[2, 3, 4])?;
            let y = t.permute(a, &[2, 0, 1])?;
            weighted_square(t, y)
        }),
        case("flip", 12, |t, x| {
            let a = part(t, x, 0, &[3, 4])?;
            let y = t.flip(a, &[0, 1])?;
            weighted_square(t, y)
        }),
    ]
}

/// Runs one case at one seed with inputs drawn from `[-2, 2)`.
pub fn run_case(case: &PrimitiveCase, seed: u64) -> Result<CaseOutcome> {
    let mut x = uniform_tensor(&[case.input_len], -2.0, 2.0, seed);
    if let Some(condition) = case.condition {
        condition(&mut x);
    }
    let direction = uniform_tensor(&[case.input_len], -1.0, 1.0, seed ^ 0xD1B5_4A32_D192_ED03);
    let first = check_gradient(case.build, &x, STEP)?;
    let second = check_second_order(case.build, &x, &direction, STEP)?;
    Ok(CaseOutcome {
        name: case.name,
        seed,
        first_order: first.relative_error,
        second_order: second.relative_error,
    })
}
