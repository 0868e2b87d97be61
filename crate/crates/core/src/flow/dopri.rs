//! Embedded Dormand–Prince 5(4) integrator with cubic Hermite dense output.

/// Integrator parameters.
#[derive(Clone, Copy, Debug)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Dopri5 {
    pub fn new(rtol: f64, atol: f64, h_init: f64, h_max: f64) -> Self {
        Dopri5 { rtol, atol, h_init, h_max, max_steps: 1_000_000 }
    }
}

#[derive(Debug, Clone)]
pub enum OdeError {
    /// Step size collapsed below machine resolution (stiffness or NaN).
    StepUnderflow { t: f64 },
    MaxStepsExceeded { t: f64 },
}

impl std::fmt::Display for OdeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OdeError::StepUnderflow { t } => write!(f, "step size underflow at t = {t:.8}"),
            OdeError::MaxStepsExceeded { t } => write!(f, "step budget exceeded at t = {t:.8}"),
        }
    }
}

/// One accepted step with endpoint derivatives, for dense evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord<const N: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: [f64; N],
    pub y1: [f64; N],
    pub f0: [f64; N],
    pub f1: [f64; N],
}

impl<const N: usize> StepRecord<N> {
    pub fn h(&self) -> f64 {
        self.t1 - self.t0
    }

    /// Cubic Hermite interpolant on [t0, t1].
    pub fn eval(&self, t: f64) -> [f64; N] {
        let h = self.h();
        let theta = (t - self.t0) / h;
        let mut out = [0.0; N];
        for i in 0..N {
            let d = self.y1[i] - self.y0[i];
            out[i] = (1.0 - theta) * self.y0[i]
                + theta * self.y1[i]
                + theta * (theta - 1.0)
                    * ((1.0 - 2.0 * theta) * d
                        + (theta - 1.0) * h * self.f0[i]
                        + theta * h * self.f1[i]);
        }
        out
    }
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// b - b_hat, the embedded error weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Stateful one-step driver. The right-hand side is owned by the stepper; the
/// caller advances with [`Stepper::step`], which never oversteps its limit.
pub struct Stepper<const N: usize, R: Fn(f64, &[f64; N]) -> [f64; N]> {
    rhs: R,
    params: Dopri5,
    pub t: f64,
    pub y: [f64; N],
    f: [f64; N],
    h: f64,
    steps_taken: usize,
}

impl<const N: usize, R: Fn(f64, &[f64; N]) -> [f64; N]> Stepper<N, R> {
    pub fn new(params: Dopri5, rhs: R, t0: f64, y0: [f64; N]) -> Self {
        let f = rhs(t0, &y0);
        let h = params.h_init.min(params.h_max);
        Stepper { rhs, params, t: t0, y: y0, f, h, steps_taken: 0 }
    }

    /// Replace the current state (after an external projection); refreshes the
    /// cached derivative.
    pub fn set_state(&mut self, t: f64, y: [f64; N]) {
        self.t = t;
        self.y = y;
        self.f = (self.rhs)(t, &y);
    }

    /// Advance one accepted step, clamped so that t never exceeds `t_limit`.
    pub fn step(&mut self, t_limit: f64) -> Result<StepRecord<N>, OdeError> {
        let mut rejects = 0usize;
        loop {
            self.steps_taken += 1;
            if self.steps_taken > self.params.max_steps {
                return Err(OdeError::MaxStepsExceeded { t: self.t });
            }
            let clamped = self.h > t_limit - self.t;
            let h = if clamped { t_limit - self.t } else { self.h };
            if h <= f64::EPSILON * self.t.abs().max(1.0) {
                return Err(OdeError::StepUnderflow { t: self.t });
            }

            let mut k = [[0.0; N]; 7];
            k[0] = self.f;
            for s in 1..7 {
                let mut ys = self.y;
                for (j, kj) in k.iter().enumerate().take(s) {
                    let a = A[s][j];
                    if a != 0.0 {
                        for i in 0..N {
                            ys[i] += h * a * kj[i];
                        }
                    }
                }
                k[s] = (self.rhs)(self.t + C[s] * h, &ys);
            }
            // Stage 7 is evaluated at the 5th-order solution (FSAL).
            let mut y1 = self.y;
            for (j, kj) in k.iter().enumerate().take(6) {
                let a = A[6][j];
                if a != 0.0 {
                    for i in 0..N {
                        y1[i] += h * a * kj[i];
                    }
                }
            }
            let f1 = k[6];

            let mut err_sq = 0.0;
            let mut finite = true;
            for i in 0..N {
                let mut e = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    e += E[j] * kj[i];
                }
                e *= h;
                let scale =
                    self.params.atol + self.params.rtol * self.y[i].abs().max(y1[i].abs());
                let r = e / scale;
                err_sq += r * r;
                finite &= y1[i].is_finite();
            }
            let err = (err_sq / N as f64).sqrt();

            if finite && err <= 1.0 {
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if !clamped {
                    self.h = (self.h * factor).min(self.params.h_max);
                }
                let rec = StepRecord { t0: self.t, t1: self.t + h, y0: self.y, y1, f0: self.f, f1 };
                self.t += h;
                self.y = y1;
                self.f = f1;
                return Ok(rec);
            }

            rejects += 1;
            if rejects > 60 {
                return Err(OdeError::StepUnderflow { t: self.t });
            }
            let factor = if finite {
                (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.25
            };
            self.h = h * factor;
        }
    }
}

/// Integrate the system from (t0, y0) to exactly t1, no monitoring.
pub fn integrate_span<const N: usize, R: Fn(f64, &[f64; N]) -> [f64; N]>(
    params: Dopri5,
    rhs: R,
    t0: f64,
    y0: [f64; N],
    t1: f64,
) -> Result<[f64; N], OdeError> {
    if (t1 - t0).abs() <= f64::EPSILON * t0.abs().max(1.0) {
        return Ok(y0);
    }
    let mut stepper = Stepper::new(params, rhs, t0, y0);
    while stepper.t < t1 - 1e-300 {
        stepper.step(t1)?;
        if t1 - stepper.t < f64::EPSILON * t1.abs().max(1.0) {
            break;
        }
    }
    Ok(stepper.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> Dopri5 {
        Dopri5::new(1e-9, 1e-11, 1e-3, 0.5)
    }

    #[test]
    fn exponential_growth() {
        let y = integrate_span(params(), |_, y: &[f64; 1]| [y[0]], 0.0, [1.0], 2.0).unwrap();
        assert_relative_eq!(y[0], 2.0_f64.exp(), epsilon = 1e-8);
    }

    #[test]
    fn harmonic_oscillator_period() {
        let rhs = |_: f64, y: &[f64; 2]| [y[1], -y[0]];
        let y = integrate_span(params(), rhs, 0.0, [1.0, 0.0], std::f64::consts::TAU).unwrap();
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-7);
        assert!(y[1].abs() < 1e-7);
    }

    #[test]
    fn dense_output_interpolates() {
        let rhs = |_: f64, y: &[f64; 1]| [y[0]];
        let mut stepper = Stepper::new(params(), rhs, 0.0, [1.0]);
        let rec = stepper.step(10.0).unwrap();
        let tm = 0.5 * (rec.t0 + rec.t1);
        let ym = rec.eval(tm)[0];
        assert_relative_eq!(ym, tm.exp(), epsilon = 1e-9);
        assert_eq!(rec.eval(rec.t0)[0], rec.y0[0]);
        assert_eq!(rec.eval(rec.t1)[0], rec.y1[0]);
    }

    #[test]
    fn step_never_exceeds_limit() {
        let rhs = |_: f64, y: &[f64; 1]| [y[0]];
        let mut stepper = Stepper::new(params(), rhs, 0.0, [1.0]);
        loop {
            stepper.step(1.0).unwrap();
            assert!(stepper.t <= 1.0 + 1e-15);
            if (stepper.t - 1.0).abs() < 1e-14 {
                break;
            }
        }
        assert_relative_eq!(stepper.y[0], 1.0_f64.exp(), epsilon = 1e-8);
    }
}
