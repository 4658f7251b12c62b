//! Time steppers: adaptive Dormand–Prince 5(4) with dense output, forward
//! Euler, kick-drift-kick leapfrog and Euler with a ground contact rule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MechError, Result};
use crate::systems::contact_in_place;

/// Sampled states, one row per time.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Array2<f64>,
}

impl Trajectory {
    /// Times must be strictly monotonic (decreasing grids come from
    /// integrating backwards) and every state finite.
    pub fn new(times: Vec<f64>, states: Array2<f64>) -> Result<Self> {
        if times.len() != states.nrows() {
            return Err(MechError::dims("trajectory rows", times.len(), states.nrows()));
        }
        if times.is_empty() {
            return Err(MechError::EmptyBatch);
        }
        let inc = times.windows(2).all(|w| w[1] > w[0]);
        let dec = times.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) {
            return Err(MechError::InvalidConfig("trajectory times must be strictly monotonic".into()));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(MechError::NonFinite("trajectory state".into()));
        }
        Ok(Self {
            times,
            states: states.as_standard_layout().into_owned(),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn into_parts(self) -> (Vec<f64>, Array2<f64>) {
        (self.times, self.states)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.states.row(i).to_slice().expect("standard layout")
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Rk45,
    Euler,
    Leapfrog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Fixed step of Euler and leapfrog.
    pub dt: f64,
    pub max_steps: usize,
    /// Upper bound on adaptive steps.
    pub max_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            rtol: 1e-6,
            atol: 1e-9,
            dt: 0.01,
            max_steps: 10_000_000,
            max_step: f64::INFINITY,
        }
    }
}

impl IntegratorConfig {
    pub fn rk45(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| MechError::InvalidConfig(format!("{what} must be positive, got {v}"));
        if !(self.rtol > 0.0) {
            return Err(bad("rtol", self.rtol));
        }
        if !(self.atol > 0.0) {
            return Err(bad("atol", self.atol));
        }
        if !(self.dt > 0.0) {
            return Err(bad("dt", self.dt));
        }
        if !(self.max_step > 0.0) {
            return Err(bad("max_step", self.max_step));
        }
        if self.max_steps == 0 {
            return Err(MechError::InvalidConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    -71.0 / 57600.0,
    0.0,
    71.0 / 16695.0,
    -71.0 / 1920.0,
    17253.0 / 339200.0,
    -22.0 / 525.0,
    1.0 / 40.0,
];
// dense output: y(t + θh) = y + h Σ_i k_i Σ_j P[i][j] θ^(j+1)
const P: [[f64; 4]; 7] = [
    [1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0, -12715105075.0 / 11282082432.0],
    [0.0; 4],
    [
        0.0,
        131558114200.0 / 32700410799.0,
        -68118460800.0 / 10900136933.0,
        87487479700.0 / 32700410799.0,
    ],
    [0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0, -10690763975.0 / 1880347072.0],
    [
        0.0,
        127303824393.0 / 49829197408.0,
        -318862633887.0 / 49829197408.0,
        701980252875.0 / 199316789632.0,
    ],
    [0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0, -1453857185.0 / 822651844.0],
    [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0],
];

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt()
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MechError::NonFinite(what.into()))
    }
}

fn eval<F>(f: &mut F, t: f64, y: &[f64], n: usize) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let d = f(t, y)?;
    if d.len() != n {
        return Err(MechError::dims("derivative length", n, d.len()));
    }
    finite(&d, "state derivative")?;
    Ok(d)
}

fn check_sample_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(MechError::EmptyBatch);
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MechError::InvalidConfig("sample times must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Adaptive Dormand–Prince 5(4) integration of `y' = f(t, y)` from
/// `sample_times[0]`, reporting states at every sample time through the
/// fourth-order dense-output interpolant.
///
/// A trial step whose stage evaluation fails is retried with a smaller
/// step; the failure is returned only if the step size underflows.
pub fn rk45_integrate<F>(mut f: F, y0: &[f64], sample_times: &[f64], cfg: &IntegratorConfig) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    check_sample_times(sample_times)?;
    finite(y0, "initial state")?;
    let n = y0.len();
    let t_end = *sample_times.last().expect("nonempty");
    let mut out = Array2::zeros((sample_times.len(), n));
    out.row_mut(0).assign(&ndarray::ArrayView1::from(y0));

    let mut t = sample_times[0];
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    k[0] = eval(&mut f, t, &y, n)?;
    let scale = |a: f64, b: f64| (cfg.rtol * a.abs().max(b.abs())).max(cfg.atol);

    let mut h = if sample_times.len() > 1 {
        initial_step(&mut f, t, &y, &k[0], cfg).min(cfg.max_step)
    } else {
        0.0
    };
    let mut next = 1;
    let mut steps = 0usize;
    let mut stage_error: Option<MechError> = None;
    let mut ynew = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    while next < sample_times.len() {
        if steps >= cfg.max_steps {
            return Err(MechError::MaxStepsExceeded { max_steps: cfg.max_steps, t });
        }
        steps += 1;
        let remaining = t_end - t;
        // absorb a rounding-sized remainder into this step
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if !last && h <= 10.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(stage_error.unwrap_or(MechError::StepSizeUnderflow { t }));
        }

        // stages 2..7; stage 7 is evaluated at the proposed solution
        let mut failed = None;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += A[s][j] * kj[i];
                }
                tmp[i] = y[i] + h * acc;
            }
            if s == 6 {
                ynew.copy_from_slice(&tmp);
            }
            match eval(&mut f, t + C[s] * h, &tmp, n) {
                Ok(d) => k[s] = d,
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            stage_error = Some(e);
            h *= 0.25;
            continue;
        }

        let err = rms(
            (0..n).map(|i| {
                let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum();
                h * e / scale(y[i], ynew[i])
            }),
            n,
        );
        if !err.is_finite() {
            h *= 0.25;
            continue;
        }
        if err > 1.0 {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            continue;
        }
        stage_error = None;

        let t_new = if last { t_end } else { t + h };
        while next < sample_times.len() && sample_times[next] <= t_new {
            let ts = sample_times[next];
            if ts == t_new {
                out.row_mut(next).assign(&ndarray::ArrayView1::from(&ynew[..]));
            } else {
                let theta = (ts - t) / h;
                let mut w = [0.0; 7];
                for (s, ws) in w.iter_mut().enumerate() {
                    let mut pw = theta;
                    for j in 0..4 {
                        *ws += P[s][j] * pw;
                        pw *= theta;
                    }
                }
                let mut row = out.row_mut(next);
                for i in 0..n {
                    let inc: f64 = (0..7).map(|s| w[s] * k[s][i]).sum();
                    row[i] = y[i] + h * inc;
                }
            }
            next += 1;
        }
        t = t_new;
        std::mem::swap(&mut y, &mut ynew);
        k.swap(0, 6);
        let factor = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).min(10.0) };
        h = (h * factor).min(cfg.max_step);
    }
    Trajectory::new(sample_times.to_vec(), out)
}

// Hairer, Nørsett & Wanner starting step heuristic
fn initial_step<F>(f: &mut F, t0: f64, y0: &[f64], f0: &[f64], cfg: &IntegratorConfig) -> f64
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y0.len();
    let sc: Vec<f64> = y0.iter().map(|y| (cfg.rtol * y.abs()).max(cfg.atol)).collect();
    let d0 = rms(y0.iter().zip(&sc).map(|(y, s)| y / s), n);
    let d1 = rms(f0.iter().zip(&sc).map(|(y, s)| y / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, d)| y + h0 * d).collect();
    let Ok(f1) = eval(f, t0 + h0, &y1, n) else {
        return h0;
    };
    let d2 = rms(f1.iter().zip(f0).zip(&sc).map(|((a, b), s)| (a - b) / s), n) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

fn fixed_times(t0: f64, dt: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|i| t0 + i as f64 * dt).collect()
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt != 0.0 {
        Ok(())
    } else {
        Err(MechError::InvalidConfig(format!("step must be finite and nonzero, got {dt}")))
    }
}

fn euler_with<F, G>(mut f: F, y0: &[f64], t0: f64, dt: f64, n_steps: usize, mut post: G) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    G: FnMut(&mut [f64]),
{
    check_dt(dt)?;
    if !(dt > 0.0) {
        return Err(MechError::InvalidConfig("Euler step must be positive".into()));
    }
    finite(y0, "initial state")?;
    let n = y0.len();
    let times = fixed_times(t0, dt, n_steps);
    let mut out = Array2::zeros((n_steps + 1, n));
    let mut y = y0.to_vec();
    out.row_mut(0).assign(&ndarray::ArrayView1::from(&y[..]));
    for step in 0..n_steps {
        let d = eval(&mut f, times[step], &y, n)?;
        for (yi, di) in y.iter_mut().zip(&d) {
            *yi += dt * di;
        }
        post(&mut y);
        finite(&y, "Euler state")?;
        out.row_mut(step + 1).assign(&ndarray::ArrayView1::from(&y[..]));
    }
    Trajectory::new(times, out)
}

/// Forward Euler: `y_{k+1} = y_k + dt f(t_k, y_k)`.
pub fn euler_integrate<F>(f: F, y0: &[f64], t0: f64, dt: f64, n_steps: usize) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    euler_with(f, y0, t0, dt, n_steps, |_| {})
}

/// Forward Euler on a bouncing-ball state `[q, p]`, applying the contact
/// rule after every step.
pub fn integrate_with_contact<F>(f: F, y0: &[f64], t0: f64, dt: f64, n_steps: usize, restitution: f64) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if y0.len() != 2 {
        return Err(MechError::dims("bouncing-ball state", 2, y0.len()));
    }
    euler_with(f, y0, t0, dt, n_steps, |y| {
        contact_in_place(y, restitution);
    })
}

/// Kick-drift-kick leapfrog for a separable `H = K(p) + V(q)`:
///
/// ```text
/// p_{n+1/2} = p_n - dt/2 V'(q_n)
/// q_{n+1}   = q_n + dt K'(p_{n+1/2})
/// p_{n+1}   = p_{n+1/2} - dt/2 V'(q_{n+1})
/// ```
///
/// `z0 = (q, p)`. A negative `dt` integrates backwards.
pub fn leapfrog_integrate<V, K>(grad_v: V, grad_k: K, z0: &[f64], t0: f64, dt: f64, n_steps: usize) -> Result<Trajectory>
where
    V: FnMut(&[f64]) -> Result<Vec<f64>>,
    K: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    leapfrog_with(grad_v, grad_k, z0, t0, dt, n_steps, |_| {})
}

/// [`leapfrog_integrate`] with `post` applied to the state after each whole
/// step, e.g. a contact rule.
pub fn leapfrog_with<V, K, G>(mut grad_v: V, mut grad_k: K, z0: &[f64], t0: f64, dt: f64, n_steps: usize, mut post: G) -> Result<Trajectory>
where
    V: FnMut(&[f64]) -> Result<Vec<f64>>,
    K: FnMut(&[f64]) -> Result<Vec<f64>>,
    G: FnMut(&mut [f64]),
{
    check_dt(dt)?;
    if z0.is_empty() || !z0.len().is_multiple_of(2) {
        return Err(MechError::dims("leapfrog state", "positive even", z0.len()));
    }
    finite(z0, "initial state")?;
    let n = z0.len() / 2;
    let times = fixed_times(t0, dt, n_steps);
    let mut out = Array2::zeros((n_steps + 1, 2 * n));
    let mut z = z0.to_vec();
    out.row_mut(0).assign(&ndarray::ArrayView1::from(&z[..]));
    let call = |g: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>, x: &[f64], what: &str| -> Result<Vec<f64>> {
        let d = g(x)?;
        if d.len() != n {
            return Err(MechError::dims("leapfrog gradient", n, d.len()));
        }
        finite(&d, what)?;
        Ok(d)
    };
    let mut dv = call(&mut grad_v, &z[..n], "potential gradient")?;
    for step in 0..n_steps {
        let (q, p) = z.split_at_mut(n);
        for i in 0..n {
            p[i] -= 0.5 * dt * dv[i];
        }
        let dk = call(&mut grad_k, p, "kinetic gradient")?;
        for i in 0..n {
            q[i] += dt * dk[i];
        }
        dv = call(&mut grad_v, q, "potential gradient")?;
        for i in 0..n {
            p[i] -= 0.5 * dt * dv[i];
        }
        let before: Vec<f64> = z.clone();
        post(&mut z);
        if z != before {
            dv = call(&mut grad_v, &z[..n], "potential gradient")?;
        }
        finite(&z, "leapfrog state")?;
        out.row_mut(step + 1).assign(&ndarray::ArrayView1::from(&z[..]));
    }
    Trajectory::new(times, out)
}

/// Uniform step of a time grid, or an error if the spacing varies by more
/// than `rel_tol` of the mean step.
pub fn uniform_step(times: &[f64], rel_tol: f64) -> Result<f64> {
    if times.len() < 2 {
        return Err(MechError::NonUniformGrid("fewer than two samples".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > rel_tol * dt.abs() {
            return Err(MechError::NonUniformGrid(format!("step {} differs from mean step {dt}", w[1] - w[0])));
        }
    }
    Ok(dt)
}
