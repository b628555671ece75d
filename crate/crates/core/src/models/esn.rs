use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub const POWER_ITERATION_LIMIT: usize = 10_000;

/// Fixed echo-state weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    /// `n_res x n_res`.
    pub w_res: Tensor,
    /// `n_res x input`.
    pub w_in: Tensor,
}

impl Reservoir {
    pub fn new(w_res: Tensor, w_in: Tensor) -> Result<Self> {
        let (sr, si) = (w_res.shape(), w_in.shape());
        if sr.len() != 2 || sr[0] != sr[1] || si.len() != 2 || si[0] != sr[0] {
            return Err(Error::Dimension(format!(
                "reservoir: W_res {sr:?} must be square and W_in {si:?} must have as many rows"
            )));
        }
        Ok(Self { w_res, w_in })
    }

    pub fn size(&self) -> usize {
        self.w_res.shape()[0]
    }

    pub fn input_width(&self) -> usize {
        self.w_in.shape()[1]
    }
}

fn square_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Spectral radius by power iteration on matrix powers: the Frobenius norm
/// of `A^(2^k)` is tracked in log scale while the power is squared, so
/// `||A^p||^(1/p)` converges to the largest eigenvalue modulus even when
/// the dominant eigenvalues form a complex pair. Returns an init error if
/// the estimate does not settle within [`POWER_ITERATION_LIMIT`] steps.
pub fn spectral_radius(a: &Tensor) -> Result<f64> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "spectral_radius: {s:?} is not square"
        )));
    }
    let n = s[0];
    let mut m = a.data().to_vec();
    let mut log_scale = 0.0;
    let mut power = 1.0_f64;
    let mut prev = f64::NAN;
    for _ in 0..POWER_ITERATION_LIMIT {
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return if norm == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::Init("power iteration overflowed".into()))
            };
        }
        m.iter_mut().for_each(|v| *v /= norm);
        log_scale += norm.ln();
        let estimate = (log_scale / power).exp();
        if (estimate - prev).abs() <= 1e-13 * estimate {
            return Ok(estimate);
        }
        prev = estimate;
        if power > 1e300 {
            break;
        }
        // `m = A^p / e^log_scale`; squaring doubles both exponents.
        m = square_mul(&m, &m, n);
        log_scale *= 2.0;
        power *= 2.0;
    }
    Err(Error::Init(format!(
        "power iteration did not converge within {POWER_ITERATION_LIMIT} steps"
    )))
}

/// Draws `W_res` uniform in `(-1, 1)` rescaled to spectral radius `rho`,
/// and `W_in` (`n_res x input`) uniform in `(-gamma, gamma)`.
pub fn esn_init(seed: u64, n_res: usize, input: usize, rho: f64, gamma: f64) -> Result<Reservoir> {
    if n_res == 0 || input == 0 {
        return Err(Error::Parameter(
            "reservoir and input sizes must be positive".into(),
        ));
    }
    if !(rho > 0.0 && rho.is_finite()) || !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!(
            "need rho > 0 and gamma >= 0, got {rho} and {gamma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n_res * n_res)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w_in: Vec<f64> = (0..n_res * input)
        .map(|_| {
            if gamma > 0.0 {
                rng.random_range(-gamma..gamma)
            } else {
                0.0
            }
        })
        .collect();
    let raw = Tensor::new(&[n_res, n_res], raw)?;
    let radius = spectral_radius(&raw)?;
    if radius < 1e-12 {
        return Err(Error::Init(
            "random reservoir has zero spectral radius".into(),
        ));
    }
    let scaled: Vec<f64> = raw.data().iter().map(|v| v * rho / radius).collect();
    let w_res = Tensor::new(&[n_res, n_res], scaled)?;
    let check = spectral_radius(&w_res)?;
    if (check - rho).abs() > 1e-3 {
        return Err(Error::Init(format!(
            "rescaled spectral radius {check} misses target {rho}"
        )));
    }
    Reservoir::new(w_res, Tensor::new(&[n_res, input], w_in)?)
}

/// Every state `s_1..s_T` of `s_t = tanh(W_res s_{t-1} + W_in u_t)`,
/// `s_0 = 0`, for `u: T x input`.
pub fn esn_states(u: &Tensor, res: &Reservoir) -> Result<Vec<Vec<f64>>> {
    let s = u.shape();
    if s.len() != 2 || s[1] != res.input_width() {
        return Err(Error::Dimension(format!(
            "esn: input {s:?} does not match reservoir input width {}",
            res.input_width()
        )));
    }
    let (n, d) = (res.size(), s[1]);
    let (wr, wi) = (res.w_res.data(), res.w_in.data());
    let mut state = vec![0.0; n];
    let mut out = Vec::with_capacity(s[0]);
    for t in 0..s[0] {
        let ut = &u.data()[t * d..(t + 1) * d];
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let rec: f64 = (0..n).map(|j| wr[i * n + j] * state[j]).sum();
                let inp: f64 = (0..d).map(|j| wi[i * d + j] * ut[j]).sum();
                (rec + inp).tanh()
            })
            .collect();
        state = next;
        out.push(state.clone());
    }
    Ok(out)
}

/// Final reservoir state after consuming every row of `u`.
pub fn esn_run(u: &Tensor, res: &Reservoir) -> Result<Vec<f64>> {
    let states = esn_states(u, res)?;
    Ok(states
        .last()
        .cloned()
        .unwrap_or_else(|| vec![0.0; res.size()]))
}
