//! Particle method for the two-stream model with internal state.
//!
//! Each step advects `x`, relaxes `y` toward `G v`, reflects at the walls and
//! then reverses `v` with probability `lambda0 Lambda(y) dt / 2`. Time here is
//! physical time.
//!
//! The tumble decision is drawn by thinning: candidate steps occur with the
//! constant probability `p_sup = lambda0 Lambda_sup dt / 2` and are accepted
//! with probability `Lambda(y) / Lambda_sup`. Candidate steps form an i.i.d.
//! Bernoulli sequence, so the gap to the next one is geometric and is drawn
//! once per candidate instead of once per step. The per-step law is unchanged.
//!
//! Particles are split into fixed-size chunks, each owning one random stream,
//! so results depend on the seed only and not on the number of threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model_core::{MacroDensity, ModelParams};

pub const CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub x: Vec<f64>,
    /// Velocity, `+1.0` or `-1.0`.
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub rng_seed: u64,
    /// Steps remaining until each particle's next candidate tumble.
    wait: Vec<i64>,
    /// Candidate probability the waits were drawn with.
    wait_prob: f64,
    rngs: Vec<ChaCha8Rng>,
    steps: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Number of failures before the first success of a Bernoulli(`p`) sequence.
#[inline]
fn geometric(rng: &mut ChaCha8Rng, log_q: f64) -> i64 {
    if log_q == f64::NEG_INFINITY {
        return 0;
    }
    // 1 - u lies in (0, 1], so the log is finite
    let u: f64 = rng.gen();
    // saturating cast; a wait beyond i64::MAX is never reached
    ((1.0 - u).ln() / log_q) as i64
}

/// `n` particles, uniform in `x in [0, 1]`, `v = +-1` with equal probability
/// and `y` uniform on `[-G/2, G/2]`.
pub fn init_particles(n: usize, g: f64, seed: u64) -> ParticleEnsemble {
    let mut x = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut y = vec![0.0; n];
    let n_chunks = n.div_ceil(CHUNK);
    let mut rngs: Vec<ChaCha8Rng> = (0..n_chunks).map(|c| chunk_rng(seed, c)).collect();
    let half = 0.5 * g.abs();
    x.par_chunks_mut(CHUNK)
        .zip(v.par_chunks_mut(CHUNK))
        .zip(y.par_chunks_mut(CHUNK))
        .zip(rngs.par_iter_mut())
        .for_each(|(((xs, vs), ys), rng)| {
            for ((xi, vi), yi) in xs.iter_mut().zip(vs.iter_mut()).zip(ys.iter_mut()) {
                *xi = rng.gen::<f64>();
                *vi = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                *yi = rng.gen_range(-half..=half);
            }
        });
    ParticleEnsemble {
        x,
        v,
        y,
        rng_seed: seed,
        wait: vec![0; n],
        wait_prob: f64::NAN,
        rngs,
        steps: 0,
    }
}

/// Step constants shared by all particles.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    dt: f64,
    alpha: f64,
    beta: f64,
    chi: f64,
    lambda_sup: f64,
    log_q: f64,
}

impl Kernel {
    fn new(ens: &ParticleEnsemble, params: &ModelParams, dt: f64) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0 && dt < 1.0) {
            return Err(Error::ParameterDomain(format!(
                "particle time step must lie in (0, 1) so that one reflection suffices, got {dt}"
            )));
        }
        // y stays in the hull of its current values and +-G
        let reach = ens.y.iter().fold(params.g.abs(), |m, v| m.max(v.abs()));
        let lambda_sup = 1.0 + params.chi.abs() * reach.atan();
        let prob = params.lambda0 * lambda_sup * dt / 2.0;
        if prob > 1.0 {
            return Err(Error::ProbabilityOverflow { prob });
        }
        let tau = params.tau;
        Ok(Kernel {
            dt,
            alpha: tau / (tau + dt),
            beta: dt * params.g / (tau + dt),
            chi: params.chi,
            lambda_sup,
            log_q: (-prob).ln_1p(),
        })
    }

    fn prob(&self) -> f64 {
        -self.log_q.exp_m1()
    }

    /// `n` steps on one chunk. The deterministic part runs as a branch-free
    /// pass; candidate tumbles, which are rare, are handled in a second pass.
    fn run_chunk(&self, xs: &mut [f64], vs: &mut [f64], ys: &mut [f64], ws: &mut [i64], rng: &mut ChaCha8Rng, n: u64) {
        let len = xs.len();
        let (vs, ys, ws) = (&mut vs[..len], &mut ys[..len], &mut ws[..len]);
        for _ in 0..n {
            for j in 0..len {
                let v = vs[j];
                let x = xs[j] + v * self.dt;
                ys[j] = self.alpha * ys[j] + self.beta * v;
                let out = (x < 0.0) | (x > 1.0);
                xs[j] = if out { 1.0 - (1.0 - x.abs()).abs() } else { x };
                vs[j] = if out { -v } else { v };
            }
            let mut due = 0i64;
            for w in ws.iter_mut() {
                *w -= 1;
                due |= *w;
            }
            if due < 0 {
                for j in 0..len {
                    if ws[j] < 0 {
                        let u: f64 = rng.gen();
                        if u * self.lambda_sup < 1.0 - self.chi * ys[j].atan() {
                            vs[j] = -vs[j];
                        }
                        ws[j] = geometric(rng, self.log_q);
                    }
                }
            }
        }
    }
}

/// Advance every particle by `n_steps` steps of size `dt`.
pub fn advance(ens: &mut ParticleEnsemble, params: &ModelParams, dt: f64, n_steps: u64) -> Result<()> {
    let kernel = Kernel::new(ens, params, dt)?;
    let redraw = ens.wait_prob != kernel.prob();
    let ParticleEnsemble {
        x, v, y, wait, rngs, ..
    } = ens;
    x.par_chunks_mut(CHUNK)
        .zip(v.par_chunks_mut(CHUNK))
        .zip(y.par_chunks_mut(CHUNK))
        .zip(wait.par_chunks_mut(CHUNK))
        .zip(rngs.par_iter_mut())
        .for_each(|((((xs, vs), ys), ws), rng)| {
            if redraw {
                // memorylessness makes a fresh draw exact
                ws.iter_mut().for_each(|w| *w = geometric(rng, kernel.log_q));
            }
            kernel.run_chunk(xs, vs, ys, ws, rng, n_steps);
        });
    ens.wait_prob = kernel.prob();
    ens.steps += n_steps;
    Ok(())
}

/// One step of the particle method.
pub fn mc_step(ens: &mut ParticleEnsemble, params: &ModelParams, dt: f64) -> Result<()> {
    advance(ens, params, dt, 1)
}

/// Histogram of positions over `bins` equal cells of `[0, 1]`, scaled by
/// `1 / (N_p dx)` so that `sum rho dx = 1`.
pub fn density_histogram(ens: &ParticleEnsemble, bins: usize) -> MacroDensity {
    let mut counts = vec![0u64; bins];
    for &x in &ens.x {
        let b = ((x * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let scale = if ens.is_empty() {
        0.0
    } else {
        bins as f64 / ens.len() as f64
    };
    MacroDensity {
        rho: counts.iter().map(|&c| c as f64 * scale).collect(),
    }
}

/// Histogram of `y` for particles with `x` in `[lo, hi)`, split by velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct YHistogram {
    pub centers: Vec<f64>,
    /// Density of `v = +1` particles; `plus + minus` integrates to 1.
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

pub fn y_histogram(ens: &ParticleEnsemble, x_window: (f64, f64), y_range: (f64, f64), bins: usize) -> YHistogram {
    let (ylo, yhi) = y_range;
    let width = (yhi - ylo) / bins as f64;
    let mut plus = vec![0u64; bins];
    let mut minus = vec![0u64; bins];
    let mut total = 0u64;
    for ((&x, &v), &y) in ens.x.iter().zip(&ens.v).zip(&ens.y) {
        if x < x_window.0 || x >= x_window.1 || y < ylo || y > yhi {
            continue;
        }
        let b = (((y - ylo) / width) as usize).min(bins - 1);
        if v > 0.0 {
            plus[b] += 1;
        } else {
            minus[b] += 1;
        }
        total += 1;
    }
    let scale = if total == 0 { 0.0 } else { 1.0 / (total as f64 * width) };
    YHistogram {
        centers: (0..bins).map(|b| ylo + (b as f64 + 0.5) * width).collect(),
        plus: plus.iter().map(|&c| c as f64 * scale).collect(),
        minus: minus.iter().map(|&c| c as f64 * scale).collect(),
    }
}

/// Mean and standard deviation of `y` over particles with `x` in `[lo, hi)`.
pub fn y_moments(ens: &ParticleEnsemble, x_window: (f64, f64)) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for (&x, &y) in ens.x.iter().zip(&ens.y) {
        if x >= x_window.0 && x < x_window.1 {
            n += 1.0;
            s += y;
            s2 += y * y;
        }
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = s / n;
    (mean, (s2 / n - mean * mean).max(0.0).sqrt())
}
