//! Per-token diffusion: noise schedule, the adaLN MLP denoiser, the
//! ε-prediction loss and the ancestral reverse sampler.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! most noisy.

use ltm3d_autograd::{Matrix, ParamStore, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{DenoiseConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder, LN_EPS};

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    /// `betas[t - 1]` is β_t.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA)).collect()
        }
    };
    Ok(DiffusionSchedule::from_betas(kind, betas))
}

impl DiffusionSchedule {
    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self { kind, betas, alphas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Spec(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`, row `i` noised to step `t[i]`.
    pub fn q_sample(&self, x0: &Matrix, t: &[usize], eps: &Matrix) -> Result<Matrix> {
        if x0.dim() != eps.dim() || t.len() != x0.nrows() {
            return Err(Error::Shape(format!("x0 {:?}, eps {:?}, {} timesteps", x0.dim(), eps.dim(), t.len())));
        }
        let mut out = x0.clone();
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let ab = self.alpha_bar(ti);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            out.row_mut(i).zip_mut_with(&eps.row(i), |x, e| *x = sa * *x + sn * e);
        }
        Ok(out)
    }

    /// `count` timesteps spread evenly over `1..=T`, descending, always
    /// including `T`.
    pub fn respaced_timesteps(&self, count: usize) -> Vec<usize> {
        let total = self.steps();
        let count = count.clamp(1, total);
        if count == 1 {
            return vec![total];
        }
        let mut ts: Vec<usize> = (0..count)
            .map(|i| 1 + ((i as f64) * (total - 1) as f64 / (count - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

/// Anything that predicts the injected noise from `(x_t, t, z)`.
pub trait NoisePredictor {
    fn predict<'t, 'p>(&self, x_t: Var<'t, 'p>, t: &[usize], z: Var<'t, 'p>) -> Var<'t, 'p>;
}

/// Sinusoidal features of the timesteps, `[cos | sin]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_shape_fn((t.len(), 2 * half), |(i, j)| {
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = t[i] as f64 * freq;
        if j < half {
            arg.cos()
        } else {
            arg.sin()
        }
    })
}

#[derive(Debug, Clone)]
struct ResBlock {
    modulation: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// MLP denoiser with adaptive layer-norm modulation by `time + z`.
#[derive(Debug, Clone)]
pub struct DenoiseNet {
    pub width: usize,
    pub token_dim: usize,
    time_features: usize,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    input: Linear,
    blocks: Vec<ResBlock>,
    final_modulation: Linear,
    output: Linear,
}

impl DenoiseNet {
    /// Parameters live under `denoise/`. Modulation and output layers start
    /// at zero, so an untrained net predicts zero noise.
    pub fn new(b: &mut ParamBuilder<'_>, config: &DenoiseConfig, token_dim: usize, z_dim: usize) -> Self {
        let mut b = b.sub("denoise");
        let w = config.width;
        let zeros = ltm3d_autograd::Init::Zeros;
        let blocks = (0..config.depth)
            .map(|i| {
                let mut bb = b.sub(&format!("block{i}"));
                ResBlock {
                    modulation: Linear::with_init(&mut bb.sub("modulation"), w, 3 * w, true, zeros),
                    fc1: Linear::new(&mut bb.sub("fc1"), w, w, true),
                    fc2: Linear::new(&mut bb.sub("fc2"), w, w, true),
                }
            })
            .collect();
        Self {
            width: w,
            token_dim,
            time_features: config.time_features,
            time1: Linear::new(&mut b.sub("time1"), config.time_features, w, true),
            time2: Linear::new(&mut b.sub("time2"), w, w, true),
            cond: Linear::new(&mut b.sub("cond"), z_dim, w, true),
            input: Linear::new(&mut b.sub("input"), token_dim, w, true),
            blocks,
            final_modulation: Linear::with_init(&mut b.sub("final_modulation"), w, 2 * w, true, zeros),
            output: Linear::with_init(&mut b.sub("output"), w, token_dim, true, zeros),
        }
    }
}

impl NoisePredictor for DenoiseNet {
    fn predict<'t, 'p>(&self, x_t: Var<'t, 'p>, t: &[usize], z: Var<'t, 'p>) -> Var<'t, 'p> {
        let tape = x_t.tape();
        let w = self.width;
        let time = self.time2.forward(self.time1.forward(tape.constant(timestep_features(t, self.time_features))).silu());
        let c = time.add(self.cond.forward(z)).silu();
        let mut x = self.input.forward(x_t);
        for block in &self.blocks {
            let m = block.modulation.forward(c);
            let (shift, scale, gate) = (m.slice_cols(0, w), m.slice_cols(w, 2 * w), m.slice_cols(2 * w, 3 * w));
            let h = x.layer_norm(LN_EPS).mul(scale.add_scalar(1.0)).add(shift);
            let h = block.fc2.forward(block.fc1.forward(h).silu());
            x = x.add(gate.mul(h));
        }
        let m = self.final_modulation.forward(c);
        let x = x.layer_norm(LN_EPS).mul(m.slice_cols(w, 2 * w).add_scalar(1.0)).add(m.slice_cols(0, w));
        self.output.forward(x)
    }
}

/// Evaluates the predictor outside of training.
pub fn denoise_predict<N: NoisePredictor>(net: &N, store: &ParamStore, x_t: &Matrix, t: &[usize], z: &Matrix) -> Result<Matrix> {
    if x_t.nrows() != z.nrows() || t.len() != x_t.nrows() {
        return Err(Error::Shape(format!("x_t {:?}, z {:?}, {} timesteps", x_t.dim(), z.dim(), t.len())));
    }
    let tape = Tape::new(store);
    Ok(net.predict(tape.constant(x_t.clone()), t, tape.constant(z.clone())).to_matrix())
}

/// Timesteps and noise for a batch of `rows` tokens, drawn in a fixed
/// order: all timesteps first, then the noise row by row.
pub fn draw_noise<R: Rng + ?Sized>(rows: usize, dim: usize, steps: usize, rng: &mut R) -> (Vec<usize>, Matrix) {
    let t: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
    let eps = Matrix::from_shape_fn((rows, dim), |_| StandardNormal.sample(rng));
    (t, eps)
}

/// `‖ε − ε_θ(x_t, t, z)‖²` summed over the token dimension and averaged over
/// rows, with one `(t, ε)` draw per row.
pub fn diffusion_loss<'t, 'p, N: NoisePredictor, R: Rng + ?Sized>(
    net: &N,
    x0: &Matrix,
    z: Var<'t, 'p>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Var<'t, 'p>> {
    if x0.nrows() != z.rows() {
        return Err(Error::Shape(format!("{} tokens but {} condition vectors", x0.nrows(), z.rows())));
    }
    let tape = z.tape();
    let (t, eps) = draw_noise(x0.nrows(), x0.ncols(), schedule.steps(), rng);
    let x_t = schedule.q_sample(x0, &t, &eps)?;
    let pred = net.predict(tape.constant(x_t), &t, z);
    let rows = x0.nrows() as f64;
    Ok(tape.constant(eps).sub(pred).square().sum().scale(1.0 / rows))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Reverse steps, respaced evenly over the schedule.
    pub steps: usize,
    /// Scales the initial noise and every noise injection.
    pub temperature: f64,
    pub cfg_scale: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { steps: 100, temperature: 1.0, cfg_scale: 1.0 }
    }
}

/// Ancestral reverse chain for one token per row of `z`. With
/// `cfg_scale > 1`, `ε = ε_null + s·(ε_cond − ε_null)` using `z_null`.
pub fn token_ddpm_sample<N: NoisePredictor, R: Rng + ?Sized>(
    net: &N,
    store: &ParamStore,
    z: &Matrix,
    z_null: Option<&Matrix>,
    token_dim: usize,
    schedule: &DiffusionSchedule,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<Matrix> {
    let guided = opts.cfg_scale != 1.0;
    if guided && z_null.map(|zn| zn.dim()) != Some(z.dim()) {
        return Err(Error::Shape("guidance needs a null condition with the shape of z".into()));
    }
    let rows = z.nrows();
    let temp = opts.temperature;
    let mut x = Matrix::from_shape_fn((rows, token_dim), |_| { let v: f64 = StandardNormal.sample(rng); temp * v });
    let ts = schedule.respaced_timesteps(opts.steps);
    for (k, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(k + 1).map_or(1.0, |&tp| schedule.alpha_bar(tp));
        let beta = 1.0 - ab / ab_prev;
        let t_rows = vec![t; rows];
        let mut eps = denoise_predict(net, store, &x, &t_rows, z)?;
        if guided {
            let eps_null = denoise_predict(net, store, &x, &t_rows, z_null.expect("checked above"))?;
            eps = &eps_null + &((&eps - &eps_null) * opts.cfg_scale);
        }
        let x0 = ((&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt()).mapv(|v| v.clamp(-1.0, 1.0));
        let mean = &x0 * (beta * ab_prev.sqrt() / (1.0 - ab)) + &x * ((1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab));
        x = if k + 1 < ts.len() {
            let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let noise = Matrix::from_shape_fn((rows, token_dim), |_| StandardNormal.sample(rng));
            mean + noise * (std * temp)
        } else {
            mean
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_params;
    use ltm3d_autograd::check::{check_input, check_params};
    use ltm3d_autograd::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn randomized_net(d: usize, z_dim: usize) -> (ParamStore, DenoiseNet) {
        let cfg = DenoiseConfig { width: 8, depth: 2, time_features: 6 };
        let mut store = ParamStore::new();
        let net = build_params(&mut store, 1, |b| DenoiseNet::new(b, &cfg, d, z_dim)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.get(id).dim();
            *store.get_mut(id) = Init::Normal(0.4).build(r, c, &mut rng);
        }
        (store, net)
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = build_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 2e-2).abs() < 1e-15);
        assert!(build_schedule(1, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn alpha_bar_decays_strictly() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [2, 100, 1000] {
                let s = build_schedule(steps, kind).unwrap();
                assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
                assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
            }
            assert!(build_schedule(1000, kind).unwrap().alpha_bar(1) > 0.99);
        }
    }

    #[test]
    fn cosine_schedule_ends_near_pure_noise() {
        let s = build_schedule(100, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar(100) < 1e-3);
    }

    #[test]
    fn q_sample_special_cases() {
        let s = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let x0 = Init::Normal(1.0).build(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let zeros = Matrix::zeros((3, 4));
        let out = s.q_sample(&x0, &[10, 500, 1000], &zeros).unwrap();
        for (i, t) in [10, 500, 1000].into_iter().enumerate() {
            let expect = x0.row(i).mapv(|v| v * s.alpha_bar(t).sqrt());
            assert_eq!(out.row(i), expect);
        }
        let unit = DiffusionSchedule::from_betas(ScheduleKind::Linear, vec![0.0, 0.5]);
        assert_eq!(unit.q_sample(&x0, &[1, 1, 1], &Matrix::ones((3, 4))).unwrap(), x0);
        assert!(s.q_sample(&x0, &[0, 1, 2], &zeros).is_err());
        assert!(s.q_sample(&x0, &[1, 1, 1001], &zeros).is_err());
    }

    #[test]
    fn q_sample_variance_from_zero() {
        let s = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [50, 400, 900] {
            let eps = Matrix::from_shape_fn((20_000, 1), |_| StandardNormal.sample(&mut rng));
            let x = s.q_sample(&Matrix::zeros((20_000, 1)), &vec![t; 20_000], &eps).unwrap();
            let var = x.mapv(|v| v * v).mean().unwrap();
            let expect = 1.0 - s.alpha_bar(t);
            assert!((var - expect).abs() / expect < 0.05, "t={t}: {var} vs {expect}");
        }
    }

    #[test]
    fn fully_noised_samples_forget_x0() {
        let s = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Matrix::from_elem((20_000, 1), 0.9);
        let eps = Matrix::from_shape_fn((20_000, 1), |_| StandardNormal.sample(&mut rng));
        let x = s.q_sample(&x0, &vec![1000; 20_000], &eps).unwrap();
        let mean = x.mean().unwrap();
        let var = x.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.05, "mean {mean} var {var}");
    }

    #[test]
    fn respacing_is_even_and_descending() {
        let s = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let ts = s.respaced_timesteps(100);
        assert_eq!(ts.len(), 100);
        assert_eq!((ts[0], ts[99]), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.respaced_timesteps(5000).len(), 1000);
    }

    #[test]
    fn denoiser_is_pure_and_shaped() {
        for d in [1, 3, 12] {
            let (store, net) = randomized_net(d, 5);
            let x = Init::Normal(1.0).build(4, d, &mut ChaCha8Rng::seed_from_u64(5));
            let z = Init::Normal(1.0).build(4, 5, &mut ChaCha8Rng::seed_from_u64(6));
            let a = denoise_predict(&net, &store, &x, &[1, 7, 300, 1000], &z).unwrap();
            assert_eq!(a.dim(), (4, d));
            assert_eq!(a, denoise_predict(&net, &store, &x, &[1, 7, 300, 1000], &z).unwrap());
        }
    }

    #[test]
    fn fresh_denoiser_predicts_zero() {
        let mut store = ParamStore::new();
        let net = build_params(&mut store, 1, |b| DenoiseNet::new(b, &DenoiseConfig::default(), 3, 4)).unwrap();
        let out = denoise_predict(&net, &store, &Matrix::ones((2, 3)), &[5, 6], &Matrix::ones((2, 4))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let (store, net) = randomized_net(3, 4);
        let x = Init::Normal(1.0).build(3, 3, &mut ChaCha8Rng::seed_from_u64(7));
        let z = Init::Normal(1.0).build(3, 4, &mut ChaCha8Rng::seed_from_u64(8));
        let t = [3, 200, 999];
        let report = check_input(&store, &z, |tape, z| net.predict(tape.constant(x.clone()), &t, z).square().sum());
        assert!(report.max_error() < 1e-3, "{:?}", report.worst());
        let schedule = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(&store, &ids, |tape| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            diffusion_loss(&net, &x, tape.constant(z.clone()), &schedule, &mut rng).unwrap()
        });
        assert!(report.max_error() < 1e-3, "{:?}", report.worst());
    }

    /// Replays the loss's own random draws and returns the drawn noise.
    struct NoiseOracle {
        rng: RefCell<ChaCha8Rng>,
        steps: usize,
    }

    impl NoisePredictor for NoiseOracle {
        fn predict<'t, 'p>(&self, x_t: Var<'t, 'p>, _t: &[usize], _z: Var<'t, 'p>) -> Var<'t, 'p> {
            let (_, eps) = draw_noise(x_t.rows(), x_t.cols(), self.steps, &mut *self.rng.borrow_mut());
            x_t.tape().constant(eps)
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict<'t, 'p>(&self, x_t: Var<'t, 'p>, _t: &[usize], _z: Var<'t, 'p>) -> Var<'t, 'p> {
            x_t.tape().constant(Matrix::zeros(x_t.shape()))
        }
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let schedule = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let store = ParamStore::new();
        for seed in 0..10 {
            let x0 = Init::Normal(0.5).build(6, 12, &mut ChaCha8Rng::seed_from_u64(100 + seed));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let oracle = NoiseOracle { rng: RefCell::new(rng.clone()), steps: 1000 };
            let tape = Tape::new(&store);
            let loss = diffusion_loss(&oracle, &x0, tape.constant(Matrix::zeros((6, 2))), &schedule, &mut rng).unwrap();
            assert_eq!(loss.scalar(), 0.0);
        }
    }

    #[test]
    fn zero_predictor_loss_is_the_token_dimension() {
        let schedule = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let store = ParamStore::new();
        let d = 12;
        let x0 = Matrix::zeros((10_000, d));
        let tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let loss = diffusion_loss(&Zero, &x0, tape.constant(Matrix::zeros((10_000, 1))), &schedule, &mut rng).unwrap().scalar();
        assert!((loss - d as f64).abs() < 0.05 * d as f64, "loss {loss}");
    }

    #[test]
    fn sampling_is_reproducible_and_cold_chains_are_deterministic() {
        let (store, net) = randomized_net(3, 4);
        let schedule = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let z = Init::Normal(1.0).build(5, 4, &mut ChaCha8Rng::seed_from_u64(12));
        let opts = SampleOptions { steps: 20, ..SampleOptions::default() };
        let run = |seed: u64, opts: &SampleOptions| {
            token_ddpm_sample(&net, &store, &z, None, 3, &schedule, opts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        assert_eq!(run(1, &opts), run(1, &opts));
        assert_ne!(run(1, &opts), run(2, &opts));
        let cold = SampleOptions { temperature: 0.0, ..opts };
        assert_eq!(run(1, &cold), run(2, &cold));
        assert!(run(3, &opts).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn guidance_with_identical_conditions_is_a_no_op() {
        let (store, net) = randomized_net(3, 4);
        let schedule = build_schedule(1000, ScheduleKind::Cosine).unwrap();
        let z = Init::Normal(1.0).build(2, 4, &mut ChaCha8Rng::seed_from_u64(13));
        let plain = SampleOptions { steps: 10, ..SampleOptions::default() };
        let guided = SampleOptions { cfg_scale: 3.0, ..plain };
        let a = token_ddpm_sample(&net, &store, &z, None, 3, &schedule, &plain, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = token_ddpm_sample(&net, &store, &z, Some(&z), 3, &schedule, &guided, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(token_ddpm_sample(&net, &store, &z, None, 3, &schedule, &guided, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
