//! Multinomial No-U-Turn sampler with a diagonal metric, dual-averaging
//! step-size adaptation and windowed metric adaptation during warmup.
//!
//! The trajectory builder follows the generalized U-turn criterion with the
//! additional checks across merged sub-trees used by current Stan releases.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

/// A differentiable log density on `R^d`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Value at `x`, with the gradient written into `grad`. Return `-∞` to
    /// reject a state.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NutsSettings {
    pub max_depth: usize,
    pub target_accept: f64,
    /// Energy error beyond which a trajectory is declared divergent.
    pub max_delta_h: f64,
    pub adapt_metric: bool,
}

impl Default for NutsSettings {
    fn default() -> Self {
        Self {
            max_depth: 10,
            target_accept: 0.8,
            max_delta_h: 1000.0,
            adapt_metric: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

/// Outcome of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub accept_stat: f64,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
}

pub struct Nuts<'a, T: LogDensity> {
    target: &'a T,
    pub settings: NutsSettings,
    pub step_size: f64,
    /// Diagonal inverse metric.
    pub inv_metric: Vec<f64>,
    z: Point,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

struct TreeState {
    h0: f64,
    sign: f64,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

impl<'a, T: LogDensity> Nuts<'a, T> {
    /// Starts at `init`, which must have a finite log density.
    pub fn new(target: &'a T, init: Vec<f64>, settings: NutsSettings) -> Result<Self> {
        let d = target.dim();
        if init.len() != d {
            return Err(Error::Dimension(format!(
                "initial point has length {}, expected {d}",
                init.len()
            )));
        }
        let mut grad = vec![0.0; d];
        let logp = target.log_density_grad(&init, &mut grad);
        if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Initialization(
                "log density is not finite at the initial point".into(),
            ));
        }
        Ok(Self {
            target,
            settings,
            step_size: 1.0,
            inv_metric: vec![1.0; d],
            z: Point {
                q: init,
                p: vec![0.0; d],
                grad,
                logp,
            },
        })
    }

    pub fn position(&self) -> &[f64] {
        &self.z.q
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut Point) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            *p = rng.sample::<f64, _>(StandardNormal) / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.target.log_density_grad(&z.q, &mut z.grad);
        if z.logp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += 0.5 * eps * g;
            }
        }
    }

    /// Doubles the step size until the one-step acceptance crosses 0.8,
    /// or halves it until it does.
    pub fn init_step_size<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let threshold = 0.8f64.ln();
        let mut z = self.z.clone();
        self.sample_momentum(rng, &mut z);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step_size);
        let delta = h0 - self.hamiltonian(&z);
        let direction = if delta > threshold { 1 } else { -1 };
        loop {
            let mut z = self.z.clone();
            self.sample_momentum(rng, &mut z);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step_size);
            let delta = h0 - self.hamiltonian(&z);
            if (direction == 1 && !(delta > threshold)) || (direction == -1 && !(delta < threshold)) {
                break;
            }
            self.step_size = if direction == 1 {
                2.0 * self.step_size
            } else {
                0.5 * self.step_size
            };
            if self.step_size > 1e7 {
                return Err(Error::Numerical(
                    "step size diverged; the posterior may be improper".into(),
                ));
            }
            if self.step_size == 0.0 {
                return Err(Error::Numerical("step size collapsed to zero".into()));
            }
        }
        Ok(())
    }

    fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
        dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        log_sum_weight: &mut f64,
        st: &mut TreeState,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, st.sign * self.step_size);
            st.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - st.h0 > self.settings.max_delta_h {
                st.divergent = true;
            }
            *log_sum_weight = log_sum_exp(&[*log_sum_weight, st.h0 - h]);
            st.sum_metro += if st.h0 - h > 0.0 { 1.0 } else { (st.h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !st.divergent;
        }
        let d = z.q.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; d];
        let mut p_sharp_init_end = vec![0.0; d];
        let mut rho_init = vec![0.0; d];
        if !self.build_tree(
            rng,
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            &mut lsw_init,
            st,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; d];
        let mut p_sharp_final_beg = vec![0.0; d];
        let mut rho_final = vec![0.0; d];
        if !self.build_tree(
            rng,
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            &mut lsw_final,
            st,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(&[lsw_init, lsw_final]);
        *log_sum_weight = log_sum_exp(&[*log_sum_weight, lsw_subtree]);
        if lsw_final > lsw_subtree || rng.gen::<f64>() < (lsw_final - lsw_subtree).exp() {
            std::mem::swap(z_propose, &mut z_propose_final);
        }

        let mut rho_subtree = rho_init.clone();
        add_into(&mut rho_subtree, &rho_final);
        add_into(rho, &rho_subtree);

        let mut persist = Self::criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let mut rho_ext = rho_init;
        add_into(&mut rho_ext, &p_final_beg);
        persist &= Self::criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let mut rho_ext = rho_final;
        add_into(&mut rho_ext, &p_init_end);
        persist &= Self::criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }

    /// One NUTS transition from the current position.
    pub fn transition<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Transition {
        let mut z0 = self.z.clone();
        self.sample_momentum(rng, &mut z0);
        self.z.p.clone_from(&z0.p);
        let h0 = self.hamiltonian(&z0);
        let d = z0.q.len();

        let mut z_fwd = z0.clone();
        let mut z_bck = z0.clone();
        let mut z_sample = z0.clone();
        let mut z_propose = z0.clone();

        let ps = self.p_sharp(&z0.p);
        let mut p_sharp_fwd_fwd = ps.clone();
        let mut p_sharp_fwd_bck = ps.clone();
        let mut p_sharp_bck_fwd = ps.clone();
        let mut p_sharp_bck_bck = ps;
        let mut p_fwd_fwd = z0.p.clone();
        let mut p_fwd_bck = z0.p.clone();
        let mut p_bck_fwd = z0.p.clone();
        let mut p_bck_bck = z0.p.clone();
        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;

        let mut st = TreeState {
            h0,
            sign: 1.0,
            n_leapfrog: 0,
            sum_metro: 0.0,
            divergent: false,
        };
        let mut depth = 0;
        while depth < self.settings.max_depth {
            let mut rho_fwd = vec![0.0; d];
            let mut rho_bck = vec![0.0; d];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if rng.gen::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                st.sign = 1.0;
                let mut z = z_fwd.clone();
                let ok = self.build_tree(
                    rng,
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    &mut lsw_subtree,
                    &mut st,
                );
                z_fwd = z;
                ok
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                st.sign = -1.0;
                let mut z = z_bck.clone();
                let ok = self.build_tree(
                    rng,
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    &mut lsw_subtree,
                    &mut st,
                );
                z_bck = z;
                ok
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight || rng.gen::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_sum_exp(&[log_sum_weight, lsw_subtree]);

            rho.clone_from(&rho_bck);
            add_into(&mut rho, &rho_fwd);
            let mut persist = Self::criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let mut rho_ext = rho_bck.clone();
            add_into(&mut rho_ext, &p_fwd_bck);
            persist &= Self::criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let mut rho_ext = rho_fwd.clone();
            add_into(&mut rho_ext, &p_bck_fwd);
            persist &= Self::criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }
        let n_leapfrog = st.n_leapfrog;
        let accept_stat = if n_leapfrog > 0 {
            st.sum_metro / n_leapfrog as f64
        } else {
            0.0
        };
        let divergent = st.divergent;
        self.z = z_sample;
        Transition {
            accept_stat,
            depth,
            n_leapfrog,
            divergent,
        }
    }
}

/// Nesterov dual averaging of `log ε` toward a target acceptance statistic.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    delta: f64,
    gamma: f64,
    kappa: f64,
    t0: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(delta: f64) -> Self {
        Self {
            mu: 0.0,
            delta,
            gamma: 0.05,
            kappa: 0.75,
            t0: 10.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Slow-window schedule for metric adaptation: an initial fast buffer,
/// doubling variance-estimation windows, and a terminal fast buffer.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    enabled: bool,
}

impl WindowSchedule {
    pub fn new(num_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        let enabled = num_warmup >= 20;
        if enabled && init + base + term > num_warmup {
            init = (0.15 * num_warmup as f64) as usize;
            term = (0.1 * num_warmup as f64) as usize;
            base = num_warmup - (init + term);
        }
        Self {
            num_warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: init + base - 1,
            counter: 0,
            enabled,
        }
    }

    fn in_window(&self) -> bool {
        self.enabled
            && self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn window_end(&self) -> bool {
        self.enabled && self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.num_warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n as f64;
            *s += delta * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup adaptation state for one chain.
pub struct Adaptation {
    pub step: DualAveraging,
    pub windows: WindowSchedule,
    estimator: Welford,
}

impl Adaptation {
    pub fn new(num_warmup: usize, dim: usize, target_accept: f64) -> Self {
        Self {
            step: DualAveraging::new(target_accept),
            windows: WindowSchedule::new(num_warmup),
            estimator: Welford::new(dim),
        }
    }

    /// Updates the step size and, at the end of a slow window, the metric.
    pub fn learn<T: LogDensity, R: Rng + ?Sized>(
        &mut self,
        sampler: &mut Nuts<'_, T>,
        rng: &mut R,
        accept_stat: f64,
    ) -> Result<()> {
        sampler.step_size = self.step.learn(accept_stat);
        if !sampler.settings.adapt_metric {
            return Ok(());
        }
        if self.windows.in_window() {
            self.estimator.add(sampler.position());
        }
        if self.windows.window_end() {
            self.windows.compute_next_window();
            sampler.inv_metric = self.estimator.variance();
            self.estimator = Welford::new(sampler.inv_metric.len());
            self.windows.counter += 1;
            sampler.init_step_size(rng)?;
            self.step.restart(sampler.step_size);
            return Ok(());
        }
        self.windows.counter += 1;
        Ok(())
    }
}
