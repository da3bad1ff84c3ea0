//! Gradient-descent adaptation on linear tasks: coefficient-only training
//! against frozen subspaces, plus full low-rank and random-basis baselines.
//!
//! Loss is `‖X·Wᵀ − Y‖²_F / (s·m)` for `W = W₀ + ΔW`. The optimizer is plain
//! (mini-batch) gradient descent with optional L2 weight decay.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, gaussian_matrix};
use crate::projection::SiteCoefficients;
use crate::scalar::Scalar;
use crate::subspace::SiteSubspace;

/// Loss multiple over the initial loss at which a run is declared diverged.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Relative loss decrease that counts as progress for plateau detection.
pub const PLATEAU_REL_IMPROVEMENT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheduler {
    Constant,
    LinearDecay,
    ReduceOnPlateau { factor: f64, patience: usize, min_lr: f64 },
}

impl Default for Scheduler {
    fn default() -> Self {
        Scheduler::ReduceOnPlateau {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// `0` means full batch.
    pub batch_size: usize,
    pub scheduler: Scheduler,
    pub weight_decay: f64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 200,
            batch_size: 0,
            scheduler: Scheduler::default(),
            weight_decay: 0.0,
            seed: 0,
            init_scale: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if let Scheduler::ReduceOnPlateau { factor, min_lr, .. } = self.scheduler {
            if !(factor > 0.0 && factor < 1.0) {
                return Err(Error::InvalidConfig(format!("plateau factor {factor} outside (0, 1)")));
            }
            if !(min_lr >= 0.0) {
                return Err(Error::InvalidConfig("min_lr must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Linear regression task `Y = X·W*ᵀ (+ noise)` on top of a frozen `W₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask<T> {
    /// `s × n` inputs.
    pub x: Array2<T>,
    /// `s × m` targets.
    pub y: Array2<T>,
    pub w_star: Option<Array2<T>>,
    /// `m × n` frozen base weights.
    pub w0: Array2<T>,
}

impl<T: Scalar> LinearTask<T> {
    pub fn new(x: Array2<T>, y: Array2<T>, w0: Array2<T>, w_star: Option<Array2<T>>) -> Result<Self> {
        let (s, n) = x.dim();
        let m = y.ncols();
        if y.nrows() != s || w0.dim() != (m, n) {
            return Err(Error::DimMismatch(format!(
                "x {:?}, y {:?}, w0 {:?} are inconsistent",
                x.dim(),
                y.dim(),
                w0.dim()
            )));
        }
        if let Some(w) = &w_star {
            if w.dim() != (m, n) {
                return Err(Error::DimMismatch(format!("w_star {:?} is not {m}x{n}", w.dim())));
            }
        }
        Ok(LinearTask { x, y, w_star, w0 })
    }

    pub fn samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Mean squared error of the full weight matrix `w` on the task data.
    pub fn mse(&self, w: ArrayView2<'_, T>) -> T {
        let r = self.x.dot(&w.t()) - &self.y;
        frobenius_sq(r.view()) / T::lit((self.samples() * self.output_dim()).max(1) as f64)
    }

    /// Mean squared error of `W₀ + delta`.
    pub fn mse_with_delta(&self, delta: ArrayView2<'_, T>) -> T {
        self.mse((&self.w0 + &delta).view())
    }
}

/// Predictions `x_batch·(W₀ + ΔW)ᵀ`.
pub fn forward<T: Scalar>(task: &LinearTask<T>, delta: ArrayView2<'_, T>, x_batch: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if delta.dim() != task.w0.dim() || x_batch.ncols() != task.w0.ncols() {
        return Err(Error::DimMismatch(format!(
            "delta {:?} / batch {:?} against base {:?}",
            delta.dim(),
            x_batch.dim(),
            task.w0.dim()
        )));
    }
    Ok(x_batch.dot(&(&task.w0 + &delta).t()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-epoch full-data loss. Epochs are numbered from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub initial_loss: f64,
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn final_loss(&self) -> f64 {
        self.entries.last().map_or(self.initial_loss, |e| e.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// First epoch whose loss is at or below `threshold`.
    pub fn first_crossing(&self, threshold: f64) -> Option<usize> {
        self.entries.iter().find(|e| e.loss <= threshold).map(|e| e.epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "lr", "seconds"]).expect("in-memory csv");
        for e in &self.entries {
            w.write_record([
                e.epoch.to_string(),
                format!("{:?}", e.loss),
                format!("{:?}", e.lr),
                format!("{:?}", e.seconds),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

struct LrSchedule {
    base: f64,
    lr: f64,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    fn new(base: f64) -> Self {
        LrSchedule {
            base,
            lr: base,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    fn for_epoch(&self, cfg: &TrainConfig, epoch: usize) -> f64 {
        match cfg.scheduler {
            Scheduler::LinearDecay => {
                self.base * (1.0 - (epoch - 1) as f64 / cfg.max_epochs.max(1) as f64)
            }
            _ => self.lr,
        }
    }

    fn observe(&mut self, cfg: &TrainConfig, loss: f64) {
        if let Scheduler::ReduceOnPlateau { factor, patience, min_lr } = cfg.scheduler {
            if loss < self.best * (1.0 - PLATEAU_REL_IMPROVEMENT) {
                self.best = loss;
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.stale > patience {
                    self.lr = (self.lr * factor).max(min_lr).min(self.lr);
                    self.stale = 0;
                }
            }
        }
    }
}

/// Shared gradient-descent driver. `grad` returns the data-loss gradient on
/// the given sample rows; `loss` evaluates the full-data loss.
fn descend<T, G, L>(params: &mut [Array2<T>], samples: usize, cfg: &TrainConfig, mut grad: G, loss: L) -> Result<LossTrace>
where
    T: Scalar,
    G: FnMut(&[Array2<T>], &[usize]) -> Vec<Array2<T>>,
    L: Fn(&[Array2<T>]) -> T,
{
    cfg.validate()?;
    let initial = loss(params).as_f64();
    let limit = DIVERGENCE_FACTOR * initial.max(1e-12);
    let mut trace = LossTrace {
        initial_loss: initial,
        entries: Vec::with_capacity(cfg.max_epochs),
    };
    let mut schedule = LrSchedule::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples).collect();
    let batch = if cfg.batch_size == 0 { samples.max(1) } else { cfg.batch_size };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let wd = T::lit(cfg.weight_decay);

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = schedule.for_epoch(cfg, epoch);
        let step = T::lit(lr);
        if batch < samples {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let grads = grad(params, chunk);
            for (p, g) in params.iter_mut().zip(grads) {
                if cfg.weight_decay > 0.0 {
                    let decay = p.mapv(|x| x * wd);
                    p.scaled_add(-step, &(g + decay));
                } else {
                    p.scaled_add(-step, &g);
                }
            }
        }
        let l = loss(params).as_f64();
        trace.entries.push(TraceEntry {
            epoch,
            loss: l,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if !l.is_finite() || l > limit {
            return Err(Error::Diverged {
                epoch,
                loss: l,
                limit,
                trace: Box::new(trace),
            });
        }
        schedule.observe(cfg, l);
    }
    Ok(trace)
}

fn select_rows<T: Scalar>(m: &Array2<T>, rows: &[usize]) -> Array2<T> {
    if rows.len() == m.nrows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        m.clone()
    } else {
        m.select(Axis(0), rows)
    }
}

/// Data loss and gradients w.r.t. `(α_A, α_B)` for `ΔW = V_Bᵀ·α_B·α_Aᵀ·V_A`,
/// restricted to the sample `rows` (all rows when `None`).
pub fn coefficient_objective<T: Scalar>(
    task: &LinearTask<T>,
    sub_a: &SiteSubspace<T>,
    sub_b: &SiteSubspace<T>,
    alpha_a: &Array2<T>,
    alpha_b: &Array2<T>,
    rows: Option<&[usize]>,
) -> (T, Array2<T>, Array2<T>) {
    let (x, y) = match rows {
        Some(r) => (select_rows(&task.x, r), select_rows(&task.y, r)),
        None => (task.x.clone(), task.y.clone()),
    };
    let scale = T::lit(2.0) / T::lit((x.nrows() * y.ncols()).max(1) as f64);
    // z: s × K_A inputs expressed in the A basis.
    let z = x.dot(&sub_a.components.t());
    let lifted = z.dot(alpha_a).dot(&alpha_b.t()).dot(&sub_b.components);
    let residual = x.dot(&task.w0.t()) + lifted - &y;
    let loss = frobenius_sq(residual.view()) / T::lit((x.nrows() * y.ncols()).max(1) as f64);
    // rv: s × K_B residual expressed in the B basis.
    let rv = residual.dot(&sub_b.components.t());
    let grad_b = rv.t().dot(&z).dot(alpha_a) * scale;
    let grad_a = z.t().dot(&rv).dot(alpha_b) * scale;
    (loss, grad_a, grad_b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedCoefficients<T> {
    pub a: SiteCoefficients<T>,
    pub b: SiteCoefficients<T>,
    pub trainable_params: usize,
}

impl<T: Scalar> TrainedCoefficients<T> {
    pub fn delta(&self, sub_a: &SiteSubspace<T>, sub_b: &SiteSubspace<T>) -> Array2<T> {
        sub_b
            .components
            .t()
            .dot(&self.b.alpha)
            .dot(&self.a.alpha.t())
            .dot(&sub_a.components)
    }
}

/// Learns `α_A (K_A × r)` and `α_B (K_B × r)` with both bases frozen.
pub fn train_coefficients<T: Scalar>(
    task: &LinearTask<T>,
    sub_a: &SiteSubspace<T>,
    sub_b: &SiteSubspace<T>,
    r: usize,
    cfg: &TrainConfig,
) -> Result<(TrainedCoefficients<T>, LossTrace)> {
    if sub_a.ambient_dim != task.input_dim() || sub_b.ambient_dim != task.output_dim() {
        return Err(Error::DimMismatch(format!(
            "subspaces ({}, {}) do not fit a {}x{} task",
            sub_b.ambient_dim,
            sub_a.ambient_dim,
            task.output_dim(),
            task.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = T::lit(cfg.init_scale);
    let alpha_a = gaussian_matrix::<T, _>(&mut rng, sub_a.k_total(), r) * init;
    let alpha_b = gaussian_matrix::<T, _>(&mut rng, sub_b.k_total(), r) * init;
    let mut params = vec![alpha_a, alpha_b];
    let trace = descend(
        &mut params,
        task.samples(),
        cfg,
        |p, rows| {
            let (_, ga, gb) = coefficient_objective(task, sub_a, sub_b, &p[0], &p[1], Some(rows));
            vec![ga, gb]
        },
        |p| coefficient_objective(task, sub_a, sub_b, &p[0], &p[1], None).0,
    )?;
    let alpha_b = params.pop().expect("two parameter blocks");
    let alpha_a = params.pop().expect("two parameter blocks");
    let trainable_params = alpha_a.len() + alpha_b.len();
    let wrap = |site: &SiteSubspace<T>, alpha: Array2<T>| SiteCoefficients {
        site: site.site.clone(),
        alpha,
        include_mean: false,
        residual_fro: T::zero(),
    };
    Ok((
        TrainedCoefficients {
            a: wrap(sub_a, alpha_a),
            b: wrap(sub_b, alpha_b),
            trainable_params,
        },
        trace,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors<T> {
    /// `m × r`
    pub b: Array2<T>,
    /// `r × n`
    pub a: Array2<T>,
}

impl<T: Scalar> LoraFactors<T> {
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a)
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Full low-rank baseline: `B` starts at zero, `A` at `N(0, 1/n)`.
pub fn train_lora<T: Scalar>(task: &LinearTask<T>, r: usize, cfg: &TrainConfig) -> Result<(LoraFactors<T>, LossTrace)> {
    let (m, n) = task.w0.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = gaussian_matrix::<T, _>(&mut rng, r, n) * (T::one() / T::lit(n as f64).sqrt());
    let b = Array2::<T>::zeros((m, r));
    let mut params = vec![b, a];
    let data_grad = |p: &[Array2<T>], rows: &[usize]| -> Vec<Array2<T>> {
        let x = select_rows(&task.x, rows);
        let y = select_rows(&task.y, rows);
        let w = &task.w0 + &p[0].dot(&p[1]);
        let residual = x.dot(&w.t()) - &y;
        let scale = T::lit(2.0) / T::lit((x.nrows() * y.ncols()).max(1) as f64);
        let g = residual.t().dot(&x) * scale;
        vec![g.dot(&p[1].t()), p[0].t().dot(&g)]
    };
    let trace = descend(&mut params, task.samples(), cfg, data_grad, |p| {
        task.mse_with_delta(p[0].dot(&p[1]).view())
    })?;
    let a = params.pop().expect("two parameter blocks");
    let b = params.pop().expect("two parameter blocks");
    Ok((LoraFactors { b, a }, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub index: usize,
    pub crossing_epoch: Option<usize>,
    /// Baseline crossing epoch over this trace's; `None` if either never crosses.
    pub speedup: Option<f64>,
}

/// First threshold crossing per trace and speedup relative to `baseline`.
pub fn compare_convergence(traces: &[LossTrace], threshold: f64, baseline: usize) -> Vec<ConvergenceRow> {
    let base = traces.get(baseline).and_then(|t| t.first_crossing(threshold));
    traces
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let crossing = t.first_crossing(threshold);
            let speedup = match (base, crossing) {
                (Some(b), Some(c)) => Some(b as f64 / c as f64),
                _ => None,
            };
            ConvergenceRow {
                index,
                crossing_epoch: crossing,
                speedup,
            }
        })
        .collect()
}
