//! Synthetic task domains with a known shared basis, and the experiment
//! protocols run on them: leave-one-out, low-resource augmentation, and
//! error-vs-K / error-vs-samples trend sweeps.
//!
//! Every task solution is `W*ᵢ = L·Eᵢ·S (+ off-span part)`, where `S`
//! (`k_true × n`) is the shared orthonormal row basis and `L` (`m × q`,
//! `q = min(m, k_true)`) a shared orthonormal column basis, so both the A
//! and the B factors of task adapters share structure.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{train_coefficients, LinearTask, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, frobenius_sq, gaussian_matrix, largest_principal_angle, lstsq, svd};
use crate::projection::{compose_update, fit_coefficients};
use crate::scalar::Scalar;
use crate::store::{Role, SiteId, FORMAT_VERSION};
use crate::subspace::{
    augment_pseudo, extract_subspace, make_random_subspace, KPolicy, SiteSubspace, SvdMode,
};

/// Condition number of the regularized normal matrix above which the ridge
/// is raised to a floor.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub m: usize,
    pub n: usize,
    /// Number of tasks.
    pub d: usize,
    /// Dimension of the shared row space.
    pub k_true: usize,
    /// Rank of the per-task adapters.
    pub r: usize,
    /// Samples per task.
    pub s_t: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Share of each task's energy placed orthogonal to the shared basis.
    #[serde(default)]
    pub offspan_fraction: f64,
    /// Bound on `‖X‖_F`; inputs are rescaled when they exceed it.
    #[serde(default)]
    pub input_norm_bound: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Constant added to every target.
    #[serde(default)]
    pub bias: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let infeasible = |msg: String| Err(Error::SpecInfeasible(msg));
        if self.m == 0 || self.n == 0 || self.d == 0 || self.r == 0 || self.s_t == 0 || self.k_true == 0 {
            return infeasible("m, n, d, r, s_t and k_true must all be at least 1".into());
        }
        if self.k_true > self.n {
            return infeasible(format!("k_true = {} exceeds n = {}", self.k_true, self.n));
        }
        if !(0.0..=1.0).contains(&self.offspan_fraction) {
            return infeasible(format!("offspan_fraction {} outside [0, 1]", self.offspan_fraction));
        }
        if self.offspan_fraction > 0.0 && self.k_true == self.n {
            return infeasible("no orthogonal complement for off-span energy".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return infeasible(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if let Some(bound) = self.input_norm_bound {
            if !(bound > 0.0) {
                return infeasible(format!("input_norm_bound {bound} must be positive"));
            }
        }
        if !self.bias.is_finite() {
            return infeasible("bias must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomain<T> {
    pub spec: DomainSpec,
    /// `k_true × n`, orthonormal rows.
    pub shared_basis: Array2<T>,
    /// `m × q`, orthonormal columns.
    pub left_basis: Array2<T>,
    /// `C_i` (`m × k_true`) with `W*_i = C_i·S` before the off-span part.
    pub mixing: Vec<Array2<T>>,
    pub tasks: Vec<LinearTask<T>>,
}

impl<T: Scalar> SyntheticDomain<T> {
    pub fn w_star(&self, task: usize) -> &Array2<T> {
        self.tasks[task].w_star.as_ref().expect("synthetic tasks carry w_star")
    }
}

fn mix_seed(base: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn orthonormal_gaussian_rows<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Array2<T>> {
    let q = linalg::orthonormal_rows(&gaussian_matrix::<T, _>(rng, rows, cols), T::rel_tol(1e-10));
    if q.nrows() != rows {
        return Err(Error::SpecInfeasible(format!("could not draw {rows} orthonormal rows in {cols} dims")));
    }
    Ok(q)
}

/// Draws inputs and noisy targets for a known solution.
pub fn sample_task<T: Scalar>(spec: &DomainSpec, w_star: &Array2<T>, samples: usize, rng: &mut ChaCha8Rng) -> Result<LinearTask<T>> {
    let (m, n) = w_star.dim();
    let mut x: Array2<T> = gaussian_matrix(rng, samples, n);
    if let Some(bound) = spec.input_norm_bound {
        let fro = frobenius_sq(x.view()).sqrt();
        let bound = T::lit(bound);
        if fro > bound {
            x.mapv_inplace(|v| v * bound / fro);
        }
    }
    let mut y = x.dot(&w_star.t());
    if spec.noise_sigma > 0.0 {
        y.scaled_add(T::lit(spec.noise_sigma), &gaussian_matrix::<T, _>(rng, samples, m));
    }
    if spec.bias != 0.0 {
        y.mapv_inplace(|v| v + T::lit(spec.bias));
    }
    LinearTask::new(x, y, Array2::zeros((m, n)), Some(w_star.clone()))
}

pub fn generate_domain<T: Scalar>(spec: &DomainSpec) -> Result<SyntheticDomain<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared_basis = orthonormal_gaussian_rows::<T>(&mut rng, spec.k_true, spec.n)?;
    let q = spec.m.min(spec.k_true);
    let left_basis = orthonormal_gaussian_rows::<T>(&mut rng, q, spec.m)?.reversed_axes();
    let f = spec.offspan_fraction;

    let mut mixing = Vec::with_capacity(spec.d);
    let mut tasks = Vec::with_capacity(spec.d);
    for _ in 0..spec.d {
        let e: Array2<T> = gaussian_matrix(&mut rng, q, spec.k_true);
        let c = left_basis.dot(&e);
        let in_span = c.dot(&shared_basis);
        let w = if f > 0.0 {
            let mut off: Array2<T> = gaussian_matrix(&mut rng, spec.m, spec.n);
            let inside = off.dot(&shared_basis.t()).dot(&shared_basis);
            off -= &inside;
            // second pass keeps the complement clean to round-off
            let inside = off.dot(&shared_basis.t()).dot(&shared_basis);
            off -= &inside;
            let in_norm = frobenius_sq(in_span.view()).sqrt();
            let off_norm = frobenius_sq(off.view()).sqrt();
            let off_scale = T::lit(f.sqrt()) * in_norm / off_norm;
            in_span * T::lit((1.0 - f).sqrt()) + off * off_scale
        } else {
            in_span
        };
        tasks.push(sample_task(spec, &w, spec.s_t, &mut rng)?);
        mixing.push(c);
    }
    Ok(SyntheticDomain {
        spec: spec.clone(),
        shared_basis,
        left_basis,
        mixing,
        tasks,
    })
}

/// Closed-form task adapter: `B` (`m × r`) and `A` (`r × n`) with `B·A` the
/// best rank-`r` approximation of the ridge solution.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapter<T> {
    pub b: Array2<T>,
    pub a: Array2<T>,
    /// The ridge had to be raised to keep the solve well conditioned.
    pub ill_conditioned: bool,
}

impl<T: Scalar> TaskAdapter<T> {
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a)
    }
}

/// Ridge solution `argmin ‖Y − X·Wᵀ‖² + ridge·‖W‖²`, via the SVD of `X`.
pub fn ridge_solution<T: Scalar>(task: &LinearTask<T>, ridge: f64) -> (Array2<T>, bool) {
    let n = task.input_dim();
    let dec = svd(task.x.view());
    let s_max = dec.s.first().copied().unwrap_or(T::zero()).as_f64();
    let s_min = if task.samples() >= n {
        dec.s.last().copied().unwrap_or(T::zero()).as_f64()
    } else {
        0.0
    };
    let cond = (s_max * s_max + ridge) / (s_min * s_min + ridge);
    let ill = !(cond <= MAX_CONDITION);
    let ridge = if ill { ridge.max(s_max * s_max / MAX_CONDITION) } else { ridge };
    let rank = if ridge > 0.0 {
        dec.s.iter().take_while(|&&x| x > T::zero()).count()
    } else {
        linalg::numerical_rank(&dec.s, task.samples(), n)
    };
    // Wᵀ = V·diag(s / (s² + ridge))·Uᵀ·Y
    let mut uy = dec.u.slice(s![.., ..rank]).t().dot(&task.y);
    for (i, mut row) in uy.outer_iter_mut().enumerate() {
        let sv = dec.s[i];
        let gain = sv / (sv * sv + T::lit(ridge));
        row.mapv_inplace(|v| v * gain);
    }
    let wt = dec.vt.slice(s![..rank, ..]).t().dot(&uy);
    (wt.reversed_axes(), ill)
}

pub fn solve_task_adapter<T: Scalar>(task: &LinearTask<T>, r: usize, ridge: f64) -> Result<TaskAdapter<T>> {
    if task.samples() == 0 {
        return Err(Error::DimMismatch("task without samples".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge {ridge} must be non-negative")));
    }
    let (w, ill_conditioned) = ridge_solution(task, ridge);
    let (m, n) = w.dim();
    let dec = svd(w.view());
    let mut b = Array2::<T>::zeros((m, r));
    let mut a = Array2::<T>::zeros((r, n));
    for i in 0..r.min(dec.s.len()) {
        let root = dec.s[i].sqrt();
        b.column_mut(i).assign(&dec.u.column(i).mapv(|v| v * root));
        a.row_mut(i).assign(&dec.vt.row(i).mapv(|v| v * root));
    }
    Ok(TaskAdapter { b, a, ill_conditioned })
}

/// Stacks the role vectors (A rows, B columns) of a set of adapters.
pub fn stack_role<T: Scalar>(adapters: &[&TaskAdapter<T>], role: Role) -> Array2<T> {
    let blocks: Vec<Array2<T>> = adapters
        .iter()
        .map(|ad| match role {
            Role::A => ad.a.clone(),
            Role::B => ad.b.t().to_owned(),
        })
        .collect();
    let views: Vec<ArrayView2<'_, T>> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("blocks share ambient dim")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub protocol: String,
    pub task_id: usize,
    pub method: String,
    /// A-side component count.
    #[serde(rename = "K")]
    pub k: usize,
    pub k_b: usize,
    pub params: usize,
    pub loss: f64,
    pub residual: Option<f64>,
    pub angle: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub format_version: u32,
    pub rows: Vec<MetricRow>,
    /// Non-fatal conditions met during the run, such as capped `K`.
    pub flags: Vec<String>,
}

impl SimMetrics {
    fn new() -> Self {
        SimMetrics {
            format_version: FORMAT_VERSION,
            ..SimMetrics::default()
        }
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["protocol", "task_id", "method", "K", "params", "loss", "residual", "angle", "seed"])
            .expect("in-memory csv");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.protocol.clone(),
                r.task_id.to_string(),
                r.method.clone(),
                r.k.to_string(),
                r.params.to_string(),
                format!("{:?}", r.loss),
                opt(r.residual),
                opt(r.angle),
                r.seed.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

fn site(role: Role) -> SiteId {
    SiteId::new("synthetic", role)
}

fn extract_pair<T: Scalar>(
    adapters: &[&TaskAdapter<T>],
    policy: KPolicy,
    seed: u64,
) -> Result<(SiteSubspace<T>, SiteSubspace<T>)> {
    let sa = extract_subspace(site(Role::A), stack_role(adapters, Role::A).view(), policy, SvdMode::Exact, seed)?;
    let sb = extract_subspace(site(Role::B), stack_role(adapters, Role::B).view(), policy, SvdMode::Exact, seed)?;
    Ok((sa, sb))
}

fn basis_angle<T: Scalar>(sub: &SiteSubspace<T>, truth: &Array2<T>) -> f64 {
    let k = sub.k_data.min(truth.nrows());
    if k == 0 {
        return std::f64::consts::FRAC_PI_2;
    }
    largest_principal_angle(sub.components.slice(s![..k, ..]), truth.view()).as_f64()
}

fn note_caps<T: Scalar>(flags: &mut Vec<String>, label: &str, subs: [&SiteSubspace<T>; 2]) {
    for sub in subs {
        if sub.degenerate {
            flags.push(format!("{label}: {} stack degenerate, mean only", sub.site.role));
        } else if sub.k_capped {
            flags.push(format!("{label}: {} K capped at numerical rank {}", sub.site.role, sub.k_data));
        }
    }
}

/// Builds every task's closed-form adapter once.
pub fn solve_all_adapters<T: Scalar>(domain: &SyntheticDomain<T>, r: usize, ridge: f64) -> Result<Vec<TaskAdapter<T>>> {
    domain.tasks.iter().map(|t| solve_task_adapter(t, r, ridge)).collect()
}

/// Leave-one-out: for each task, build the subspace from the other tasks'
/// adapters, then (a) fit the held-out adapter analytically and (b) train
/// coefficients from scratch.
pub fn run_leave_one_out<T: Scalar>(
    domain: &SyntheticDomain<T>,
    policy: KPolicy,
    r: usize,
    ridge: f64,
    cfg: &TrainConfig,
) -> Result<SimMetrics> {
    let d = domain.tasks.len();
    if d < 2 {
        return Err(Error::SpecInfeasible("leave-one-out needs at least two tasks".into()));
    }
    let adapters = solve_all_adapters(domain, r, ridge)?;
    let (m, n) = (domain.spec.m, domain.spec.n);
    let seed = domain.spec.seed;
    let mut metrics = SimMetrics::new();
    for (i, ad) in adapters.iter().enumerate() {
        if ad.ill_conditioned {
            metrics.flags.push(format!("task {i}: ridge floor applied"));
        }
    }

    for held in 0..d {
        let rest: Vec<&TaskAdapter<T>> = adapters
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held)
            .map(|(_, a)| a)
            .collect();
        let (sa, sb) = extract_pair(&rest, policy, seed)?;
        note_caps(&mut metrics.flags, &format!("fold {held}"), [&sa, &sb]);
        let task = &domain.tasks[held];
        let own = &adapters[held];
        let angle = basis_angle(&sa, &domain.shared_basis);
        let row = |method: &str, params: usize, loss: f64, residual: Option<f64>, angle: Option<f64>| MetricRow {
            protocol: "loo".into(),
            task_id: held,
            method: method.into(),
            k: sa.k_total(),
            k_b: sb.k_total(),
            params,
            loss,
            residual,
            angle,
            seed,
        };

        metrics.rows.push(row(
            "lora",
            r * (m + n),
            task.mse_with_delta(own.delta().view()).as_f64(),
            None,
            None,
        ));

        let ca = fit_coefficients(&sa, own.a.view(), true)?;
        let cb = fit_coefficients(&sb, own.b.view(), true)?;
        let zs_delta = compose_update(&sa, &ca, &sb, &cb)?;
        let residual = (ca.residual_fro * ca.residual_fro + cb.residual_fro * cb.residual_fro).sqrt();
        metrics.rows.push(row(
            "zero_shot",
            0,
            task.mse_with_delta(zs_delta.view()).as_f64(),
            Some(residual.as_f64()),
            Some(angle),
        ));

        let fold_cfg = TrainConfig {
            seed: mix_seed(cfg.seed, 1, held as u64),
            ..cfg.clone()
        };
        let (trained, trace) = train_coefficients(task, &sa, &sb, r, &fold_cfg)?;
        metrics.rows.push(row(
            "coefficients",
            trained.trainable_params,
            trace.final_loss(),
            None,
            Some(angle),
        ));
    }
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowResourceParams {
    pub n_available: usize,
    pub p: usize,
    pub k: usize,
}

/// Appends `p` Gaussian rows that are only renormalized, not orthogonalized.
/// The result is deliberately not orthonormal; it is a training baseline.
fn append_raw_random<T: Scalar>(sub: &SiteSubspace<T>, p: usize, seed: u64) -> SiteSubspace<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Array1<T>> = sub.components.outer_iter().map(|r| r.to_owned()).collect();
    for _ in 0..p {
        let v: Array1<T> = linalg::gaussian_vector(&mut rng, sub.ambient_dim);
        let nv = linalg::norm(v.view());
        rows.push(v.mapv(|x| x / nv));
    }
    let mut out = sub.clone();
    out.components = linalg::stack_rows(&rows, sub.ambient_dim);
    out.k_pseudo += p;
    out
}

pub const ARM_RANDOM: &str = "random";
pub const ARM_DATA_RAW: &str = "data+raw_random";
pub const ARM_DATA_PSEUDO: &str = "data+pseudo";

/// Low-resource augmentation: subspace from the first `n_available` tasks,
/// coefficients trained on the last task under three bases of equal size.
pub fn run_low_resource<T: Scalar>(
    domain: &SyntheticDomain<T>,
    params: LowResourceParams,
    ridge: f64,
    cfg: &TrainConfig,
) -> Result<SimMetrics> {
    let d = domain.tasks.len();
    let LowResourceParams { n_available, p, k } = params;
    if n_available == 0 || n_available >= d {
        return Err(Error::InvalidConfig(format!(
            "n_available = {n_available} must be in 1..{d}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let r = domain.spec.r;
    let seed = domain.spec.seed;
    let held = d - 1;
    let adapters: Vec<TaskAdapter<T>> = domain.tasks[..n_available]
        .iter()
        .map(|t| solve_task_adapter(t, r, ridge))
        .collect::<Result<_>>()?;
    let refs: Vec<&TaskAdapter<T>> = adapters.iter().collect();
    let (sa, sb) = extract_pair(&refs, KPolicy::FixedK(k), seed)?;
    let mut metrics = SimMetrics::new();
    note_caps(&mut metrics.flags, "low-resource", [&sa, &sb]);

    let pa = p.min(sa.ambient_dim - sa.k_data);
    let pb = p.min(sb.ambient_dim - sb.k_data);
    if pa < p || pb < p {
        metrics.flags.push(format!("pseudo count capped at A {pa}, B {pb}"));
    }
    let arms: Vec<(&str, SiteSubspace<T>, SiteSubspace<T>)> = vec![
        (
            ARM_RANDOM,
            make_random_subspace(site(Role::A), sa.ambient_dim, sa.k_data + pa, mix_seed(seed, 2, 0))?,
            make_random_subspace(site(Role::B), sb.ambient_dim, sb.k_data + pb, mix_seed(seed, 2, 1))?,
        ),
        (
            ARM_DATA_RAW,
            append_raw_random(&sa, pa, mix_seed(seed, 3, 0)),
            append_raw_random(&sb, pb, mix_seed(seed, 3, 1)),
        ),
        (
            ARM_DATA_PSEUDO,
            augment_pseudo(&sa, pa, mix_seed(seed, 4, 0))?,
            augment_pseudo(&sb, pb, mix_seed(seed, 4, 1))?,
        ),
    ];
    let task = &domain.tasks[held];
    for (name, arm_a, arm_b) in arms {
        let (trained, trace) = train_coefficients(task, &arm_a, &arm_b, r, cfg)?;
        let angle = largest_principal_angle(
            domain.shared_basis.view(),
            linalg::orthonormal_rows(&arm_a.components, T::rel_tol(1e-10)).view(),
        );
        metrics.rows.push(MetricRow {
            protocol: "lowres".into(),
            task_id: held,
            method: name.into(),
            k: arm_a.k_total(),
            k_b: arm_b.k_total(),
            params: trained.trainable_params,
            loss: trace.final_loss(),
            residual: None,
            angle: Some(angle.as_f64()),
            seed,
        });
    }
    Ok(metrics)
}

/// `‖W* − W_ℰ‖²_F` where `W_ℰ = α·V` is the least-squares fit of the task
/// with rows restricted to the span of `v` (orthonormal rows).
pub fn restricted_fit_error<T: Scalar>(task: &LinearTask<T>, v: ArrayView2<'_, T>) -> Result<T> {
    let w_star = task
        .w_star
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("task has no ground truth".into()))?;
    let fit = restricted_fit(task, v);
    Ok(frobenius_sq((w_star - &fit).view()))
}

/// Least-squares weights with rows confined to the span of `v`.
pub fn restricted_fit<T: Scalar>(task: &LinearTask<T>, v: ArrayView2<'_, T>) -> Array2<T> {
    let (m, n) = task.w0.dim();
    if v.nrows() == 0 {
        return Array2::zeros((m, n));
    }
    let z = task.x.dot(&v.t());
    let target = &task.y - &task.x.dot(&task.w0.t());
    let alpha_t = lstsq(z.view(), target.view());
    alpha_t.t().dot(&v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendParams {
    pub k_list: Vec<usize>,
    pub s_list: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCell {
    pub k: usize,
    pub s_t: usize,
    pub mean_error: f64,
    /// One entry per seed, in seed-list order.
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTable {
    pub cells: Vec<TrendCell>,
    pub seeds: Vec<u64>,
    pub flags: Vec<String>,
}

impl TrendTable {
    pub fn cell(&self, k: usize, s_t: usize) -> Option<&TrendCell> {
        self.cells.iter().find(|c| c.k == k && c.s_t == s_t)
    }

    /// Whether the seed-averaged error at `k` is non-increasing along `s_list`.
    pub fn nonincreasing_in_samples(&self, k: usize) -> bool {
        let mut means: Vec<(usize, f64)> = self
            .cells
            .iter()
            .filter(|c| c.k == k)
            .map(|c| (c.s_t, c.mean_error))
            .collect();
        means.sort_by_key(|&(s, _)| s);
        means.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    /// Fraction of seeds where the error at `k_hi` is at most the error at `k_lo`.
    pub fn win_rate(&self, k_hi: usize, k_lo: usize, s_t: usize) -> Option<f64> {
        let hi = self.cell(k_hi, s_t)?;
        let lo = self.cell(k_lo, s_t)?;
        let wins = hi.errors.iter().zip(&lo.errors).filter(|(h, l)| h <= l).count();
        Some(wins as f64 / hi.errors.len().max(1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["K", "s_t", "mean_error", "seeds"]).expect("in-memory csv");
        for c in &self.cells {
            w.write_record([
                c.k.to_string(),
                c.s_t.to_string(),
                format!("{:?}", c.mean_error),
                c.errors.len().to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_metrics(&self) -> SimMetrics {
        let mut metrics = SimMetrics::new();
        metrics.flags = self.flags.clone();
        for c in &self.cells {
            for (seed, err) in self.seeds.iter().zip(&c.errors) {
                metrics.rows.push(MetricRow {
                    protocol: "trends".into(),
                    task_id: 0,
                    method: format!("restricted_ls@s={}", c.s_t),
                    k: c.k,
                    k_b: 0,
                    params: 0,
                    loss: *err,
                    residual: None,
                    angle: None,
                    seed: *seed,
                });
            }
        }
        metrics
    }
}

/// Sweeps `K` and the held-out sample count over seeds. Each seed draws a
/// fresh domain; the last task is held out and the subspace is built from
/// the adapters of the others.
pub fn trend_curves<T: Scalar>(spec: &DomainSpec, params: &TrendParams, ridge: f64) -> Result<TrendTable> {
    if params.k_list.is_empty() || params.s_list.is_empty() || params.seeds.is_empty() {
        return Err(Error::InvalidConfig("k_list, s_list and seeds must be non-empty".into()));
    }
    if params.k_list.contains(&0) || params.s_list.contains(&0) {
        return Err(Error::InvalidConfig("K and s_t values must be positive".into()));
    }
    if spec.d < 2 {
        return Err(Error::SpecInfeasible("trend curves need at least two tasks".into()));
    }
    let k_max = *params.k_list.iter().max().expect("non-empty");
    let mut errors: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut flags = Vec::new();
    for &seed in &params.seeds {
        let spec_s = DomainSpec { seed, ..spec.clone() };
        let domain = generate_domain::<T>(&spec_s)?;
        let held = spec_s.d - 1;
        let adapters: Vec<TaskAdapter<T>> = domain.tasks[..held]
            .iter()
            .map(|t| solve_task_adapter(t, spec_s.r, ridge))
            .collect::<Result<_>>()?;
        let refs: Vec<&TaskAdapter<T>> = adapters.iter().collect();
        let sa = extract_subspace(
            site(Role::A),
            stack_role(&refs, Role::A).view(),
            KPolicy::FixedK(k_max),
            SvdMode::Exact,
            seed,
        )?;
        if sa.k_capped {
            flags.push(format!("seed {seed}: K capped at {}", sa.k_data));
        }
        let w_star = domain.w_star(held).clone();
        for &s_t in &params.s_list {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 5, s_t as u64));
            let task = sample_task(&spec_s, &w_star, s_t, &mut rng)?;
            for &k in &params.k_list {
                let kk = k.min(sa.k_data);
                let err = restricted_fit_error(&task, sa.components.slice(s![..kk, ..]))?;
                errors.entry((k, s_t)).or_default().push(err.as_f64());
            }
        }
    }
    let cells = errors
        .into_iter()
        .map(|((k, s_t), errs)| TrendCell {
            k,
            s_t,
            mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
            errors: errs,
        })
        .collect();
    Ok(TrendTable {
        cells,
        seeds: params.seeds.clone(),
        flags,
    })
}

/// Everything `simulate` needs, as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub domain: DomainSpec,
    #[serde(default)]
    pub k_policy: KPolicy,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub low_resource: Option<LowResourceParams>,
    #[serde(default)]
    pub trends: Option<TrendParams>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.k_policy.validate()?;
        self.train.validate()?;
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!("ridge {} must be non-negative", self.ridge)));
        }
        Ok(())
    }
}
