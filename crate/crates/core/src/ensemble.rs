//! Ensemble generation: base trajectory, POD of its snapshots, Gaussian
//! perturbation along the leading modes and spin-up.

use log::{info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{combine, Field2D, FieldKind};
use crate::linalg;
use crate::qg::{ModelParams, QgModel, Trajectory};

/// Eigenvalues below this fraction of the largest are treated as rank loss.
pub const POD_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PodBasis {
    /// Orthonormal anomaly modes under the trapezoidal inner product.
    pub modes: Vec<Field2D>,
    /// Anomaly covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub mean: Field2D,
}

impl PodBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Snapshot-method POD of mean-removed snapshots.
///
/// With `K` snapshots and anomalies `a_k`, the `K x K` matrix
/// `C_kl = <a_k, a_l> / K` shares its nonzero spectrum with the field-space
/// covariance, and `mode_i = sum_k v_ki a_k / sqrt(K lambda_i)` is unit-norm.
pub fn compute_pod(snapshots: &[Field2D], n_modes: usize) -> Result<PodBasis> {
    let n = snapshots.len();
    if n < 2 {
        return Err(Error::InvalidParam(format!("POD needs at least 2 snapshots, got {n}")));
    }
    if n_modes > n {
        return Err(Error::InvalidParam(format!(
            "requested {n_modes} POD modes from {n} snapshots"
        )));
    }
    for s in &snapshots[1..] {
        snapshots[0].ensure_same_grid(s)?;
    }
    let w = vec![1.0 / n as f64; n];
    let refs: Vec<&Field2D> = snapshots.iter().collect();
    let mean = combine(&w, &refs);
    let anomalies: Vec<Field2D> = snapshots.iter().map(|s| s.sub(&mean)).collect();

    let mut c = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in k..n {
            let v = anomalies[k].dot(&anomalies[l]) / n as f64;
            c[(k, l)] = v;
            c[(l, k)] = v;
        }
    }
    let (vals, vecs) = linalg::sym_eigen(&c);
    let lmax = vals.max().max(0.0);
    // anomalies at round-off level of the snapshots count as zero
    let scale2 = snapshots.iter().map(|s| s.norm_sq()).sum::<f64>() / n as f64;
    let floor = (POD_RANK_TOL * lmax).max(1e-20 * scale2);
    let aref: Vec<&Field2D> = anomalies.iter().collect();
    let mut modes = Vec::new();
    let mut eigenvalues = Vec::new();
    for i in 0..n_modes {
        let l = vals[i];
        if !(l > floor) {
            break;
        }
        let scale = 1.0 / (n as f64 * l).sqrt();
        let coeffs: Vec<f64> = vecs.column(i).iter().map(|v| v * scale).collect();
        modes.push(combine(&coeffs, &aref).with_kind(FieldKind::PotentialVorticity));
        eigenvalues.push(l);
    }
    if modes.len() < n_modes {
        warn!(
            "snapshot set has rank {} < {} requested POD modes",
            modes.len(),
            n_modes
        );
    }
    Ok(PodBasis {
        modes,
        eigenvalues,
        mean,
    })
}

/// Perturbation rule `c_ij ~ N(0, variance_factor * lambda_i / lambda_1)`
/// applied to POD modes of unit Euclidean norm over the grid nodes, the sum
/// scaled by `amplitude`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub n_pod: usize,
    pub variance_factor: f64,
    pub amplitude: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            n_pod: 50,
            variance_factor: 10.0,
            amplitude: DEFAULT_AMPLITUDE,
        }
    }
}

pub const DEFAULT_AMPLITUDE: f64 = 1.0;

/// Member `j` draws its coefficients from ChaCha8 stream `j` of `seed`, in
/// mode order, so any single member can be regenerated on its own.
pub fn generate_members(
    base: &Field2D,
    pod: &PodBasis,
    p: usize,
    seed: u64,
    rule: &PerturbationSpec,
) -> Result<Vec<Field2D>> {
    if pod.eigenvalues.first().copied().unwrap_or(0.0) <= 0.0 {
        return Err(Error::InvalidParam("leading POD eigenvalue is zero".into()));
    }
    if pod.len() < rule.n_pod {
        return Err(Error::InvalidParam(format!(
            "POD basis has {} modes, perturbation needs {}",
            pod.len(),
            rule.n_pod
        )));
    }
    for m in &pod.modes {
        base.ensure_same_grid(m)?;
    }
    let l1 = pod.eigenvalues[0];
    let sd: Vec<f64> = pod.eigenvalues[..rule.n_pod]
        .iter()
        .map(|l| (rule.variance_factor * l / l1).sqrt())
        .collect();
    Ok((0..p)
        .map(|j| {
            let c = member_coefficients(seed, j as u64, &sd);
            let mut m = base.clone().with_kind(FieldKind::PotentialVorticity);
            for (ci, mode) in c.iter().zip(&pod.modes) {
                let node_norm = mode.values.iter().map(|v| v * v).sum::<f64>().sqrt();
                m.axpy(rule.amplitude * ci / node_norm, mode);
            }
            m
        })
        .collect())
}

/// Raw coefficients `c_ij` for member `j`, before `amplitude` scaling.
pub fn member_coefficients(seed: u64, member: u64, sd: &[f64]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member);
    sd.iter()
        .map(|s| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnsembleRole {
    Training,
    Test,
}

impl EnsembleRole {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleRole::Training => "training",
            EnsembleRole::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "training" => Some(EnsembleRole::Training),
            "test" => Some(EnsembleRole::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleSet {
    pub members: Vec<Trajectory>,
    /// `dq/dt` of each member at the anchor time.
    pub initial_tendencies: Vec<Field2D>,
    pub seed: u64,
    pub params: ModelParams,
    pub role: EnsembleRole,
    /// Original indices of the members kept after divergence screening.
    pub member_ids: Vec<usize>,
}

impl EnsembleSet {
    pub fn p(&self) -> usize {
        self.members.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.members[0].times
    }

    /// Member states at output index `k`.
    pub fn states_at(&self, k: usize) -> Vec<&Field2D> {
        self.members.iter().map(|m| &m.states[k]).collect()
    }

    pub fn anchors(&self) -> Vec<Field2D> {
        self.members.iter().map(|m| m.states[0].clone()).collect()
    }

    /// Output index nearest to `t`, warning when `t` is not stored.
    pub fn time_index(&self, t: f64) -> usize {
        self.members[0].nearest_index(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::InvalidParam(format!(
                "ensemble needs at least 2 members, has {}",
                self.members.len()
            )));
        }
        if self.initial_tendencies.len() != self.members.len() || self.member_ids.len() != self.members.len() {
            return Err(Error::shape(
                format!("{} tendencies and ids", self.members.len()),
                format!("{}/{}", self.initial_tendencies.len(), self.member_ids.len()),
            ));
        }
        let times = self.times();
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParam("output times not strictly increasing".into()));
        }
        let g = self.members[0].states[0].grid;
        for m in &self.members {
            if m.times != times {
                return Err(Error::InvalidParam("members do not share output times".into()));
            }
            if m.states.iter().any(|s| s.grid != g) {
                return Err(Error::shape(format!("{}x{}", g.nx, g.ny), "mixed grids"));
            }
        }
        Ok(())
    }
}

/// Integrate each initial state for `t_spin` (discarded), re-anchor at
/// `t = 0` and record to `horizon` every `output_every`. Members that diverge
/// are dropped with a warning.
pub fn spin_up_and_record(
    model: &QgModel,
    initial: &[Field2D],
    t_spin: f64,
    horizon: f64,
    output_every: f64,
    seed: u64,
    role: EnsembleRole,
) -> Result<EnsembleSet> {
    if !(t_spin >= 0.0) {
        return Err(Error::InvalidParam(format!("t_spin must be >= 0, got {t_spin}")));
    }
    let runs: Vec<Result<(Trajectory, Field2D)>> = initial
        .par_iter()
        .map(|q0| {
            let anchor = if t_spin > 0.0 {
                model.integrate(q0, t_spin, t_spin)?.last().clone()
            } else {
                q0.clone()
            };
            let traj = model.integrate(&anchor, horizon, output_every)?;
            let tend = model.tendency(&anchor)?;
            Ok((traj, tend))
        })
        .collect();

    let mut members = Vec::new();
    let mut initial_tendencies = Vec::new();
    let mut member_ids = Vec::new();
    for (j, r) in runs.into_iter().enumerate() {
        match r {
            Ok((traj, tend)) => {
                members.push(traj);
                initial_tendencies.push(tend);
                member_ids.push(j);
            }
            Err(e @ Error::Diverged { .. }) => {
                warn!("{} member {j} excluded: {e}", role.name());
            }
            Err(e) => return Err(e),
        }
    }
    if members.len() < 2 {
        return Err(Error::InvalidParam(format!(
            "only {} {} members survived integration",
            members.len(),
            role.name()
        )));
    }
    info!("{} ensemble: {} members recorded", role.name(), members.len());
    Ok(EnsembleSet {
        members,
        initial_tendencies,
        seed,
        params: model.params().clone(),
        role,
        member_ids,
    })
}

/// Base-trajectory protocol: start from `y` plus uniform interior noise,
/// integrate for `t_establish`, then keep `n_snapshots` states every
/// `snapshot_every`. The state at `t_establish` is the base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseProtocol {
    pub noise_amplitude: f64,
    pub seed: u64,
    pub t_establish: f64,
    pub n_snapshots: usize,
    pub snapshot_every: f64,
}

impl Default for BaseProtocol {
    fn default() -> Self {
        BaseProtocol {
            noise_amplitude: 1e-3,
            seed: 1,
            t_establish: 2.0,
            n_snapshots: 200,
            snapshot_every: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaseRun {
    pub base: Field2D,
    pub snapshots: Trajectory,
}

pub fn run_base_protocol(model: &QgModel, proto: &BaseProtocol) -> Result<BaseRun> {
    if proto.n_snapshots < 2 {
        return Err(Error::InvalidParam("base protocol needs at least 2 snapshots".into()));
    }
    let mut q = model.rest_state();
    let g = model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(proto.seed);
    for j in 1..g.ny - 1 {
        for i in 1..g.nx - 1 {
            let u: f64 = rand::Rng::random_range(&mut rng, -1.0..1.0);
            q.values[g.idx(i, j)] += proto.noise_amplitude * u;
        }
    }
    let base = if proto.t_establish > 0.0 {
        model
            .integrate(&q, proto.t_establish, proto.t_establish)?
            .last()
            .clone()
    } else {
        q
    };
    let span = proto.snapshot_every * (proto.n_snapshots - 1) as f64;
    let snapshots = model.integrate(&base, span, proto.snapshot_every)?;
    Ok(BaseRun { base, snapshots })
}
