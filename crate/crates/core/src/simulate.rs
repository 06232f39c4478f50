//! Euler–Maruyama for the interacting particle system and its parameter
//! tangents, an exact sampler for the Gaussian oracle, and grid I/O.
//!
//! Noise addressing: particle `i` owns stream `i` of the run seed; counter 0
//! draws its initial state and counter `1 + j` drives fine step `j`
//! (observation step `k` in exact mode). Every mode therefore sees the same
//! noise for the same particle, independent of scheduling.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::TangentMeasure;
use crate::model::{MeasureSnapshot, ModelSpec, ThetaPair};
use crate::numerics::all_finite;
use crate::oracle::{ou_moments, MeanFlow};
use crate::rng::{derive_seed, NoiseStream};

/// Seed tag of the law cloud in two-stage mode.
const LAW_CLOUD_TAG: u64 = 0x4C41_5743;

/// How observation data are generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimMode {
    /// The `N`-particle system interacting through its own empirical measure.
    Particles,
    /// A separate cloud of `law_particles ≥ 10 N` particles is evolved
    /// alongside and supplies the measure; the `N` observed particles are
    /// conditionally independent given it.
    TwoStage { law_particles: usize },
    /// Independent copies of the mean-field limit sampled from the exact
    /// Gaussian transitions of the oracle model (no discretisation error).
    ExactOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub substeps: usize,
    pub seed: u64,
    pub theta: ThetaPair,
    pub mode: SimMode,
    /// Permit models declaring a vanishing diffusion (test stubs only).
    #[serde(default)]
    pub allow_degenerate: bool,
}

impl SimConfig {
    pub fn new(n_particles: usize, n_steps: usize, horizon: f64, substeps: usize, seed: u64, theta: ThetaPair) -> Self {
        SimConfig { n_particles, n_steps, horizon, substeps, seed, theta, mode: SimMode::Particles, allow_degenerate: false }
    }

    pub fn with_mode(mut self, mode: SimMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn delta(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn fine_step(&self) -> f64 {
        self.delta() / self.substeps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.n_steps == 0 || self.substeps == 0 {
            return Err(Error::domain("n_particles, n_steps and substeps must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain(format!("horizon {} must be positive and finite", self.horizon)));
        }
        if !(self.fine_step() > 0.0) {
            return Err(Error::domain("fine step underflows to zero"));
        }
        if let SimMode::TwoStage { law_particles } = self.mode {
            if law_particles < 10 * self.n_particles {
                return Err(Error::domain(format!(
                    "law cloud of {law_particles} particles is smaller than 10 N = {}",
                    10 * self.n_particles
                )));
            }
        }
        self.theta.check()
    }
}

/// Where a grid came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimProvenance {
    pub seed: u64,
    pub mode: String,
    pub substeps: usize,
    pub warnings: Vec<String>,
}

/// Observed states `X^i_{t_k}` for `N` particles at `n + 1` times.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryGrid {
    n_particles: usize,
    n_steps: usize,
    dim: usize,
    horizon: f64,
    /// Row-major `[i][k][c]`.
    states: Vec<f64>,
    times: Vec<f64>,
    pub provenance: SimProvenance,
}

impl TrajectoryGrid {
    pub fn from_states(n_particles: usize, n_steps: usize, dim: usize, horizon: f64, states: Vec<f64>) -> Result<Self> {
        if n_particles == 0 || n_steps == 0 || dim == 0 || !(horizon > 0.0) {
            return Err(Error::domain("grid sizes and horizon must be positive"));
        }
        if states.len() != n_particles * (n_steps + 1) * dim {
            return Err(Error::Misaligned(format!(
                "{} states for a {n_particles} x {} x {dim} grid",
                states.len(),
                n_steps + 1
            )));
        }
        if !all_finite(&states) {
            return Err(Error::Propagation { particle: None, step: None });
        }
        let times = (0..=n_steps).map(|k| k as f64 * horizon / n_steps as f64).collect();
        Ok(TrajectoryGrid { n_particles, n_steps, dim, horizon, states, times, provenance: SimProvenance::default() })
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn delta(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let o = (i * (self.n_steps + 1) + k) * self.dim;
        &self.states[o..o + self.dim]
    }

    /// Equal-weight empirical measure of all particles at observation `k`.
    pub fn snapshot(&self, k: usize) -> MeasureSnapshot {
        let mut pts = Vec::with_capacity(self.n_particles * self.dim);
        for i in 0..self.n_particles {
            pts.extend_from_slice(self.state(i, k));
        }
        MeasureSnapshot::uniform(self.dim, pts).expect("grid layout")
    }

    /// Sub-grid of the first `n` particles.
    pub fn take_particles(&self, n: usize) -> Result<TrajectoryGrid> {
        if n == 0 || n > self.n_particles {
            return Err(Error::IndexOutOfRange { index: n, max: self.n_particles });
        }
        let len = n * (self.n_steps + 1) * self.dim;
        let mut g = TrajectoryGrid::from_states(n, self.n_steps, self.dim, self.horizon, self.states[..len].to_vec())?;
        g.provenance = self.provenance.clone();
        Ok(g)
    }

    /// CSV with columns `particle,k,t,x_1..x_d`; floats in shortest
    /// round-trip form.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::from("particle,k,t");
        for c in 1..=self.dim {
            header.push_str(&format!(",x_{c}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.n_particles {
            for k in 0..=self.n_steps {
                write!(w, "{i},{k},{:?}", self.times[k])?;
                for v in self.state(i, k) {
                    write!(w, ",{v:?}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Inverse of [`TrajectoryGrid::write_csv`]; the horizon is read from the
    /// last time column.
    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty grid CSV".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..3] != ["particle", "k", "t"] {
            return Err(Error::Format(format!("unexpected grid CSV header `{header}`")));
        }
        let dim = cols.len() - 3;
        let mut rows: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 3 {
                return Err(Error::Format(format!("line {}: expected {} fields", lineno + 2, dim + 3)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)));
            let i = f[0].parse::<usize>().map_err(|e| Error::Format(e.to_string()))?;
            let k = f[1].parse::<usize>().map_err(|e| Error::Format(e.to_string()))?;
            let xs = f[3..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
            rows.push((i, k, parse(f[2])?, xs));
        }
        let n_steps = rows.iter().map(|r| r.1).max().ok_or_else(|| Error::Format("no rows".into()))?;
        let n_particles = rows.iter().map(|r| r.0).max().unwrap() + 1;
        if rows.len() != n_particles * (n_steps + 1) {
            return Err(Error::Format("grid CSV is not a complete particle x time table".into()));
        }
        let horizon = rows.iter().find(|r| r.1 == n_steps).unwrap().2;
        let mut states = vec![f64::NAN; rows.len() * dim];
        for (i, k, _, xs) in rows {
            let o = (i * (n_steps + 1) + k) * dim;
            states[o..o + dim].copy_from_slice(&xs);
        }
        TrajectoryGrid::from_states(n_particles, n_steps, dim, horizon, states)
    }

    /// Binary block: magic `MKVG`, version 1 (u32), `N`, `n`, `d` (u64),
    /// `T` (f64), then the states; all little-endian.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"MKVG")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in [self.n_particles, self.n_steps, self.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.horizon.to_le_bytes())?;
        for v in &self.states {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MKVG" {
            return Err(Error::Format("bad magic, not an MKVG grid".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != 1 {
            return Err(Error::Format(format!("unsupported grid version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_particles = next_u64(&mut r)? as usize;
        let n_steps = next_u64(&mut r)? as usize;
        let dim = next_u64(&mut r)? as usize;
        let horizon = f64::from_bits(next_u64(&mut r)?);
        let len = n_particles
            .checked_mul(n_steps + 1)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Format("grid size overflow".into()))?;
        let mut states = Vec::with_capacity(len);
        for _ in 0..len {
            states.push(f64::from_bits(next_u64(&mut r)?));
        }
        TrajectoryGrid::from_states(n_particles, n_steps, dim, horizon, states)
    }
}

/// When tangent processes are reset to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TangentRestart {
    /// Started at 0 at time 0 only.
    Global,
    /// Re-zeroed at observation time `k`; rows before `k` are the global ones.
    At(usize),
    /// Re-zeroed at every observation time; row `k + 1` then holds the
    /// tangent accumulated over `[t_k, t_{k+1}]`.
    EveryBlock,
}

/// Pathwise derivatives `∂_{θ1}X^i_{t_k}`, `∂_{θ2}X^i_{t_k}` aligned with a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentCloud {
    n_particles: usize,
    n_steps: usize,
    dim: usize,
    d_theta1: Vec<f64>,
    d_theta2: Vec<f64>,
    pub restart: TangentRestart,
}

impl TangentCloud {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn offset(&self, i: usize, k: usize) -> usize {
        (i * (self.n_steps + 1) + k) * self.dim
    }

    pub fn d_theta1(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.d_theta1[o..o + self.dim]
    }

    pub fn d_theta2(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.d_theta2[o..o + self.dim]
    }

    /// Velocities of all particles at observation `k`, row-major.
    pub fn velocities_theta1(&self, k: usize) -> Vec<f64> {
        (0..self.n_particles).flat_map(|i| self.d_theta1(i, k).to_vec()).collect()
    }

    pub fn velocities_theta2(&self, k: usize) -> Vec<f64> {
        (0..self.n_particles).flat_map(|i| self.d_theta2(i, k).to_vec()).collect()
    }

    pub fn is_aligned_with(&self, grid: &TrajectoryGrid) -> bool {
        self.n_particles == grid.n_particles && self.n_steps == grid.n_steps && self.dim == grid.dim
    }
}

/// One Euler step `x + b dt + a √dt ξ`.
pub fn euler_step(
    model: &dyn ModelSpec,
    x: &[f64],
    mu: &MeasureSnapshot,
    theta: &ThetaPair,
    dt: f64,
    noise: &[f64],
) -> Result<DVector<f64>> {
    let b = model.drift(theta.theta1, x, mu);
    let a = model.diffusion(theta.theta2, x);
    let out = DVector::from_column_slice(x) + b * dt + a * DVector::from_column_slice(noise) * dt.sqrt();
    if !all_finite(out.as_slice()) {
        return Err(Error::Propagation { particle: None, step: None });
    }
    Ok(out)
}

/// Euler simulation of the observation grid (no tangents).
pub fn simulate_particles(model: &dyn ModelSpec, cfg: &SimConfig) -> Result<TrajectoryGrid> {
    if cfg.mode == SimMode::ExactOracle {
        return simulate_exact_oracle(model, cfg);
    }
    Ok(run(model, cfg, None)?.0)
}

/// Euler simulation of the grid together with global tangents.
pub fn simulate_with_tangents(model: &dyn ModelSpec, cfg: &SimConfig) -> Result<(TrajectoryGrid, TangentCloud)> {
    simulate_with_tangents_restarted(model, cfg, TangentRestart::Global)
}

pub fn simulate_with_tangents_restarted(
    model: &dyn ModelSpec,
    cfg: &SimConfig,
    restart: TangentRestart,
) -> Result<(TrajectoryGrid, TangentCloud)> {
    if cfg.mode == SimMode::ExactOracle {
        return Err(Error::UnsupportedModel(
            "tangent processes need an Euler mode (particles or two-stage)".into(),
        ));
    }
    if let TangentRestart::At(k) = restart {
        if k > cfg.n_steps {
            return Err(Error::IndexOutOfRange { index: k, max: cfg.n_steps });
        }
    }
    let (grid, tangents) = run(model, cfg, Some(restart))?;
    Ok((grid, tangents.expect("tangents requested")))
}

/// Tangents of the same run re-zeroed at observation `at_step`.
///
/// The run is replayed from `cfg` (same seed, same noise), so `cloud` must
/// come from `cfg`.
pub fn restart_tangents(
    model: &dyn ModelSpec,
    cfg: &SimConfig,
    cloud: &TangentCloud,
    at_step: usize,
) -> Result<TangentCloud> {
    if at_step > cloud.n_steps {
        return Err(Error::IndexOutOfRange { index: at_step, max: cloud.n_steps });
    }
    if cloud.n_particles != cfg.n_particles || cloud.n_steps != cfg.n_steps || cloud.dim != model.dim() {
        return Err(Error::Misaligned("tangent cloud does not belong to this configuration".into()));
    }
    if at_step == 0 && cloud.restart == TangentRestart::Global {
        return Ok(cloud.clone());
    }
    Ok(simulate_with_tangents_restarted(model, cfg, TangentRestart::At(at_step))?.1)
}

/// Particle states (and optionally tangents) evolving together.
struct System {
    x: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    streams: Vec<NoiseStream>,
}

impl System {
    fn new(model: &dyn ModelSpec, n: usize, seed: u64, tangents: bool) -> Self {
        let d = model.dim();
        let mut x = vec![0.0; n * d];
        let mut streams: Vec<NoiseStream> = (0..n).map(|i| NoiseStream::new(seed, i as u64, d)).collect();
        let mut noise = vec![0.0; d];
        for (i, s) in streams.iter_mut().enumerate() {
            s.fill(0, &mut noise);
            model.initial_law().sample_into(&noise, &mut x[i * d..(i + 1) * d]);
        }
        let t = if tangents { n * d } else { 0 };
        System { x, d1: vec![0.0; t], d2: vec![0.0; t], streams }
    }

    fn reset_tangents(&mut self) {
        self.d1.iter_mut().for_each(|v| *v = 0.0);
        self.d2.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Frozen state of the measure-generating system at the start of a step.
struct MeasureView {
    mu: MeasureSnapshot,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl MeasureView {
    fn of(sys: &System, dim: usize) -> Self {
        MeasureView {
            mu: MeasureSnapshot::uniform(dim, sys.x.clone()).expect("system layout"),
            d1: sys.d1.clone(),
            d2: sys.d2.clone(),
        }
    }
}

fn step_system(
    model: &dyn ModelSpec,
    theta: &ThetaPair,
    sys: &mut System,
    view: &MeasureView,
    dt: f64,
    counter: u64,
    tangents: bool,
) -> Result<()> {
    let d = model.dim();
    let sq = dt.sqrt();
    let tm = if tangents {
        Some((TangentMeasure::new(&view.mu, &view.d1)?, TangentMeasure::new(&view.mu, &view.d2)?))
    } else {
        None
    };
    let tm = tm.as_ref();
    let d1_chunks: Vec<&mut [f64]> = if tangents { sys.d1.chunks_mut(d).collect() } else { Vec::new() };
    let d2_chunks: Vec<&mut [f64]> = if tangents { sys.d2.chunks_mut(d).collect() } else { Vec::new() };
    let mut d1_iter = d1_chunks.into_iter().map(Some).chain(std::iter::repeat_with(|| None));
    let mut d2_iter = d2_chunks.into_iter().map(Some).chain(std::iter::repeat_with(|| None));
    let work: Vec<_> = sys
        .x
        .chunks_mut(d)
        .zip(sys.streams.iter_mut())
        .map(|(x, s)| (x, s, d1_iter.next().unwrap(), d2_iter.next().unwrap()))
        .collect();

    work.into_par_iter().enumerate().try_for_each(|(i, (x, stream, d1, d2))| -> Result<()> {
        let mut xi = vec![0.0; d];
        stream.fill(counter, &mut xi);
        let noise = DVector::from_column_slice(&xi);
        let b = model.drift(theta.theta1, x, &view.mu);
        let a = model.diffusion(theta.theta2, x);
        let next = DVector::from_column_slice(x) + &b * dt + &a * &noise * sq;

        if let (Some((t1, t2)), Some(d1), Some(d2)) = (tm, d1, d2) {
            let v1 = DVector::from_column_slice(d1);
            let v2 = DVector::from_column_slice(d2);
            let g = model.grad_x_drift(theta.theta1, x, &view.mu);
            let db = model.d_drift_dtheta1(theta.theta1, x, &view.mu);
            let m1 = model.lfd_tangent_integral(theta.theta1, x, &view.mu, t1);
            let m2 = model.lfd_tangent_integral(theta.theta1, x, &view.mu, t2);
            let da = model.d_diffusion_dtheta2(theta.theta2, x);
            let mut stoch1 = DVector::zeros(d);
            let mut stoch2: DVector<f64> = &da * &noise;
            for r in 0..d {
                let jr: DMatrix<f64> = model.grad_x_diffusion_col(theta.theta2, x, r);
                stoch1 += &jr * &v1 * xi[r];
                stoch2 += &jr * &v2 * xi[r];
            }
            let n1 = &v1 + (db + &g * &v1 + m1) * dt + stoch1 * sq;
            let n2 = &v2 + (&g * &v2 + m2) * dt + stoch2 * sq;
            if !all_finite(n1.as_slice()) || !all_finite(n2.as_slice()) {
                return Err(Error::Propagation { particle: Some(i), step: Some(counter as usize - 1) });
            }
            d1.copy_from_slice(n1.as_slice());
            d2.copy_from_slice(n2.as_slice());
        }
        if !all_finite(next.as_slice()) {
            return Err(Error::Propagation { particle: Some(i), step: Some(counter as usize - 1) });
        }
        x.copy_from_slice(next.as_slice());
        Ok(())
    })
}

fn run(
    model: &dyn ModelSpec,
    cfg: &SimConfig,
    restart: Option<TangentRestart>,
) -> Result<(TrajectoryGrid, Option<TangentCloud>)> {
    cfg.validate()?;
    let traits = model.traits();
    if traits.degenerate && !cfg.allow_degenerate {
        return Err(Error::domain(format!(
            "model `{}` has a degenerate diffusion; set allow_degenerate for test stubs",
            model.name()
        )));
    }
    let d = model.dim();
    if model.initial_law().dim() != d {
        return Err(Error::Structural { function: "initial_law", detail: "dimension differs from the model".into() });
    }
    let tangents = restart.is_some();
    let (n, steps, m) = (cfg.n_particles, cfg.n_steps, cfg.substeps);
    let h = cfg.fine_step();

    let mut warnings = Vec::new();
    let mut obs = System::new(model, n, cfg.seed, tangents);
    let mut law = match cfg.mode {
        SimMode::TwoStage { law_particles } => {
            Some(System::new(model, law_particles, derive_seed(cfg.seed, LAW_CLOUD_TAG), tangents))
        }
        _ => None,
    };
    if law.is_none() && n < 2 && traits.measure_dependent {
        warnings.push("N < 2 with a measure-dependent model: the empirical measure is the particle itself".into());
    }

    let row = (steps + 1) * d;
    let mut states = vec![0.0; n * row];
    let mut t1 = vec![0.0; if tangents { n * row } else { 0 }];
    let mut t2 = t1.clone();
    let store = |buf: &mut Vec<f64>, src: &[f64], k: usize| {
        for i in 0..n {
            buf[i * row + k * d..i * row + (k + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
    };
    store(&mut states, &obs.x, 0);

    for k in 0..steps {
        let reset = match restart {
            Some(TangentRestart::EveryBlock) => true,
            Some(TangentRestart::At(r)) => r == k,
            _ => false,
        };
        if reset {
            obs.reset_tangents();
            if let Some(l) = law.as_mut() {
                l.reset_tangents();
            }
            if restart == Some(TangentRestart::At(k)) {
                store(&mut t1, &obs.d1, k);
                store(&mut t2, &obs.d2, k);
            }
        }
        for s in 0..m {
            let counter = 1 + (k * m + s) as u64;
            match law.as_mut() {
                Some(l) => {
                    let view = MeasureView::of(l, d);
                    step_system(model, &cfg.theta, l, &view, h, counter, tangents)?;
                    step_system(model, &cfg.theta, &mut obs, &view, h, counter, tangents)?;
                }
                None => {
                    let view = MeasureView::of(&obs, d);
                    step_system(model, &cfg.theta, &mut obs, &view, h, counter, tangents)?;
                }
            }
        }
        store(&mut states, &obs.x, k + 1);
        if tangents {
            store(&mut t1, &obs.d1, k + 1);
            store(&mut t2, &obs.d2, k + 1);
        }
    }
    if let Some(TangentRestart::At(r)) = restart {
        if r == steps {
            // re-zeroed at the final observation
            for i in 0..n {
                t1[i * row + r * d..i * row + (r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                t2[i * row + r * d..i * row + (r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    let mut grid = TrajectoryGrid::from_states(n, steps, d, cfg.horizon, states)?;
    grid.provenance = SimProvenance {
        seed: cfg.seed,
        mode: mode_label(&cfg.mode),
        substeps: m,
        warnings,
    };
    let cloud = restart.map(|restart| TangentCloud {
        n_particles: n,
        n_steps: steps,
        dim: d,
        d_theta1: t1,
        d_theta2: t2,
        restart,
    });
    Ok((grid, cloud))
}

fn mode_label(mode: &SimMode) -> String {
    match mode {
        SimMode::Particles => "particles".into(),
        SimMode::TwoStage { law_particles } => format!("two_stage(law_particles={law_particles})"),
        SimMode::ExactOracle => "exact_oracle".into(),
    }
}

/// Independent mean-field copies from the exact oracle transitions.
fn simulate_exact_oracle(model: &dyn ModelSpec, cfg: &SimConfig) -> Result<TrajectoryGrid> {
    cfg.validate()?;
    let kappa = model.traits().oracle_kappa.ok_or_else(|| {
        Error::UnsupportedModel(format!("exact sampling needs the oracle model, got `{}`", model.name()))
    })?;
    let d = model.dim();
    let law = model.initial_law();
    let (n, steps) = (cfg.n_particles, cfg.n_steps);
    let delta = cfg.delta();
    let (t1, t2) = (cfg.theta.theta1, cfg.theta.theta2);
    let flows: Vec<MeanFlow> = law.mean().iter().map(|m0| MeanFlow { m0: *m0, kappa, theta1: t1 }).collect();
    let decay = (-t1 * delta).exp();
    let (_, var) = ou_moments(t1, t2, kappa, 0.0, 0.0, 0.0, delta);
    let sd = var.sqrt();
    let row = (steps + 1) * d;
    let mut states = vec![0.0; n * row];
    states.par_chunks_mut(row).enumerate().for_each(|(i, out)| {
        let mut stream = NoiseStream::new(cfg.seed, i as u64, d);
        let mut noise = vec![0.0; d];
        stream.fill(0, &mut noise);
        law.sample_into(&noise, &mut out[..d]);
        for k in 0..steps {
            stream.fill(1 + k as u64, &mut noise);
            let (t, tn) = (k as f64 * delta, (k + 1) as f64 * delta);
            for c in 0..d {
                let prev = out[k * d + c];
                out[(k + 1) * d + c] = flows[c].value(tn) + decay * (prev - flows[c].value(t)) + sd * noise[c];
            }
        }
    });
    let mut grid = TrajectoryGrid::from_states(n, steps, d, cfg.horizon, states)?;
    grid.provenance = SimProvenance { seed: cfg.seed, mode: mode_label(&cfg.mode), substeps: 1, warnings: vec![] };
    Ok(grid)
}
