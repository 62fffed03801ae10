//! Advection-diffusion simulator standing in for reanalysis data.
//!
//! Each upper-air channel is a periodic 2-D field moved by a constant
//! velocity (semi-Lagrangian, bilinear), smoothed by explicit diffusion, and
//! relaxed toward a slowly varying random low-wavenumber pattern. Surface
//! channels observe level-weighted averages of upper-air groups through a
//! `tanh` and add a fast, independently evolving field of their own.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::catalog::{SURFACE_VARIABLES, UPPER_AIR_GROUPS};
use crate::model::{VariableCatalog, VariableGroup};

/// Per-group dynamics. Velocities are in grid cells per unit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDynamics {
    pub velocity: [f64; 2],
    pub diffusion: f64,
    /// Amplitude of the relaxation target; 0 disables forcing and the
    /// relaxation that comes with it.
    pub forcing: f64,
    /// Relaxation and forcing-decorrelation time.
    pub time_scale: f64,
}

/// Surface observations of the upper-air state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    /// Upper-air groups averaged into each surface channel.
    pub sources: Vec<Vec<String>>,
    /// Scale applied to the level average before `tanh`.
    pub gain: f64,
    /// Weight of the independent surface field.
    pub noise: f64,
    pub dynamics: GroupDynamics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFieldSpec {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub dt: f64,
    /// Velocity multiplier grows linearly from 1 at the first level to
    /// `1 + level_shear` at the last.
    pub level_shear: f64,
    /// Steps simulated and discarded before the first recorded frame.
    pub burn_in: usize,
    /// Upper-air groups in catalog order.
    pub groups: Vec<(String, GroupDynamics)>,
    pub surface: Option<SurfaceSpec>,
    pub seed: u64,
}

const MAX_WAVENUMBER: i32 = 3;

impl SyntheticFieldSpec {
    /// Five upper-air groups with distinct drifts and a five-channel
    /// surface bundle.
    pub fn desk(height: usize, width: usize, levels: usize, seed: u64) -> Self {
        let velocities = [[0.6, 0.2], [0.4, -0.3], [0.7, 0.1], [-0.5, 0.4], [0.3, 0.5]];
        let groups = UPPER_AIR_GROUPS
            .iter()
            .zip(velocities)
            .map(|(name, velocity)| {
                (
                    name.to_string(),
                    GroupDynamics {
                        velocity,
                        diffusion: 0.05,
                        forcing: 1.0,
                        time_scale: 20.0,
                    },
                )
            })
            .collect();
        let src = |g: &[&str]| g.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        SyntheticFieldSpec {
            height,
            width,
            levels,
            dt: 1.0,
            level_shear: 0.25,
            burn_in: 50,
            groups,
            surface: Some(SurfaceSpec {
                // u10, v10, t2m, msl, sp
                sources: vec![
                    src(&["u"]),
                    src(&["v"]),
                    src(&["t"]),
                    src(&["z"]),
                    src(&["z", "q"]),
                ],
                gain: 1.5,
                noise: 0.3,
                dynamics: GroupDynamics {
                    velocity: [0.0, 0.0],
                    diffusion: 0.05,
                    forcing: 1.0,
                    time_scale: 10.0,
                },
            }),
            seed,
        }
    }

    /// Catalog of the generated channels: the upper-air groups followed by
    /// the surface bundle `sv`.
    pub fn catalog(&self) -> Result<VariableCatalog> {
        let mut groups: Vec<VariableGroup> = self
            .groups
            .iter()
            .map(|(n, _)| VariableGroup::upper_air(n, self.levels))
            .collect();
        if let Some(s) = &self.surface {
            groups.push(VariableGroup::surface("sv", s.sources.len()));
        }
        VariableCatalog::new(groups)
    }

    fn dynamics(&self) -> impl Iterator<Item = &GroupDynamics> {
        self.groups
            .iter()
            .map(|(_, d)| d)
            .chain(self.surface.iter().map(|s| &s.dynamics))
    }

    fn shear(&self, level: usize) -> f64 {
        if self.levels <= 1 {
            1.0
        } else {
            1.0 + self.level_shear * level as f64 / (self.levels - 1) as f64
        }
    }

    /// Rejects grids, time steps and coefficients the explicit scheme cannot
    /// take: `max |u| dt <= 1` per axis and `kappa dt <= 1/4`.
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 || self.levels == 0 || self.groups.is_empty() {
            return Err(Error::Config("synthetic grid or catalog too small".into()));
        }
        if !(self.dt > 0.0) || self.level_shear < 0.0 {
            return Err(Error::Config("dt must be positive and shear non-negative".into()));
        }
        let max_shear = self.shear(self.levels.saturating_sub(1)).max(1.0);
        for d in self.dynamics() {
            if !(d.time_scale > 0.0) || d.forcing < 0.0 || d.diffusion < 0.0 {
                return Err(Error::Config(format!("invalid dynamics {d:?}")));
            }
            let courant = d.velocity.iter().map(|v| v.abs()).fold(0.0, f64::max) * max_shear * self.dt;
            if courant > 1.0 {
                return Err(Error::Cfl(format!(
                    "advective Courant number {courant:.3} exceeds 1"
                )));
            }
            if d.diffusion * self.dt > 0.25 {
                return Err(Error::Cfl(format!(
                    "diffusion number {:.3} exceeds 0.25",
                    d.diffusion * self.dt
                )));
            }
            if d.forcing > 0.0 && self.dt > d.time_scale {
                return Err(Error::Cfl(format!(
                    "relaxation step dt/tau = {:.3} exceeds 1",
                    self.dt / d.time_scale
                )));
            }
        }
        if let Some(s) = &self.surface {
            if s.sources.is_empty() {
                return Err(Error::Config("surface bundle has no channels".into()));
            }
            if s.sources.len() != SURFACE_VARIABLES.len() {
                return Err(Error::Config(format!(
                    "surface bundle must have {} channels",
                    SURFACE_VARIABLES.len()
                )));
            }
            for g in s.sources.iter().flatten() {
                if !self.groups.iter().any(|(n, _)| n == g) {
                    return Err(Error::UnknownGroup(g.clone()));
                }
            }
            if s.sources.iter().any(Vec::is_empty) {
                return Err(Error::Config("surface channel without source".into()));
            }
        }
        Ok(())
    }
}

/// Sum of random low-wavenumber Fourier modes with coefficients evolving as
/// an AR(1) process.
#[derive(Debug, Clone)]
struct Pattern {
    coeffs: Vec<[f64; 2]>,
}

#[derive(Debug)]
struct Basis {
    /// `[mode][cell]` cos and sin tables.
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
    /// Amplitude envelope per mode, normalised to unit total variance.
    scale: Vec<f64>,
    /// Phase advance per unit shift along (x, y), per mode.
    phase_rate: Vec<[f64; 2]>,
}

impl Basis {
    fn new(h: usize, w: usize) -> Self {
        let mut cos = Vec::new();
        let mut sin = Vec::new();
        let mut scale = Vec::new();
        let mut phase_rate = Vec::new();
        for ky in 0..=MAX_WAVENUMBER {
            for kx in -MAX_WAVENUMBER..=MAX_WAVENUMBER {
                if ky == 0 && kx <= 0 {
                    continue;
                }
                let mut c = Vec::with_capacity(h * w);
                let mut s = Vec::with_capacity(h * w);
                for y in 0..h {
                    for x in 0..w {
                        let phase = TAU * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        c.push(phase.cos());
                        s.push(phase.sin());
                    }
                }
                cos.push(c);
                sin.push(s);
                scale.push(1.0 / (1.0 + (kx * kx + ky * ky) as f64));
                phase_rate.push([TAU * kx as f64 / w as f64, TAU * ky as f64 / h as f64]);
            }
        }
        // each mode contributes scale² (a² + b²)/2 = scale² in expectation
        let total: f64 = scale.iter().map(|s| s * s).sum();
        let norm = total.sqrt();
        scale.iter_mut().for_each(|s| *s /= norm);
        Basis {
            cos,
            sin,
            scale,
            phase_rate,
        }
    }

    fn modes(&self) -> usize {
        self.scale.len()
    }

    fn render(&self, p: &Pattern, amplitude: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (m, [a, b]) in p.coeffs.iter().enumerate() {
            let (a, b) = (a * self.scale[m] * amplitude, b * self.scale[m] * amplitude);
            for ((o, c), s) in out.iter_mut().zip(&self.cos[m]).zip(&self.sin[m]) {
                *o += a * c + b * s;
            }
        }
    }
}

impl Pattern {
    fn random<R: Rng>(rng: &mut R, modes: usize) -> Self {
        Pattern {
            coeffs: (0..modes)
                .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
                .collect(),
        }
    }

    /// Translate the rendered pattern by `shift = [dx, dy]` cells.
    fn drift(&mut self, basis: &Basis, shift: [f64; 2]) {
        for (c, [rx, ry]) in self.coeffs.iter_mut().zip(&basis.phase_rate) {
            let d = rx * shift[0] + ry * shift[1];
            let (sn, cs) = d.sin_cos();
            let [a, b] = *c;
            *c = [a * cs - b * sn, a * sn + b * cs];
        }
    }

    fn evolve<R: Rng>(&mut self, rng: &mut R, rho: f64) {
        let kick = (1.0 - rho * rho).sqrt();
        for c in &mut self.coeffs {
            for v in c.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v = rho * *v + kick * e;
            }
        }
    }
}

/// Semi-Lagrangian advection on a periodic grid: `out(y, x) = f(y - v dt,
/// x - u dt)` with bilinear interpolation.
pub fn advect(field: &[f64], h: usize, w: usize, shift: [f64; 2], out: &mut [f64]) {
    let [u, v] = shift;
    let split = |d: f64, n: usize| {
        let fl = d.floor();
        let frac = d - fl;
        let base = (fl as i64).rem_euclid(n as i64) as usize;
        (base, frac)
    };
    // departure point offset is the same for every cell
    let (bx, fx) = split(-u, w);
    let (by, fy) = split(-v, h);
    for y in 0..h {
        let y0 = (y + by) % h;
        let y1 = (y0 + 1) % h;
        for x in 0..w {
            let x0 = (x + bx) % w;
            let x1 = (x0 + 1) % w;
            let top = field[y0 * w + x0] * (1.0 - fx) + field[y0 * w + x1] * fx;
            let bot = field[y1 * w + x0] * (1.0 - fx) + field[y1 * w + x1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// `f += kappa dt ∇² f` with the periodic five-point Laplacian.
pub fn diffuse(field: &mut [f64], h: usize, w: usize, kd: f64, scratch: &mut [f64]) {
    if kd == 0.0 {
        return;
    }
    scratch.copy_from_slice(field);
    for y in 0..h {
        let (up, down) = ((y + h - 1) % h, (y + 1) % h);
        for x in 0..w {
            let (left, right) = ((x + w - 1) % w, (x + 1) % w);
            let c = scratch[y * w + x];
            let lap =
                scratch[up * w + x] + scratch[down * w + x] + scratch[y * w + left] + scratch[y * w + right]
                    - 4.0 * c;
            field[y * w + x] = c + kd * lap;
        }
    }
}

/// One evolving scalar field with its forcing pattern.
#[derive(Debug)]
struct Channel {
    field: Vec<f64>,
    forcing: Pattern,
    velocity: [f64; 2],
    dynamics: GroupDynamics,
}

/// A generated trajectory: `frames` is `[T, H, W, C]` in f32, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub catalog: VariableCatalog,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub data: Vec<f32>,
}

/// Simulate `frames` recorded frames.
pub fn generate(spec: &SyntheticFieldSpec, frames: usize) -> Result<Trajectory> {
    spec.validate()?;
    let catalog = spec.catalog()?;
    let (h, w) = (spec.height, spec.width);
    let cells = h * w;
    let basis = Basis::new(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let new_channel = |velocity: [f64; 2], d: &GroupDynamics, rng: &mut ChaCha8Rng| {
        let forcing = Pattern::random(rng, basis.modes());
        let start = Pattern::random(rng, basis.modes());
        let mut field = vec![0.0; cells];
        basis.render(&start, d.forcing.max(1e-3), &mut field);
        Channel {
            field,
            forcing,
            velocity,
            dynamics: d.clone(),
        }
    };
    let mut upper: Vec<Channel> = Vec::new();
    for (_, d) in &spec.groups {
        for l in 0..spec.levels {
            let s = spec.shear(l);
            upper.push(new_channel([d.velocity[0] * s, d.velocity[1] * s], d, &mut rng));
        }
    }
    let mut surface: Vec<Channel> = Vec::new();
    if let Some(sv) = &spec.surface {
        for _ in &sv.sources {
            surface.push(new_channel(sv.dynamics.velocity, &sv.dynamics, &mut rng));
        }
    }
    let source_index: Vec<Vec<usize>> = spec
        .surface
        .iter()
        .flat_map(|sv| sv.sources.iter())
        .map(|srcs| {
            srcs.iter()
                .map(|g| spec.groups.iter().position(|(n, _)| n == g).expect("validated"))
                .collect()
        })
        .collect();
    // lower levels (later in the stack) weigh more
    let level_w: Vec<f64> = {
        let raw: Vec<f64> = (1..=spec.levels).map(|l| l as f64).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    };

    let channels = catalog.channels();
    let mut data = Vec::with_capacity(frames * cells * channels);
    let mut scratch = vec![0.0; cells];
    let mut target = vec![0.0; cells];
    let mut frame = vec![0.0f64; cells * channels];
    let step = |ch: &mut Channel, rng: &mut ChaCha8Rng, scratch: &mut Vec<f64>, target: &mut Vec<f64>| {
        let d = &ch.dynamics;
        let shift = [ch.velocity[0] * spec.dt, ch.velocity[1] * spec.dt];
        if shift != [0.0, 0.0] {
            advect(&ch.field, h, w, shift, scratch);
            ch.field.copy_from_slice(scratch);
        }
        diffuse(&mut ch.field, h, w, d.diffusion * spec.dt, scratch);
        if d.forcing > 0.0 {
            ch.forcing.drift(&basis, shift);
            ch.forcing.evolve(rng, (-spec.dt / d.time_scale).exp());
            basis.render(&ch.forcing, d.forcing, target);
            let r = spec.dt / d.time_scale;
            for (f, t) in ch.field.iter_mut().zip(target.iter()) {
                *f += r * (t - *f);
            }
        }
    };
    for t in 0..spec.burn_in + frames {
        if t > 0 {
            for ch in upper.iter_mut().chain(surface.iter_mut()) {
                step(ch, &mut rng, &mut scratch, &mut target);
            }
        }
        if t < spec.burn_in {
            continue;
        }
        for (c, ch) in upper.iter().enumerate() {
            for (i, &v) in ch.field.iter().enumerate() {
                frame[i * channels + c] = v;
            }
        }
        if let Some(sv) = &spec.surface {
            let base = upper.len();
            for (j, srcs) in source_index.iter().enumerate() {
                for i in 0..cells {
                    let mut avg = 0.0;
                    for &g in srcs {
                        for (l, lw) in level_w.iter().enumerate() {
                            avg += lw * upper[g * spec.levels + l].field[i];
                        }
                    }
                    avg /= srcs.len() as f64;
                    frame[i * channels + base + j] = (sv.gain * avg).tanh() + sv.noise * surface[j].field[i];
                }
            }
        }
        data.extend(frame.iter().map(|&v| v as f32));
    }
    Ok(Trajectory {
        catalog,
        height: h,
        width: w,
        frames,
        data,
    })
}
