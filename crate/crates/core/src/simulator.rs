//! Explicit forward solver for the 2D diffusion equation, used to generate
//! synthetic frame stacks and to forward-predict fields for validation.
//!
//! The scheme is forward-time centered-space on the 5-point stencil,
//! sub-stepped so the diffusion number `a * ddt * (1/dx^2 + 1/dy^2)` stays at
//! or below 1/2; the internal step is an exact integer divisor of the sample
//! period. Measurement noise is added to emitted frames only and never fed
//! back into the state.
//!
//! Spatially varying diffusivity integrates the flux form `div(a grad T)`
//! with harmonic-mean face values, so a zero-diffusivity pixel acts as an
//! internal insulating wall.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{FrameStack, GridSpec, ScalarField};

/// Hard cap on CFL substeps per sample period; configurations needing more
/// are rejected as unstable-in-practice.
pub const MAX_SUBSTEPS: usize = 1_000_000;

/// Boundary condition applied at the domain edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Zero-flux: mirror ghost cells, conserves total heat.
    Insulated,
    /// Edge pixels pinned at their initial values.
    FixedValue,
}

impl Boundary {
    pub fn parse(s: &str) -> Result<Boundary> {
        match s.trim().to_ascii_lowercase().as_str() {
            "insulated" => Ok(Boundary::Insulated),
            "fixed" | "fixed-value" | "fixed_value" => Ok(Boundary::FixedValue),
            other => Err(Error::Parameter(format!(
                "unknown boundary '{other}' (expected 'insulated' or 'fixed')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Boundary::Insulated => "insulated",
            Boundary::FixedValue => "fixed",
        }
    }
}

/// Scalar or per-pixel diffusivity.
#[derive(Debug, Clone)]
pub enum Diffusivity {
    Scalar(f64),
    Field(ScalarField),
}

impl Diffusivity {
    /// Largest diffusivity, used for the stability bound.
    pub fn max_value(&self) -> f64 {
        match self {
            Diffusivity::Scalar(a) => *a,
            Diffusivity::Field(f) => f.values().iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Negative diffusivity is anti-diffusion and rejected everywhere; zero
    /// is allowed (no heat flow).
    fn validate(&self, grid: &GridSpec) -> Result<()> {
        match self {
            Diffusivity::Scalar(a) => {
                if !a.is_finite() || *a < 0.0 {
                    return Err(Error::Infeasible(format!(
                        "diffusivity must be finite and non-negative, got {a}"
                    )));
                }
            }
            Diffusivity::Field(f) => {
                if f.grid() != grid {
                    return Err(Error::GridMismatch(
                        "diffusivity field grid differs from scenario grid".into(),
                    ));
                }
                if f.mask().iter().any(|&m| !m) {
                    return Err(Error::Parameter(
                        "diffusivity field must be fully valid (no masked pixels)".into(),
                    ));
                }
                if let Some((lo, _)) = f.min_max() {
                    if lo < 0.0 {
                        return Err(Error::Infeasible(format!(
                            "diffusivity field contains negative value {lo}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Initial temperature field.
#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// Isotropic Gaussian blob. `diameter_px` is the full width at half
    /// maximum in pixels; `center_px` is `(row, col)` in pixel coordinates
    /// and defaults to the grid center.
    GaussianBlob {
        amplitude: f64,
        diameter_px: f64,
        center_px: Option<(f64, f64)>,
    },
    /// An explicit frame (must be fully valid).
    Field(ScalarField),
}

/// FWHM in pixels to the physical standard deviation of the blob.
pub fn sigma_from_fwhm(diameter_px: f64, dx: f64) -> f64 {
    diameter_px * dx / (2.0 * (2.0 * (2.0f64).ln()).sqrt())
}

/// Full description of a synthetic experiment.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    pub diffusivity: Diffusivity,
    pub initial: InitialCondition,
    pub duration_s: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub boundary: Boundary,
    /// Optional override of the CFL-chosen substep count (must still satisfy
    /// the stability bound). Used by convergence studies.
    pub substeps: Option<usize>,
}

impl ScenarioConfig {
    /// Parse the `key = value` scenario format. Keys: width, height, dx, dy,
    /// dt, a, ic.amplitude, ic.diameter_px, noise.sigma, duration_s, seed,
    /// boundary. Lines starting with `#` and blank lines are ignored.
    pub fn from_key_values(text: &str) -> Result<ScenarioConfig> {
        let mut map = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!("scenario line {} is not key=value: '{line}'", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut get = |key: &str| -> Result<String> {
            map.remove(key)
                .ok_or_else(|| Error::Parameter(format!("scenario missing key '{key}'")))
        };
        let parse_f = |key: &str, s: String| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parameter(format!("scenario key '{key}' is not a number: '{s}'")))
        };
        let parse_u = |key: &str, s: String| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| Error::Parameter(format!("scenario key '{key}' is not an integer: '{s}'")))
        };

        let width = parse_u("width", get("width")?)? as usize;
        let height = parse_u("height", get("height")?)? as usize;
        let dx = parse_f("dx", get("dx")?)?;
        let dy = parse_f("dy", get("dy")?)?;
        let dt = parse_f("dt", get("dt")?)?;
        let a = parse_f("a", get("a")?)?;
        let amplitude = parse_f("ic.amplitude", get("ic.amplitude")?)?;
        let diameter_px = parse_f("ic.diameter_px", get("ic.diameter_px")?)?;
        let noise_sigma = parse_f("noise.sigma", get("noise.sigma")?)?;
        let duration_s = parse_f("duration_s", get("duration_s")?)?;
        let seed = parse_u("seed", get("seed")?)?;
        let boundary = Boundary::parse(&get("boundary")?)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Parameter(format!("unknown scenario key '{extra}'")));
        }

        let grid = GridSpec::new(width, height, dx, dy, dt)?;
        let cfg = ScenarioConfig {
            grid,
            diffusivity: Diffusivity::Scalar(a),
            initial: InitialCondition::GaussianBlob { amplitude, diameter_px, center_px: None },
            duration_s,
            noise_sigma,
            seed,
            boundary,
            substeps: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.diffusivity.validate(&self.grid)?;
        if !(self.duration_s >= 0.0) || !self.duration_s.is_finite() {
            return Err(Error::Parameter(format!(
                "duration must be non-negative, got {}",
                self.duration_s
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        match &self.initial {
            InitialCondition::GaussianBlob { amplitude, diameter_px, .. } => {
                if !amplitude.is_finite() || !(diameter_px > &0.0) {
                    return Err(Error::Parameter(
                        "blob amplitude must be finite and diameter positive".into(),
                    ));
                }
            }
            InitialCondition::Field(f) => {
                if f.grid() != &self.grid {
                    return Err(Error::GridMismatch(
                        "initial field grid differs from scenario grid".into(),
                    ));
                }
                if f.mask().iter().any(|&m| !m) {
                    return Err(Error::Parameter(
                        "initial field must be fully valid (no masked pixels)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of emitted frames, `round(duration / dt) + 1` (frame 0 is the
    /// initial condition).
    pub fn frame_count(&self) -> usize {
        (self.duration_s / self.grid.dt).round() as usize + 1
    }

    /// Echo of the configuration including derived quantities, as key=value
    /// lines. The blob-width interpretation is recorded so it is auditable.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("width={}\n", self.grid.width));
        out.push_str(&format!("height={}\n", self.grid.height));
        out.push_str(&format!("dx={}\n", self.grid.dx));
        out.push_str(&format!("dy={}\n", self.grid.dy));
        out.push_str(&format!("dt={}\n", self.grid.dt));
        match &self.diffusivity {
            Diffusivity::Scalar(a) => out.push_str(&format!("a={a}\n")),
            Diffusivity::Field(_) => out.push_str("a=<field>\n"),
        }
        match &self.initial {
            InitialCondition::GaussianBlob { amplitude, diameter_px, .. } => {
                out.push_str(&format!("ic.amplitude={amplitude}\n"));
                out.push_str(&format!("ic.diameter_px={diameter_px}\n"));
                out.push_str("ic.diameter_interpretation=fwhm\n");
                out.push_str(&format!(
                    "ic.sigma_physical={}\n",
                    sigma_from_fwhm(*diameter_px, self.grid.dx)
                ));
            }
            InitialCondition::Field(_) => out.push_str("ic=<field>\n"),
        }
        out.push_str(&format!("noise.sigma={}\n", self.noise_sigma));
        out.push_str(&format!("duration_s={}\n", self.duration_s));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("boundary={}\n", self.boundary.name()));
        out.push_str(&format!("frames={}\n", self.frame_count()));
        out.push_str(&format!(
            "substeps_per_frame={}\n",
            required_substeps(self.diffusivity.max_value(), &self.grid).unwrap_or(0)
        ));
        out
    }
}

/// Substeps per sample period required by the diffusion-number bound.
pub fn required_substeps(a_max: f64, grid: &GridSpec) -> Result<usize> {
    if a_max == 0.0 {
        return Ok(1);
    }
    let inv = 1.0 / (grid.dx * grid.dx) + 1.0 / (grid.dy * grid.dy);
    let ddt_max = 0.5 / (a_max * inv);
    let n = (grid.dt / ddt_max).ceil() as usize;
    let n = n.max(1);
    if n > MAX_SUBSTEPS {
        return Err(Error::Stability { required: n, cap: MAX_SUBSTEPS });
    }
    Ok(n)
}

pub fn build_initial(grid: &GridSpec, ic: &InitialCondition) -> Result<ScalarField> {
    match ic {
        InitialCondition::Field(f) => Ok(f.clone()),
        InitialCondition::GaussianBlob { amplitude, diameter_px, center_px } => {
            let (crow, ccol) = center_px
                .unwrap_or(((grid.height - 1) as f64 / 2.0, (grid.width - 1) as f64 / 2.0));
            let sigma = sigma_from_fwhm(*diameter_px, grid.dx);
            let s2 = 2.0 * sigma * sigma;
            let mut vals = Vec::with_capacity(grid.n_pixels());
            for i in 0..grid.height {
                for j in 0..grid.width {
                    let x = (j as f64 - ccol) * grid.dx;
                    let y = (i as f64 - crow) * grid.dy;
                    vals.push(amplitude * (-(x * x + y * y) / s2).exp());
                }
            }
            ScalarField::from_values(*grid, vals)
        }
    }
}

struct Stepper<'a> {
    grid: &'a GridSpec,
    boundary: Boundary,
    a: &'a Diffusivity,
    edge: Option<Vec<f64>>, // initial state, for fixed-value boundaries
}

impl<'a> Stepper<'a> {
    fn new(grid: &'a GridSpec, boundary: Boundary, a: &'a Diffusivity, initial: &[f64]) -> Self {
        let edge = match boundary {
            Boundary::FixedValue => Some(initial.to_vec()),
            Boundary::Insulated => None,
        };
        Stepper { grid, boundary, a, edge }
    }

    /// One explicit substep from `cur` into `next`.
    fn step(&self, cur: &[f64], next: &mut [f64], ddt: f64) {
        let w = self.grid.width;
        let h = self.grid.height;
        let rx = ddt / (self.grid.dx * self.grid.dx);
        let ry = ddt / (self.grid.dy * self.grid.dy);
        match self.a {
            Diffusivity::Scalar(a) => {
                let (arx, ary) = (a * rx, a * ry);
                for i in 0..h {
                    let up = if i > 0 { i - 1 } else { 0 };
                    let dn = if i + 1 < h { i + 1 } else { h - 1 };
                    for j in 0..w {
                        let lf = if j > 0 { j - 1 } else { 0 };
                        let rt = if j + 1 < w { j + 1 } else { w - 1 };
                        let c = cur[i * w + j];
                        let lap_x = cur[i * w + rt] - 2.0 * c + cur[i * w + lf];
                        let lap_y = cur[dn * w + j] - 2.0 * c + cur[up * w + j];
                        next[i * w + j] = c + arx * lap_x + ary * lap_y;
                    }
                }
            }
            Diffusivity::Field(af) => {
                let av = af.values();
                let face = |a1: f64, a2: f64| {
                    let s = a1 + a2;
                    if s > 0.0 {
                        2.0 * a1 * a2 / s
                    } else {
                        0.0
                    }
                };
                for i in 0..h {
                    let up = if i > 0 { i - 1 } else { 0 };
                    let dn = if i + 1 < h { i + 1 } else { h - 1 };
                    for j in 0..w {
                        let lf = if j > 0 { j - 1 } else { 0 };
                        let rt = if j + 1 < w { j + 1 } else { w - 1 };
                        let idx = i * w + j;
                        let c = cur[idx];
                        let ac = av[idx];
                        let fe = face(ac, av[i * w + rt]) * (cur[i * w + rt] - c);
                        let fw = face(ac, av[i * w + lf]) * (c - cur[i * w + lf]);
                        let fs = face(ac, av[dn * w + j]) * (cur[dn * w + j] - c);
                        let fn_ = face(ac, av[up * w + j]) * (c - cur[up * w + j]);
                        next[idx] = c + rx * (fe - fw) + ry * (fs - fn_);
                    }
                }
            }
        }
        if self.boundary == Boundary::FixedValue {
            let edge = self.edge.as_ref().unwrap();
            for j in 0..w {
                next[j] = edge[j];
                next[(h - 1) * w + j] = edge[(h - 1) * w + j];
            }
            for i in 0..h {
                next[i * w] = edge[i * w];
                next[i * w + w - 1] = edge[i * w + w - 1];
            }
        }
    }
}

fn integrate(
    cfg: &ScenarioConfig,
    emit_noise: bool,
) -> Result<FrameStack> {
    cfg.validate()?;
    let grid = cfg.grid;
    let frames_n = cfg.frame_count();
    let ic = build_initial(&grid, &cfg.initial)?;

    let required = required_substeps(cfg.diffusivity.max_value(), &grid)?;
    let substeps = match cfg.substeps {
        Some(n) => {
            if n < required {
                return Err(Error::Stability { required, cap: MAX_SUBSTEPS });
            }
            n
        }
        None => required,
    };
    let ddt = grid.dt / substeps as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if emit_noise && cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?)
    } else {
        None
    };

    let mut cur = ic.values().to_vec();
    let mut next = vec![0.0f64; cur.len()];
    let stepper = Stepper::new(&grid, cfg.boundary, &cfg.diffusivity, &cur);

    let emit = |state: &[f64], rng: &mut ChaCha8Rng| -> Result<ScalarField> {
        let vals: Vec<f64> = match &noise {
            Some(n) => state.iter().map(|v| v + n.sample(rng)).collect(),
            None => state.to_vec(),
        };
        ScalarField::from_values(grid, vals)
    };

    let mut frames = Vec::with_capacity(frames_n);
    frames.push(emit(&cur, &mut rng)?);
    for _ in 1..frames_n {
        for _ in 0..substeps {
            stepper.step(&cur, &mut next, ddt);
            std::mem::swap(&mut cur, &mut next);
        }
        frames.push(emit(&cur, &mut rng)?);
    }
    FrameStack::new(grid, frames)
}

/// Run a scenario, emitting `round(duration/dt) + 1` frames with seeded
/// measurement noise.
pub fn simulate(cfg: &ScenarioConfig) -> Result<FrameStack> {
    integrate(cfg, true)
}

/// Forward-predict noise-free frames from a given initial field under a
/// scalar or per-pixel diffusivity estimate. Negative diffusivity anywhere
/// is rejected as infeasible.
pub fn predict(
    initial: &ScalarField,
    a_hat: &Diffusivity,
    duration_s: f64,
    boundary: Boundary,
    substeps: Option<usize>,
) -> Result<FrameStack> {
    if initial.mask().iter().any(|&m| !m) {
        return Err(Error::Parameter(
            "prediction initial field must be fully valid (no masked pixels)".into(),
        ));
    }
    let cfg = ScenarioConfig {
        grid: *initial.grid(),
        diffusivity: a_hat.clone(),
        initial: InitialCondition::Field(initial.clone()),
        duration_s,
        noise_sigma: 0.0,
        seed: 0,
        boundary,
        substeps,
    };
    integrate(&cfg, false)
}
