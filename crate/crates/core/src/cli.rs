//! Run configuration, manifests and the experiment commands behind the
//! `lamelab` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bounds_lab::{self, lower_bound_report, run_sweep, sweep_mesh, term_breakdown, ProbeSweep, SweepConfig};
use crate::dtn::{alessandrini_residual, boundary_rigid_motions, build_dtn, BoundarySpace, NormScaling};
use crate::error::{Error, Result};
use crate::geometry::{
    select_probe_p, DomainSpec, GeometryConfig, InclusionConfig, InclusionGeometry, DEFAULT_SURFACE_SAMPLES,
};
use crate::greens::{
    decay_check, integral_representation_residual, kelvin, omega_block_mesh, variant_composite, write_probes_csv,
    Backend, GreensEvaluator, MollifiedEvaluator, ProbeRow, SubtractedEvaluator, Truncation, Variant,
};
use crate::mesh_fem::{rigid_motions, BoxMeshSpec, FemSystem, HexMesh, Tagging};
use crate::scalar::frobenius;
use crate::stability_harness::{
    fit_log_stability, monotone, pair_epsilon, run_family, write_stability_csv, PairFamily, Perturbation,
    StabilityConfig,
};
use crate::tensor_field::{min_jump, validate_material, LameField, MaterialConfig, PiecewiseTensor};

/// Boundary data of the forward command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForwardData {
    Zero,
    /// One of the six rigid motions (three translations, three rotations).
    Rigid { mode: usize },
    /// `u(x) = A x`.
    Linear { matrix: [[f64; 3]; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    pub data: ForwardData,
    /// Soft budget in seconds; exceeding it is reported, not fatal.
    pub budget_seconds: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            data: ForwardData::Linear {
                matrix: [[0.01, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            },
            budget_seconds: 60.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ClosedForm,
    Subtracted,
    Mollified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreensConfig {
    pub variant: Variant,
    pub backend: BackendKind,
    pub truncation: Truncation,
    /// Number of well-separated shell pairs.
    pub pairs: usize,
}

impl Default for GreensConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            backend: BackendKind::Subtracted,
            truncation: Truncation::Dirichlet,
            pairs: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtnConfig {
    /// Also write the dense matrices in the binary format.
    pub write_matrices: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityRun {
    pub base: InclusionConfig,
    pub perturbation: Perturbation,
    pub t: Vec<f64>,
    pub n: usize,
    pub subcells: usize,
    pub surface_samples: usize,
}

impl Default for StabilityRun {
    fn default() -> Self {
        Self {
            base: InclusionConfig::Ball {
                center: [-0.06, 0.0, 0.0],
                radius: 0.2,
            },
            perturbation: Perturbation::Offset {
                direction: [1.0, 0.0, 0.0],
            },
            t: vec![0.02, 0.04, 0.06, 0.08, 0.10, 0.12],
            n: 16,
            subcells: 4,
            surface_samples: DEFAULT_SURFACE_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Subset of checks to run; all when absent.
    pub checks: Option<Vec<String>>,
    pub alessandrini_pairs: usize,
    pub symmetry_pairs: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            checks: None,
            alessandrini_pairs: 20,
            symmetry_pairs: 10,
        }
    }
}

/// Everything a run depends on. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub materials: MaterialConfig,
    pub geometry: GeometryConfig,
    /// Cells per side of `Ω` for forward solves, DtN maps and the core of
    /// Green's meshes.
    pub n: usize,
    /// Half widths `(L₁, L₂)` of the mollified backend's boxes.
    pub boxes: [f64; 2],
    pub sweep: SweepConfig,
    pub norm_scaling: NormScaling,
    pub forward: ForwardConfig,
    pub dtn: DtnConfig,
    pub greens: GreensConfig,
    pub stability: StabilityRun,
    pub verify: VerifyConfig,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            materials: MaterialConfig::default(),
            geometry: GeometryConfig::default(),
            n: 16,
            boxes: [3.0, 6.0],
            sweep: SweepConfig::default(),
            norm_scaling: NormScaling::Normalized,
            forward: ForwardConfig::default(),
            dtn: DtnConfig::default(),
            greens: GreensConfig::default(),
            stability: StabilityRun::default(),
            verify: VerifyConfig::default(),
            seed: 0,
            output: None,
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("'{part}' in '{key}' is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("index {i} out of range ({len}) in '{key}'")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null if !last => {
                *cur = Value::Object(Default::default());
                match cur {
                    Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
                    _ => unreachable!(),
                }
            }
            _ => return Err(Error::Config(format!("cannot descend into '{part}' of '{key}'"))),
        };
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to a
    /// plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let (k, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
            let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, k.trim(), val)?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the JSON serialization without the output path.
    pub fn hash(&self) -> Result<String> {
        let bare = RunConfig {
            output: None,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&bare)?)))
    }

    pub fn domain(&self) -> Result<DomainSpec<f64>> {
        self.geometry.domain()
    }

    pub fn inclusions(&self) -> Result<Vec<InclusionGeometry<f64>>> {
        let d = self.geometry.inclusions()?;
        let dom = self.domain()?;
        for g in &d {
            g.check_inside(&dom, 0.0).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(d)
    }

    fn pair(&self) -> Result<(InclusionGeometry<f64>, InclusionGeometry<f64>)> {
        let d = self.inclusions()?;
        if d.len() < 2 {
            return Err(Error::Config("this command needs two inclusions".to_string()));
        }
        Ok((d[0].clone(), d[1].clone()))
    }

    /// Checks the sampled material conditions and the jump on a grid of `Ω`.
    pub fn validate_materials(&self) -> Result<()> {
        let dom = self.domain()?;
        let pts = dom.grid(9);
        let bounds = self.materials.bounds();
        for (name, f) in [
            ("background", self.materials.background_field()),
            ("inclusion", self.materials.inclusion_field()),
        ] {
            let rep = validate_material(&f, &pts, &bounds)?;
            if let Some(v) = rep.violations.first() {
                return Err(Error::Config(format!(
                    "{name} material violates {:?} at {:?} (margin {:.3e})",
                    v.condition,
                    v.point.as_slice(),
                    v.margin
                )));
            }
        }
        if self.materials.eta0 > 0.0 {
            let comp = PiecewiseTensor::homogeneous(self.materials.background_field());
            let comp = PiecewiseTensor {
                inclusion: self.materials.inclusion_field(),
                ..comp
            };
            let j = min_jump(&comp, &dom, &pts)?;
            if j < self.materials.eta0 * (1.0 - 1e-12) {
                return Err(Error::Config(format!("jump {j:.4e} is below eta0 = {}", self.materials.eta0)));
            }
        }
        Ok(())
    }

    pub fn stability_family(&self) -> Result<PairFamily> {
        let base = GeometryConfig::inclusion(&self.stability.base)?;
        PairFamily::new(base, self.stability.perturbation.clone(), self.stability.t.clone())
    }

    pub fn stability_config(&self) -> StabilityConfig {
        StabilityConfig {
            n: self.stability.n,
            subcells: self.stability.subcells,
            surface_samples: self.stability.surface_samples,
            scaling: self.norm_scaling,
        }
    }
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVARIANT: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const SOLVER: i32 = 3;
    pub const INSUFFICIENT: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Expr { .. } | Error::Input(_) | Error::Domain(_) => exit::CONFIG,
        Error::Fit(_) => exit::INSUFFICIENT,
        Error::Invariant(_) => exit::INVARIANT,
        _ => exit::SOLVER,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Forward,
    Dtn,
    Greens,
    Bounds,
    Stability,
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Dtn => "dtn",
            Command::Greens => "greens",
            Command::Bounds => "bounds",
            Command::Stability => "stability",
            Command::Verify => "verify",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config: RunConfig,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_seconds: BTreeMap<String, f64>,
    pub status: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

const MODULES: [&str; 9] = [
    "tensor_field",
    "geometry",
    "mesh_fem",
    "dtn",
    "greens",
    "bounds_lab",
    "stability_harness",
    "recon_norms",
    "cli",
];

/// Output directory, timings, statuses and written files of one run.
pub struct RunContext {
    pub out: PathBuf,
    pub config: RunConfig,
    wall: BTreeMap<String, f64>,
    status: BTreeMap<String, String>,
    files: Vec<String>,
}

impl RunContext {
    pub fn new(out: &Path, config: RunConfig) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            config,
            wall: BTreeMap::new(),
            status: BTreeMap::new(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_vec_pretty(value)?;
        s.push(b'\n');
        self.write(name, &s)
    }

    pub fn timed<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f(self);
        self.wall.insert(name.to_string(), t.elapsed().as_secs_f64());
        self.status.insert(
            name.to_string(),
            match &r {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("error: {e}"),
            },
        );
        r
    }

    pub fn set_status(&mut self, name: &str, status: impl Into<String>) {
        self.status.insert(name.to_string(), status.into());
    }

    pub fn manifest(&self, command: Command) -> Result<RunManifest> {
        let mut files = Vec::new();
        for name in &self.files {
            let bytes = fs::read(self.out.join(name))?;
            files.push(FileEntry {
                name: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let version = env!("CARGO_PKG_VERSION").to_string();
        Ok(RunManifest {
            command,
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            versions: MODULES.iter().map(|m| (m.to_string(), version.clone())).collect(),
            threads: rayon::current_num_threads(),
            wall_seconds: self.wall.clone(),
            status: self.status.clone(),
            files,
        })
    }

    pub fn finish(&mut self, command: Command) -> Result<RunManifest> {
        let m = self.manifest(command)?;
        let mut s = serde_json::to_vec_pretty(&m)?;
        s.push(b'\n');
        fs::write(self.out.join("manifest.json"), s)?;
        Ok(m)
    }
}

/// Outcome of a command: exit code and an optional message for stderr.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub message: Option<String>,
}

impl Outcome {
    fn ok() -> Self {
        Self {
            code: exit::OK,
            message: None,
        }
    }

    fn from_error(err: &Error) -> Self {
        Self {
            code: exit_code(err),
            message: Some(err.to_string()),
        }
    }
}

/// Runs `command` and always writes the manifest.
pub fn run_command(command: Command, config: RunConfig, out: &Path) -> Outcome {
    let mut ctx = match RunContext::new(out, config) {
        Ok(c) => c,
        Err(e) => return Outcome::from_error(&e),
    };
    let result = match ctx.config.validate_materials() {
        Err(e) => Err(e),
        Ok(()) => match command {
            Command::Forward => cmd_forward(&mut ctx),
            Command::Dtn => cmd_dtn(&mut ctx),
            Command::Greens => cmd_greens(&mut ctx),
            Command::Bounds => cmd_bounds(&mut ctx),
            Command::Stability => cmd_stability(&mut ctx),
            Command::Verify => cmd_verify(&mut ctx),
        },
    };
    let outcome = match &result {
        Ok(o) => o.clone(),
        Err(e) => Outcome::from_error(e),
    };
    if let Err(e) = ctx.finish(command) {
        return Outcome::from_error(&e);
    }
    outcome
}

fn forward_field(data: &ForwardData) -> Result<Box<dyn Fn(&Vector3<f64>) -> Vector3<f64> + Sync>> {
    Ok(match data {
        ForwardData::Zero => Box::new(|_| Vector3::zeros()),
        ForwardData::Rigid { mode } => {
            if *mode >= 6 {
                return Err(Error::Config(format!("rigid mode {mode} is not in 0..6")));
            }
            let mut all = rigid_motions().into_iter();
            all.nth(*mode).expect("six rigid motions")
        }
        ForwardData::Linear { matrix } => {
            let a = Matrix3::from_fn(|i, j| matrix[i][j]);
            Box::new(move |x| a * x)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardReport {
    pub n: usize,
    pub nodes: usize,
    /// `a(u, u)`.
    pub energy: f64,
    pub max_displacement: f64,
    pub interior_residual: f64,
    pub within_budget: bool,
}

fn first_inclusion_composite(cfg: &RunConfig) -> Result<PiecewiseTensor<f64>> {
    let d = cfg.inclusions()?;
    Ok(match d.first() {
        Some(g) => cfg.materials.composite(crate::geometry::Region::Body(g.clone())),
        None => PiecewiseTensor::homogeneous(cfg.materials.background_field()),
    })
}

fn cmd_forward(ctx: &mut RunContext) -> Result<Outcome> {
    let cfg = ctx.config.clone();
    let t = Instant::now();
    let dom = cfg.domain()?;
    let mesh = HexMesh::uniform(&dom, cfg.n)?;
    let sys = FemSystem::assemble(mesh, first_inclusion_composite(&cfg)?, Tagging::Centroid)?;
    let f = sys.boundary_data(forward_field(&cfg.forward.data)?);
    let u = ctx.timed("solve", |_| sys.solve_dirichlet(&f))?;
    let energy = sys.quadratic_form(&u, &u)?;
    let report = ForwardReport {
        n: cfg.n,
        nodes: sys.mesh().n_nodes(),
        energy,
        max_displacement: u.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        interior_residual: sys.interior_residual(&u, None)?,
        within_budget: t.elapsed().as_secs_f64() <= cfg.forward.budget_seconds,
    };
    let seconds = t.elapsed().as_secs_f64();
    let mut buf = Vec::new();
    sys.mesh().write_solution_csv(&u, &mut buf)?;
    ctx.write("solution.csv", &buf)?;
    ctx.write_json("energy.json", &report)?;
    if !report.within_budget {
        ctx.set_status("budget", format!("warning: {seconds:.1} s exceeds the soft budget"));
        return Ok(Outcome {
            code: exit::OK,
            message: Some(format!("warning: forward solve took {seconds:.1} s")),
        });
    }
    Ok(Outcome::ok())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DtnReport {
    pub dim: usize,
    pub symmetry_defects: Vec<f64>,
    pub rigid_residuals: Vec<f64>,
    pub epsilon_raw: Option<f64>,
    pub epsilon_scaled: Option<f64>,
}

/// `max_r ‖Λ r‖ / (‖Λ‖_F ‖r‖)` over the boundary rigid motions.
pub fn rigid_residual(dtn: &crate::dtn::DtnMatrix, sys: &FemSystem) -> Result<f64> {
    let norm = dtn.matrix.norm_l2();
    let mut worst: f64 = 0.0;
    for r in boundary_rigid_motions(sys) {
        let lr = dtn.apply(&r)?;
        let a = lr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(a / (norm * b));
    }
    Ok(worst)
}

fn cmd_dtn(ctx: &mut RunContext) -> Result<Outcome> {
    let cfg = ctx.config.clone();
    let dom = cfg.domain()?;
    let mesh = HexMesh::uniform(&dom, cfg.n)?;
    let space = BoundarySpace::new(&mesh, dom.rho0, cfg.norm_scaling)?;
    let incl = cfg.inclusions()?;
    if incl.is_empty() {
        return Err(Error::Config("dtn needs at least one inclusion".to_string()));
    }
    let mut mats = Vec::new();
    let mut report = DtnReport {
        dim: 0,
        symmetry_defects: Vec::new(),
        rigid_residuals: Vec::new(),
        epsilon_raw: None,
        epsilon_scaled: None,
    };
    for (k, d) in incl.iter().take(2).enumerate() {
        let sys = FemSystem::assemble(
            mesh.clone(),
            cfg.materials.composite(crate::geometry::Region::Body(d.clone())),
            Tagging::Centroid,
        )?;
        let l = ctx.timed(&format!("dtn_d{}", k + 1), |_| build_dtn(&sys, &space))?;
        report.dim = l.dim();
        report.symmetry_defects.push(l.symmetry_defect());
        report.rigid_residuals.push(rigid_residual(&l, &sys)?);
        if cfg.dtn.write_matrices {
            let mut buf = Vec::new();
            l.write_binary(&mut buf)?;
            ctx.write(&format!("dtn_d{}.bin", k + 1), &buf)?;
        }
        mats.push(l);
    }
    if mats.len() == 2 {
        let e = crate::dtn::operator_norm_h12(&space, mats[0].difference(&mats[1])?.as_ref())?;
        report.epsilon_raw = Some(e.raw);
        report.epsilon_scaled = Some(e.scaled);
    }
    ctx.write_json("dtn.json", &report)?;
    Ok(Outcome::ok())
}

/// Boundary point and normal of the pair, or the center of `Ω` with `e₁`
/// when fewer than two inclusions are given.
fn anchor(cfg: &RunConfig) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let d = cfg.inclusions()?;
    if d.len() >= 2 {
        let s = select_probe_p(&d[0], &d[1], DEFAULT_SURFACE_SAMPLES)?;
        Ok((s.p, s.nu))
    } else {
        Ok((cfg.domain()?.center(), Vector3::x()))
    }
}

fn focus_box(cfg: &RunConfig) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let d = cfg.inclusions()?;
    let dom = cfg.domain()?;
    if d.is_empty() {
        return Ok((dom.lo, dom.hi));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for g in &d {
        lo = lo.inf(&(g.center() - g.half_extents()));
        hi = hi.sup(&(g.center() + g.half_extents()));
    }
    Ok((lo, hi))
}

/// Pairs of shell points at least `ρ₀` apart.
pub fn shell_pairs(dom: &DomainSpec<f64>, count: usize, seed: u64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::with_capacity(count);
    let mut round = 0u64;
    while out.len() < count {
        let pts = dom.sample_shell(2 * count + 2, seed.wrapping_add(round));
        for w in pts.chunks(2) {
            if out.len() < count && (w[0] - w[1]).norm() >= dom.rho0 {
                out.push((w[0], w[1]));
            }
        }
        round += 1;
    }
    out
}

fn variant_evaluator(cfg: &RunConfig, points: &[Vector3<f64>]) -> Result<GreensEvaluator> {
    let (p, nu) = anchor(cfg)?;
    let bg = cfg.materials.background_field();
    let inc = cfg.materials.inclusion_field();
    let d1 = cfg.inclusions()?.first().cloned();
    let variant = cfg.greens.variant;
    let dom = cfg.domain()?;
    let backend = match cfg.greens.backend {
        BackendKind::ClosedForm => return GreensEvaluator::closed_form(variant, bg.at(&p)),
        BackendKind::Subtracted => {
            let (lo, hi) = focus_box(cfg)?;
            let mesh = omega_block_mesh(&dom, &lo, &hi, cfg.n)?;
            let comp = variant_composite(variant, &bg, &inc, &p, &nu, d1.as_ref())?;
            let sys = FemSystem::assemble(mesh, comp, Tagging::Centroid)?;
            Backend::Subtracted(SubtractedEvaluator::new(sys, bg.at(&p), cfg.greens.truncation)?)
        }
        BackendKind::Mollified => {
            let side = dom.sides().max();
            let fine = side / cfg.n as f64;
            let mut boxes = Vec::new();
            for &l in &cfg.boxes {
                let mut spec = BoxMeshSpec::cube(dom.center(), l, 1.5, l / 4.0).with_core(dom.lo, dom.hi, fine);
                for x in points {
                    spec = spec.refine_at(*x, fine, fine);
                }
                let comp = variant_composite(variant, &bg, &inc, &p, &nu, d1.as_ref())?;
                boxes.push((l, FemSystem::assemble(spec.build()?, comp, Tagging::Centroid)?));
            }
            Backend::Mollified(MollifiedEvaluator::new(boxes, None)?)
        }
    };
    Ok(GreensEvaluator { variant, backend })
}

fn cmd_greens(ctx: &mut RunContext) -> Result<Outcome> {
    let cfg = ctx.config.clone();
    let dom = cfg.domain()?;
    let pairs = shell_pairs(&dom, cfg.greens.pairs, cfg.seed);
    let points: Vec<Vector3<f64>> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    let ev = ctx.timed("evaluator", |_| variant_evaluator(&cfg, &points))?;
    let rows = ctx.timed("probes", |_| {
        let mut rows: Vec<ProbeRow> = Vec::new();
        for (x, y) in &pairs {
            rows.push(ev.probe(x, y)?);
            rows.push(ev.probe(y, x)?);
        }
        Ok(rows)
    })?;
    let mut buf = Vec::new();
    write_probes_csv(&rows, &mut buf)?;
    ctx.write("probes.csv", &buf)?;
    Ok(Outcome::ok())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsFits {
    pub lower_bound: bounds_lab::LowerBoundReport,
    pub terms: bounds_lab::TermReport,
    pub n_nodes: usize,
}

/// Default-preset sweep for the first two inclusions of the config.
pub fn sweep_for(cfg: &RunConfig) -> Result<bounds_lab::SweepResult> {
    let (d1, d2) = cfg.pair()?;
    let dom = cfg.domain()?;
    let sel = select_probe_p(&d1, &d2, DEFAULT_SURFACE_SAMPLES)?;
    let sweep = ProbeSweep::new(sel.clone(), dom.rho0, &cfg.sweep, cfg.sweep.mesh.fine)?;
    let mesh = sweep_mesh(&cfg.sweep.mesh, &dom.center(), &[&d1, &d2], &sel.p)?;
    run_sweep(
        &sweep,
        &cfg.materials.background_field(),
        &cfg.materials.inclusion_field(),
        &d1,
        &d2,
        &mesh,
        cfg.sweep.mesh.tagging(),
    )
}

fn cmd_bounds(ctx: &mut RunContext) -> Result<Outcome> {
    let cfg = ctx.config.clone();
    let res = ctx.timed("sweep", |_| sweep_for(&cfg))?;
    let mut buf = Vec::new();
    bounds_lab::write_sweep_csv(&res, &mut buf)?;
    ctx.write("sweep.csv", &buf)?;
    for (name, s) in &res.timings {
        ctx.wall.insert(format!("sweep.{name}"), *s);
    }
    let fits = BoundsFits {
        lower_bound: lower_bound_report(&res, &cfg.sweep)?,
        terms: term_breakdown(&res, &cfg.sweep)?,
        n_nodes: res.n_nodes,
    };
    ctx.write_json("fits.json", &fits)?;
    Ok(Outcome::ok())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct FitJson {
    #[serde(flatten)]
    fit: crate::stability_harness::StabilityFit,
    monotone: bool,
}

fn cmd_stability(ctx: &mut RunContext) -> Result<Outcome> {
    let cfg = ctx.config.clone();
    let dom = cfg.domain()?;
    let family = cfg.stability_family()?;
    family.check(&dom, 0.0, cfg.stability.surface_samples)?;
    let records = ctx.timed("family", |_| {
        run_family(
            &dom,
            &cfg.materials.background_field(),
            &cfg.materials.inclusion_field(),
            &family,
            &cfg.stability_config(),
        )
    })?;
    let mut buf = Vec::new();
    write_stability_csv(&records, &mut buf)?;
    ctx.write("stability.csv", &buf)?;
    let fit = ctx.timed("fit", |_| fit_log_stability(&records, dom.rho0))?;
    ctx.write_json(
        "fit.json",
        &FitJson {
            fit,
            monotone: monotone(&records),
        },
    )?;
    Ok(Outcome::ok())
}

/// One named property check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            value,
            detail: detail.into(),
        }
    }
}

pub const CHECKS: [&str; 11] = [
    "patch_test",
    "dtn_symmetry",
    "dtn_rigid_kernel",
    "alessandrini",
    "rho0_covariance",
    "kelvin_symmetry",
    "greens_symmetry",
    "decay",
    "representation",
    "lower_bound",
    "decomposition",
];

fn random_boundary_data(sys: &FemSystem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..sys.dofs().n_boundary_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn homogeneous_reference(cfg: &RunConfig) -> Result<LameField> {
    let c = cfg.materials.background_field().at(&cfg.domain()?.center());
    Ok(LameField::constant(c.lambda, c.mu))
}

/// `ε` at two length scales; non-constant fields are frozen at the center
/// of `Ω` since their expressions are not rescaled.
pub fn covariance_epsilons(cfg: &RunConfig, scale: f64) -> Result<(f64, f64)> {
    let (d1, d2) = cfg.pair()?;
    let dom = cfg.domain()?;
    let mut bg = cfg.materials.background_field();
    let mut inc = cfg.materials.inclusion_field();
    if !bg.is_constant() || !inc.is_constant() {
        bg = homogeneous_reference(cfg)?;
        let c = inc.at(&dom.center());
        inc = LameField::constant(c.lambda, c.mu);
    }
    let sc = StabilityConfig {
        n: cfg.n.min(8),
        scaling: cfg.norm_scaling,
        ..StabilityConfig::default()
    };
    let a = pair_epsilon(&dom, &bg, &inc, &d1, &d2, &sc)?;
    let b = pair_epsilon(&dom.scaled(scale), &bg, &inc, &d1.scaled(scale), &d2.scaled(scale), &sc)?;
    Ok((a.scaled, b.scaled))
}

fn run_check(cfg: &RunConfig, name: &str) -> Result<Check> {
    let dom = cfg.domain()?;
    let mesh = || HexMesh::uniform(&dom, cfg.n);
    let body = |d: &InclusionGeometry<f64>| cfg.materials.composite(crate::geometry::Region::Body(d.clone()));
    Ok(match name {
        "patch_test" => {
            let sys = FemSystem::assemble(mesh()?, PiecewiseTensor::homogeneous(homogeneous_reference(cfg)?), Tagging::Centroid)?;
            let a = Matrix3::new(0.3, -0.1, 0.2, 0.05, 0.4, -0.3, 0.1, 0.2, -0.2);
            let exact = sys.nodal_field(|x| a * x);
            let u = sys.solve_dirichlet(&sys.boundary_data(|x| a * x))?;
            let err = u.iter().zip(&exact).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let rel = err / scale;
            Check::new(name, rel <= 1e-10, rel, "max nodal error of a linear field, relative")
        }
        "dtn_symmetry" | "dtn_rigid_kernel" => {
            let d = cfg.inclusions()?;
            let comp = match d.first() {
                Some(g) => body(g),
                None => PiecewiseTensor::homogeneous(cfg.materials.background_field()),
            };
            let sys = FemSystem::assemble(mesh()?, comp, Tagging::Centroid)?;
            let space = BoundarySpace::new(sys.mesh(), dom.rho0, cfg.norm_scaling)?;
            let l = build_dtn(&sys, &space)?;
            if name == "dtn_symmetry" {
                let v = l.symmetry_defect();
                Check::new(name, v <= 1e-10, v, "relative Frobenius asymmetry")
            } else {
                let v = rigid_residual(&l, &sys)?;
                Check::new(name, v <= 1e-8, v, "largest relative image of a rigid motion")
            }
        }
        "alessandrini" => {
            let (d1, d2) = cfg.pair()?;
            let m = mesh()?;
            let s1 = FemSystem::assemble(m.clone(), body(&d1), Tagging::Centroid)?;
            let s2 = FemSystem::assemble(m, body(&d2), Tagging::Centroid)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut worst: f64 = 0.0;
            for _ in 0..cfg.verify.alessandrini_pairs {
                let f1 = random_boundary_data(&s1, &mut rng);
                let f2 = random_boundary_data(&s1, &mut rng);
                worst = worst.max(alessandrini_residual(&s1, &s2, &f1, &f2)?.residual);
            }
            Check::new(name, worst < 1e-9, worst, "largest relative residual over random data pairs")
        }
        "rho0_covariance" => {
            let (a, b) = covariance_epsilons(cfg, 2.0)?;
            let rel = (a - b).abs() / a.abs().max(f64::MIN_POSITIVE);
            Check::new(name, rel < 0.02, rel, format!("scaled epsilon {a:.6e} at s = 1, {b:.6e} at s = 2"))
        }
        "kelvin_symmetry" => {
            let c = cfg.materials.background_field().at(&dom.center());
            let mut worst: f64 = 0.0;
            for (x, y) in shell_pairs(&dom, cfg.verify.symmetry_pairs, cfg.seed) {
                worst = worst.max(frobenius(&(kelvin(&x, &y, &c)? - kelvin(&y, &x, &c)?.transpose())));
            }
            Check::new(name, worst == 0.0, worst, "largest absolute asymmetry")
        }
        "greens_symmetry" | "decay" => {
            let d = cfg.inclusions()?;
            let (lo, hi) = focus_box(cfg)?;
            let comp = match d.first() {
                Some(g) => body(g),
                None => PiecewiseTensor::homogeneous(cfg.materials.background_field()),
            };
            let sys = FemSystem::assemble(omega_block_mesh(&dom, &lo, &hi, cfg.n)?, comp, Tagging::Centroid)?;
            let c = cfg.materials.background_field().at(&dom.center());
            let ev = SubtractedEvaluator::new(sys, c, Truncation::Dirichlet)?;
            if name == "greens_symmetry" {
                let mut worst: f64 = 0.0;
                for (x, y) in shell_pairs(&dom, cfg.verify.symmetry_pairs, cfg.seed) {
                    let a = ev.evaluate(&x, &y)?;
                    let b = ev.evaluate(&y, &x)?;
                    worst = worst.max(frobenius(&(a - b.transpose())) / frobenius(&a));
                }
                Check::new(name, worst < 0.05, worst, "largest relative asymmetry of the Dirichlet fundamental matrix")
            } else {
                let y = dom.center() + Vector3::new(0.0, 0.35, 0.0) * dom.rho0;
                let fields = ev.unit_fields(&y)?;
                let rep = decay_check(
                    |x| ev.matrix_at(&fields, x),
                    &y,
                    &Vector3::y(),
                    0.2 * dom.rho0,
                    2.0 * dom.rho0,
                    8,
                )?;
                let ratio = |p: &[f64]| p.iter().cloned().fold(0.0, f64::max) / p.iter().cloned().fold(f64::MAX, f64::min);
                Check::new(
                    name,
                    rep.value_bounded && rep.gradient_bounded,
                    ratio(&rep.value_products).max(ratio(&rep.gradient_products)),
                    "largest max/min ratio of |G| r and |grad G| r^2",
                )
            }
        }
        "representation" => {
            let (d1, d2) = cfg.pair()?;
            let (lo, hi) = focus_box(cfg)?;
            let m = omega_block_mesh(&dom, &lo, &hi, cfg.n)?;
            let (p, _) = anchor(cfg)?;
            let c = cfg.materials.background_field().at(&p);
            let e1 = SubtractedEvaluator::new(FemSystem::assemble(m.clone(), body(&d1), Tagging::Centroid)?, c, Truncation::Dirichlet)?;
            let e2 = SubtractedEvaluator::new(FemSystem::assemble(m, body(&d2), Tagging::Centroid)?, c, Truncation::Dirichlet)?;
            let mut worst: f64 = 0.0;
            for (y, w) in shell_pairs(&dom, 3, cfg.seed) {
                let r = integral_representation_residual(&e1, &e2, &y, &w, &Vector3::x(), &Vector3::x())?;
                worst = worst.max(r.residual);
            }
            Check::new(name, worst < 0.1, worst, "largest relative residual at shell probes")
        }
        "lower_bound" | "decomposition" => {
            let res = sweep_for(cfg)?;
            let lb = lower_bound_report(&res, &cfg.sweep)?;
            let jump = cfg.materials.inclusion != cfg.materials.background;
            if name == "lower_bound" {
                if !jump {
                    Check::new(name, !lb.signal, 0.0, "no signal (expected)")
                } else {
                    let best = lb
                        .series
                        .iter()
                        .filter_map(|s| s.slope.as_ref().map(|f| f.slope))
                        .fold(f64::NAN, |m, v| if (v + 1.0).abs() < (m + 1.0).abs() || m.is_nan() { v } else { m });
                    Check::new(name, lb.success, best, "slope closest to -1; success needs slope and plateau per direction")
                }
            } else if !lb.signal {
                Check::new(name, !jump, 0.0, "no signal")
            } else {
                let t = term_breakdown(&res, &cfg.sweep)?;
                let constant_bg = cfg.materials.background_field().is_constant();
                let null_ok = !constant_bg || t.term3_relative <= 1e-8;
                Check::new(
                    name,
                    t.triangle_ok && t.term2_flat && null_ok,
                    t.worst_triangle_margin,
                    format!(
                        "term2 slopes {:?}, term3 relative {:.2e}",
                        t.term2_slopes.iter().map(|s| s.2).collect::<Vec<_>>(),
                        t.term3_relative
                    ),
                )
            }
        }
        other => return Err(Error::Config(format!("unknown check '{other}'"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub fn verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let names: Vec<String> = match &cfg.verify.checks {
        Some(v) => v.clone(),
        None => CHECKS.iter().map(|s| s.to_string()).collect(),
    };
    for n in &names {
        if !CHECKS.contains(&n.as_str()) {
            return Err(Error::Config(format!("unknown check '{n}'")));
        }
    }
    let mut checks = Vec::new();
    for n in &names {
        checks.push(run_check(cfg, n)?);
    }
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn cmd_verify(ctx: &mut RunContext) -> Result<Outcome> {
    let cfg = ctx.config.clone();
    let report = ctx.timed("verify", |_| verify(&cfg))?;
    ctx.write_json("verify.json", &report)?;
    match report.checks.iter().find(|c| !c.passed) {
        Some(c) => Ok(Outcome {
            code: exit::INVARIANT,
            message: Some(format!("check '{}' failed: value {:.4e} ({})", c.name, c.value, c.detail)),
        }),
        None => Ok(Outcome::ok()),
    }
}
