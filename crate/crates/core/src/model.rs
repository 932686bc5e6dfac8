//! Problem definition: species, interaction kernels, confining potentials,
//! diffusion coefficients and the global time grid.
//!
//! Kernels and potentials carry *declared* bounds (sup-norm, Lipschitz
//! constant, convexity) rather than computing them. Built-in forms derive
//! their declared constants from pre-computed suprema of the underlying
//! profile functions; custom callables carry whatever the caller declares.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};

/// Support clamp for the compactly supported profiles: a scaled argument
/// with norm at or beyond this value evaluates to exactly zero.
pub const SUPPORT_CLAMP: f64 = 1.0 - 1e-12;

/// sup |g'(y)| for g(y) = exp(1 - 1/(1 - y^2)) on (-1, 1), rounded up.
pub const BUMP_GRADIENT_SUP: f64 = 2.17036;
/// sup |g''(y)| for the same profile, rounded up.
pub const BUMP_HESSIAN_SUP: f64 = 21.0659;
/// sup |y phi(y)| for phi(y) = exp(1 - 1/(1 - |y|^10)) on (-1, 1), rounded up.
pub const OPINION_PROFILE_SUP: f64 = 0.712_2;
/// sup |d/dy (y phi(y))|, rounded up.
pub const OPINION_PROFILE_LIPSCHITZ: f64 = 8.205_65;

const TANH_MODULATED_LIPSCHITZ: f64 = 0.300_284;
const INVERSE_SQRT_LIPSCHITZ: f64 = 0.384_901;

type FieldFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A user-supplied vector field `R^d -> R^d`, written into the output slice.
#[derive(Clone)]
pub struct CustomField(Arc<FieldFn>);

impl CustomField {
    pub fn new(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        CustomField(Arc::new(f))
    }

    fn call(&self, x: &[f64], out: &mut [f64]) {
        (self.0)(x, out)
    }
}

impl fmt::Debug for CustomField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomField")
    }
}

impl PartialEq for CustomField {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// A user-supplied scalar function `R^d -> R`.
#[derive(Clone)]
pub struct CustomScalar(Arc<ScalarFn>);

impl CustomScalar {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CustomScalar(Arc::new(f))
    }

    fn call(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

impl fmt::Debug for CustomScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomScalar")
    }
}

impl PartialEq for CustomScalar {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum KernelForm {
    /// `K(x) = q_i q_j x / (1 + |x|^2)`.
    ScaledCauchy { q_i: f64, q_j: f64 },
    /// `K = grad B^eta` with `B(x) = D exp(1 - 1/(1 - |x|^2))` on the unit
    /// ball and `B^eta(x) = B(x / eta) / eta`. With `repulsive` set the
    /// kernel is `-grad B^eta`, pushing the two particles apart.
    BumpGradient {
        strength: f64,
        width: f64,
        #[serde(default)]
        repulsive: bool,
    },
    /// `K(x) = -D phi(x / R) x` with `phi(y) = exp(1 - 1/(1 - |y|^10))`.
    Opinion { strength: f64, radius: f64 },
    Zero,
    #[serde(skip)]
    Custom(CustomField),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub form: KernelForm,
    pub sup_norm: Option<f64>,
    pub lipschitz: Option<f64>,
}

impl KernelSpec {
    pub fn zero() -> Self {
        KernelSpec {
            form: KernelForm::Zero,
            sup_norm: Some(0.0),
            lipschitz: Some(0.0),
        }
    }

    pub fn scaled_cauchy(q_i: f64, q_j: f64) -> Self {
        let c = (q_i * q_j).abs();
        // |x|/(1+|x|^2) <= 1/2; the Jacobian norm peaks at the origin.
        KernelSpec {
            form: KernelForm::ScaledCauchy { q_i, q_j },
            sup_norm: Some(0.5 * c),
            lipschitz: Some(c),
        }
    }

    pub fn bump_gradient(strength: f64, width: f64) -> Self {
        Self::bump(strength, width, false)
    }

    /// `-grad B^eta`.
    pub fn repulsive_bump(strength: f64, width: f64) -> Self {
        Self::bump(strength, width, true)
    }

    fn bump(strength: f64, width: f64, repulsive: bool) -> Self {
        let d = strength.abs();
        KernelSpec {
            form: KernelForm::BumpGradient {
                strength,
                width,
                repulsive,
            },
            sup_norm: Some(d * BUMP_GRADIENT_SUP / (width * width)),
            lipschitz: Some(d * BUMP_HESSIAN_SUP / (width * width * width)),
        }
    }

    pub fn opinion(strength: f64, radius: f64) -> Self {
        let d = strength.abs();
        KernelSpec {
            form: KernelForm::Opinion { strength, radius },
            sup_norm: Some(d * radius * OPINION_PROFILE_SUP),
            lipschitz: Some(d * OPINION_PROFILE_LIPSCHITZ),
        }
    }

    pub fn custom(field: CustomField, sup_norm: Option<f64>, lipschitz: Option<f64>) -> Self {
        KernelSpec {
            form: KernelForm::Custom(field),
            sup_norm,
            lipschitz,
        }
    }

    /// True when the kernel vanishes identically (zero form or zero strength).
    pub fn is_zero(&self) -> bool {
        match self.form {
            KernelForm::Zero => true,
            KernelForm::ScaledCauchy { q_i, q_j } => q_i * q_j == 0.0,
            KernelForm::BumpGradient { strength, .. } | KernelForm::Opinion { strength, .. } => strength == 0.0,
            KernelForm::Custom(_) => false,
        }
    }

    /// Adds `K(x)` to `acc`. No finiteness checks; callers validate results.
    #[inline]
    pub fn accumulate(&self, x: &[f64], acc: &mut [f64]) {
        match &self.form {
            KernelForm::ScaledCauchy { q_i, q_j } => {
                let s = 1.0 + norm_sq(x);
                let c = q_i * q_j / s;
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a += c * xi;
                }
            }
            KernelForm::BumpGradient {
                strength,
                width,
                repulsive,
            } => {
                if *strength == 0.0 {
                    return;
                }
                let inv_w = 1.0 / width;
                let s = norm_sq(x) * inv_w * inv_w;
                if s >= SUPPORT_CLAMP * SUPPORT_CLAMP {
                    return;
                }
                let one_minus = 1.0 - s;
                let g = (1.0 - 1.0 / one_minus).exp();
                // grad_x [B(x/w)/w] = B'(x/w)/w^2, B'(y) = -2 D g(y) y / (1-|y|^2)^2
                let mut c = -2.0 * strength * g / (one_minus * one_minus) * inv_w * inv_w * inv_w;
                if *repulsive {
                    c = -c;
                }
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a += c * xi;
                }
            }
            KernelForm::Opinion { strength, radius } => {
                if *strength == 0.0 {
                    return;
                }
                let inv_r = 1.0 / radius;
                let s = norm_sq(x) * inv_r * inv_r;
                if s >= SUPPORT_CLAMP * SUPPORT_CLAMP {
                    return;
                }
                let t = s * s * s * s * s;
                let c = -strength * (1.0 - 1.0 / (1.0 - t)).exp();
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a += c * xi;
                }
            }
            KernelForm::Zero => {}
            KernelForm::Custom(f) => {
                let mut out = vec![0.0; x.len()];
                f.call(x, &mut out);
                for (a, o) in acc.iter_mut().zip(&out) {
                    *a += o;
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.accumulate(x, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum PotentialForm {
    /// `grad V(x) = rate (x - center)`.
    QuadraticWell { rate: f64, center: Vec<f64> },
    None,
    /// A user-supplied `grad V`.
    #[serde(skip)]
    Custom(CustomField),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub form: PotentialForm,
    /// Declared strong-convexity constant `r_i`.
    pub convexity: Option<f64>,
    /// Declared polynomial growth exponent `q_i` of `|grad V| + |D^2 V|`.
    pub growth: f64,
}

impl PotentialSpec {
    pub fn none() -> Self {
        PotentialSpec {
            form: PotentialForm::None,
            convexity: Some(0.0),
            growth: 0.0,
        }
    }

    pub fn quadratic_well(rate: f64, center: Vec<f64>) -> Self {
        PotentialSpec {
            form: PotentialForm::QuadraticWell { rate, center },
            convexity: Some(rate),
            growth: 1.0,
        }
    }

    #[inline]
    pub fn accumulate_gradient(&self, x: &[f64], acc: &mut [f64]) {
        match &self.form {
            PotentialForm::QuadraticWell { rate, center } => {
                for ((a, xi), m) in acc.iter_mut().zip(x).zip(center) {
                    *a += rate * (xi - m);
                }
            }
            PotentialForm::None => {}
            PotentialForm::Custom(f) => {
                let mut out = vec![0.0; x.len()];
                f.call(x, &mut out);
                for (a, o) in acc.iter_mut().zip(&out) {
                    *a += o;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MultiplicativeForm {
    Constant { value: f64 },
    /// `scale / (1 + |x|^2)^(1/2)`.
    InverseSqrt { scale: f64 },
    /// `scale * (2 - tanh^2 |x|)^(1/2)`.
    TanhModulated { scale: f64 },
    #[serde(skip)]
    Custom(CustomScalar),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DiffusionSpec {
    Additive {
        sigma: f64,
    },
    Multiplicative {
        profile: MultiplicativeForm,
        lipschitz: Option<f64>,
        sup_bound: Option<f64>,
    },
}

impl DiffusionSpec {
    pub fn additive(sigma: f64) -> Self {
        DiffusionSpec::Additive { sigma }
    }

    pub fn multiplicative(profile: MultiplicativeForm) -> Self {
        let (lipschitz, sup_bound) = match &profile {
            MultiplicativeForm::Constant { value } => (Some(0.0), Some(value.abs())),
            MultiplicativeForm::InverseSqrt { scale } => {
                (Some(scale.abs() * INVERSE_SQRT_LIPSCHITZ), Some(scale.abs()))
            }
            MultiplicativeForm::TanhModulated { scale } => (
                Some(scale.abs() * TANH_MODULATED_LIPSCHITZ),
                Some(scale.abs() * std::f64::consts::SQRT_2),
            ),
            MultiplicativeForm::Custom(_) => (None, None),
        };
        DiffusionSpec::Multiplicative {
            profile,
            lipschitz,
            sup_bound,
        }
    }

    pub fn is_additive(&self) -> bool {
        matches!(self, DiffusionSpec::Additive { .. })
    }

    /// Diffusion coefficient at `x`, without sign checks.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            DiffusionSpec::Additive { sigma } => *sigma,
            DiffusionSpec::Multiplicative { profile, .. } => match profile {
                MultiplicativeForm::Constant { value } => *value,
                MultiplicativeForm::InverseSqrt { scale } => scale / (1.0 + norm_sq(x)).sqrt(),
                MultiplicativeForm::TanhModulated { scale } => {
                    let t = norm_sq(x).sqrt().tanh();
                    scale * (2.0 - t * t).sqrt()
                }
                MultiplicativeForm::Custom(f) => f.call(x),
            },
        }
    }

    fn declared_lipschitz(&self) -> Option<f64> {
        match self {
            DiffusionSpec::Additive { .. } => Some(0.0),
            DiffusionSpec::Multiplicative { lipschitz, .. } => *lipschitz,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum InitialDistribution {
    /// Isotropic Gaussian with covariance `variance * I`.
    Gaussian { mean: Vec<f64>, variance: f64 },
    /// Independent uniform coordinates on `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    PointCloud { positions: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSpec {
    pub particles: usize,
    pub batch_size: usize,
    pub diffusion: DiffusionSpec,
    pub potential: PotentialSpec,
    pub initial: InitialDistribution,
}

impl SpeciesSpec {
    /// Number of batches `b_i = N_i / p_i`.
    pub fn batch_count(&self) -> usize {
        self.particles / self.batch_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub dimension: usize,
    pub species: Vec<SpeciesSpec>,
    /// `kernels[i][j]` acts on `X_i - X_j`.
    pub kernels: Vec<Vec<KernelSpec>>,
    pub end_time: f64,
    pub step: f64,
    /// Add `sigma * dt` instead of `sigma * dB` (literal reading of the
    /// opinion-model noise term).
    #[serde(default)]
    pub noise_as_drift: bool,
}

/// Particle counts and batch sizes, the only data the batching layer needs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub particles: Vec<usize>,
    pub batch_sizes: Vec<usize>,
}

impl BatchLayout {
    pub fn new(particles: Vec<usize>, batch_sizes: Vec<usize>) -> Result<Self> {
        if particles.len() != batch_sizes.len() || particles.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} particle counts vs {} batch sizes",
                particles.len(),
                batch_sizes.len()
            )));
        }
        for (i, (&n, &p)) in particles.iter().zip(&batch_sizes).enumerate() {
            if p < 2 || n % p != 0 {
                return Err(Error::Validation(vec![Diagnostic::error(
                    format!("species.{}.batch_size", i + 1),
                    format!("batch size {p} must be at least 2 and divide particle count {n}"),
                )]));
            }
        }
        Ok(BatchLayout {
            particles,
            batch_sizes,
        })
    }

    pub fn species_count(&self) -> usize {
        self.particles.len()
    }

    pub fn batch_count(&self, i: usize) -> usize {
        self.particles[i] / self.batch_sizes[i]
    }

    pub fn batch_counts(&self) -> Vec<usize> {
        (0..self.species_count()).map(|i| self.batch_count(i)).collect()
    }

    pub fn total_particles(&self) -> usize {
        self.particles.iter().sum()
    }
}

impl SystemSpec {
    pub fn species_count(&self) -> usize {
        self.species.len()
    }

    pub fn total_particles(&self) -> usize {
        self.species.iter().map(|s| s.particles).sum()
    }

    pub fn layout(&self) -> BatchLayout {
        BatchLayout {
            particles: self.species.iter().map(|s| s.particles).collect(),
            batch_sizes: self.species.iter().map(|s| s.batch_size).collect(),
        }
    }

    /// Number of steps `M = ceil(T / tau)` for step size `tau`.
    pub fn step_count_for(&self, tau: f64) -> usize {
        step_count(self.end_time, tau)
    }

    pub fn step_count(&self) -> usize {
        self.step_count_for(self.step)
    }

    /// Stable fingerprint of the problem definition.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `ceil(end / tau)` with a relative tolerance so that exact multiples do not
/// gain a spurious extra step from rounding.
pub fn step_count(end_time: f64, tau: f64) -> usize {
    let ratio = end_time / tau;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= 1e-9 * ratio.max(1.0) {
        rounded.max(1.0) as usize
    } else {
        ratio.ceil() as usize
    }
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("non-finite input {x:?}")))
    }
}

/// `K_ij(x)` for species indices `i, j` (0-based).
pub fn eval_kernel(kernels: &[Vec<KernelSpec>], i: usize, j: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x)?;
    let kernel = kernels
        .get(i)
        .and_then(|row| row.get(j))
        .ok_or_else(|| Error::IndexOutOfRange(format!("kernel ({i}, {j})")))?;
    Ok(kernel.eval(x))
}

pub fn eval_potential_grad(potential: &PotentialSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_finite(x)?;
    let mut out = vec![0.0; x.len()];
    potential.accumulate_gradient(x, &mut out);
    Ok(out)
}

pub fn eval_diffusion(diffusion: &DiffusionSpec, x: &[f64]) -> Result<f64> {
    check_finite(x)?;
    let v = diffusion.value(x);
    if v < 0.0 || !v.is_finite() {
        return Err(Error::Config(format!("diffusion coefficient {v} at {x:?} is negative or non-finite")));
    }
    Ok(v)
}

/// Structural errors and assumption warnings for a system definition.
///
/// Structural problems (`p_i` not dividing `N_i`, non-positive step, shape
/// mismatches) are reported with [`crate::Severity::Error`]. Violations of the
/// strong-convexity inequalities on the declared constants are warnings: the
/// simulator still runs, just outside the convergence theory's hypotheses.
pub fn validate_system(spec: &SystemSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = spec.species.len();
    let d = spec.dimension;
    if d == 0 {
        out.push(Diagnostic::error("system.dimension", "dimension must be at least 1"));
    }
    if n == 0 {
        out.push(Diagnostic::error("species", "at least one species is required"));
    }
    if !(spec.end_time.is_finite() && spec.end_time > 0.0) {
        out.push(Diagnostic::error("system.end_time", format!("end time must be positive, got {}", spec.end_time)));
    }
    if !(spec.step.is_finite() && spec.step > 0.0) {
        out.push(Diagnostic::error("system.step", format!("step must be positive, got {}", spec.step)));
    }

    for (i, s) in spec.species.iter().enumerate() {
        let base = format!("species.{}", i + 1);
        if s.particles == 0 {
            out.push(Diagnostic::error(format!("{base}.particles"), "particle count must be positive"));
        }
        if s.batch_size < 2 {
            out.push(Diagnostic::error(
                format!("{base}.batch_size"),
                format!("batch size must be at least 2, got {}", s.batch_size),
            ));
        } else if s.particles % s.batch_size != 0 {
            out.push(Diagnostic::error(
                format!("{base}.batch_size"),
                format!(
                    "batch size must divide particle count ({} does not divide {})",
                    s.batch_size, s.particles
                ),
            ));
        }
        if let DiffusionSpec::Additive { sigma } = s.diffusion {
            if !(sigma.is_finite() && sigma >= 0.0) {
                out.push(Diagnostic::error(format!("{base}.sigma"), "diffusion must be finite and nonnegative"));
            }
        }
        match &s.potential.form {
            PotentialForm::QuadraticWell { rate, center } => {
                if center.len() != d {
                    out.push(Diagnostic::error(
                        format!("{base}.potential_center"),
                        format!("center has {} coordinates, dimension is {d}", center.len()),
                    ));
                }
                if !rate.is_finite() {
                    out.push(Diagnostic::error(format!("{base}.potential_rate"), "rate must be finite"));
                }
            }
            PotentialForm::None | PotentialForm::Custom(_) => {}
        }
        match &s.initial {
            InitialDistribution::Gaussian { mean, variance } => {
                if mean.len() != d {
                    out.push(Diagnostic::error(
                        format!("{base}.initial_mean"),
                        format!("mean has {} coordinates, dimension is {d}", mean.len()),
                    ));
                }
                if !(variance.is_finite() && *variance >= 0.0) {
                    out.push(Diagnostic::error(format!("{base}.initial_variance"), "variance must be nonnegative"));
                }
            }
            InitialDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    out.push(Diagnostic::error(format!("{base}.initial_range"), "uniform range needs lo < hi"));
                }
            }
            InitialDistribution::PointCloud { positions } => {
                if positions.len() != s.particles || positions.iter().any(|p| p.len() != d) {
                    out.push(Diagnostic::error(
                        format!("{base}.initial_points"),
                        format!("point cloud must hold {} points of dimension {d}", s.particles),
                    ));
                }
            }
        }
    }

    if spec.kernels.len() != n || spec.kernels.iter().any(|row| row.len() != n) {
        out.push(Diagnostic::error("kernel", format!("kernel matrix must be exactly {n}x{n}")));
        return out;
    }
    for (i, row) in spec.kernels.iter().enumerate() {
        for (j, k) in row.iter().enumerate() {
            let path = format!("kernel.{}.{}", i + 1, j + 1);
            for v in [k.sup_norm, k.lipschitz].into_iter().flatten() {
                if !(v.is_finite() && v >= 0.0) {
                    out.push(Diagnostic::error(path.clone(), "declared constants must be finite and nonnegative"));
                }
            }
            match k.form {
                KernelForm::BumpGradient { width, .. } if !(width > 0.0) => {
                    out.push(Diagnostic::error(path.clone(), "bump width must be positive"));
                }
                KernelForm::Opinion { radius, .. } if !(radius > 0.0) => {
                    out.push(Diagnostic::error(path.clone(), "interaction radius must be positive"));
                }
                _ => {}
            }
        }
    }
    if out.iter().any(Diagnostic::is_error) {
        return out;
    }

    // Strong convexity versus declared kernel Lipschitz constants; skipped
    // wherever a constant is undeclared.
    for (i, s) in spec.species.iter().enumerate() {
        let Some(r) = s.potential.convexity else { continue };
        let mut coupling = 0.0;
        let mut declared = true;
        for j in 0..n {
            match (spec.kernels[i][j].lipschitz, spec.kernels[j][i].lipschitz) {
                (Some(a), Some(b)) => coupling += 2.0 * a.max(b),
                _ => declared = false,
            }
        }
        if !declared {
            continue;
        }
        let path = format!("species.{}.convexity", i + 1);
        if r <= coupling {
            out.push(Diagnostic::warning(
                path.clone(),
                format!("strong convexity r = {r} does not exceed 2 * sum_j max(L_ij, L_ji) = {}", rounded(coupling)),
            ));
        }
        if !s.diffusion.is_additive() {
            if let Some(l) = s.diffusion.declared_lipschitz() {
                let bound = coupling + l * l * d as f64;
                if r <= bound {
                    out.push(Diagnostic::warning(
                        path.clone(),
                        format!("r = {r} does not exceed 2 * sum_j max(L_ij, L_ji) + L_i^2 d = {}", rounded(bound)),
                    ));
                }
                let q = s.potential.growth.max(1.0);
                let bound = 2.0 * l * l * (2.0 * q + d as f64 - 2.0);
                if r <= bound {
                    out.push(Diagnostic::warning(
                        path,
                        format!("r = {r} does not exceed 2 L_i^2 (2 max(1, q_i) + d - 2) = {}", rounded(bound)),
                    ));
                }
            }
        }
    }
    out
}

/// Six significant decimals, for messages.
fn rounded(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Fails with [`Error::Validation`] on structural errors; returns the
/// warnings otherwise.
pub fn ensure_valid(spec: &SystemSpec) -> Result<Vec<Diagnostic>> {
    let diags = validate_system(spec);
    if diags.iter().any(Diagnostic::is_error) {
        Err(Error::Validation(diags.into_iter().filter(Diagnostic::is_error).collect()))
    } else {
        Ok(diags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_system(particles: usize, batch: usize, sigma: f64) -> SystemSpec {
        SystemSpec {
            dimension: 1,
            species: vec![SpeciesSpec {
                particles,
                batch_size: batch,
                diffusion: DiffusionSpec::additive(sigma),
                potential: PotentialSpec::quadratic_well(1.0, vec![0.0]),
                initial: InitialDistribution::Uniform { lo: 0.0, hi: 1.0 },
            }],
            kernels: vec![vec![KernelSpec::zero()]],
            end_time: 1.0,
            step: 0.5,
            noise_as_drift: false,
        }
    }

    #[test]
    fn scaled_cauchy_forced_arithmetic() {
        let k = vec![vec![KernelSpec::scaled_cauchy(-1.0, 2.0)]];
        assert_eq!(eval_kernel(&k, 0, 0, &[1.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
    }

    #[test]
    fn builtin_kernels_vanish_at_origin() {
        for k in [
            KernelSpec::scaled_cauchy(-1.0, 2.0),
            KernelSpec::bump_gradient(355.0, 2.0),
            KernelSpec::opinion(5.0, 1.0),
            KernelSpec::zero(),
        ] {
            assert_eq!(k.eval(&[0.0, 0.0]), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn opinion_kernel_has_compact_support() {
        let k = KernelSpec::opinion(5.0, 1.0);
        assert_eq!(k.eval(&[1.5]), vec![0.0]);
        assert_eq!(k.eval(&[1.0]), vec![0.0]);
        assert!(k.eval(&[0.5])[0] < 0.0);
    }

    #[test]
    fn bump_kernel_clamps_near_boundary() {
        let k = KernelSpec::bump_gradient(1.0, 2.0);
        assert_eq!(k.eval(&[2.0 * (1.0 - 1e-13)]), vec![0.0]);
        assert_eq!(k.eval(&[-3.0]), vec![0.0]);
    }

    #[test]
    fn repulsive_bump_flips_sign() {
        let a = KernelSpec::bump_gradient(3.0, 2.0);
        let r = KernelSpec::repulsive_bump(3.0, 2.0);
        assert!(a.eval(&[0.7])[0] < 0.0);
        assert_eq!(r.eval(&[0.7]), vec![-a.eval(&[0.7])[0]]);
        assert_eq!(r.sup_norm, a.sup_norm);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let k = vec![vec![KernelSpec::zero()]];
        assert!(matches!(eval_kernel(&k, 0, 0, &[f64::NAN]), Err(Error::InvalidState(_))));
        assert!(eval_potential_grad(&PotentialSpec::none(), &[f64::INFINITY]).is_err());
        assert!(eval_kernel(&k, 1, 0, &[0.0]).is_err());
    }

    #[test]
    fn quadratic_well_gradients() {
        let v = PotentialSpec::quadratic_well(1.0, vec![1.0, 0.0]);
        assert_eq!(eval_potential_grad(&v, &[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let v = PotentialSpec::quadratic_well(4.0, vec![-1.0, -1.0]);
        assert_eq!(eval_potential_grad(&v, &[0.0, 0.0]).unwrap(), vec![4.0, 4.0]);
        assert_eq!(eval_potential_grad(&PotentialSpec::none(), &[3.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn diffusion_values() {
        assert_eq!(eval_diffusion(&DiffusionSpec::additive(0.5), &[7.0, 1.0]).unwrap(), 0.5);
        assert_eq!(eval_diffusion(&DiffusionSpec::additive(0.0), &[7.0]).unwrap(), 0.0);
        let m = DiffusionSpec::multiplicative(MultiplicativeForm::InverseSqrt { scale: 0.1 });
        assert_eq!(eval_diffusion(&m, &[0.0, 0.0]).unwrap(), 0.1);
        let bad = DiffusionSpec::multiplicative(MultiplicativeForm::Custom(CustomScalar::new(|_| -1.0)));
        assert!(matches!(eval_diffusion(&bad, &[0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn declared_multiplicative_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for profile in [
            MultiplicativeForm::InverseSqrt { scale: 0.7 },
            MultiplicativeForm::TanhModulated { scale: 0.5 },
        ] {
            let diff = DiffusionSpec::multiplicative(profile);
            let DiffusionSpec::Multiplicative { lipschitz, sup_bound, .. } = &diff else { unreachable!() };
            for _ in 0..20_000 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
                let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
                let dist = norm_sq(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt();
                let (a, b) = (diff.value(&x), diff.value(&y));
                assert!(a <= sup_bound.unwrap() + 1e-15);
                assert!((a - b).abs() <= lipschitz.unwrap() * dist + 1e-15);
            }
        }
    }

    #[test]
    fn indivisible_batch_is_an_error() {
        let spec = zero_system(5, 2, 1.0);
        let diags = validate_system(&spec);
        assert!(diags.iter().any(|d| d.is_error() && d.message.contains("batch size must divide particle count")));
        assert!(ensure_valid(&spec).is_err());
    }

    #[test]
    fn zero_kernels_with_unit_convexity_have_no_warnings() {
        let spec = zero_system(4, 2, 1.0);
        assert!(validate_system(&spec).is_empty());
    }

    #[test]
    fn non_positive_step_is_an_error() {
        let mut spec = zero_system(4, 2, 1.0);
        spec.step = 0.0;
        assert!(ensure_valid(&spec).is_err());
        spec.step = -1.0;
        assert!(ensure_valid(&spec).is_err());
    }

    #[test]
    fn step_count_rounds_up() {
        assert_eq!(step_count(1.0, 0.25), 4);
        assert_eq!(step_count(1.0, 0.3), 4);
        assert_eq!(step_count(5.0, 1e-3), 5000);
        assert_eq!(step_count(2.0, 1e-2), 200);
        assert_eq!(step_count(1.0, 1.0), 1);
    }

    #[test]
    fn validation_is_pure() {
        let spec = crate::scenarios::preset("test3").unwrap().system;
        assert_eq!(validate_system(&spec), validate_system(&spec));
    }
}
