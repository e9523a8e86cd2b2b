//! Conditionally factorized exponential-family priors p(z|u).
//!
//! Each latent component follows a univariate exponential family
//! Q(z)/Z(lambda) * exp(<T(z), lambda>); the natural parameters come from
//! a lambda-map (lookup table over segment labels, or an MLP on the
//! one-hot u). Natural parameters are the canonical internal
//! representation; moment parameters are a conversion layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::nets::{Mlp, MlpSpec, NetsError, ParamId, ParamStore, TapeBinding};
use crate::rng::CounterRng;
use crate::tensor::{Tape, TensorError, TensorId};

/// Domain floor keeping constrained naturals strictly inside the valid
/// open set (softplus alone can underflow to exactly zero).
const NATURAL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorsError {
    InvalidNatural { component: usize, value: f64 },
    NotOneHot { row: usize },
    NonPositiveVariance { value: f64 },
    NonZeroMean { value: f64 },
    BadLength { what: &'static str, expected: usize, got: usize },
    WrongFamily(String),
    Tensor(TensorError),
    Nets(NetsError),
}

impl fmt::Display for PriorsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorsError::InvalidNatural { component, value } => {
                write!(f, "natural parameter {value} for component {component} outside the family domain")
            }
            PriorsError::NotOneHot { row } => write!(f, "row {row} of u is not one-hot"),
            PriorsError::NonPositiveVariance { value } => {
                write!(f, "variance {value} must be strictly positive")
            }
            PriorsError::NonZeroMean { value } => {
                write!(f, "this family has fixed zero mean, got {value}")
            }
            PriorsError::BadLength { what, expected, got } => {
                write!(f, "{what}: expected length {expected}, got {got}")
            }
            PriorsError::WrongFamily(msg) => write!(f, "{msg}"),
            PriorsError::Tensor(e) => write!(f, "{e}"),
            PriorsError::Nets(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PriorsError {}

impl From<TensorError> for PriorsError {
    fn from(e: TensorError) -> Self {
        PriorsError::Tensor(e)
    }
}

impl From<NetsError> for PriorsError {
    fn from(e: NetsError) -> Self {
        PriorsError::Nets(e)
    }
}

/// The univariate families used across the experiments.
///
/// * `GaussianMeanVar`: k = 2, T(z) = (z, z^2), Q = 1.
/// * `GaussianVar`: k = 1, T(z) = z^2, Q = 1 (zero-mean, variance modulated).
/// * `LaplaceScale`: k = 1, T(z) = -|z|, Q = 1 (scale modulated).
/// * `GaussianLocation`: k = 1, T(z) = z, Q = exp(-z^2); the family whose
///   location-only modulation leaves an orthogonal rotation unresolvable,
///   used as the negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ExpFamilyKind {
    GaussianMeanVar,
    GaussianVar,
    LaplaceScale,
    GaussianLocation,
}

impl ExpFamilyKind {
    /// Dimension k of the sufficient statistic.
    pub fn stat_dim(self) -> usize {
        match self {
            ExpFamilyKind::GaussianMeanVar => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpFamilySpec {
    pub kind: ExpFamilyKind,
    /// Number of latent components n.
    pub n: usize,
}

impl ExpFamilySpec {
    pub fn new(kind: ExpFamilyKind, n: usize) -> Self {
        ExpFamilySpec { kind, n }
    }

    pub fn stat_dim(&self) -> usize {
        self.kind.stat_dim()
    }

    /// Total natural-parameter dimension n * k.
    pub fn nat_dim(&self) -> usize {
        self.n * self.stat_dim()
    }

    /// Componentwise sufficient statistics, concatenated component-major,
    /// statistic-minor: row -> (T_{1,1}, .., T_{1,k}, T_{2,1}, ..).
    pub fn sufficient_stats(&self, z: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(z.len(), rows * self.n);
        let mut out = Vec::with_capacity(rows * self.nat_dim());
        for r in 0..rows {
            for i in 0..self.n {
                let zi = z[r * self.n + i];
                match self.kind {
                    ExpFamilyKind::GaussianMeanVar => {
                        out.push(zi);
                        out.push(zi * zi);
                    }
                    ExpFamilyKind::GaussianVar => out.push(zi * zi),
                    ExpFamilyKind::LaplaceScale => out.push(-math::abs(zi)),
                    ExpFamilyKind::GaussianLocation => out.push(zi),
                }
            }
        }
        out
    }

    /// Check stacked natural-parameter rows against the family domain.
    pub fn validate_naturals(&self, lambda: &[f64]) -> Result<(), PriorsError> {
        if lambda.is_empty() || lambda.len() % self.nat_dim() != 0 {
            return Err(PriorsError::BadLength {
                what: "natural parameters",
                expected: self.nat_dim(),
                got: lambda.len(),
            });
        }
        let k = self.stat_dim();
        for (idx, chunk) in lambda.chunks(k).enumerate() {
            let component = idx % self.n;
            match self.kind {
                ExpFamilyKind::GaussianMeanVar => {
                    if !(chunk[1] < 0.0) {
                        return Err(PriorsError::InvalidNatural { component, value: chunk[1] });
                    }
                }
                ExpFamilyKind::GaussianVar => {
                    if !(chunk[0] < 0.0) {
                        return Err(PriorsError::InvalidNatural { component, value: chunk[0] });
                    }
                }
                ExpFamilyKind::LaplaceScale => {
                    if !(chunk[0] > 0.0) {
                        return Err(PriorsError::InvalidNatural { component, value: chunk[0] });
                    }
                }
                ExpFamilyKind::GaussianLocation => {}
            }
        }
        Ok(())
    }

    /// log Z for one component's natural parameters.
    pub fn log_normalizer(&self, eta: &[f64]) -> f64 {
        match self.kind {
            ExpFamilyKind::GaussianMeanVar => {
                let (e1, e2) = (eta[0], eta[1]);
                -e1 * e1 / (4.0 * e2) + 0.5 * math::ln(math::PI) - 0.5 * math::ln(-e2)
            }
            ExpFamilyKind::GaussianVar => 0.5 * math::ln(math::PI) - 0.5 * math::ln(-eta[0]),
            ExpFamilyKind::LaplaceScale => math::ln(2.0) - math::ln(eta[0]),
            ExpFamilyKind::GaussianLocation => eta[0] * eta[0] / 4.0 + 0.5 * math::ln(math::PI),
        }
    }

    /// Gradient of log Z wrt the naturals, i.e. E[T] in closed form.
    pub fn grad_log_normalizer(&self, eta: &[f64]) -> Vec<f64> {
        match self.kind {
            ExpFamilyKind::GaussianMeanVar => {
                let var = -1.0 / (2.0 * eta[1]);
                let mean = eta[0] * var;
                vec![mean, mean * mean + var]
            }
            ExpFamilyKind::GaussianVar => vec![-1.0 / (2.0 * eta[0])],
            ExpFamilyKind::LaplaceScale => vec![-1.0 / eta[0]],
            ExpFamilyKind::GaussianLocation => vec![eta[0] / 2.0],
        }
    }

    /// log of the base measure Q at one point.
    pub fn log_base_measure(&self, z: f64) -> f64 {
        match self.kind {
            ExpFamilyKind::GaussianLocation => -z * z,
            _ => 0.0,
        }
    }

    /// Sufficient statistic of a single component value.
    fn component_stats(&self, zi: f64) -> [f64; 2] {
        match self.kind {
            ExpFamilyKind::GaussianMeanVar => [zi, zi * zi],
            ExpFamilyKind::GaussianVar => [zi * zi, 0.0],
            ExpFamilyKind::LaplaceScale => [-math::abs(zi), 0.0],
            ExpFamilyKind::GaussianLocation => [zi, 0.0],
        }
    }

    /// Exact normalized log-densities, one per row. `lambda` is
    /// `rows x (n k)` (or a single row shared across the batch), `z` is
    /// `rows x n`.
    pub fn log_prior_rows(&self, lambda: &[f64], z: &[f64], rows: usize) -> Result<Vec<f64>, PriorsError> {
        self.validate_naturals(lambda)?;
        let nk = self.nat_dim();
        let shared = lambda.len() == nk;
        if !shared && lambda.len() != rows * nk {
            return Err(PriorsError::BadLength {
                what: "lambda rows",
                expected: rows * nk,
                got: lambda.len(),
            });
        }
        let k = self.stat_dim();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let lrow = if shared { lambda } else { &lambda[r * nk..(r + 1) * nk] };
            let mut acc = 0.0;
            for i in 0..self.n {
                let zi = z[r * self.n + i];
                let eta = &lrow[i * k..(i + 1) * k];
                let stats = self.component_stats(zi);
                let dot: f64 = stats[..k].iter().zip(eta).map(|(t, l)| t * l).sum();
                acc += self.log_base_measure(zi) + dot - self.log_normalizer(eta);
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// i.i.d. draws from p(z|lambda): `count x n`, deterministic per rng
    /// stream. Gaussian components use Box-Muller, Laplace the inverse CDF.
    pub fn sample(&self, lambda: &[f64], count: usize, rng: &mut CounterRng) -> Result<Vec<f64>, PriorsError> {
        if lambda.len() != self.nat_dim() {
            return Err(PriorsError::BadLength {
                what: "lambda row",
                expected: self.nat_dim(),
                got: lambda.len(),
            });
        }
        self.validate_naturals(lambda)?;
        let k = self.stat_dim();
        let mut out = Vec::with_capacity(count * self.n);
        for _ in 0..count {
            for i in 0..self.n {
                let eta = &lambda[i * k..(i + 1) * k];
                let v = match self.kind {
                    ExpFamilyKind::GaussianMeanVar => {
                        let var = -1.0 / (2.0 * eta[1]);
                        let mean = eta[0] * var;
                        mean + math::sqrt(var) * rng.normal()
                    }
                    ExpFamilyKind::GaussianVar => {
                        let var = -1.0 / (2.0 * eta[0]);
                        math::sqrt(var) * rng.normal()
                    }
                    ExpFamilyKind::LaplaceScale => rng.laplace() / eta[0],
                    ExpFamilyKind::GaussianLocation => eta[0] / 2.0 + math::sqrt(0.5) * rng.normal(),
                };
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Convert per-component moments to naturals. `spread` is the variance
    /// for the Gaussian families and the mean absolute deviation for
    /// `LaplaceScale`.
    pub fn moment_to_natural(&self, mean: &[f64], spread: &[f64]) -> Result<Vec<f64>, PriorsError> {
        if mean.len() != self.n || spread.len() != self.n {
            return Err(PriorsError::BadLength {
                what: "moments",
                expected: self.n,
                got: mean.len().max(spread.len()),
            });
        }
        let mut out = Vec::with_capacity(self.nat_dim());
        for i in 0..self.n {
            let (m, s) = (mean[i], spread[i]);
            if s <= 0.0 {
                return Err(PriorsError::NonPositiveVariance { value: s });
            }
            match self.kind {
                ExpFamilyKind::GaussianMeanVar => {
                    out.push(m / s);
                    out.push(-1.0 / (2.0 * s));
                }
                ExpFamilyKind::GaussianVar => {
                    if m != 0.0 {
                        return Err(PriorsError::NonZeroMean { value: m });
                    }
                    out.push(-1.0 / (2.0 * s));
                }
                ExpFamilyKind::LaplaceScale => {
                    if m != 0.0 {
                        return Err(PriorsError::NonZeroMean { value: m });
                    }
                    out.push(1.0 / s);
                }
                ExpFamilyKind::GaussianLocation => {
                    if math::abs(s - 0.5) > 1e-9 {
                        return Err(PriorsError::WrongFamily(format!(
                            "GaussianLocation has fixed variance 0.5, got {s}"
                        )));
                    }
                    out.push(2.0 * m);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`ExpFamilySpec::moment_to_natural`]; returns
    /// (means, spreads) in the same convention.
    pub fn natural_to_moment(&self, lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.stat_dim();
        let mut means = Vec::with_capacity(self.n);
        let mut spreads = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let eta = &lambda[i * k..(i + 1) * k];
            match self.kind {
                ExpFamilyKind::GaussianMeanVar => {
                    let var = -1.0 / (2.0 * eta[1]);
                    means.push(eta[0] * var);
                    spreads.push(var);
                }
                ExpFamilyKind::GaussianVar => {
                    means.push(0.0);
                    spreads.push(-1.0 / (2.0 * eta[0]));
                }
                ExpFamilyKind::LaplaceScale => {
                    means.push(0.0);
                    spreads.push(1.0 / eta[0]);
                }
                ExpFamilyKind::GaussianLocation => {
                    means.push(eta[0] / 2.0);
                    spreads.push(0.5);
                }
            }
        }
        (means, spreads)
    }

    /// Differentiable batch log-density: `lambda` is `[batch, n k]`, `z`
    /// is `[batch, n]`, result is `[batch]`. Gradients flow into both.
    pub fn log_prior_graph(
        &self,
        tape: &mut Tape,
        lambda: TensorId,
        z: TensorId,
    ) -> Result<TensorId, PriorsError> {
        let mut acc: Option<TensorId> = None;
        let mut constant = 0.0;
        for i in 0..self.n {
            let zi = tape.slice(z, 1, i, i + 1)?;
            let term = match self.kind {
                ExpFamilyKind::GaussianVar => {
                    let eta = tape.slice(lambda, 1, i, i + 1)?;
                    let sq = tape.square(zi)?;
                    let dot = tape.mul(sq, eta)?;
                    let neg_eta = tape.neg(eta)?;
                    let log_neg = tape.log(neg_eta)?;
                    constant -= 0.5 * math::ln(math::PI);
                    tape.add_scaled(dot, log_neg, 0.5)?
                }
                ExpFamilyKind::GaussianMeanVar => {
                    let e1 = tape.slice(lambda, 1, 2 * i, 2 * i + 1)?;
                    let e2 = tape.slice(lambda, 1, 2 * i + 1, 2 * i + 2)?;
                    let t1 = tape.mul(zi, e1)?;
                    let sq = tape.square(zi)?;
                    let t2 = tape.mul(sq, e2)?;
                    let e1sq = tape.square(e1)?;
                    let four = tape.scalar(4.0);
                    let denom = tape.mul(e2, four)?;
                    let t3 = tape.div(e1sq, denom)?;
                    let neg_e2 = tape.neg(e2)?;
                    let log_neg = tape.log(neg_e2)?;
                    let s = tape.add(t1, t2)?;
                    let s = tape.add(s, t3)?;
                    constant -= 0.5 * math::ln(math::PI);
                    tape.add_scaled(s, log_neg, 0.5)?
                }
                ExpFamilyKind::LaplaceScale => {
                    let rate = tape.slice(lambda, 1, i, i + 1)?;
                    let a = tape.abs(zi)?;
                    let na = tape.neg(a)?;
                    let dot = tape.mul(na, rate)?;
                    let lograte = tape.log(rate)?;
                    constant -= math::ln(2.0);
                    tape.add(dot, lograte)?
                }
                ExpFamilyKind::GaussianLocation => {
                    let eta = tape.slice(lambda, 1, i, i + 1)?;
                    let dot = tape.mul(zi, eta)?;
                    let zsq = tape.square(zi)?;
                    let base = tape.neg(zsq)?;
                    let etasq = tape.square(eta)?;
                    let s = tape.add(dot, base)?;
                    constant -= 0.5 * math::ln(math::PI);
                    tape.add_scaled(s, etasq, -0.25)?
                }
            };
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        let acc = acc.expect("n >= 1");
        // [batch, 1] -> [batch], plus the accumulated constants.
        let rows = tape.sum_axis(acc, 1)?;
        let c = tape.scalar(constant);
        Ok(tape.add(rows, c)?)
    }

    /// Map unconstrained values into the family's natural-parameter
    /// domain (tape version): z^2 coefficients through a negated
    /// softplus, Laplace rates through softplus, locations untouched.
    pub fn constrain_naturals_graph(&self, tape: &mut Tape, raw: TensorId) -> Result<TensorId, PriorsError> {
        match self.kind {
            ExpFamilyKind::GaussianLocation => Ok(raw),
            ExpFamilyKind::GaussianVar => {
                let sp = tape.softplus(raw)?;
                let floor = tape.scalar(NATURAL_FLOOR);
                let pos = tape.add(sp, floor)?;
                Ok(tape.neg(pos)?)
            }
            ExpFamilyKind::LaplaceScale => {
                let sp = tape.softplus(raw)?;
                let floor = tape.scalar(NATURAL_FLOOR);
                Ok(tape.add(sp, floor)?)
            }
            ExpFamilyKind::GaussianMeanVar => {
                let mut cols = Vec::with_capacity(self.nat_dim());
                for i in 0..self.n {
                    let e1 = tape.slice(raw, 1, 2 * i, 2 * i + 1)?;
                    cols.push(e1);
                    let raw_e2 = tape.slice(raw, 1, 2 * i + 1, 2 * i + 2)?;
                    let sp = tape.softplus(raw_e2)?;
                    let floor = tape.scalar(NATURAL_FLOOR);
                    let pos = tape.add(sp, floor)?;
                    cols.push(tape.neg(pos)?);
                }
                Ok(tape.concat(&cols, 1)?)
            }
        }
    }

    /// Value-level twin of [`ExpFamilySpec::constrain_naturals_graph`].
    pub fn constrain_naturals(&self, raw: &[f64]) -> Vec<f64> {
        let k = self.stat_dim();
        raw.iter()
            .enumerate()
            .map(|(idx, &v)| match self.kind {
                ExpFamilyKind::GaussianLocation => v,
                ExpFamilyKind::GaussianVar => -(math::softplus(v) + NATURAL_FLOOR),
                ExpFamilyKind::LaplaceScale => math::softplus(v) + NATURAL_FLOOR,
                ExpFamilyKind::GaussianMeanVar => {
                    if idx % k == 1 {
                        -(math::softplus(v) + NATURAL_FLOOR)
                    } else {
                        v
                    }
                }
            })
            .collect()
    }
}

// ── lambda map ──────────────────────────────────────────────────────

/// Trainable map from the one-hot auxiliary variable to natural
/// parameters. Stored values are unconstrained; the family's domain
/// constraint is applied on evaluation.
#[derive(Debug, Clone)]
pub enum LambdaMap {
    Table { raw: ParamId, segments: usize },
    Mlp { net: Mlp },
}

impl LambdaMap {
    /// Lookup-table map with small seeded perturbations around zero (zero
    /// raw values give unit-order variances after the constraint).
    pub fn init_table(
        store: &mut ParamStore,
        spec: &ExpFamilySpec,
        segments: usize,
        seed: u64,
    ) -> LambdaMap {
        let mut rng = CounterRng::new(seed);
        let data: Vec<f64> = (0..segments * spec.nat_dim())
            .map(|_| 0.01 * rng.normal())
            .collect();
        let raw = store.add(
            String::from("lambda.table"),
            vec![segments, spec.nat_dim()],
            data,
        );
        LambdaMap::Table { raw, segments }
    }

    /// MLP map on the one-hot u, for conditioning variables that are not
    /// plain segment labels.
    pub fn init_mlp(
        store: &mut ParamStore,
        spec: &ExpFamilySpec,
        segments: usize,
        hidden_dim: usize,
        num_layers: usize,
        seed: u64,
    ) -> Result<LambdaMap, PriorsError> {
        let mlp_spec = MlpSpec::new(segments, spec.nat_dim(), hidden_dim, num_layers);
        let net = Mlp::init(store, mlp_spec, seed, "lambda.mlp")?;
        Ok(LambdaMap::Mlp { net })
    }

    pub fn segments(&self) -> usize {
        match self {
            LambdaMap::Table { segments, .. } => *segments,
            LambdaMap::Mlp { net } => net.spec.input_dim,
        }
    }

    /// Differentiable evaluation: `u` is `[batch, M]` one-hot, result is
    /// `[batch, n k]` constrained naturals.
    pub fn eval_graph(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        u: TensorId,
        spec: &ExpFamilySpec,
    ) -> Result<TensorId, PriorsError> {
        validate_one_hot(tape.value(u), tape.shape(u)[1])?;
        let raw = match self {
            // Selecting rows of the table is a matmul with the one-hot u,
            // which keeps the selection differentiable in the table.
            LambdaMap::Table { raw, .. } => tape.matmul(u, binding.id(*raw))?,
            LambdaMap::Mlp { net } => net.forward(tape, binding, u)?,
        };
        spec.constrain_naturals_graph(tape, raw)
    }

    /// Value-level evaluation for generation and diagnostics.
    pub fn eval_values(
        &self,
        store: &ParamStore,
        u: &[f64],
        rows: usize,
        spec: &ExpFamilySpec,
    ) -> Result<Vec<f64>, PriorsError> {
        let m = self.segments();
        validate_one_hot(u, m)?;
        let raw = match self {
            LambdaMap::Table { raw, .. } => {
                let table = store.data(*raw);
                let nk = spec.nat_dim();
                let mut out = Vec::with_capacity(rows * nk);
                for r in 0..rows {
                    let seg = u[r * m..(r + 1) * m]
                        .iter()
                        .position(|&v| v == 1.0)
                        .expect("validated one-hot");
                    out.extend_from_slice(&table[seg * nk..(seg + 1) * nk]);
                }
                out
            }
            LambdaMap::Mlp { net } => net.forward_values(store, u, rows),
        };
        Ok(spec.constrain_naturals(&raw))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            LambdaMap::Table { raw, .. } => vec![*raw],
            LambdaMap::Mlp { net } => net.param_ids().collect(),
        }
    }
}

/// Every row must contain exactly one 1.0 and zeros elsewhere.
pub fn validate_one_hot(u: &[f64], width: usize) -> Result<(), PriorsError> {
    for (r, row) in u.chunks(width).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != width {
            return Err(PriorsError::NotOneHot { row: r });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    #[test]
    fn sufficient_stats_examples() {
        let mv = ExpFamilySpec::new(ExpFamilyKind::GaussianMeanVar, 1);
        assert_eq!(mv.sufficient_stats(&[2.0], 1), vec![2.0, 4.0]);
        let gv = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1);
        assert_eq!(gv.sufficient_stats(&[-3.0], 1), vec![9.0]);
        let lp = ExpFamilySpec::new(ExpFamilyKind::LaplaceScale, 1);
        assert_eq!(lp.sufficient_stats(&[-1.5], 1), vec![-1.5]);
    }

    #[test]
    fn stats_ordering_is_component_major() {
        let mv = ExpFamilySpec::new(ExpFamilyKind::GaussianMeanVar, 2);
        assert_eq!(
            mv.sufficient_stats(&[2.0, 3.0], 1),
            vec![2.0, 4.0, 3.0, 9.0]
        );
    }

    #[test]
    fn log_prior_standard_normal_at_zero() {
        let mv = ExpFamilySpec::new(ExpFamilyKind::GaussianMeanVar, 1);
        let lp = mv.log_prior_rows(&[0.0, -0.5], &[0.0], 1).unwrap();
        assert!((lp[0] - (-0.5 * math::LN_2PI)).abs() < 1e-12, "{}", lp[0]);
        assert!((lp[0] + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn log_prior_laplace_rate_one_at_zero() {
        let sp = ExpFamilySpec::new(ExpFamilyKind::LaplaceScale, 1);
        let lp = sp.log_prior_rows(&[1.0], &[0.0], 1).unwrap();
        assert!((lp[0] - math::ln(0.5)).abs() < 1e-12);
    }

    #[test]
    fn log_prior_matches_quadrature() {
        // gaussian_var with variance 2 at z = 1, against Simpson
        // integration of the unnormalized density on [-50, 50].
        let spec = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1);
        let eta = -1.0 / (2.0 * 2.0);
        let unnorm = |z: f64| math::exp(eta * z * z);
        let h = 1e-3;
        let steps = (100.0 / h) as usize;
        let mut integral = 0.0;
        for s in 0..steps {
            let a = -50.0 + s as f64 * h;
            integral += h / 6.0 * (unnorm(a) + 4.0 * unnorm(a + h / 2.0) + unnorm(a + h));
        }
        let expected = eta * 1.0 - math::ln(integral);
        let got = spec.log_prior_rows(&[eta], &[1.0], 1).unwrap()[0];
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn invalid_naturals_rejected() {
        let gv = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1);
        assert!(matches!(
            gv.log_prior_rows(&[0.5], &[0.0], 1),
            Err(PriorsError::InvalidNatural { .. })
        ));
        let lp = ExpFamilySpec::new(ExpFamilyKind::LaplaceScale, 1);
        assert!(lp.validate_naturals(&[-1.0]).is_err());
    }

    #[test]
    fn moment_natural_examples_and_roundtrip() {
        let mv = ExpFamilySpec::new(ExpFamilyKind::GaussianMeanVar, 1);
        assert_eq!(mv.moment_to_natural(&[0.0], &[1.0]).unwrap(), vec![0.0, -0.5]);
        let gv = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1);
        assert_eq!(gv.moment_to_natural(&[0.0], &[0.5]).unwrap(), vec![-1.0]);
        assert!(gv.moment_to_natural(&[0.0], &[-1.0]).is_err());

        for (spec, mean, spread) in [
            (mv, 0.7, 1.9),
            (ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1), 0.0, 2.3),
            (ExpFamilySpec::new(ExpFamilyKind::LaplaceScale, 1), 0.0, 0.8),
            (ExpFamilySpec::new(ExpFamilyKind::GaussianLocation, 1), -1.2, 0.5),
        ] {
            let nat = spec.moment_to_natural(&[mean], &[spread]).unwrap();
            let (m2, s2) = spec.natural_to_moment(&nat);
            let nat2 = spec.moment_to_natural(&m2, &s2).unwrap();
            for (a, b) in nat.iter().zip(&nat2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_moments() {
        let gv = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1);
        let lambda = gv.moment_to_natural(&[0.0], &[2.0]).unwrap();
        let mut rng = CounterRng::new(2024);
        let n = 100_000;
        let draws = gv.sample(&lambda, n, &mut rng).unwrap();
        let var = draws.iter().map(|z| z * z).sum::<f64>() / n as f64;
        assert!((var - 2.0).abs() < 0.05, "sample variance {var}");

        let lp = ExpFamilySpec::new(ExpFamilyKind::LaplaceScale, 1);
        let mut rng = CounterRng::new(11);
        let draws = lp.sample(&[1.0], n, &mut rng).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let gv = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 2);
        let lambda = [-0.5, -0.25];
        let a = gv.sample(&lambda, 32, &mut CounterRng::new(5)).unwrap();
        let b = gv.sample(&lambda, 32, &mut CounterRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_log_prior_matches_values() {
        for kind in [
            ExpFamilyKind::GaussianMeanVar,
            ExpFamilyKind::GaussianVar,
            ExpFamilyKind::LaplaceScale,
            ExpFamilyKind::GaussianLocation,
        ] {
            let spec = ExpFamilySpec::new(kind, 2);
            let nk = spec.nat_dim();
            let mut rng = CounterRng::new(77);
            let raw: Vec<f64> = (0..3 * nk).map(|_| rng.normal()).collect();
            let lambda = spec.constrain_naturals(&raw);
            let z: Vec<f64> = (0..3 * 2).map(|_| rng.normal()).collect();
            let want = spec.log_prior_rows(&lambda, &z, 3).unwrap();

            let mut tape = Tape::new();
            let l = tape.constant(lambda.clone(), vec![3, nk]).unwrap();
            let zt = tape.constant(z.clone(), vec![3, 2]).unwrap();
            let got = spec.log_prior_graph(&mut tape, l, zt).unwrap();
            for (a, b) in want.iter().zip(tape.value(got)) {
                assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lambda_table_selects_rows() {
        let spec = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 2);
        let mut store = ParamStore::new();
        let map = LambdaMap::init_table(&mut store, &spec, 2, 3);
        let u = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let vals = map.eval_values(&store, &u, 3, &spec).unwrap();
        assert_eq!(&vals[0..2], &vals[4..6]);
        assert_ne!(&vals[0..2], &vals[2..4]);
    }

    #[test]
    fn lambda_rejects_non_one_hot() {
        let spec = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 1);
        let mut store = ParamStore::new();
        let map = LambdaMap::init_table(&mut store, &spec, 2, 3);
        let err = map.eval_values(&store, &[0.5, 0.5], 1, &spec).unwrap_err();
        assert!(matches!(err, PriorsError::NotOneHot { row: 0 }));
    }

    #[test]
    fn mlp_lambda_outputs_stay_in_domain() {
        let spec = ExpFamilySpec::new(ExpFamilyKind::GaussianMeanVar, 3);
        let mut store = ParamStore::new();
        let map = LambdaMap::init_mlp(&mut store, &spec, 4, 16, 3, 9).unwrap();
        let mut u = vec![0.0; 4 * 4];
        for r in 0..4 {
            u[r * 4 + r] = 1.0;
        }
        let vals = map.eval_values(&store, &u, 4, &spec).unwrap();
        for row in vals.chunks(spec.nat_dim()) {
            for i in 0..3 {
                assert!(row[2 * i + 1] < 0.0, "z^2 coefficient must be negative");
            }
        }
        spec.validate_naturals(&vals).unwrap();
    }

    #[test]
    fn log_prior_grad_wrt_lambda_params_matches_fd() {
        // Gradient of sum(log p(z|lambda(u))) wrt the raw table values.
        let z = [0.3, -1.1, 0.9, 0.4];
        let u = [1.0, 0.0, 0.0, 1.0];
        let raw0 = [0.2, -0.4, 0.1, 0.6];

        let err = finite_difference_check(
            |tape, raw| {
                // View the flat leaf as a [2, 2] table.
                let r0 = tape.slice(raw, 0, 0, 2)?;
                let r1 = tape.slice(raw, 0, 2, 4)?;
                let row0 = tape.broadcast(r0, 0, 1)?;
                let row1 = tape.broadcast(r1, 0, 1)?;
                let table = tape.concat(&[row0, row1], 0)?;
                let uid = tape.constant(u.to_vec(), vec![2, 2])?;
                let raw_sel = tape.matmul(uid, table)?;
                let spec = ExpFamilySpec::new(ExpFamilyKind::GaussianVar, 2);
                let lambda = spec.constrain_naturals_graph(tape, raw_sel).unwrap();
                let zt = tape.constant(z.to_vec(), vec![2, 2])?;
                let lp = spec.log_prior_graph(tape, lambda, zt).unwrap();
                tape.sum(lp)
            },
            &raw0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn location_family_rotation_invariance() {
        // For T(z) = z with Q = exp(-z^2), rotating both z and lambda by
        // the same orthogonal matrix leaves the log-density unchanged.
        let n = 3;
        let spec = ExpFamilySpec::new(ExpFamilyKind::GaussianLocation, n);
        let mut rng = CounterRng::new(31);
        let r = crate::linalg::random_orthogonal(n, &mut rng);
        let lambda: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..20 {
            let z: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let rz = crate::linalg::matvec(&r, &z, n, n);
            let rl = crate::linalg::matvec(&r, &lambda, n, n);
            let base = spec.log_prior_rows(&lambda, &z, 1).unwrap()[0];
            let rotated = spec.log_prior_rows(&rl, &rz, 1).unwrap()[0];
            assert!((base - rotated).abs() < 1e-10, "{base} vs {rotated}");
        }
    }
}
