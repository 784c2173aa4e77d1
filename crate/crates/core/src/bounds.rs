//! Numerical checks of the entropy bounds on small discrete distributions.
//!
//! Natural logarithms throughout. The Jensen-Shannon divergence uses the
//! half-mixture convention, so it lies in `[0, ln 2]`.

use std::f64::consts::LN_2;
use std::fmt;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Tag};

const NORM_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Domain(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::Domain(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn xlnx_over(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// `p(x)` over a finite input alphabet and a row-stochastic `p(c|x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteConditional {
    px: Vec<f64>,
    pcx: Matrix,
}

impl DiscreteConditional {
    pub fn new(px: Vec<f64>, pcx: Matrix) -> Result<Self> {
        if px.len() != pcx.rows() || pcx.cols() == 0 {
            return Err(Error::shape(format!(
                "marginal of length {} for a {}x{} conditional",
                px.len(),
                pcx.rows(),
                pcx.cols()
            )));
        }
        check_distribution(&px, "p(x)")?;
        for (i, row) in pcx.iter_rows().enumerate() {
            check_distribution(row, &format!("p(c|x={i})"))?;
        }
        Ok(Self { px, pcx })
    }

    /// Same marginal, uniform conditional.
    pub fn uniform_like(&self) -> Self {
        let (a, k) = self.pcx.shape();
        Self {
            px: self.px.clone(),
            pcx: Matrix::from_vec(a, k, vec![1.0 / k as f64; a * k]).expect("shape"),
        }
    }

    /// Same marginal, conditional replaced by `pcx`.
    pub fn with_conditional(&self, pcx: Matrix) -> Result<Self> {
        Self::new(self.px.clone(), pcx)
    }

    pub fn inputs(&self) -> usize {
        self.px.len()
    }

    pub fn classes(&self) -> usize {
        self.pcx.cols()
    }

    pub fn px(&self) -> &[f64] {
        &self.px
    }

    pub fn pcx(&self) -> &Matrix {
        &self.pcx
    }

    fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self.pcx.shape() != other.pcx.shape() {
            return Err(Error::shape(format!(
                "conditionals {:?} and {:?} differ in shape",
                self.pcx.shape(),
                other.pcx.shape()
            )));
        }
        Ok(())
    }
}

/// Nonnegative `a x b` table summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    p: Matrix,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(p: Matrix) -> Result<Self> {
        if p.rows() == 0 || p.cols() == 0 {
            return Err(Error::shape("joint table must be non-empty"));
        }
        check_distribution(p.as_slice(), "joint")?;
        let row_marginal = p.iter_rows().map(|r| r.iter().sum()).collect();
        let mut col_marginal = vec![0.0; p.cols()];
        for r in p.iter_rows() {
            for (c, v) in col_marginal.iter_mut().zip(r) {
                *c += v;
            }
        }
        Ok(Self {
            p,
            row_marginal,
            col_marginal,
        })
    }

    pub fn table(&self) -> &Matrix {
        &self.p
    }

    pub fn marginals(&self) -> (&[f64], &[f64]) {
        (&self.row_marginal, &self.col_marginal)
    }

    /// `p(x1) p(x2)`.
    pub fn product(&self) -> Matrix {
        let (a, b) = self.p.shape();
        let mut q = Matrix::zeros(a, b);
        for i in 0..a {
            for j in 0..b {
                q.set(i, j, self.row_marginal[i] * self.col_marginal[j]);
            }
        }
        q
    }

    pub fn transpose(&self) -> Self {
        let (a, b) = self.p.shape();
        let mut t = Matrix::zeros(b, a);
        for i in 0..a {
            for j in 0..b {
                t.set(j, i, self.p.get(i, j));
            }
        }
        Self::new(t).expect("transpose of a valid joint")
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `-sum p ln sigma`; infinite when `sigma` is zero where `p` is not.
pub fn cross_entropy(p: &[f64], sigma: &[f64]) -> f64 {
    -p.iter()
        .zip(sigma)
        .filter(|&(&a, _)| a > 0.0)
        .map(|(&a, &s)| a * s.ln())
        .sum::<f64>()
}

/// `H(C|X)` by exact enumeration with `0 ln 0 = 0`.
pub fn conditional_entropy_exact(dc: &DiscreteConditional) -> f64 {
    dc.px.iter().zip(dc.pcx.iter_rows()).map(|(&w, row)| w * entropy(row)).sum()
}

/// `E_{p(x) p(c|x)}[-ln sigma(c|x)]` by exact enumeration.
pub fn expected_nll_exact(dc_true: &DiscreteConditional, dc_model: &DiscreteConditional) -> Result<f64> {
    dc_true.ensure_compatible(dc_model)?;
    Ok(dc_true
        .px
        .iter()
        .zip(dc_true.pcx.iter_rows().zip(dc_model.pcx.iter_rows()))
        .map(|(&w, (p, s))| if w == 0.0 { 0.0 } else { w * cross_entropy(p, s) })
        .sum())
}

/// Likelihood of the enumerated dataset in which pair `(x, c)` carries
/// weight `p(x, c)`, computed as a product of powers rather than a sum of
/// logs.
pub fn weighted_likelihood(dc_true: &DiscreteConditional, dc_model: &DiscreteConditional) -> Result<f64> {
    dc_true.ensure_compatible(dc_model)?;
    let mut l = 1.0;
    for (x, (p, s)) in dc_true.pcx.iter_rows().zip(dc_model.pcx.iter_rows()).enumerate() {
        for (&pc, &sc) in p.iter().zip(s) {
            let w = dc_true.px[x] * pc;
            if w > 0.0 {
                l *= sc.powf(w);
            }
        }
    }
    Ok(l)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    /// Set when the model gave probability zero to a sampled pair; `mean`
    /// is then infinite.
    pub infinite: bool,
}

/// Samples `(x, c)` i.i.d. from `dc_true` and averages `-ln dc_model(c|x)`.
pub fn avg_nll_mc(
    dc_true: &DiscreteConditional,
    dc_model: &DiscreteConditional,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    dc_true.ensure_compatible(dc_model)?;
    if n_samples == 0 {
        return Err(Error::config("avg_nll_mc needs at least one sample"));
    }
    let domain = |e: rand::distr::weighted::Error| Error::Domain(e.to_string());
    let xs = WeightedIndex::new(&dc_true.px).map_err(domain)?;
    let rows = dc_true
        .pcx
        .iter_rows()
        .map(|r| WeightedIndex::new(r).ok())
        .collect::<Vec<_>>();
    let mut rng = stream(seed, Tag::Bounds, &[0]);
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let x = xs.sample(&mut rng);
        let c = rows[x].as_ref().expect("sampled x has positive mass").sample(&mut rng);
        let s = dc_model.pcx.get(x, c);
        if s <= 0.0 {
            return Ok(McEstimate {
                mean: f64::INFINITY,
                stderr: f64::INFINITY,
                samples: n_samples,
                infinite: true,
            });
        }
        let v = -s.ln();
        sum += v;
        sumsq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        stderr: (var / n).sqrt(),
        samples: n_samples,
        infinite: false,
    })
}

/// `JSD(P || Q)` between the joint and the product of its marginals.
pub fn jsd_exact(joint: &DiscreteJoint) -> f64 {
    let q = joint.product();
    joint
        .p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&p, &q)| {
            let m = 0.5 * (p + q);
            0.5 * xlnx_over(p, m) + 0.5 * xlnx_over(q, m)
        })
        .sum()
}

/// `E_P ln d + E_Q ln(1 - d)` with `Q` the product of marginals.
pub fn jsd_lower_bound(joint: &DiscreteJoint, discriminator: &Matrix) -> Result<f64> {
    joint.p.ensure_shape(discriminator, "discriminator")?;
    if let Some(&d) = discriminator.as_slice().iter().find(|&&d| !(d > 0.0 && d < 1.0)) {
        return Err(Error::Domain(format!("discriminator value {d} is not strictly inside (0, 1)")));
    }
    let q = joint.product();
    Ok(joint
        .p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .zip(discriminator.as_slice())
        .map(|((&p, &q), &d)| p * d.ln() + q * (1.0 - d).ln())
        .sum())
}

/// Best discriminator value per cell over the grid `{1/(m+1), ..., m/(m+1)}`
/// and the resulting functional value.
pub fn jsd_grid_supremum(joint: &DiscreteJoint, grid_points: usize) -> Result<(Matrix, f64)> {
    if grid_points == 0 {
        return Err(Error::config("grid needs at least one point"));
    }
    let q = joint.product();
    let (a, b) = joint.p.shape();
    let mut best = Matrix::zeros(a, b);
    for i in 0..a {
        for j in 0..b {
            let (p, q) = (joint.p.get(i, j), q.get(i, j));
            let mut arg = (f64::NEG_INFINITY, 0.5);
            for g in 1..=grid_points {
                let d = g as f64 / (grid_points + 1) as f64;
                let v = p * d.ln() + q * (1.0 - d).ln();
                if v > arg.0 {
                    arg = (v, d);
                }
            }
            best.set(i, j, arg.1);
        }
    }
    let value = jsd_lower_bound(joint, &best)?;
    Ok((best, value))
}

/// Row-wise tempered family `sigma_t(c|x) ∝ p(c|x)^t`, applied to
/// strictly positive rows.
pub fn tempered(dc: &DiscreteConditional, t: f64) -> Result<DiscreteConditional> {
    let (a, k) = dc.pcx.shape();
    let mut out = Matrix::zeros(a, k);
    for (x, row) in dc.pcx.iter_rows().enumerate() {
        let w: Vec<f64> = row.iter().map(|&p| p.powf(t)).collect();
        let s: f64 = w.iter().sum();
        for (c, v) in w.into_iter().enumerate() {
            out.set(x, c, v / s);
        }
    }
    dc.with_conditional(out)
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn random_conditional(rng: &mut impl Rng, inputs: usize, classes: usize) -> Result<DiscreteConditional> {
    let px = random_simplex(rng, inputs);
    let mut rows = Vec::with_capacity(inputs * classes);
    for _ in 0..inputs {
        rows.extend(random_simplex(rng, classes));
    }
    DiscreteConditional::new(px, Matrix::from_vec(inputs, classes, rows)?)
}

pub fn random_joint(rng: &mut impl Rng, rows: usize, cols: usize) -> Result<DiscreteJoint> {
    DiscreteJoint::new(Matrix::from_vec(rows, cols, random_simplex(rng, rows * cols))?)
}

/// Discriminator with entries uniform in `[0.001, 0.999]`.
pub fn random_discriminator(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let v = (0..rows * cols).map(|_| rng.random_range(0.001..0.999)).collect();
    Matrix::from_vec(rows, cols, v).expect("shape")
}

// ---------------------------------------------------------------------------
// Spec files and the verification report.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub seed: u64,
    #[serde(default)]
    pub entropy_nll: EntropyNllSpec,
    #[serde(default)]
    pub upper_bound: UpperBoundSpec,
    #[serde(default)]
    pub lower_bound: LowerBoundSpec,
    /// Explicit tables checked in addition to the generated ones.
    #[serde(default)]
    pub conditionals: Vec<ConditionalTable>,
    #[serde(default)]
    pub joints: Vec<JointTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyNllSpec {
    pub instances: usize,
    pub inputs: usize,
    pub classes: usize,
    pub samples: usize,
    /// Relative tolerance of the Monte-Carlo estimate.
    pub tolerance: f64,
}

impl Default for EntropyNllSpec {
    fn default() -> Self {
        Self {
            instances: 5,
            inputs: 6,
            classes: 4,
            samples: 100_000,
            tolerance: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpperBoundSpec {
    pub pairs: usize,
    pub classes: usize,
    /// Tempering exponents searched by the likelihood/cross-entropy check.
    pub temperatures: Vec<f64>,
}

impl Default for UpperBoundSpec {
    fn default() -> Self {
        Self {
            pairs: 50,
            classes: 4,
            temperatures: (1..=30).map(|i| f64::from(i) / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowerBoundSpec {
    pub joints: usize,
    pub rows: usize,
    pub cols: usize,
    pub discriminators: usize,
    pub grid_points: usize,
    /// Allowed gap between the grid supremum and `2 JSD - 2 ln 2`.
    pub grid_tolerance: f64,
}

impl Default for LowerBoundSpec {
    fn default() -> Self {
        Self {
            joints: 10,
            rows: 4,
            cols: 4,
            discriminators: 100,
            grid_points: 999,
            grid_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalTable {
    pub px: Vec<f64>,
    pub pcx: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTable {
    pub p: Vec<Vec<f64>>,
}

pub const DEFAULT_SPEC: &str = include_str!("../data/bounds_default.toml");

impl BoundsSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read bounds spec `{}`: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.entropy_nll;
        if e.inputs == 0 || e.classes < 2 || e.samples == 0 || !(e.tolerance > 0.0) {
            return Err(Error::config("entropy_nll needs inputs >= 1, classes >= 2, samples >= 1, tolerance > 0"));
        }
        let u = &self.upper_bound;
        if u.classes < 2 || !u.temperatures.contains(&1.0) || u.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::config(
                "upper_bound needs classes >= 2 and positive temperatures including 1.0",
            ));
        }
        let l = &self.lower_bound;
        if l.rows == 0 || l.cols == 0 || l.grid_points == 0 || !(l.grid_tolerance > 0.0) {
            return Err(Error::config("lower_bound needs rows, cols, grid_points >= 1 and grid_tolerance > 0"));
        }
        for c in &self.conditionals {
            conditional_from_table(c)?;
        }
        for j in &self.joints {
            joint_from_table(j)?;
        }
        Ok(())
    }
}

fn conditional_from_table(t: &ConditionalTable) -> Result<DiscreteConditional> {
    DiscreteConditional::new(t.px.clone(), Matrix::from_rows(&t.pcx)?)
}

fn joint_from_table(t: &JointTable) -> Result<DiscreteJoint> {
    DiscreteJoint::new(Matrix::from_rows(&t.p)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClaimResult {
    pub claim: String,
    pub values: String,
    pub tolerance: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsReport {
    pub claims: Vec<ClaimResult>,
    /// Observations reported without a pass/fail verdict.
    pub notes: Vec<String>,
}

impl BoundsReport {
    pub fn all_passed(&self) -> bool {
        self.claims.iter().all(|c| c.passed)
    }
}

impl fmt::Display for BoundsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.claims {
            writeln!(
                f,
                "[{}] {}: {} (tolerance {})",
                if c.passed { "PASS" } else { "FAIL" },
                c.claim,
                c.values,
                c.tolerance
            )?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

/// Worst relative gap between MC NLL under the true model and `H(C|X)`.
pub fn check_entropy_nll(dcs: &[DiscreteConditional], samples: usize, seed: u64) -> Result<Vec<(f64, McEstimate)>> {
    dcs.iter()
        .enumerate()
        .map(|(i, dc)| Ok((conditional_entropy_exact(dc), avg_nll_mc(dc, dc, samples, seed.wrapping_add(i as u64))?)))
        .collect()
}

/// Index of the temperature minimising exact cross entropy and of the one
/// maximising the weighted likelihood.
pub fn tempered_argmin_argmax(dc: &DiscreteConditional, temperatures: &[f64]) -> Result<(usize, usize)> {
    let mut ce = Vec::with_capacity(temperatures.len());
    let mut lik = Vec::with_capacity(temperatures.len());
    for &t in temperatures {
        let model = tempered(dc, t)?;
        ce.push(expected_nll_exact(dc, &model)?);
        lik.push(weighted_likelihood(dc, &model)?);
    }
    let argmin = (0..ce.len()).min_by(|&a, &b| ce[a].total_cmp(&ce[b])).expect("non-empty");
    let argmax = (0..lik.len()).max_by(|&a, &b| lik[a].total_cmp(&lik[b]).then(b.cmp(&a))).expect("non-empty");
    Ok((argmin, argmax))
}

pub fn run_bounds(spec: &BoundsSpec) -> Result<BoundsReport> {
    spec.validate()?;
    let mut claims = Vec::new();
    let mut notes = Vec::new();

    // Entropy approximated by the average NLL of the true posterior.
    let e = &spec.entropy_nll;
    let mut rng = stream(spec.seed, Tag::Bounds, &[1]);
    let mut dcs = (0..e.instances)
        .map(|_| random_conditional(&mut rng, e.inputs, e.classes))
        .collect::<Result<Vec<_>>>()?;
    dcs.extend(spec.conditionals.iter().map(conditional_from_table).collect::<Result<Vec<_>>>()?);
    let res = check_entropy_nll(&dcs, e.samples, spec.seed)?;
    let worst = res
        .iter()
        .map(|(h, mc)| if *h == 0.0 { mc.mean.abs() } else { (mc.mean - h).abs() / h })
        .fold(0.0, f64::max);
    claims.push(ClaimResult {
        claim: format!("H(C|X) ~ mean NLL of the true posterior ({} instances, n={})", dcs.len(), e.samples),
        values: res
            .iter()
            .map(|(h, mc)| format!("H={h:.6} mc={:.6}±{:.6}", mc.mean, mc.stderr))
            .collect::<Vec<_>>()
            .join("; ")
            + &format!("; worst relative gap {worst:.5}"),
        tolerance: format!("relative {}", e.tolerance),
        passed: worst <= e.tolerance && res.iter().all(|(_, mc)| !mc.infinite),
    });
    let uniform_ok = dcs.iter().all(|dc| {
        let u = dc.uniform_like();
        avg_nll_mc(dc, &u, 1000, spec.seed)
            .map(|mc| (mc.mean - (dc.classes() as f64).ln()).abs() < 1e-12)
            .unwrap_or(false)
    });
    claims.push(ClaimResult {
        claim: "uniform model has constant NLL ln k".into(),
        values: format!("{} instances", dcs.len()),
        tolerance: "1e-12".into(),
        passed: uniform_ok,
    });

    // Cross entropy bounds entropy from above; likelihood and cross entropy
    // share their optimum.
    let u = &spec.upper_bound;
    let mut rng = stream(spec.seed, Tag::Bounds, &[2]);
    let (mut min_gap, mut gibbs_ok, mut eq_ok) = (f64::INFINITY, true, true);
    let mut lemma_ok = true;
    let mut lemma_hits = 0;
    for _ in 0..u.pairs {
        let p = random_simplex(&mut rng, u.classes);
        let s = random_simplex(&mut rng, u.classes);
        let gap = cross_entropy(&p, &s) - entropy(&p);
        min_gap = min_gap.min(gap);
        gibbs_ok &= gap > 0.0;
        eq_ok &= (cross_entropy(&p, &p) - entropy(&p)).abs() < 1e-12;
        let dc = DiscreteConditional::new(vec![1.0], Matrix::from_vec(1, u.classes, p)?)?;
        let (amin, amax) = tempered_argmin_argmax(&dc, &u.temperatures)?;
        let at_one = u.temperatures[amin] == 1.0;
        lemma_ok &= amin == amax && at_one;
        lemma_hits += usize::from(amin == amax);
    }
    for dc in dcs.iter().skip(e.instances) {
        let (amin, amax) = tempered_argmin_argmax(dc, &u.temperatures)?;
        lemma_ok &= amin == amax;
        lemma_hits += usize::from(amin == amax);
    }
    claims.push(ClaimResult {
        claim: format!("cross entropy >= entropy on {} random (p, sigma) pairs, strict off the diagonal", u.pairs),
        values: format!("min CE - H = {min_gap:.3e}"),
        tolerance: "strict inequality".into(),
        passed: gibbs_ok,
    });
    claims.push(ClaimResult {
        claim: "cross entropy equals entropy at sigma = p".into(),
        values: format!("{} pairs", u.pairs),
        tolerance: "1e-12".into(),
        passed: eq_ok,
    });
    claims.push(ClaimResult {
        claim: format!(
            "argmin cross entropy = argmax likelihood over {} tempered models",
            u.temperatures.len()
        ),
        values: format!("{lemma_hits}/{} cases agree", u.pairs + spec.conditionals.len()),
        tolerance: "exact grid index".into(),
        passed: lemma_ok,
    });

    // Variational JSD functional.
    let l = &spec.lower_bound;
    let mut rng = stream(spec.seed, Tag::Bounds, &[3]);
    let mut joints = (0..l.joints)
        .map(|_| random_joint(&mut rng, l.rows, l.cols))
        .collect::<Result<Vec<_>>>()?;
    joints.extend(spec.joints.iter().map(joint_from_table).collect::<Result<Vec<_>>>()?);
    let (mut loose_ok, mut tight_ok, mut grid_ok) = (true, true, true);
    let (mut max_slack_tight, mut max_grid_gap, mut half_ok) = (f64::NEG_INFINITY, 0.0f64, true);
    let mut max_sym = 0.0f64;
    for joint in &joints {
        let jsd = jsd_exact(joint);
        max_sym = max_sym.max((jsd - jsd_exact(&joint.transpose())).abs());
        let tight = 2.0 * jsd - 2.0 * LN_2;
        let (rows, cols) = joint.table().shape();
        for _ in 0..l.discriminators {
            let d = random_discriminator(&mut rng, rows, cols);
            let v = jsd_lower_bound(joint, &d)?;
            loose_ok &= v <= jsd;
            tight_ok &= v <= tight + 1e-12;
            max_slack_tight = max_slack_tight.max(v - tight);
        }
        let half = Matrix::from_vec(rows, cols, vec![0.5; rows * cols])?;
        half_ok &= (jsd_lower_bound(joint, &half)? + 2.0 * LN_2).abs() < 1e-12;
        let (_, sup) = jsd_grid_supremum(joint, l.grid_points)?;
        let gap = tight - sup;
        max_grid_gap = max_grid_gap.max(gap.abs());
        grid_ok &= (-1e-12..=l.grid_tolerance).contains(&gap);
    }
    let n_d = joints.len() * l.discriminators;
    claims.push(ClaimResult {
        claim: format!("functional <= JSD for {n_d} random discriminators on {} joints", joints.len()),
        values: "all below".into(),
        tolerance: "exact".into(),
        passed: loose_ok,
    });
    claims.push(ClaimResult {
        claim: format!("functional <= 2 JSD - 2 ln 2 for the same {n_d} discriminators"),
        values: format!("max (functional - bound) = {max_slack_tight:.3e}"),
        tolerance: "1e-12".into(),
        passed: tight_ok,
    });
    claims.push(ClaimResult {
        claim: format!("grid supremum ({} points per cell) approaches 2 JSD - 2 ln 2", l.grid_points),
        values: format!("max gap {max_grid_gap:.3e}"),
        tolerance: format!("{}", l.grid_tolerance),
        passed: grid_ok,
    });
    claims.push(ClaimResult {
        claim: "d = 0.5 gives -2 ln 2".into(),
        values: format!("{} joints", joints.len()),
        tolerance: "1e-12".into(),
        passed: half_ok,
    });
    claims.push(ClaimResult {
        claim: "JSD unchanged when the two views swap roles".into(),
        values: format!("max difference {max_sym:.3e}"),
        tolerance: "1e-12".into(),
        passed: max_sym < 1e-12,
    });
    notes.push(
        "the functional's supremum is 2 JSD - 2 ln 2, not JSD: the stated inequality holds but is loose by \
         ln 4 - JSD >= ln 2"
            .into(),
    );
    Ok(BoundsReport { claims, notes })
}
