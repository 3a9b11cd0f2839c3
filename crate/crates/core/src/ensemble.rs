//! Families of transition matrices with a shared low-dimensional basis.
//!
//! Every system in an ensemble evolves with a transition matrix of the form
//! `A_m = sum_i B[i, m] * W_i + D_m`, where the `W_i` are common basis
//! matrices, the columns of `B` are per-system coefficients, and `D_m` is an
//! optional per-system deviation from the shared structure.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::stream;

const RECOMPOSE_RTOL: f64 = 1e-12;

/// Ordered list of `k` basis matrices, each `d x d`.
#[derive(Debug, Clone)]
pub struct SharedBasis {
    d: usize,
    w: Vec<Array2<f64>>,
}

impl SharedBasis {
    pub fn new(w: Vec<Array2<f64>>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("basis count k must be >= 1".into()));
        }
        let d = w[0].nrows();
        if d == 0 {
            return Err(Error::InvalidArgument("state dimension d must be >= 1".into()));
        }
        for (i, m) in w.iter().enumerate() {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "basis matrix {i} is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !linalg::all_finite(m.view()) {
                return Err(Error::InvalidArgument(format!("basis matrix {i} has non-finite entries")));
            }
        }
        Ok(Self { d, w })
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.w
    }
}

/// `k x M` coefficient matrix; column `m` holds the weights of system `m`.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    b: Array2<f64>,
}

impl CoefficientSet {
    pub fn new(b: Array2<f64>) -> Result<Self> {
        if b.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::InvalidArgument("coefficient matrix must be nonempty".into()));
        }
        if !linalg::all_finite(b.view()) {
            return Err(Error::InvalidArgument("coefficients have non-finite entries".into()));
        }
        Ok(Self { b })
    }

    pub fn k(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_systems(&self) -> usize {
        self.b.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn beta(&self, m: usize) -> ArrayView1<'_, f64> {
        self.b.column(m)
    }
}

/// Per-system additive deviations `D_m` from the shared structure.
#[derive(Debug, Clone)]
pub struct MisspecificationSet {
    mats: Vec<Array2<f64>>,
    per_system_fro_sq: Vec<f64>,
    total_fro_sq: f64,
}

impl MisspecificationSet {
    pub fn new(mats: Vec<Array2<f64>>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::InvalidArgument("misspecification set must cover >= 1 system".into()));
        }
        let d = mats[0].nrows();
        for (m, mat) in mats.iter().enumerate() {
            if mat.nrows() != d || mat.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "misspecification {m} is {}x{}, expected {d}x{d}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        let per_system_fro_sq: Vec<f64> = mats.iter().map(|m| linalg::frobenius_sq(m.view())).collect();
        let total_fro_sq = per_system_fro_sq.iter().sum();
        Ok(Self { mats, per_system_fro_sq, total_fro_sq })
    }

    pub fn num_systems(&self) -> usize {
        self.mats.len()
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.mats
    }

    pub fn per_system_fro_sq(&self) -> &[f64] {
        &self.per_system_fro_sq
    }

    /// Total squared Frobenius mass across all systems.
    pub fn total_fro_sq(&self) -> f64 {
        self.total_fro_sq
    }
}

/// One real Jordan block: eigenvalue and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JordanBlock {
    pub eigenvalue: f64,
    pub size: usize,
}

/// Block structure of a Jordan matrix plus the conditioning of the similarity
/// transform used to hide it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JordanSpec {
    pub blocks: Vec<JordanBlock>,
    pub conditioning: f64,
}

impl JordanSpec {
    pub fn new(blocks: Vec<JordanBlock>, conditioning: f64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("Jordan spec needs >= 1 block".into()));
        }
        if blocks.iter().any(|b| b.size == 0) {
            return Err(Error::InvalidArgument("Jordan block sizes must be positive".into()));
        }
        if !(conditioning >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "conditioning must be >= 1, got {conditioning}"
            )));
        }
        Ok(Self { blocks, conditioning })
    }

    /// Total dimension: sum of block sizes.
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }

    /// Size of the largest block.
    pub fn largest_block(&self) -> usize {
        self.blocks.iter().map(|b| b.size).max().unwrap_or(0)
    }

    /// Largest eigenvalue magnitude.
    pub fn spectral_radius(&self) -> f64 {
        self.blocks.iter().map(|b| b.eigenvalue.abs()).fold(0.0, f64::max)
    }

    /// The dense Jordan matrix described by this spec.
    pub fn jordan_matrix(&self) -> Array2<f64> {
        let d = self.dim();
        let mut lam = Array2::zeros((d, d));
        let mut offset = 0;
        for block in &self.blocks {
            for i in 0..block.size {
                lam[(offset + i, offset + i)] = block.eigenvalue;
                if i + 1 < block.size {
                    lam[(offset + i, offset + i + 1)] = 1.0;
                }
            }
            offset += block.size;
        }
        lam
    }
}

/// Which seeds went into an ensemble, for replay.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub components: BTreeMap<String, u64>,
}

impl SeedProvenance {
    pub fn record(&mut self, label: &str, seed: u64) {
        self.components.insert(label.to_string(), seed);
    }
}

/// A family of `M` systems sharing a basis, with materialized transition
/// matrices.
#[derive(Debug, Clone)]
pub struct SystemEnsemble {
    basis: SharedBasis,
    coefficients: CoefficientSet,
    misspec: Option<MisspecificationSet>,
    a: Vec<Array2<f64>>,
    rho_slack: f64,
    seed_provenance: SeedProvenance,
}

impl SystemEnsemble {
    pub fn k(&self) -> usize {
        self.basis.k()
    }

    pub fn d(&self) -> usize {
        self.basis.d()
    }

    pub fn num_systems(&self) -> usize {
        self.coefficients.num_systems()
    }

    pub fn basis(&self) -> &SharedBasis {
        &self.basis
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coefficients
    }

    pub fn misspec(&self) -> Option<&MisspecificationSet> {
        self.misspec.as_ref()
    }

    /// Materialized transition matrices, deviations included.
    pub fn transition_matrices(&self) -> &[Array2<f64>] {
        &self.a
    }

    pub fn transition(&self, m: usize) -> &Array2<f64> {
        &self.a[m]
    }

    /// Spectral-radius budget `rho` such that every radius is at most
    /// `1 + rho / T_nominal` after spectral control.
    pub fn rho_slack(&self) -> f64 {
        self.rho_slack
    }

    pub fn seed_provenance(&self) -> &SeedProvenance {
        &self.seed_provenance
    }

    pub fn set_provenance(&mut self, label: &str, seed: u64) {
        self.seed_provenance.record(label, seed);
    }

    /// Verify that every stored `A_m` recomposes from `(W, B, D)` within the
    /// relative tolerance used throughout.
    pub fn check_recomposition(&self) -> Result<()> {
        for m in 0..self.num_systems() {
            let mut recomposed = compose_transition(self.basis.matrices(), self.coefficients.beta(m));
            if let Some(ms) = &self.misspec {
                recomposed += &ms.matrices()[m];
            }
            let diff = (&recomposed - &self.a[m]).mapv(f64::abs).sum();
            let scale = 1.0 + linalg::frobenius_sq(self.a[m].view()).sqrt();
            if diff > RECOMPOSE_RTOL * scale * (self.d() * self.d()) as f64 {
                return Err(Error::DegenerateSystem {
                    system: m,
                    detail: format!("stored A_m drifted from its factors by {diff:.3e}"),
                });
            }
        }
        Ok(())
    }

    /// Attach deviations to a previously well-specified ensemble and
    /// re-materialize the transition matrices.
    pub fn with_misspecification(self, misspec: MisspecificationSet) -> Result<Self> {
        if self.misspec.is_some() {
            return Err(Error::InvalidArgument("ensemble already carries misspecifications".into()));
        }
        compose_systems_impl(self.basis, self.coefficients, Some(misspec), self.rho_slack, self.seed_provenance)
    }
}

/// `A = sum_i beta[i] * W_i`, accumulated in index order so that identical
/// inputs produce bit-identical output everywhere it is used.
pub fn compose_transition(w: &[Array2<f64>], beta: ArrayView1<f64>) -> Array2<f64> {
    let d = w[0].nrows();
    let mut a = Array2::zeros((d, d));
    for (i, wi) in w.iter().enumerate() {
        a.scaled_add(beta[i], wi);
    }
    a
}

/// Draw `k` independent `d x d` standard-normal basis matrices.
pub fn generate_shared_basis(k: usize, d: usize, seed: u64) -> Result<SharedBasis> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("k and d must be >= 1, got k={k}, d={d}")));
    }
    let w = (0..k)
        .map(|i| {
            let mut rng = stream::stream(seed, "ensemble/basis", i as u64);
            linalg::gaussian_matrix(d, d, &mut rng)
        })
        .collect();
    SharedBasis::new(w)
}

/// Draw a `k x M` standard-normal coefficient matrix; column `m` comes from
/// its own sub-stream so that growing `M` leaves earlier systems unchanged.
pub fn sample_coefficients(k: usize, num_systems: usize, seed: u64) -> Result<CoefficientSet> {
    if k == 0 || num_systems == 0 {
        return Err(Error::InvalidArgument(format!(
            "k and M must be >= 1, got k={k}, M={num_systems}"
        )));
    }
    let mut b = Array2::zeros((k, num_systems));
    for m in 0..num_systems {
        let mut rng = stream::stream(seed, "ensemble/coeffs", m as u64);
        let col = linalg::gaussian_vector(k, &mut rng);
        b.column_mut(m).assign(&col);
    }
    CoefficientSet::new(b)
}

/// Materialize the ensemble `A_m = sum_i B[i,m] W_i (+ D_m)`.
pub fn compose_systems(
    basis: SharedBasis,
    coeffs: CoefficientSet,
    misspec: Option<MisspecificationSet>,
) -> Result<SystemEnsemble> {
    compose_systems_impl(basis, coeffs, misspec, 0.0, SeedProvenance::default())
}

fn compose_systems_impl(
    basis: SharedBasis,
    coeffs: CoefficientSet,
    misspec: Option<MisspecificationSet>,
    rho_slack: f64,
    seed_provenance: SeedProvenance,
) -> Result<SystemEnsemble> {
    if basis.k() != coeffs.k() {
        return Err(Error::DimensionMismatch(format!(
            "basis has k={}, coefficients have k={}",
            basis.k(),
            coeffs.k()
        )));
    }
    if let Some(ms) = &misspec {
        if ms.num_systems() != coeffs.num_systems() {
            return Err(Error::DimensionMismatch(format!(
                "misspecification covers {} systems, coefficients cover {}",
                ms.num_systems(),
                coeffs.num_systems()
            )));
        }
        if ms.matrices()[0].nrows() != basis.d() {
            return Err(Error::DimensionMismatch(format!(
                "misspecification dimension {} does not match d={}",
                ms.matrices()[0].nrows(),
                basis.d()
            )));
        }
    }
    let a = (0..coeffs.num_systems())
        .map(|m| {
            let mut a_m = compose_transition(basis.matrices(), coeffs.beta(m));
            if let Some(ms) = &misspec {
                a_m += &ms.matrices()[m];
            }
            a_m
        })
        .collect();
    Ok(SystemEnsemble { basis, coefficients: coeffs, misspec, a, rho_slack, seed_provenance })
}

/// Scale each `beta_m` so that `rho(A_m)` lands exactly on `targets[m]`.
///
/// Scaling the coefficients rather than `A_m` itself keeps the shared-basis
/// structure intact. Must run before any misspecification is attached.
pub fn rescale_to_radius(
    ensemble: SystemEnsemble,
    targets: &[f64],
    t_nominal: usize,
) -> Result<SystemEnsemble> {
    if ensemble.misspec.is_some() {
        return Err(Error::InvalidArgument(
            "rescale_to_radius must run before misspecification injection".into(),
        ));
    }
    if targets.len() != ensemble.num_systems() {
        return Err(Error::DimensionMismatch(format!(
            "{} targets for {} systems",
            targets.len(),
            ensemble.num_systems()
        )));
    }
    if t_nominal == 0 {
        return Err(Error::InvalidArgument("T_nominal must be >= 1".into()));
    }
    let SystemEnsemble { basis, coefficients, seed_provenance, .. } = ensemble;
    let mut b = coefficients.matrix().clone();
    for (m, &target) in targets.iter().enumerate() {
        if !(target > 0.0) {
            return Err(Error::InvalidArgument(format!("target radius {target} for system {m}")));
        }
        let a_m = compose_transition(basis.matrices(), b.column(m));
        let rho = linalg::spectral_radius(&a_m)?;
        if rho < 1e-12 {
            return Err(Error::DegenerateSystem {
                system: m,
                detail: format!("spectral radius {rho:.3e} is nilpotent to precision"),
            });
        }
        let scale = target / rho;
        b.column_mut(m).map_inplace(|v| *v *= scale);
    }
    let max_target = targets.iter().fold(0.0_f64, |acc, &t| acc.max(t));
    let rho_slack = (max_target - 1.0).max(0.0) * t_nominal as f64;
    compose_systems_impl(basis, CoefficientSet::new(b)?, None, rho_slack, seed_provenance)
}

/// Per-system uniform radii in `[lo, hi]`, one independent draw per system.
pub fn uniform_radius_targets(lo: f64, hi: f64, num_systems: usize, seed: u64) -> Result<Vec<f64>> {
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(Error::InvalidArgument(format!("bad radius range [{lo}, {hi}]")));
    }
    Ok((0..num_systems)
        .map(|m| {
            let mut rng = stream::stream(seed, "ensemble/radii", m as u64);
            lo + (hi - lo) * rng.random::<f64>()
        })
        .collect())
}

/// Build `A = P^-1 Lambda P` for a prescribed Jordan structure.
///
/// `P = Q diag(s)` with `Q` random orthogonal and `s` geometrically spaced in
/// `[1, conditioning]`, so `cond(P)` equals the requested conditioning
/// exactly. Both `A` and `P` are returned; the amplification constant of `A`
/// can then be computed without a numerical Jordan decomposition.
pub fn build_from_jordan(spec: &JordanSpec, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = spec.dim();
    let lam = spec.jordan_matrix();
    let mut rng = stream::stream(seed, "ensemble/jordan", 0);
    let q = linalg::random_orthogonal(d, &mut rng)?;
    let mut p = q;
    if d > 1 {
        let ratio = spec.conditioning.powf(1.0 / (d as f64 - 1.0));
        let mut s = 1.0;
        for j in 0..d {
            p.column_mut(j).map_inplace(|v| *v *= s);
            s *= ratio;
        }
    }
    let p_inv = linalg::inverse(&p)?;
    let a = p_inv.dot(&lam).dot(&p);
    Ok((a, p))
}

/// Draw deviations: each system independently receives a Gaussian `D_m` with
/// probability `M^-a`, scaled so that `E ||D_m||_F^2 = fro_sq_target`.
pub fn sample_misspecification(
    d: usize,
    num_systems: usize,
    a: f64,
    fro_sq_target: f64,
    seed: u64,
) -> Result<MisspecificationSet> {
    if d == 0 || num_systems == 0 {
        return Err(Error::InvalidArgument("d and M must be >= 1".into()));
    }
    if !(a >= 0.0) {
        return Err(Error::InvalidArgument(format!("exponent a must be >= 0, got {a}")));
    }
    if !(fro_sq_target >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fro_sq_target must be >= 0, got {fro_sq_target}"
        )));
    }
    let prob = (num_systems as f64).powf(-a);
    let entry_std = (fro_sq_target / (d * d) as f64).sqrt();
    let mats = (0..num_systems)
        .map(|m| {
            let mut rng = stream::stream(seed, "ensemble/misspec", m as u64);
            let affected = rng.random::<f64>() < prob;
            if affected {
                let mut mat = linalg::gaussian_matrix(d, d, &mut rng);
                mat.map_inplace(|v| *v *= entry_std);
                mat
            } else {
                Array2::zeros((d, d))
            }
        })
        .collect();
    MisspecificationSet::new(mats)
}

// --- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    k: usize,
    d: usize,
    #[serde(rename = "M")]
    num_systems: usize,
    rho_slack: f64,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "D")]
    dev: Option<Vec<Vec<f64>>>,
    seed_provenance: SeedProvenance,
}

fn row_major(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn from_row_major(data: Vec<f64>, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|_| Error::Parse(format!("{what}: wrong element count for {rows}x{cols}")))
}

impl SystemEnsemble {
    pub fn to_json(&self) -> Result<String> {
        let doc = EnsembleDoc {
            k: self.k(),
            d: self.d(),
            num_systems: self.num_systems(),
            rho_slack: self.rho_slack,
            w: self.basis.matrices().iter().map(row_major).collect(),
            b: row_major(self.coefficients.matrix()),
            dev: self.misspec.as_ref().map(|ms| ms.matrices().iter().map(row_major).collect()),
            seed_provenance: self.seed_provenance.clone(),
        };
        crate::jsonfmt::to_string(&doc)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_str(text)?;
        let w = doc
            .w
            .into_iter()
            .enumerate()
            .map(|(i, data)| from_row_major(data, doc.d, doc.d, &format!("W[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let basis = SharedBasis::new(w)?;
        if basis.k() != doc.k {
            return Err(Error::Parse(format!("declared k={} but found {} bases", doc.k, basis.k())));
        }
        let b = from_row_major(doc.b, doc.k, doc.num_systems, "B")?;
        let coeffs = CoefficientSet::new(b)?;
        let misspec = match doc.dev {
            Some(mats) => Some(MisspecificationSet::new(
                mats.into_iter()
                    .enumerate()
                    .map(|(m, data)| from_row_major(data, doc.d, doc.d, &format!("D[{m}]")))
                    .collect::<Result<Vec<_>>>()?,
            )?),
            None => None,
        };
        compose_systems_impl(basis, coeffs, misspec, doc.rho_slack, doc.seed_provenance)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut body = self.to_json()?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn basis_has_requested_shape_and_is_seed_deterministic() {
        let basis = generate_shared_basis(10, 25, 7).unwrap();
        assert_eq!(basis.k(), 10);
        assert_eq!(basis.d(), 25);
        for w in basis.matrices() {
            assert_eq!(w.dim(), (25, 25));
        }
        let again = generate_shared_basis(10, 25, 7).unwrap();
        for (a, b) in basis.matrices().iter().zip(again.matrices()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn smallest_basis_is_reproducible() {
        let a = generate_shared_basis(1, 1, 0).unwrap();
        let b = generate_shared_basis(1, 1, 0).unwrap();
        assert_eq!(a.matrices()[0][(0, 0)].to_bits(), b.matrices()[0][(0, 0)].to_bits());
    }

    #[test]
    fn basis_entries_concentrate_like_standard_normals() {
        // Oracle: the mean of n=48 standard normals is N(0, 1/48); a 3-sigma
        // band should fail only rarely. Checked over many seeds first, then
        // asserted for the pinned seed.
        let n: f64 = 48.0;
        let bound = 3.0 / n.sqrt();
        let mut violations = 0;
        for seed in 0..300 {
            let basis = generate_shared_basis(3, 4, seed).unwrap();
            let mean: f64 = basis.matrices().iter().map(|w| w.sum()).sum::<f64>() / n;
            if mean.abs() > bound {
                violations += 1;
            }
        }
        assert!(violations <= 3, "3-sigma violations: {violations}/300");
        let basis = generate_shared_basis(3, 4, 42).unwrap();
        let mean: f64 = basis.matrices().iter().map(|w| w.sum()).sum::<f64>() / n;
        assert!(mean.abs() <= bound, "mean {mean} outside {bound}");
    }

    #[test]
    fn coefficient_matrix_shape_and_variance() {
        let c = sample_coefficients(10, 100, 1).unwrap();
        assert_eq!(c.matrix().dim(), (10, 100));

        let single = sample_coefficients(2, 1, 0).unwrap();
        assert_eq!(single.beta(0).len(), 2);

        // 1000 entries; chi-square concentration puts the sample variance
        // well inside [0.8, 1.2]
        let c = sample_coefficients(5, 200, 3).unwrap();
        let n = 1000.0;
        let mean = c.matrix().sum() / n;
        let var = c.matrix().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!((0.8..=1.2).contains(&var), "sample variance {var}");
    }

    #[test]
    fn growing_m_preserves_earlier_coefficients() {
        let small = sample_coefficients(4, 3, 11).unwrap();
        let large = sample_coefficients(4, 6, 11).unwrap();
        for m in 0..3 {
            assert_eq!(small.beta(m), large.beta(m));
        }
    }

    #[test]
    fn compose_single_basis_scales_identity() {
        let basis = SharedBasis::new(vec![Array2::eye(2)]).unwrap();
        let coeffs = CoefficientSet::new(array![[0.5]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let expect = Array2::<f64>::eye(2) * 0.5;
        assert_eq!(ens.transition(0), &expect);
    }

    #[test]
    fn compose_disjoint_supports() {
        let w1 = array![[1.0, 0.0], [0.0, 0.0]];
        let w2 = array![[0.0, 0.0], [0.0, 1.0]];
        let basis = SharedBasis::new(vec![w1, w2]).unwrap();
        let coeffs = CoefficientSet::new(array![[0.3], [0.7]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        assert_abs_diff_eq!(ens.transition(0)[(0, 0)], 0.3, epsilon = 0.0);
        assert_abs_diff_eq!(ens.transition(0)[(1, 1)], 0.7, epsilon = 0.0);
        assert_eq!(ens.transition(0)[(0, 1)], 0.0);
    }

    #[test]
    fn stored_transition_matches_independent_recomputation() {
        let basis = generate_shared_basis(10, 25, 5).unwrap();
        let coeffs = sample_coefficients(10, 50, 6).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        // recompute A_17 entry by entry without ndarray arithmetic
        let m = 17;
        let mut max_err: f64 = 0.0;
        for r in 0..25 {
            for c in 0..25 {
                let mut acc = 0.0;
                for i in 0..10 {
                    acc += ens.coefficients().matrix()[(i, m)] * ens.basis().matrices()[i][(r, c)];
                }
                max_err = max_err.max((acc - ens.transition(m)[(r, c)]).abs());
            }
        }
        assert!(max_err <= 1e-12, "recomputation drift {max_err}");
        ens.check_recomposition().unwrap();
    }

    #[test]
    fn rescale_is_linear_and_exact() {
        // single basis: rho scales linearly with beta
        let basis = SharedBasis::new(vec![Array2::eye(2) * 4.0]).unwrap();
        let coeffs = CoefficientSet::new(array![[0.5]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        assert_abs_diff_eq!(linalg::spectral_radius(ens.transition(0)).unwrap(), 2.0, epsilon = 1e-12);
        let rescaled = rescale_to_radius(ens, &[0.8], 200).unwrap();
        assert_abs_diff_eq!(rescaled.coefficients().matrix()[(0, 0)], 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(
            linalg::spectral_radius(rescaled.transition(0)).unwrap(),
            0.8,
            epsilon = 1e-10
        );
    }

    #[test]
    fn rescale_hits_uniform_targets() {
        let basis = generate_shared_basis(10, 25, 2).unwrap();
        let coeffs = sample_coefficients(10, 20, 3).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let targets = uniform_radius_targets(0.7, 0.9, 20, 4).unwrap();
        let rescaled = rescale_to_radius(ens, &targets, 200).unwrap();
        for (m, a) in rescaled.transition_matrices().iter().enumerate() {
            let rho = linalg::spectral_radius(a).unwrap();
            assert!(rho >= 0.7 - 1e-8 && rho <= 0.9 + 1e-8, "rho {rho}");
            assert_abs_diff_eq!(rho, targets[m], epsilon = 1e-10);
        }
    }

    #[test]
    fn rescale_to_unit_root() {
        let basis = generate_shared_basis(3, 8, 9).unwrap();
        let coeffs = sample_coefficients(3, 10, 10).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let rescaled = rescale_to_radius(ens, &vec![1.0; 10], 100).unwrap();
        let worst = rescaled
            .transition_matrices()
            .iter()
            .map(|a| (linalg::spectral_radius(a).unwrap() - 1.0).abs())
            .fold(0.0_f64, f64::max);
        assert!(worst <= 1e-10, "max |rho - 1| = {worst}");
        assert_eq!(rescaled.rho_slack(), 0.0);
    }

    #[test]
    fn rescale_rejects_nilpotent_systems() {
        let basis = SharedBasis::new(vec![array![[0.0, 1.0], [0.0, 0.0]]]).unwrap();
        let coeffs = CoefficientSet::new(array![[1.0]]).unwrap();
        let ens = compose_systems(basis, coeffs, None).unwrap();
        let err = rescale_to_radius(ens, &[0.8], 100).unwrap_err();
        assert!(matches!(err, Error::DegenerateSystem { system: 0, .. }));
    }

    #[test]
    fn jordan_scalar_block() {
        let spec = JordanSpec::new(vec![JordanBlock { eigenvalue: 0.95, size: 1 }], 1.0).unwrap();
        let (a, _p) = build_from_jordan(&spec, 0).unwrap();
        assert_eq!(a.dim(), (1, 1));
        assert_abs_diff_eq!(a[(0, 0)], 0.95, epsilon = 1e-12);
    }

    #[test]
    fn jordan_matrix_layout() {
        let spec = JordanSpec::new(vec![JordanBlock { eigenvalue: 1.0, size: 2 }], 1.0).unwrap();
        let lam = spec.jordan_matrix();
        assert_eq!(lam, array![[1.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn jordan_eigenvalues_survive_similarity() {
        // Eigenvalues of a size-l Jordan block move by O(eps^(1/l)) under
        // eps-sized perturbations, so the eigensolver oracle can only pin
        // them to a block-size-dependent tolerance.
        use ndarray_linalg::EigVals;
        for &(size, tol) in &[(2usize, 1e-6), (4, 1e-3), (8, 0.05), (16, 0.2)] {
            let mut blocks = vec![JordanBlock { eigenvalue: 0.99, size }];
            for _ in 0..(20 - size) {
                blocks.push(JordanBlock { eigenvalue: 0.99, size: 1 });
            }
            let spec = JordanSpec::new(blocks, 10.0).unwrap();
            let (a, _p) = build_from_jordan(&spec, 13).unwrap();
            let eigs = a.eigvals().unwrap();
            for z in eigs.iter() {
                assert!((z.norm() - 0.99).abs() <= tol, "l={size}: eigenvalue {z}");
            }
            // the mean of the eigenvalues is the trace / d, which is robust
            let mean_re = eigs.iter().map(|z| z.re).sum::<f64>() / 20.0;
            assert_abs_diff_eq!(mean_re, 0.99, epsilon = 1e-10);
        }
    }

    #[test]
    fn jordan_similarity_reconstructs_and_conditioning_is_exact() {
        let blocks = [2usize, 4, 8, 16]
            .iter()
            .map(|&size| JordanBlock { eigenvalue: 0.99, size })
            .collect();
        let spec = JordanSpec::new(blocks, 10.0).unwrap();
        assert_eq!(spec.dim(), 30);
        assert_eq!(spec.largest_block(), 16);
        let (a, p) = build_from_jordan(&spec, 13).unwrap();
        // P A P^-1 recovers the Jordan matrix
        let p_inv = linalg::inverse(&p).unwrap();
        let lam = p.dot(&a).dot(&p_inv);
        let drift = (&lam - &spec.jordan_matrix()).mapv(f64::abs).sum();
        assert!(drift <= 1e-10, "similarity drift {drift}");
        // cond(P) = requested conditioning
        use ndarray_linalg::SVD;
        let (_, s, _) = p.svd(false, false).unwrap();
        let cond = s.iter().fold(0.0_f64, |a, &b| a.max(b))
            / s.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        assert_abs_diff_eq!(cond, 10.0, epsilon = 1e-6);
    }

    #[test]
    fn misspecification_probability_one_hits_everyone() {
        let ms = sample_misspecification(4, 12, 0.0, 2.0, 5).unwrap();
        assert!(ms.per_system_fro_sq().iter().all(|&z| z > 0.0));
        let sum: f64 = ms.per_system_fro_sq().iter().sum();
        assert_abs_diff_eq!(ms.total_fro_sq(), sum, epsilon = 1e-12 * sum);
    }

    #[test]
    fn misspecification_entry_scale() {
        // d=25, target 6.25 => entry std 0.1; mean Frobenius mass over many
        // systems should land near the target
        let ms = sample_misspecification(25, 400, 0.0, 6.25, 8).unwrap();
        let mean: f64 = ms.per_system_fro_sq().iter().sum::<f64>() / 400.0;
        assert!((mean - 6.25).abs() < 0.5, "mean fro^2 {mean}");
    }

    #[test]
    fn misspecification_affected_count_matches_binomial_mean() {
        // M=100, a=0.5 => inclusion probability 0.1, expected count 10
        let mut total = 0usize;
        let trials = 1000;
        for seed in 0..trials {
            let ms = sample_misspecification(2, 100, 0.5, 1.0, seed).unwrap();
            total += ms.per_system_fro_sq().iter().filter(|&&z| z > 0.0).count();
        }
        let mean = total as f64 / trials as f64;
        assert!((9.0..=11.0).contains(&mean), "mean affected count {mean}");
    }

    #[test]
    fn gauge_transform_leaves_transitions_unchanged() {
        let basis = generate_shared_basis(4, 6, 21).unwrap();
        let coeffs = sample_coefficients(4, 9, 22).unwrap();
        let ens = compose_systems(basis.clone(), coeffs.clone(), None).unwrap();

        let mut rng = stream::stream(23, "test/gauge", 0);
        let g = linalg::gaussian_matrix(4, 4, &mut rng) + Array2::<f64>::eye(4) * 3.0;
        let g_inv = linalg::inverse(&g).unwrap();
        // W'_j = sum_i W_i Ginv[i, j], B' = G B
        let w_new: Vec<Array2<f64>> = (0..4)
            .map(|j| {
                let mut acc = Array2::<f64>::zeros((6, 6));
                for i in 0..4 {
                    acc.scaled_add(g_inv[(i, j)], &basis.matrices()[i]);
                }
                acc
            })
            .collect();
        let b_new = g.dot(coeffs.matrix());
        let ens2 = compose_systems(
            SharedBasis::new(w_new).unwrap(),
            CoefficientSet::new(b_new).unwrap(),
            None,
        )
        .unwrap();
        for m in 0..9 {
            let diff = (ens.transition(m) - ens2.transition(m)).mapv(f64::abs).sum();
            assert!(diff <= 1e-10, "gauge drift {diff} at system {m}");
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let basis = generate_shared_basis(3, 5, 31).unwrap();
        let coeffs = sample_coefficients(3, 7, 32).unwrap();
        let ms = sample_misspecification(5, 7, 0.25, 1.5, 33).unwrap();
        let mut ens = compose_systems(basis, coeffs, Some(ms)).unwrap();
        ens.set_provenance("basis", 31);
        let text = ens.to_json().unwrap();
        let back = SystemEnsemble::from_json(&text).unwrap();
        for m in 0..7 {
            assert_eq!(ens.transition(m), back.transition(m));
        }
        assert_eq!(back.seed_provenance().components.get("basis"), Some(&31));
        // byte-stable serialization
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let basis = generate_shared_basis(3, 4, 0).unwrap();
        let coeffs = sample_coefficients(2, 5, 0).unwrap();
        let err = compose_systems(basis, coeffs, None).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }
}
