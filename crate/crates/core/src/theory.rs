//! Exact finite-support checks of the distribution-reweighting identities.
//!
//! Both identities relate a loss expectation over the entire space (all
//! samples) to a reweighted expectation over the local space (samples whose
//! previous task converted). On a finite support both sides are finite sums,
//! so they can be enumerated literally — separate probability factors, no
//! algebraic cancellation — and compared to a tight tolerance. The first
//! identity covers a per-task loss against the task's own label; the second
//! covers a loss on the prediction gap `f_prev - f_curr` against the label
//! gap `t_prev - t_curr`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::BCE_EPS;

/// Largest supported number of support points: big enough to be interesting,
/// small enough that enumeration stays exact-ish in f64.
pub const MAX_SUPPORT: usize = 16;

const MASS_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid joint: {0}")]
    InvalidJoint(String),
    #[error("local space is empty: previous task never converts")]
    DegenerateLocalSpace,
    #[error("predictor is defined on {got} points, joint has {expected}")]
    PredictorMismatch { expected: usize, got: usize },
}

/// Cell order inside one support point's conditional table:
/// `(t_prev, t_curr)` = (0,0), (0,1), (1,0), (1,1).
pub const CELL_LABELS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];

/// A finite joint distribution over (x, t_prev, t_curr) with the funnel cell
/// `(t_prev=0, t_curr=1)` carrying zero mass.
#[derive(Clone, Debug)]
pub struct DiscreteJoint {
    /// P(x) per support point.
    pub px: Vec<f64>,
    /// Conditional cells per support point, ordered as [`CELL_LABELS`].
    pub cells: Vec<[f64; 4]>,
}

impl DiscreteJoint {
    pub fn new(px: Vec<f64>, cells: Vec<[f64; 4]>) -> Result<Self, TheoryError> {
        let joint = DiscreteJoint { px, cells };
        joint.validate()?;
        Ok(joint)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let n = self.px.len();
        if n == 0 {
            return Err(TheoryError::InvalidJoint("empty support".into()));
        }
        if n > MAX_SUPPORT {
            return Err(TheoryError::InvalidJoint(format!(
                "{n} support points exceeds the maximum {MAX_SUPPORT}"
            )));
        }
        if self.cells.len() != n {
            return Err(TheoryError::InvalidJoint(format!(
                "{} conditional tables for {n} support points",
                self.cells.len()
            )));
        }
        let mass: f64 = kahan_sum(self.px.iter().copied());
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(TheoryError::InvalidJoint(format!("support mass {mass} is not 1")));
        }
        for (i, (p, cell)) in self.px.iter().zip(&self.cells).enumerate() {
            if !(*p >= 0.0 && p.is_finite()) {
                return Err(TheoryError::InvalidJoint(format!("P(x_{i}) = {p}")));
            }
            if cell.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
                return Err(TheoryError::InvalidJoint(format!("negative or non-finite cell at x_{i}")));
            }
            let cond: f64 = kahan_sum(cell.iter().copied());
            if (cond - 1.0).abs() > MASS_TOL {
                return Err(TheoryError::InvalidJoint(format!(
                    "conditional mass at x_{i} is {cond}, not 1"
                )));
            }
            if cell[1] != 0.0 {
                return Err(TheoryError::InvalidJoint(format!(
                    "funnel cell (t_prev=0, t_curr=1) at x_{i} carries mass {}",
                    cell[1]
                )));
            }
        }
        if self.prev_positive_mass() <= 0.0 {
            return Err(TheoryError::DegenerateLocalSpace);
        }
        Ok(())
    }

    /// P(t_prev = 1): the mass of the local space.
    pub fn prev_positive_mass(&self) -> f64 {
        kahan_sum(self.px.iter().zip(&self.cells).map(|(p, c)| p * (c[2] + c[3])))
    }

    pub fn support_len(&self) -> usize {
        self.px.len()
    }

    /// Random valid joint: every permitted cell strictly positive, forbidden
    /// cell exactly zero, masses renormalized.
    pub fn random(n: usize, seed: u64) -> Result<Self, TheoryError> {
        if n == 0 || n > MAX_SUPPORT {
            return Err(TheoryError::InvalidJoint(format!(
                "support size {n} outside 1..={MAX_SUPPORT}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw_px: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw_px.iter().sum();
        let px: Vec<f64> = raw_px.iter().map(|p| p / total).collect();
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: [f64; 3] = [
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
            ];
            let s = raw[0] + raw[1] + raw[2];
            cells.push([raw[0] / s, 0.0, raw[1] / s, raw[2] / s]);
        }
        DiscreteJoint::new(px, cells)
    }
}

/// Predictions tabulated over the joint's support, values in [0, 1].
#[derive(Clone, Debug)]
pub struct TabulatedPredictor {
    pub f_prev: Vec<f64>,
    pub f_curr: Vec<f64>,
}

impl TabulatedPredictor {
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TabulatedPredictor {
            f_prev: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            f_curr: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    fn check(&self, joint: &DiscreteJoint) -> Result<(), TheoryError> {
        let n = joint.support_len();
        if self.f_prev.len() != n || self.f_curr.len() != n {
            return Err(TheoryError::PredictorMismatch {
                expected: n,
                got: self.f_prev.len().min(self.f_curr.len()),
            });
        }
        Ok(())
    }
}

/// The two provided loss families. Any `Fn(f64, f64) -> f64` works with the
/// verifiers; these are the ones the suite sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    /// Cross-entropy with the prediction clamped into `[BCE_EPS, 1 - BCE_EPS]`
    /// so gap predictions outside (0, 1) stay finite. The same clamped loss is
    /// used on both sides of each identity.
    Bce,
}

impl LossKind {
    pub fn eval(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => (pred - label) * (pred - label),
            LossKind::Bce => {
                let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::Bce => "bce",
        }
    }
}

/// Which task's label a per-task expectation scores against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Prev,
    Curr,
}

/// Kahan-compensated sum: keeps enumeration honest at the 1e-10 tolerance.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Marginal P(t = 1 | x) for one task from a conditional cell table.
fn marginal(cell: &[f64; 4], task: Task) -> f64 {
    match task {
        Task::Prev => cell[2] + cell[3],
        Task::Curr => cell[1] + cell[3],
    }
}

/// Entire-space expected loss of one task's predictions against that task's
/// label: sum over x and t of P(x, t) * L(f(x), t).
pub fn expected_loss_d<L: Fn(f64, f64) -> f64>(
    joint: &DiscreteJoint,
    pred: &TabulatedPredictor,
    task: Task,
    loss: &L,
) -> Result<f64, TheoryError> {
    joint.validate()?;
    pred.check(joint)?;
    let f = match task {
        Task::Prev => &pred.f_prev,
        Task::Curr => &pred.f_curr,
    };
    let mut terms = Vec::with_capacity(joint.support_len() * 2);
    for ((p, cell), fx) in joint.px.iter().zip(&joint.cells).zip(f) {
        let p1 = marginal(cell, task);
        terms.push(p * p1 * loss(*fx, 1.0));
        terms.push(p * (1.0 - p1) * loss(*fx, 0.0));
    }
    Ok(kahan_sum(terms.into_iter()))
}

/// One verified identity instance.
#[derive(Clone, Copy, Debug)]
pub struct TheoremCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

fn check_from(lhs: f64, rhs: f64) -> TheoremCheck {
    TheoremCheck { lhs, rhs, abs_diff: (lhs - rhs).abs() }
}

/// First identity: the current task's entire-space expected loss equals the
/// local-space expectation weighted by
/// `P(prev=1) * P(t|x) / P(t, prev=1|x)`, with zero-denominator cells
/// contributing zero (they carry no local-space mass).
pub fn verify_theorem1<L: Fn(f64, f64) -> f64>(
    joint: &DiscreteJoint,
    pred: &TabulatedPredictor,
    loss: &L,
) -> Result<TheoremCheck, TheoryError> {
    joint.validate()?;
    pred.check(joint)?;
    let lhs = expected_loss_d(joint, pred, Task::Curr, loss)?;
    let p_prev1 = joint.prev_positive_mass();
    if p_prev1 <= 0.0 {
        return Err(TheoryError::DegenerateLocalSpace);
    }
    let mut terms = Vec::with_capacity(joint.support_len() * 2);
    for ((p, cell), fx) in joint.px.iter().zip(&joint.cells).zip(&pred.f_curr) {
        // t runs over the current task's label; joint-with-prev=1 per t:
        for (t, joint_cell) in [(0.0, cell[2]), (1.0, cell[3])] {
            if joint_cell == 0.0 {
                continue; // zero local-space mass
            }
            let p_c = p * joint_cell / p_prev1; // P_local(x, t)
            let weight = p_prev1 * marginal_t(cell, t) / joint_cell;
            terms.push(p_c * weight * loss(*fx, t));
        }
    }
    let rhs = kahan_sum(terms.into_iter());
    Ok(check_from(lhs, rhs))
}

/// P(t_curr = t | x) from a cell table.
fn marginal_t(cell: &[f64; 4], t: f64) -> f64 {
    if t == 1.0 {
        cell[1] + cell[3]
    } else {
        cell[0] + cell[2]
    }
}

/// P(t_prev - t_curr = d | x) and P(t_prev - t_curr = d, t_prev = 1 | x).
fn gap_masses(cell: &[f64; 4], d: f64) -> (f64, f64) {
    if d == 1.0 {
        (cell[2], cell[2])
    } else if d == 0.0 {
        (cell[0] + cell[3], cell[3])
    } else {
        (cell[1], 0.0)
    }
}

/// Second identity: the same reweighting applied to the gap loss
/// `L(f_prev - f_curr, t_prev - t_curr)` with weight
/// `P(prev=1) * P(d|x) / P(d, prev=1|x)`.
pub fn verify_theorem2<L: Fn(f64, f64) -> f64>(
    joint: &DiscreteJoint,
    pred: &TabulatedPredictor,
    loss: &L,
) -> Result<TheoremCheck, TheoryError> {
    joint.validate()?;
    pred.check(joint)?;
    let p_prev1 = joint.prev_positive_mass();
    if p_prev1 <= 0.0 {
        return Err(TheoryError::DegenerateLocalSpace);
    }
    let mut lhs_terms = Vec::with_capacity(joint.support_len() * 4);
    let mut rhs_terms = Vec::with_capacity(joint.support_len() * 3);
    for (i, (p, cell)) in joint.px.iter().zip(&joint.cells).enumerate() {
        let df = pred.f_prev[i] - pred.f_curr[i];
        // entire space: enumerate the four label cells directly
        for (c, (tp, tc)) in cell.iter().zip(CELL_LABELS) {
            lhs_terms.push(p * c * loss(df, tp - tc));
        }
        // local space: enumerate the gap values
        for d in [-1.0, 0.0, 1.0] {
            let (p_d, p_d_and_prev1) = gap_masses(cell, d);
            if p_d_and_prev1 == 0.0 {
                continue; // zero local-space mass (always true for d = -1)
            }
            let p_c = p * p_d_and_prev1 / p_prev1;
            let weight = p_prev1 * p_d / p_d_and_prev1;
            rhs_terms.push(p_c * weight * loss(df, d));
        }
    }
    let lhs = kahan_sum(lhs_terms.into_iter());
    let rhs = kahan_sum(rhs_terms.into_iter());
    Ok(check_from(lhs, rhs))
}

/// One row of the verification table.
#[derive(Clone, Copy, Debug)]
pub struct SuiteRow {
    pub seed: u64,
    pub support: usize,
    pub theorem: u8,
    pub loss: LossKind,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Run both identities over `n_seeds` random joints x both loss families.
/// Each seed draws its own support size in 1..=[`MAX_SUPPORT`].
pub fn run_suite(n_seeds: u64) -> Result<Vec<SuiteRow>, TheoryError> {
    let mut rows = Vec::with_capacity(n_seeds as usize * 4);
    for seed in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let n = rng.gen_range(1..=MAX_SUPPORT);
        let joint = DiscreteJoint::random(n, seed * 2 + 1)?;
        let pred = TabulatedPredictor::random(n, seed * 2 + 2);
        for loss in [LossKind::Squared, LossKind::Bce] {
            let l = |p: f64, t: f64| loss.eval(p, t);
            let c1 = verify_theorem1(&joint, &pred, &l)?;
            rows.push(SuiteRow {
                seed,
                support: n,
                theorem: 1,
                loss,
                lhs: c1.lhs,
                rhs: c1.rhs,
                abs_diff: c1.abs_diff,
            });
            let c2 = verify_theorem2(&joint, &pred, &l)?;
            rows.push(SuiteRow {
                seed,
                support: n,
                theorem: 2,
                loss,
                lhs: c2.lhs,
                rhs: c2.rhs,
                abs_diff: c2.abs_diff,
            });
        }
    }
    Ok(rows)
}

/// Worst absolute difference across a suite's rows.
pub fn max_abs_diff(rows: &[SuiteRow]) -> f64 {
    rows.iter().map(|r| r.abs_diff).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The worked single-point example: P(prev=1) = 0.5, P(curr=1|prev=1) = 0.4.
    fn worked_joint() -> DiscreteJoint {
        DiscreteJoint::new(vec![1.0], vec![[0.5, 0.0, 0.3, 0.2]]).unwrap()
    }

    #[test]
    fn chain_probability_of_worked_joint() {
        let j = worked_joint();
        assert_eq!(j.prev_positive_mass(), 0.5);
        // P(curr=1) = P(prev=1) * P(curr=1|prev=1) = 0.5 * 0.4 = 0.2
        assert!((marginal(&j.cells[0], Task::Curr) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn worked_example_first_identity() {
        let j = worked_joint();
        let pred = TabulatedPredictor { f_prev: vec![0.5], f_curr: vec![0.3] };
        let sq = |p: f64, t: f64| LossKind::Squared.eval(p, t);
        let lhs = expected_loss_d(&j, &pred, Task::Curr, &sq).unwrap();
        // 0.2 * 0.49 + 0.8 * 0.09 = 0.17 by hand
        assert!((lhs - 0.17).abs() < 1e-15, "lhs {lhs}");
        let check = verify_theorem1(&j, &pred, &sq).unwrap();
        assert!((check.rhs - 0.17).abs() < 1e-15, "rhs {}", check.rhs);
        assert!(check.abs_diff < 1e-15);
    }

    #[test]
    fn worked_example_second_identity() {
        let j = worked_joint();
        // gap prediction 0.5: squared loss 0.25 against both gap labels
        let pred = TabulatedPredictor { f_prev: vec![0.8], f_curr: vec![0.3] };
        let sq = |p: f64, t: f64| LossKind::Squared.eval(p, t);
        let check = verify_theorem2(&j, &pred, &sq).unwrap();
        // entire space: P(gap=1) = 0.3, P(gap=0) = 0.7, loss 0.25 each
        assert!((check.lhs - 0.25).abs() < 1e-15, "lhs {}", check.lhs);
        assert!((check.rhs - 0.25).abs() < 1e-15, "rhs {}", check.rhs);
        assert!(check.abs_diff < 1e-15);
    }

    #[test]
    fn local_space_equals_entire_space_when_prev_always_converts() {
        // all mass on prev=1 cells: conditioning changes nothing, weights are 1
        let j = DiscreteJoint::new(vec![0.4, 0.6], vec![[0.0, 0.0, 0.7, 0.3], [0.0, 0.0, 0.1, 0.9]])
            .unwrap();
        let pred = TabulatedPredictor::random(2, 9);
        for loss in [LossKind::Squared, LossKind::Bce] {
            let l = |p: f64, t: f64| loss.eval(p, t);
            let c1 = verify_theorem1(&j, &pred, &l).unwrap();
            let c2 = verify_theorem2(&j, &pred, &l).unwrap();
            assert!(c1.abs_diff < 1e-15, "{loss:?}: {}", c1.abs_diff);
            assert!(c2.abs_diff < 1e-15, "{loss:?}: {}", c2.abs_diff);
        }
    }

    #[test]
    fn expected_loss_trivia() {
        let j = worked_joint();
        let pred = TabulatedPredictor { f_prev: vec![0.5], f_curr: vec![0.3] };
        // constant loss integrates to exactly the total mass
        let one = |_: f64, _: f64| 1.0;
        assert_eq!(expected_loss_d(&j, &pred, Task::Curr, &one).unwrap(), 1.0);
        assert_eq!(expected_loss_d(&j, &pred, Task::Prev, &one).unwrap(), 1.0);
        // deterministic labels + perfect predictor -> zero loss
        let det = DiscreteJoint::new(vec![1.0], vec![[0.0, 0.0, 0.0, 1.0]]).unwrap();
        let perfect = TabulatedPredictor { f_prev: vec![1.0], f_curr: vec![1.0] };
        let sq = |p: f64, t: f64| LossKind::Squared.eval(p, t);
        assert_eq!(expected_loss_d(&det, &perfect, Task::Curr, &sq).unwrap(), 0.0);
    }

    #[test]
    fn random_joints_satisfy_invariants() {
        for seed in 0..100 {
            let n = 1 + (seed as usize % MAX_SUPPORT);
            let j = DiscreteJoint::random(n, seed).unwrap();
            assert!(j.validate().is_ok());
            assert!(j.prev_positive_mass() > 0.0);
            for cell in &j.cells {
                assert_eq!(cell[1], 0.0, "forbidden cell must be exactly zero");
                assert!(cell[0] > 0.0 && cell[2] > 0.0 && cell[3] > 0.0, "permitted cells positive");
            }
        }
    }

    #[test]
    fn gap_never_negative_in_local_space() {
        // P_local(gap = -1) is identically zero: prev=1 forces gap >= 0
        for seed in 0..20 {
            let j = DiscreteJoint::random(4, seed).unwrap();
            let mass: f64 = j
                .px
                .iter()
                .zip(&j.cells)
                .map(|(p, cell)| p * gap_masses(cell, -1.0).1)
                .sum();
            assert_eq!(mass, 0.0);
        }
    }

    #[test]
    fn suite_passes_tight_tolerance() {
        let rows = run_suite(25).unwrap();
        assert_eq!(rows.len(), 25 * 4);
        let worst = max_abs_diff(&rows);
        assert!(worst <= 1e-10, "worst diff {worst}");
    }

    #[test]
    fn invalid_joints_are_rejected() {
        // mass not 1
        assert!(DiscreteJoint::new(vec![0.9], vec![[0.5, 0.0, 0.3, 0.2]]).is_err());
        // forbidden cell occupied
        assert!(DiscreteJoint::new(vec![1.0], vec![[0.4, 0.1, 0.3, 0.2]]).is_err());
        // conditional mass not 1
        assert!(DiscreteJoint::new(vec![1.0], vec![[0.5, 0.0, 0.3, 0.3]]).is_err());
        // empty support and oversized support
        assert!(DiscreteJoint::new(vec![], vec![]).is_err());
        assert!(DiscreteJoint::random(MAX_SUPPORT + 1, 0).is_err());
        // previous task never converts -> no local space
        let degenerate = DiscreteJoint { px: vec![1.0], cells: vec![[1.0, 0.0, 0.0, 0.0]] };
        assert!(matches!(degenerate.validate(), Err(TheoryError::DegenerateLocalSpace)));
        let pred = TabulatedPredictor { f_prev: vec![0.5], f_curr: vec![0.5] };
        let sq = |p: f64, t: f64| LossKind::Squared.eval(p, t);
        assert!(verify_theorem1(&degenerate, &pred, &sq).is_err());
        // predictor length mismatch
        let j = worked_joint();
        let short = TabulatedPredictor { f_prev: vec![], f_curr: vec![] };
        assert!(matches!(
            verify_theorem1(&j, &short, &sq),
            Err(TheoryError::PredictorMismatch { .. })
        ));
    }
}
