//! Minimum-norm interpolation in overparameterized linear regression: what
//! happens to the fitted model when one input feature is masked out.
//!
//! A design `[Z S]` is fitted once with the feature column `S` (giving
//! `theta_plus`, `w_hat`) and once without it (`theta_minus`). The two
//! agree on a test point `(z, s)` exactly when `s` matches the min-norm
//! prediction of `S` from `Z`, and dropping the feature never lowers the
//! squared norm of the interpolant.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted condition number of the Gram matrix `X Xᵀ`.
pub const MAX_CONDITION: f64 = 1e8;

/// Condition number of a symmetric positive semi-definite matrix.
fn condition(gram: &DMatrix<f64>) -> f64 {
    let eig = gram.clone().symmetric_eigen().eigenvalues;
    let hi = eig.max();
    let lo = eig.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `Xᵀ (X Xᵀ)⁻¹ Y` through a Cholesky solve. Also returns the condition
/// number of `X Xᵀ`.
pub fn min_norm_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if x.nrows() != y.len() {
        return Err(Error::Input(format!("design has {} rows, target has {}", x.nrows(), y.len())));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Input("empty design".into()));
    }
    let gram = x * x.transpose();
    let cond = condition(&gram);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::Numerical {
            msg: format!("gram matrix of a {}x{} design is ill-conditioned", x.nrows(), x.ncols()),
            condition: cond,
        });
    }
    let chol = gram.cholesky().ok_or_else(|| Error::Numerical {
        msg: "gram matrix is not positive definite".into(),
        condition: cond,
    })?;
    Ok((x.transpose() * chol.solve(y), cond))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Unmasked features, `n × (d - 1)`.
    pub z: DMatrix<f64>,
    /// The feature that gets masked, length `n`.
    pub s: DVector<f64>,
    pub y: DVector<f64>,
}

impl Instance {
    pub fn new(z: DMatrix<f64>, s: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        if s.len() != z.nrows() || y.len() != z.nrows() {
            return Err(Error::Input(format!(
                "Z has {} rows but S has {} and Y has {}",
                z.nrows(),
                s.len(),
                y.len()
            )));
        }
        if z.nrows() > z.ncols() {
            return Err(Error::Input(format!(
                "need n < d: {} samples, {} features",
                z.nrows(),
                z.ncols() + 1
            )));
        }
        Ok(Instance { z, s, y })
    }

    /// Standard normal entries throughout.
    pub fn random<R: rand::Rng>(n: usize, d: usize, rng: &mut R) -> Result<Self> {
        if d < 2 {
            return Err(Error::Input("need at least two features".into()));
        }
        let mut draw = || -> f64 { StandardNormal.sample(rng) };
        let z = DMatrix::from_fn(n, d - 1, |_, _| draw());
        let s = DVector::from_fn(n, |_, _| draw());
        let y = DVector::from_fn(n, |_, _| draw());
        Instance::new(z, s, y)
    }

    pub fn joint_design(&self) -> DMatrix<f64> {
        let mut x = self.z.clone().insert_column(self.z.ncols(), 0.0);
        x.set_column(self.z.ncols(), &self.s);
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Weights on `Z` when `S` is available.
    pub theta_plus: DVector<f64>,
    /// Weight on `S`.
    pub w_hat: f64,
    /// Weights on `Z` once `S` is masked.
    pub theta_minus: DVector<f64>,
    /// Min-norm regression of `S` on `Z`.
    pub beta: DVector<f64>,
    pub cond_joint: f64,
    pub cond_masked: f64,
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

pub fn solve_instance(inst: &Instance) -> Result<Solution> {
    let m = inst.z.ncols();
    let (joint, cond_joint) = min_norm_fit(&inst.joint_design(), &inst.y)?;
    let theta_plus = joint.rows(0, m).into_owned();
    let w_hat = joint[m];
    let (theta_minus, cond_masked) = min_norm_fit(&inst.z, &inst.y)?;
    let (beta, _) = min_norm_fit(&inst.z, &inst.s)?;

    // Same weights from the closed form given w_hat.
    let (recomputed, _) = min_norm_fit(&inst.z, &(&inst.y - &inst.s * w_hat))?;
    let drift = rel(&theta_plus, &recomputed);
    if drift > 1e-9 && (&theta_plus - &recomputed).norm() > 1e-12 {
        return Err(Error::Numerical {
            msg: format!("joint and closed-form weights differ by {drift:e} relative"),
            condition: cond_joint,
        });
    }
    Ok(Solution {
        theta_plus,
        w_hat,
        theta_minus,
        beta,
        cond_joint,
        cond_masked,
    })
}

impl Solution {
    /// Largest interpolation residual, relative to `‖Y‖` (absolute when `Y = 0`).
    pub fn max_residual(&self, inst: &Instance) -> f64 {
        let with = &inst.z * &self.theta_plus + &inst.s * self.w_hat - &inst.y;
        let without = &inst.z * &self.theta_minus - &inst.y;
        with.norm().max(without.norm()) / inst.y.norm().max(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub agree: bool,
    pub consistent: bool,
    pub pred_with: f64,
    pub pred_without: f64,
    /// `s - βᵀz`.
    pub inconsistency: f64,
}

pub fn check_agreement(sol: &Solution, z_star: &DVector<f64>, s_star: f64, tol: f64) -> Result<Agreement> {
    if z_star.len() != sol.theta_plus.len() {
        return Err(Error::Input(format!(
            "test point has {} features, model has {}",
            z_star.len(),
            sol.theta_plus.len()
        )));
    }
    let pred_with = sol.theta_plus.dot(z_star) + sol.w_hat * s_star;
    let pred_without = sol.theta_minus.dot(z_star);
    let implied = sol.beta.dot(z_star);
    let inconsistency = s_star - implied;
    Ok(Agreement {
        agree: (pred_with - pred_without).abs() <= tol * pred_without.abs().max(1.0),
        consistent: inconsistency.abs() <= tol * implied.abs().max(1.0),
        pred_with,
        pred_without,
        inconsistency,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    /// `‖θ⁺‖² + ŵ²`.
    pub norm_with: f64,
    /// `‖θ⁻‖²`.
    pub norm_without: f64,
}

impl Complexity {
    /// `(norm_without - norm_with) / max(norm_with, tiny)`.
    pub fn relative_slack(&self) -> f64 {
        (self.norm_without - self.norm_with) / self.norm_with.max(f64::MIN_POSITIVE)
    }

    pub fn holds(&self) -> bool {
        self.norm_without >= self.norm_with - 1e-10 * self.norm_with
    }
}

pub fn check_complexity(sol: &Solution) -> Complexity {
    Complexity {
        norm_with: sol.theta_plus.norm_squared() + sol.w_hat * sol.w_hat,
        norm_without: sol.theta_minus.norm_squared(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub redraws: usize,
    pub cond_joint: f64,
    pub cond_masked: f64,
    pub w_hat: f64,
    pub norm_with: f64,
    pub norm_without: f64,
    pub consistent_point: Agreement,
    pub perturbed_point: Agreement,
    /// Error of `pred_with - pred_without = ŵ (s - βᵀz)`, relative to `max(1, |pred_without|)`.
    pub identity_error: f64,
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub trial: usize,
    pub what: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub trials: usize,
    pub n: usize,
    pub d: usize,
    pub tol: f64,
    pub delta: f64,
    pub consistent_and_agree: usize,
    pub inconsistent_and_disagree: usize,
    /// Trials with `ŵ = 0`, where agreement carries no information.
    pub degenerate: usize,
    pub complexity_holds: usize,
    pub min_complexity_slack: f64,
    pub max_identity_error: f64,
    pub total_redraws: usize,
    pub violations: Vec<Violation>,
    pub records: Vec<TrialRecord>,
}

/// Draws `trials` random instances; for each, tests one consistent point and
/// one shifted by `delta`, plus the norm inequality.
pub fn verify_sweep(seed: u64, trials: usize, n: usize, d: usize, tol: f64, delta: f64) -> Result<SweepReport> {
    const MAX_REDRAWS: usize = 20;
    if n == 0 || n >= d {
        return Err(Error::Config(format!("need 0 < n < d, got n={n}, d={d}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SweepReport {
        seed,
        trials,
        n,
        d,
        tol,
        delta,
        consistent_and_agree: 0,
        inconsistent_and_disagree: 0,
        degenerate: 0,
        complexity_holds: 0,
        min_complexity_slack: f64::INFINITY,
        max_identity_error: 0.0,
        total_redraws: 0,
        violations: Vec::new(),
        records: Vec::with_capacity(trials),
    };
    for trial in 0..trials {
        let mut redraws = 0;
        let (inst, sol) = loop {
            let inst = Instance::random(n, d, &mut rng)?;
            match solve_instance(&inst) {
                Ok(sol) => break (inst, sol),
                Err(Error::Numerical { .. }) if redraws < MAX_REDRAWS => redraws += 1,
                Err(e) => return Err(e),
            }
        };
        report.total_redraws += redraws;
        let z_star = DVector::from_fn(d - 1, |_, _| StandardNormal.sample(&mut rng));
        let s_cons = sol.beta.dot(&z_star);
        let cons = check_agreement(&sol, &z_star, s_cons, tol)?;
        let pert = check_agreement(&sol, &z_star, s_cons + delta, tol)?;

        let degenerate = sol.w_hat == 0.0;
        report.degenerate += usize::from(degenerate);
        let mut flag = |what: String| report.violations.push(Violation { trial, what });
        let mut identity_error: f64 = 0.0;
        for (label, a) in [("consistent", &cons), ("perturbed", &pert)] {
            let err = ((a.pred_with - a.pred_without) - sol.w_hat * a.inconsistency).abs() / a.pred_without.abs().max(1.0);
            identity_error = identity_error.max(err);
            if err > tol {
                flag(format!("{label} point breaks the disagreement identity by {err:e}"));
            }
            if !degenerate && a.agree != a.consistent {
                flag(format!(
                    "{label} point: agree={} but consistent={}",
                    a.agree, a.consistent
                ));
            }
        }
        if !cons.consistent {
            flag("constructed point is not consistent".into());
        }
        let cx = check_complexity(&sol);
        if cx.holds() {
            report.complexity_holds += 1;
        } else {
            flag(format!("norm without the feature {} < norm with it {}", cx.norm_without, cx.norm_with));
        }
        let residual = sol.max_residual(&inst);
        if residual > 1e-9 {
            flag(format!("interpolation residual {residual:e}"));
        }
        report.consistent_and_agree += usize::from(cons.consistent && cons.agree);
        report.inconsistent_and_disagree += usize::from(!pert.consistent && !pert.agree);
        report.min_complexity_slack = report.min_complexity_slack.min(cx.relative_slack());
        report.max_identity_error = report.max_identity_error.max(identity_error);
        report.records.push(TrialRecord {
            trial,
            redraws,
            cond_joint: sol.cond_joint,
            cond_masked: sol.cond_masked,
            w_hat: sol.w_hat,
            norm_with: cx.norm_with,
            norm_without: cx.norm_without,
            consistent_point: cons,
            perturbed_point: pert,
            identity_error,
            max_residual: residual,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d() -> Instance {
        Instance::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0), DVector::from_element(1, 3.0)).unwrap()
    }

    #[test]
    fn row_vector_fit() {
        let (t, _) = min_norm_fit(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), &DVector::from_element(1, 3.0)).unwrap();
        assert!((t[0] - 0.6).abs() < 1e-14 && (t[1] - 1.2).abs() < 1e-14);
    }

    #[test]
    fn identity_design_returns_target() {
        let y = DVector::from_vec(vec![1.0, -2.0, 5.0]);
        let (t, cond) = min_norm_fit(&DMatrix::identity(3, 3), &y).unwrap();
        assert_eq!(cond, 1.0);
        assert!((t - y).norm() < 1e-14);
    }

    #[test]
    fn singular_gram_rejected() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        match min_norm_fit(&x, &DVector::zeros(2)) {
            Err(Error::Numerical { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hand_instance() {
        let sol = solve_instance(&one_d()).unwrap();
        assert!((sol.theta_plus[0] - 0.6).abs() < 1e-14);
        assert!((sol.w_hat - 1.2).abs() < 1e-14);
        assert!((sol.theta_minus[0] - 3.0).abs() < 1e-14);
        assert!((sol.beta[0] - 2.0).abs() < 1e-14);

        let one = DVector::from_element(1, 1.0);
        let a = check_agreement(&sol, &one, 2.0, 1e-8).unwrap();
        assert!(a.agree && a.consistent);
        assert!((a.pred_with - 3.0).abs() < 1e-13);
        let b = check_agreement(&sol, &one, 0.0, 1e-8).unwrap();
        assert!(!b.agree && !b.consistent);
        assert!((b.pred_with - 0.6).abs() < 1e-13);

        let c = check_complexity(&sol);
        assert!((c.norm_with - 1.8).abs() < 1e-13 && (c.norm_without - 9.0).abs() < 1e-13);
    }

    #[test]
    fn dead_feature_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inst = Instance::random(4, 8, &mut rng).unwrap();
        inst.s.fill(0.0);
        let sol = solve_instance(&inst);
        // [Z 0] has the same Gram matrix as Z.
        let sol = sol.unwrap();
        assert_eq!(sol.w_hat, 0.0);
        assert!((&sol.theta_plus - &sol.theta_minus).norm() < 1e-12);
        let c = check_complexity(&sol);
        assert!((c.norm_with - c.norm_without).abs() < 1e-12);
        let z = DVector::from_element(7, 1.0);
        assert!(check_agreement(&sol, &z, 5.0, 1e-8).unwrap().agree);
    }

    #[test]
    fn zero_target_gives_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inst = Instance::random(3, 6, &mut rng).unwrap();
        inst.y.fill(0.0);
        let sol = solve_instance(&inst).unwrap();
        assert_eq!(sol.theta_plus.norm() + sol.w_hat.abs() + sol.theta_minus.norm(), 0.0);
    }

    #[test]
    fn rejects_underdetermined_shapes() {
        assert!(Instance::new(DMatrix::zeros(3, 2), DVector::zeros(3), DVector::zeros(3)).is_err());
        assert!(verify_sweep(0, 1, 5, 5, 1e-8, 1.0).is_err());
    }

    #[test]
    fn zero_shift_always_agrees() {
        let r = verify_sweep(9, 10, 5, 12, 1e-8, 0.0).unwrap();
        assert!(r.records.iter().all(|t| t.perturbed_point.agree && t.perturbed_point.consistent));
        assert_eq!(r.consistent_and_agree, 10);
    }
}
