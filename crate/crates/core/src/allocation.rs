//! Wrench-to-current allocation.
//!
//! The handle wrench is linear in the currents once each iron core is
//! replaced by its secant gain at an operating point (see
//! [`ActuationModel::matrix`]). Currents follow from the damped minimum-norm
//! solution `i = Aᵀ(AAᵀ + λI)⁻¹ w` on row-scaled equations; if any coil would
//! exceed its limit, the whole solution is scaled down uniformly, so the
//! produced wrench keeps the requested direction.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::{ActuationModel, Currents, Matrix6x12, COIL_COUNT};
use crate::rigid::{Pose, Wrench};

#[derive(Debug, Error, PartialEq)]
pub enum AllocationError {
    #[error("wrench matrix is numerically singular (reciprocal condition {rcond:.3e})")]
    Conditioning { rcond: f64 },
    #[error("non-finite wrench matrix or desired wrench")]
    NonFinite,
}

/// Linearized map from coil currents to handle wrench at one pose.
#[derive(Clone, Debug, PartialEq)]
pub struct WrenchMatrix {
    /// Rows: force (N/A) then torque (N·m/A).
    pub entries: Matrix6x12,
    pub pose: Pose,
}

impl WrenchMatrix {
    /// Matrix with each core linearized at `operating` currents.
    pub fn from_model(model: &ActuationModel, operating: &Currents) -> Self {
        Self {
            entries: model.matrix(operating),
            pose: model.pose,
        }
    }

    pub fn singular_values(&self) -> Vector6<f64> {
        self.entries.transpose().svd(false, false).singular_values
    }
}

/// Coil current command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurrentVector {
    pub currents: Currents,
    /// Set when the solution was scaled down to respect the current limit.
    pub saturated: bool,
}

impl CurrentVector {
    pub fn zero() -> Self {
        Self {
            currents: Currents::zeros(),
            saturated: false,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.currents.amax()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    /// Per-coil current limit, A.
    pub current_limit: f64,
    /// Damping λ in row-scaled units.
    pub damping: f64,
    /// Torque rows are divided by this length before solving, m.
    pub torque_length: f64,
    /// Secant refinements when solving a wrench from scratch.
    pub refinements: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            current_limit: 4.0,
            damping: 1e-6,
            torque_length: 0.05,
            refinements: 12,
        }
    }
}

/// Damped minimum-norm currents for `desired`, uniformly scaled into `limit`.
pub fn solve_currents(
    a: &WrenchMatrix,
    desired: &Wrench,
    limit: f64,
    damping: f64,
) -> Result<CurrentVector, AllocationError> {
    solve_scaled(&a.entries, desired, limit, damping, 1.0)
}

fn solve_scaled(
    a: &Matrix6x12,
    desired: &Wrench,
    limit: f64,
    damping: f64,
    torque_length: f64,
) -> Result<CurrentVector, AllocationError> {
    if !desired.is_finite() || a.iter().any(|v| !v.is_finite()) {
        return Err(AllocationError::NonFinite);
    }
    let mut sa = *a;
    let mut w = desired.to_vector();
    for r in 3..6 {
        sa.row_mut(r).unscale_mut(torque_length);
        w[r] /= torque_length;
    }
    let gram: Matrix6<f64> = sa * sa.transpose() + Matrix6::identity() * damping;
    let chol = gram
        .cholesky()
        .ok_or(AllocationError::Conditioning { rcond: 0.0 })?;
    let l = chol.l_dirty();
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
    for k in 0..6 {
        let d = l[(k, k)] * l[(k, k)];
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    let rcond = dmin / dmax;
    if !(rcond > 1e-15) {
        return Err(AllocationError::Conditioning { rcond });
    }
    let mut currents: Currents = sa.transpose() * chol.solve(&w);
    let peak = currents.amax();
    let saturated = peak > limit;
    if saturated {
        currents *= limit / peak;
    }
    Ok(CurrentVector {
        currents,
        saturated,
    })
}

/// Allocation with the configured row scaling and damping.
#[derive(Clone, Debug, Default)]
pub struct Allocator {
    pub config: AllocatorConfig,
}

impl Allocator {
    pub fn new(config: AllocatorConfig) -> Self {
        Self { config }
    }

    /// One allocation with the cores linearized at `operating` currents
    /// (typically the previous tick's command). `desired` is the wrench the
    /// coils must add on top of the cogging wrench.
    pub fn allocate(
        &self,
        model: &ActuationModel,
        desired: &Wrench,
        operating: &Currents,
    ) -> Result<CurrentVector, AllocationError> {
        solve_scaled(
            &model.matrix(operating),
            desired,
            self.config.current_limit,
            self.config.damping,
            self.config.torque_length,
        )
    }

    /// Repeats [`Allocator::allocate`] with the operating point updated to
    /// the latest solution until the currents stop changing.
    pub fn allocate_settled(
        &self,
        model: &ActuationModel,
        desired: &Wrench,
        initial: &Currents,
    ) -> Result<CurrentVector, AllocationError> {
        let mut out = self.allocate(model, desired, initial)?;
        for _ in 0..self.config.refinements {
            let next = self.allocate(model, desired, &out.currents)?;
            let change = (next.currents - out.currents).amax();
            out = next;
            if change < 1e-10 {
                break;
            }
        }
        Ok(out)
    }

    /// Largest magnitude `α` such that `bias + α·direction` can be produced
    /// without saturating, to 1e-3 resolution by bisection. `direction` is a
    /// unit wrench (normalized here).
    pub fn capability(&self, model: &ActuationModel, direction: &Wrench, bias: &Wrench) -> f64 {
        const RESOLUTION: f64 = 1e-3;
        const CEILING: f64 = 1e3;
        let n = direction.norm();
        if n == 0.0 {
            return 0.0;
        }
        let dir = direction.scaled(1.0 / n);
        let feasible = |alpha: f64| -> bool {
            self.allocate_settled(model, &(*bias + dir.scaled(alpha)), &Currents::zeros())
                .map(|c| !c.saturated)
                .unwrap_or(false)
        };
        if !feasible(0.0) {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while feasible(hi) {
            lo = hi;
            hi *= 2.0;
            if hi > CEILING {
                return CEILING;
            }
        }
        while hi - lo > RESOLUTION {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Coil wrench needed to hold the handle still: gravity plus cancellation
/// of the cogging wrench.
pub fn hover_wrench(model: &ActuationModel, mass: f64, gravity: f64) -> Wrench {
    Wrench::from_force(crate::Vec3::new(0.0, 0.0, mass * gravity)) - model.cogging()
}

/// Whether the handle can hover at the model's pose within the current limit.
pub fn hover_feasible(
    allocator: &Allocator,
    model: &ActuationModel,
    mass: f64,
    gravity: f64,
) -> bool {
    allocator
        .allocate_settled(
            model,
            &hover_wrench(model, mass, gravity),
            &Currents::zeros(),
        )
        .map(|c| !c.saturated)
        .unwrap_or(false)
}

// Keep the coil count visible next to the 6×12 shapes used above.
const _: () = assert!(COIL_COUNT == 12);

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64) -> Matrix6x12 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix6x12::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    fn wm(entries: Matrix6x12) -> WrenchMatrix {
        WrenchMatrix {
            entries,
            pose: Pose::identity(),
        }
    }

    /// Pseudoinverse through an independent SVD of a dynamic matrix.
    fn svd_pinv_solution(a: &Matrix6x12, w: &Vector6<f64>) -> Currents {
        let d = DMatrix::from_iterator(6, 12, a.iter().copied());
        let pinv = d.pseudo_inverse(1e-12).unwrap();
        let wd = nalgebra::DVector::from_iterator(6, w.iter().copied());
        Currents::from_iterator((pinv * wd).iter().copied())
    }

    #[test]
    fn zero_wrench_gives_zero_currents() {
        let c = solve_currents(&wm(random_matrix(1)), &Wrench::zero(), 4.0, 1e-6).unwrap();
        assert_eq!(c.currents, Currents::zeros());
        assert!(!c.saturated);
    }

    #[test]
    fn matches_svd_pseudoinverse() {
        for seed in 0..20 {
            let a = random_matrix(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w = Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let c = solve_currents(&wm(a), &Wrench::from_vector(&w), 1e6, 0.0).unwrap();
            let oracle = svd_pinv_solution(&a, &w);
            assert!((a * c.currents - w).norm() <= 1e-9);
            assert!((c.currents - oracle).norm() <= 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn null_space_perturbation_increases_norm() {
        let a = random_matrix(7);
        let w = Vector6::new(0.3, -0.1, 0.8, 0.01, 0.0, -0.02);
        let c = solve_currents(&wm(a), &Wrench::from_vector(&w), 1e6, 0.0).unwrap();
        let svd = a.svd(false, true);
        let vt = svd.v_t.unwrap();
        // rows 6.. of a full Vᵀ span the null space; recover one via projection
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let r = Currents::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let proj = vt.transpose() * (vt * r);
            let delta = r - proj;
            assert!((a * delta).norm() < 1e-10);
            assert!((c.currents + delta).norm() > c.currents.norm());
        }
    }

    #[test]
    fn large_request_saturates_preserving_direction() {
        let a = random_matrix(11);
        let w = Vector6::new(1.0, 0.5, 2.0, 0.0, 0.01, 0.0);
        let unsat = solve_currents(&wm(a), &Wrench::from_vector(&w), 1e6, 0.0).unwrap();
        let big = Wrench::from_vector(&(w * 10.0 * unsat.max_abs().max(1.0)));
        let c = solve_currents(&wm(a), &big, 4.0, 0.0).unwrap();
        assert!(c.saturated);
        assert!((c.max_abs() - 4.0).abs() < 1e-12);
        let produced = a * c.currents;
        let cos = produced.dot(&w) / (produced.norm() * w.norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = random_matrix(5);
        let r0 = a.row(0).into_owned();
        a.set_row(1, &(r0 * 2.0));
        assert!(matches!(
            solve_currents(&wm(a), &Wrench::from_force(crate::Vec3::x()), 4.0, 0.0),
            Err(AllocationError::Conditioning { .. })
        ));
        // damping regularizes the same matrix
        assert!(solve_currents(&wm(a), &Wrench::from_force(crate::Vec3::x()), 4.0, 1e-6).is_ok());
    }

    #[test]
    fn non_finite_request_rejected() {
        let w = Wrench::from_force(crate::Vec3::new(f64::NAN, 0.0, 0.0));
        assert_eq!(
            solve_currents(&wm(random_matrix(1)), &w, 4.0, 0.0),
            Err(AllocationError::NonFinite)
        );
    }

    proptest! {
        #[test]
        fn never_exceeds_limit(seed in 0u64..1000, scale in 0.0f64..1e4,
                               w in proptest::array::uniform6(-1.0f64..1.0)) {
            let a = random_matrix(seed);
            let w = Wrench::from_vector(&Vector6::from_row_slice(&w).scale(scale));
            let c = solve_currents(&wm(a), &w, 4.0, 1e-6).unwrap();
            prop_assert!(c.max_abs() <= 4.0);
        }

        #[test]
        fn scaling_equivariance(seed in 0u64..1000, k in -3.0f64..3.0,
                                w in proptest::array::uniform6(-0.1f64..0.1)) {
            let a = random_matrix(seed);
            let w = Wrench::from_vector(&Vector6::from_row_slice(&w));
            let c1 = solve_currents(&wm(a), &w, 1e9, 1e-6).unwrap();
            let ck = solve_currents(&wm(a), &w.scaled(k), 1e9, 1e-6).unwrap();
            prop_assert!((ck.currents - c1.currents * k).norm() <= 1e-12 * (1.0 + ck.currents.norm()));
        }
    }
}
