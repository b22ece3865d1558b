//! Factor graph over manifold variables with a sparse Gauss-Newton solver.
//!
//! Variables live in a flat arena indexed by [`VariableId`]. Iteration order
//! is always insertion order, so assembly and therefore results are
//! deterministic regardless of thread count.

mod factors;
mod optimizer;
mod sparse;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2, Matrix6, SMatrix};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, Pose};
use crate::imu::{ImuBias, Matrix9, Preintegrated};
use crate::parameterization::{FhpPoint, FspRect};

pub use factors::{Linearization, DEFAULT_NUMERICAL_STEP};
pub use optimizer::{optimize, ConvergenceReason, OptimizeReport, OptimizerConfig};

pub type Matrix8 = SMatrix<f64, 8, 8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum VariableKind {
    Pose,
    Fsp,
    Fhp,
    Bias,
}

impl VariableKind {
    /// Tangent-space dimension.
    pub fn dim(self) -> usize {
        match self {
            VariableKind::Pose => 6,
            VariableKind::Fsp => FspRect::DIM,
            VariableKind::Fhp => FhpPoint::DIM,
            VariableKind::Bias => ImuBias::DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableId {
    index: usize,
    kind: VariableKind,
}

impl VariableId {
    pub fn index(self) -> usize {
        self.index
    }

    pub fn kind(self) -> VariableKind {
        self.kind
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variable {
    Pose(Pose),
    Fsp(FspRect),
    Fhp(FhpPoint),
    Bias(ImuBias),
}

impl Variable {
    pub fn kind(&self) -> VariableKind {
        match self {
            Variable::Pose(_) => VariableKind::Pose,
            Variable::Fsp(_) => VariableKind::Fsp,
            Variable::Fhp(_) => VariableKind::Fhp,
            Variable::Bias(_) => VariableKind::Bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    pub fn boxplus(&self, d: &[f64]) -> Variable {
        match self {
            Variable::Pose(p) => Variable::Pose(p.boxplus(d)),
            Variable::Fsp(l) => Variable::Fsp(l.boxplus(d)),
            Variable::Fhp(l) => Variable::Fhp(l.boxplus(d)),
            Variable::Bias(b) => Variable::Bias(b.boxplus(d)),
        }
    }

    /// Inverse depths and rectangle sizes must stay positive.
    pub fn is_valid(&self) -> bool {
        match self {
            Variable::Pose(_) | Variable::Bias(_) => true,
            Variable::Fsp(l) => l.is_valid(),
            Variable::Fhp(l) => l.is_valid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Four corner reprojections of a rectangle landmark.
    FspReprojection {
        camera: VariableId,
        anchor: VariableId,
        landmark: VariableId,
        intrinsics: CameraIntrinsics,
        observed: [Pixel; 4],
        info: Matrix8,
    },
    FhpReprojection {
        camera: VariableId,
        anchor: VariableId,
        landmark: VariableId,
        intrinsics: CameraIntrinsics,
        observed: Pixel,
        info: Matrix2<f64>,
    },
    /// Inertial constraint over three consecutive keyframes; `bias` is the
    /// bias variable of the first keyframe.
    ImuTernary {
        poses: [VariableId; 3],
        bias: VariableId,
        pre1: Box<Preintegrated>,
        pre2: Box<Preintegrated>,
        info: Matrix9,
        gravity: nalgebra::Vector3<f64>,
    },
    BiasWalk {
        from: VariableId,
        to: VariableId,
        info: Matrix6<f64>,
    },
    PosePrior {
        pose: VariableId,
        prior: Pose,
        info: Matrix6<f64>,
    },
}

impl Factor {
    /// Variables in Jacobian block order. May contain duplicates when the
    /// observing camera is also the anchor.
    pub fn variables(&self) -> Vec<VariableId> {
        match self {
            Factor::FspReprojection {
                camera,
                anchor,
                landmark,
                ..
            }
            | Factor::FhpReprojection {
                camera,
                anchor,
                landmark,
                ..
            } => vec![*camera, *anchor, *landmark],
            Factor::ImuTernary { poses, bias, .. } => vec![poses[0], poses[1], poses[2], *bias],
            Factor::BiasWalk { from, to, .. } => vec![*from, *to],
            Factor::PosePrior { pose, .. } => vec![*pose],
        }
    }

    fn expected_kinds(&self) -> Vec<VariableKind> {
        use VariableKind::*;
        match self {
            Factor::FspReprojection { .. } => vec![Pose, Pose, Fsp],
            Factor::FhpReprojection { .. } => vec![Pose, Pose, Fhp],
            Factor::ImuTernary { .. } => vec![Pose, Pose, Pose, Bias],
            Factor::BiasWalk { .. } => vec![Bias, Bias],
            Factor::PosePrior { .. } => vec![Pose],
        }
    }

    pub fn residual_dim(&self) -> usize {
        match self {
            Factor::FspReprojection { .. } => 8,
            Factor::FhpReprojection { .. } => 2,
            Factor::ImuTernary { .. } => 9,
            Factor::BiasWalk { .. } | Factor::PosePrior { .. } => 6,
        }
    }

    pub fn information(&self) -> DMatrix<f64> {
        fn dyn_of<const N: usize>(m: &SMatrix<f64, N, N>) -> DMatrix<f64> {
            DMatrix::from_column_slice(N, N, m.as_slice())
        }
        match self {
            Factor::FspReprojection { info, .. } => dyn_of(info),
            Factor::FhpReprojection { info, .. } => dyn_of(info),
            Factor::ImuTernary { info, .. } => dyn_of(info),
            Factor::BiasWalk { info, .. } | Factor::PosePrior { info, .. } => dyn_of(info),
        }
    }

    pub fn is_reprojection(&self) -> bool {
        matches!(self, Factor::FspReprojection { .. } | Factor::FhpReprojection { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown variable {0:?}")]
    UnknownVariable(VariableId),
    #[error("variable {id:?} has kind {found:?}, factor expects {expected:?}")]
    KindMismatch {
        id: VariableId,
        expected: VariableKind,
        found: VariableKind,
    },
    #[error("information matrix is not symmetric positive definite")]
    InvalidInformation,
    #[error("landmark {landmark:?} is anchored to {existing:?}, not {requested:?}")]
    AnchorMismatch {
        landmark: VariableId,
        existing: VariableId,
        requested: VariableId,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("normal equations are singular at variable {0:?}")]
    SingularHessian(VariableId),
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    values: Vec<Variable>,
    fixed: Vec<bool>,
    factors: Vec<Factor>,
    anchors: BTreeMap<usize, VariableId>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, value: Variable) -> VariableId {
        let id = VariableId {
            index: self.values.len(),
            kind: value.kind(),
        };
        self.values.push(value);
        self.fixed.push(false);
        id
    }

    fn check_id(&self, id: VariableId) -> Result<(), GraphError> {
        match self.values.get(id.index) {
            Some(v) if v.kind() == id.kind => Ok(()),
            _ => Err(GraphError::UnknownVariable(id)),
        }
    }

    pub fn fix_variable(&mut self, id: VariableId) -> Result<(), GraphError> {
        self.check_id(id)?;
        self.fixed[id.index] = true;
        Ok(())
    }

    pub fn unfix_variable(&mut self, id: VariableId) -> Result<(), GraphError> {
        self.check_id(id)?;
        self.fixed[id.index] = false;
        Ok(())
    }

    pub fn is_fixed(&self, id: VariableId) -> bool {
        self.fixed.get(id.index).copied().unwrap_or(false)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize, GraphError> {
        for (id, expected) in factor.variables().into_iter().zip(factor.expected_kinds()) {
            self.check_id(id)?;
            if id.kind != expected {
                return Err(GraphError::KindMismatch {
                    id,
                    expected,
                    found: id.kind,
                });
            }
        }
        let info = factor.information();
        let symmetric = (&info - info.transpose()).amax() <= 1e-9 * info.amax().max(1.0);
        if !symmetric || info.iter().any(|x| !x.is_finite()) || info.clone().cholesky().is_none() {
            return Err(GraphError::InvalidInformation);
        }
        if let Factor::FspReprojection { anchor, landmark, .. } | Factor::FhpReprojection { anchor, landmark, .. } =
            &factor
        {
            match self.anchors.get(&landmark.index) {
                Some(existing) if existing != anchor => {
                    return Err(GraphError::AnchorMismatch {
                        landmark: *landmark,
                        existing: *existing,
                        requested: *anchor,
                    })
                }
                Some(_) => {}
                None => {
                    self.anchors.insert(landmark.index, *anchor);
                }
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn value(&self, id: VariableId) -> Option<&Variable> {
        self.values.get(id.index).filter(|v| v.kind() == id.kind)
    }

    pub fn set_value(&mut self, id: VariableId, value: Variable) -> Result<(), GraphError> {
        self.check_id(id)?;
        if value.kind() != id.kind {
            return Err(GraphError::KindMismatch {
                id,
                expected: id.kind,
                found: value.kind(),
            });
        }
        self.values[id.index] = value;
        Ok(())
    }

    pub fn pose(&self, id: VariableId) -> Option<&Pose> {
        match self.value(id)? {
            Variable::Pose(p) => Some(p),
            _ => None,
        }
    }

    pub fn fsp(&self, id: VariableId) -> Option<&FspRect> {
        match self.value(id)? {
            Variable::Fsp(l) => Some(l),
            _ => None,
        }
    }

    pub fn fhp(&self, id: VariableId) -> Option<&FhpPoint> {
        match self.value(id)? {
            Variable::Fhp(l) => Some(l),
            _ => None,
        }
    }

    pub fn bias(&self, id: VariableId) -> Option<&ImuBias> {
        match self.value(id)? {
            Variable::Bias(b) => Some(b),
            _ => None,
        }
    }

    /// Anchor pose of a landmark, set by its first reprojection factor.
    pub fn anchor_of(&self, landmark: VariableId) -> Option<VariableId> {
        self.anchors.get(&landmark.index).copied()
    }

    pub fn num_variables(&self) -> usize {
        self.values.len()
    }

    pub fn variable_ids(&self) -> impl Iterator<Item = VariableId> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(index, v)| VariableId { index, kind: v.kind() })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Total tangent dimension of all variables.
    pub fn dimension(&self) -> usize {
        self.values.iter().map(Variable::dim).sum()
    }

    /// Tangent dimension of the variables that are not fixed.
    pub fn free_dimension(&self) -> usize {
        self.values
            .iter()
            .zip(&self.fixed)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| v.dim())
            .sum()
    }

    /// Tangent dimension contributed by landmark variables.
    pub fn landmark_dimension(&self) -> usize {
        self.values
            .iter()
            .filter(|v| matches!(v, Variable::Fsp(_) | Variable::Fhp(_)))
            .map(Variable::dim)
            .sum()
    }

    pub fn residual(&self, factor: &Factor) -> Option<nalgebra::DVector<f64>> {
        factors::residual(factor, &self.values).ok()
    }

    pub fn linearize(&self, factor: &Factor) -> Option<Linearization> {
        factors::linearize(factor, &self.values).ok()
    }

    /// World-frame inertial residual of an IMU factor.
    pub fn imu_world_residual(&self, factor: &Factor) -> Option<nalgebra::DVector<f64>> {
        factors::imu_world_residual(factor, &self.values)
    }

    /// Central-difference Jacobian blocks, ordered like [`Linearization::variables`].
    pub fn numerical_jacobian(&self, factor: &Factor, step: f64) -> Option<Vec<DMatrix<f64>>> {
        factors::numerical_jacobian(factor, &self.values, step).ok()
    }

    /// Weighted squared residual `sum r^T W r` and the number of factors that
    /// could not be evaluated (landmark behind a camera).
    pub fn cost(&self) -> (f64, usize) {
        optimizer::total_cost(&self.factors, &self.values)
    }

    /// Indices of reprojection factors that are currently not evaluable.
    pub fn invalid_factors(&self) -> Vec<usize> {
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, f)| factors::residual(f, &self.values).is_err())
            .map(|(i, _)| i)
            .collect()
    }

    /// Dense Gauss-Newton Hessian over the free variables, in insertion order.
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let mut offsets = vec![usize::MAX; self.values.len()];
        let mut n = 0;
        for (i, v) in self.values.iter().enumerate() {
            if !self.fixed[i] {
                offsets[i] = n;
                n += v.dim();
            }
        }
        let mut h = DMatrix::zeros(n, n);
        for f in &self.factors {
            let Ok(lin) = factors::linearize(f, &self.values) else {
                continue;
            };
            let w = f.information();
            for (a, ja) in lin.variables.iter().zip(&lin.jacobians) {
                if self.fixed[a.index] {
                    continue;
                }
                for (b, jb) in lin.variables.iter().zip(&lin.jacobians) {
                    if self.fixed[b.index] {
                        continue;
                    }
                    let block = ja.transpose() * &w * jb;
                    let mut view = h.view_mut((offsets[a.index], offsets[b.index]), (a.kind.dim(), b.kind.dim()));
                    view += block;
                }
            }
        }
        h
    }

    pub(crate) fn values(&self) -> &[Variable] {
        &self.values
    }

    pub(crate) fn fixed_mask(&self) -> &[bool] {
        &self.fixed
    }

    pub(crate) fn replace_values(&mut self, values: Vec<Variable>) {
        debug_assert_eq!(values.len(), self.values.len());
        self.values = values;
    }
}
