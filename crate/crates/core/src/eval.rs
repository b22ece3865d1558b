//! Error metrics against ground truth: relative pose error between
//! consecutive frames, per-corner 3D error and rectangle size error.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::parameterization::{fhp_point_world, fsp_corners_world, fsp_dims, FhpPoint, FspRect, StructuralPointIndex};
use crate::simulator::{RectObject, WorldSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("estimated trajectory has {est} poses, ground truth has {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("object {0} is missing from the ground truth")]
    MissingLandmark(u32),
    #[error("landmark of object {0} has degenerate parameters")]
    DegenerateLandmark(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelPoseError {
    pub translation: f64,
    pub rotation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerError {
    pub object_id: u32,
    pub corner: StructuralPointIndex,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimError {
    pub object_id: u32,
    pub w_err: f64,
    pub h_err: f64,
    pub w_est: f64,
    pub h_est: f64,
}

/// Estimated landmark of one object in either parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LandmarkEstimate {
    Fsp {
        object_id: u32,
        anchor: Pose,
        rect: FspRect,
    },
    Fhp {
        object_id: u32,
        corners: [(Pose, FhpPoint); 4],
    },
}

impl LandmarkEstimate {
    pub fn object_id(&self) -> u32 {
        match self {
            LandmarkEstimate::Fsp { object_id, .. } | LandmarkEstimate::Fhp { object_id, .. } => *object_id,
        }
    }

    pub fn corners_world(&self) -> Result<[Vector3<f64>; 4], EvalError> {
        let id = self.object_id();
        match self {
            LandmarkEstimate::Fsp { anchor, rect, .. } => {
                fsp_corners_world(anchor, rect).map_err(|_| EvalError::DegenerateLandmark(id))
            }
            LandmarkEstimate::Fhp { corners, .. } => {
                let mut out = [Vector3::zeros(); 4];
                for (o, (anchor, p)) in out.iter_mut().zip(corners) {
                    *o = fhp_point_world(anchor, p).map_err(|_| EvalError::DegenerateLandmark(id))?;
                }
                Ok(out)
            }
        }
    }
}

fn find(world: &WorldSpec, id: u32) -> Result<&RectObject, EvalError> {
    world
        .objects
        .iter()
        .find(|o| o.id == id)
        .ok_or(EvalError::MissingLandmark(id))
}

/// Compares the motion between consecutive poses.
pub fn relative_pose_error(est: &[Pose], gt: &[Pose]) -> Result<Vec<RelPoseError>, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    Ok(est
        .windows(2)
        .zip(gt.windows(2))
        .map(|(e, g)| {
            let de = e[0].inverse().compose(&e[1]);
            let dg = g[0].inverse().compose(&g[1]);
            RelPoseError {
                translation: (de.translation - dg.translation).norm(),
                rotation: dg.rotation.inverse().compose(&de.rotation).angle(),
            }
        })
        .collect())
}

pub fn corner_errors(estimates: &[LandmarkEstimate], world: &WorldSpec) -> Result<Vec<CornerError>, EvalError> {
    let mut out = Vec::with_capacity(estimates.len() * 4);
    for est in estimates {
        let truth = find(world, est.object_id())?.corners_world();
        for ((j, e), t) in StructuralPointIndex::ALL.iter().zip(est.corners_world()?).zip(truth) {
            out.push(CornerError {
                object_id: est.object_id(),
                corner: *j,
                error: (e - t).norm(),
            });
        }
    }
    Ok(out)
}

pub fn dim_errors(estimates: &[(u32, FspRect)], world: &WorldSpec) -> Result<Vec<DimError>, EvalError> {
    estimates
        .iter()
        .map(|(id, rect)| {
            let truth = find(world, *id)?;
            let d = fsp_dims(rect).map_err(|_| EvalError::DegenerateLandmark(*id))?;
            Ok(DimError {
                object_id: *id,
                w_err: (d.w - truth.w).abs(),
                h_err: (d.h - truth.h).abs(),
                w_est: d.w,
                h_est: d.h,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary::default();
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Summary {
        median,
        mean: v.iter().sum::<f64>() / n as f64,
        max: v[n - 1],
        count: n,
    }
}

/// Ratio of estimated to true distance between the two landmark origins
/// that are farthest apart in the ground truth. Pairs are `(estimate, truth)`.
pub fn scale_ratio(origins: &[(Vector3<f64>, Vector3<f64>)]) -> Option<f64> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..origins.len() {
        for j in i + 1..origins.len() {
            let d = (origins[i].1 - origins[j].1).norm();
            if best.is_none_or(|(b, _, _)| d > b) {
                best = Some((d, i, j));
            }
        }
    }
    let (d, i, j) = best?;
    (d > 0.0).then(|| (origins[i].0 - origins[j].0).norm() / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::parameterization::rect_structural_points;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn world() -> WorldSpec {
        WorldSpec {
            objects: vec![RectObject {
                id: 3,
                position: Vector3::new(1.0, 2.0, 3.0),
                orientation: so3_exp(&Vector3::new(0.1, 0.2, -0.3)).to_wxyz(),
                w: 2.0,
                h: 1.0,
            }],
            gravity: crate::imu::GRAVITY,
        }
    }

    /// FSP parameters reproducing the ground-truth object from `anchor`.
    fn exact_rect(anchor: &Pose, obj: &RectObject) -> FspRect {
        let local = anchor.inverse_transform_point(&obj.position);
        let omega = 1.0 / local.z;
        FspRect {
            ray: Vector2::new(local.x * omega, local.y * omega),
            omega,
            w_bar: obj.w * omega,
            form_factor: obj.w / obj.h,
            rel_orientation: anchor.rotation.inverse().compose(&obj.pose().rotation),
        }
    }

    fn anchor() -> Pose {
        Pose::new(Vector3::new(1.5, 1.0, -4.0), so3_exp(&Vector3::new(0.05, -0.1, 0.02)))
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let poses: Vec<Pose> = (0..5)
            .map(|i| {
                Pose::new(
                    Vector3::new(i as f64, 0.0, 0.0),
                    so3_exp(&Vector3::new(0.0, 0.0, 0.1 * i as f64)),
                )
            })
            .collect();
        let e = relative_pose_error(&poses, &poses).unwrap();
        assert_eq!(e.len(), 4);
        assert!(e.iter().all(|x| x.translation == 0.0 && x.rotation == 0.0));
        assert_eq!(
            relative_pose_error(&poses[..2], &poses).unwrap_err(),
            EvalError::LengthMismatch { est: 2, gt: 5 }
        );
    }

    #[test]
    fn single_offset_pose() {
        let gt = [Pose::identity(), Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))];
        let est = [Pose::identity(), Pose::from_translation(Vector3::new(1.01, 0.0, 0.0))];
        let e = relative_pose_error(&est, &gt).unwrap();
        assert!((e[0].translation - 0.01).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relative_error_is_gauge_invariant(
            seeds in proptest::collection::vec(proptest::array::uniform6(-1.0f64..1.0), 2..8),
            g in proptest::array::uniform6(-3.0f64..3.0),
        ) {
            let mk = |s: &[f64; 6]| Pose::new(Vector3::new(s[0], s[1], s[2]), so3_exp(&Vector3::new(s[3], s[4], s[5])));
            let gt: Vec<Pose> = seeds.iter().map(mk).collect();
            let est: Vec<Pose> = seeds.iter().map(|s| mk(&s.map(|x| x * 1.01))).collect();
            let global = mk(&g);
            let moved: Vec<Pose> = est.iter().map(|p| global.compose(p)).collect();
            let a = relative_pose_error(&est, &gt).unwrap();
            let b = relative_pose_error(&moved, &gt).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.translation - y.translation).abs() < 1e-12);
                prop_assert!((x.rotation - y.rotation).abs() < 1e-12);
            }
        }

        #[test]
        fn fsp_corner_errors_match_brute_force(
            d in proptest::array::uniform8(-0.05f64..0.05),
        ) {
            let w = world();
            let a = anchor();
            let est = exact_rect(&a, &w.objects[0]).boxplus(&d);
            let errs = corner_errors(&[LandmarkEstimate::Fsp { object_id: 3, anchor: a, rect: est }], &w).unwrap();
            // Independent construction: origin along the ray, rectangle from dims.
            let origin = a.transform_point(&(Vector3::new(est.ray.x, est.ray.y, 1.0) / est.omega));
            let dims = crate::parameterization::RectDims { w: est.w_bar / est.omega, h: est.w_bar / (est.form_factor * est.omega) };
            let r = a.rotation.compose(&est.rel_orientation);
            let truth = w.objects[0].corners_world();
            for (k, s) in rect_structural_points(&dims).iter().enumerate() {
                let corner = origin + r.rotate(s);
                prop_assert!((errs[k].error - (corner - truth[k]).norm()).abs() < 1e-12);
            }
        }

        #[test]
        fn dim_error_ignores_orientation(
            w in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let world = world();
            let rect = exact_rect(&anchor(), &world.objects[0]).boxplus(&[0.0, 0.0, 0.0, 0.01, 0.1, 0.0, 0.0, 0.0]);
            let moved = FspRect { rel_orientation: so3_exp(&Vector3::from(w)), ..rect };
            let a = dim_errors(&[(3, rect)], &world).unwrap()[0];
            let b = dim_errors(&[(3, moved)], &world).unwrap()[0];
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn exact_parameters_have_zero_error() {
        let w = world();
        let a = anchor();
        let rect = exact_rect(&a, &w.objects[0]);
        let errs = corner_errors(
            &[LandmarkEstimate::Fsp {
                object_id: 3,
                anchor: a,
                rect,
            }],
            &w,
        )
        .unwrap();
        assert!(errs.iter().all(|e| e.error < 1e-12));
        let d = dim_errors(&[(3, rect)], &w).unwrap()[0];
        assert!(d.w_err < 1e-12 && d.h_err < 1e-12);
        assert_eq!(
            corner_errors(
                &[LandmarkEstimate::Fsp {
                    object_id: 9,
                    anchor: a,
                    rect
                }],
                &w
            )
            .unwrap_err(),
            EvalError::MissingLandmark(9)
        );
    }

    #[test]
    fn rigid_offset_moves_every_corner_equally() {
        let w = world();
        let a = anchor();
        let rect = exact_rect(&a, &w.objects[0]);
        let delta = Vector3::new(0.03, -0.04, 0.0);
        // Shift the origin by moving the anchor, keeping the world orientation.
        let shifted = Pose::new(a.translation + delta, a.rotation);
        let errs = corner_errors(
            &[LandmarkEstimate::Fsp {
                object_id: 3,
                anchor: shifted,
                rect,
            }],
            &w,
        )
        .unwrap();
        for e in errs {
            assert!((e.error - delta.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn fhp_corners() {
        let w = world();
        let a = anchor();
        let corners = w.objects[0].corners_world().map(|c| {
            let l = a.inverse_transform_point(&c);
            (
                a,
                FhpPoint {
                    ray: Vector2::new(l.x / l.z, l.y / l.z),
                    omega: 1.0 / l.z,
                },
            )
        });
        let errs = corner_errors(&[LandmarkEstimate::Fhp { object_id: 3, corners }], &w).unwrap();
        assert!(errs.iter().all(|e| e.error < 1e-12));
    }

    #[test]
    fn dim_ratio_and_linearity() {
        let w = world();
        let rect = exact_rect(&anchor(), &w.objects[0]);
        let doubled = FspRect {
            omega: rect.omega * 2.0,
            w_bar: rect.w_bar * 2.0,
            ..rect
        };
        let d = dim_errors(&[(3, doubled)], &w).unwrap()[0];
        assert!(d.w_err < 1e-12 && d.h_err < 1e-12);
        let wider = FspRect {
            w_bar: rect.w_bar * 1.01,
            form_factor: rect.form_factor * 1.01,
            ..rect
        };
        let d = dim_errors(&[(3, wider)], &w).unwrap()[0];
        assert!((d.w_err - 0.02).abs() < 1e-12);
        assert!(d.h_err < 1e-12);
    }

    #[test]
    fn summaries_and_scale() {
        let s = summarize(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.max, 10.0);
        let pairs = [
            (Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.0)),
            (Vector3::new(2.2, 0.0, 0.0), Vector3::new(2.0, 0.0, 0.0)),
            (Vector3::new(0.5, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0)),
        ];
        assert!((scale_ratio(&pairs).unwrap() - 1.1).abs() < 1e-12);
    }
}
