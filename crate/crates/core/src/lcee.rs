//! Latent exposure from projected displacement ratios of static points, and
//! the latent timestamps it induces.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blce::LatentTrajectory;
use crate::geometry::{project, Intrinsics, Pose};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LceeError {
    #[error("no static Gaussian projects validly into all four poses")]
    NoUsableStatics,
    #[error("need at least two training poses, got {0}")]
    TooFewPoses(usize),
    #[error("frame {frame} is out of range for {n} poses")]
    FrameOutOfRange { frame: usize, n: usize },
    #[error("latent trajectory is empty")]
    EmptyTrajectory,
}

/// Pixel distance between the projections of `mu` under two poses, or
/// `None` when either projection is behind the camera.
pub fn displacement(p1: &Pose, p2: &Pose, intr: &Intrinsics, mu: &Vector3<f64>) -> Option<f64> {
    let (a, _) = project(p1, intr, mu).ok()?;
    let (b, _) = project(p2, intr, mu).ok()?;
    Some((a - b).norm())
}

fn on_image(p: &Pose, intr: &Intrinsics, mu: &Vector3<f64>) -> Option<nalgebra::Vector2<f64>> {
    let (px, _) = project(p, intr, mu).ok()?;
    intr.contains(&px).then_some(px)
}

/// Training-pose pair used as the reference displacement, and how many
/// inter-frame intervals it spans.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborSpan {
    pub from: Pose,
    pub to: Pose,
    pub intervals: f64,
}

impl NeighborSpan {
    /// `(t-1, t+1)` in the interior; one-sided single intervals at the ends.
    pub fn for_frame(poses: &[Pose], t: usize) -> Result<Self, LceeError> {
        let n = poses.len();
        if n < 2 {
            return Err(LceeError::TooFewPoses(n));
        }
        if t >= n {
            return Err(LceeError::FrameOutOfRange { frame: t, n });
        }
        let (a, b, intervals) = if t == 0 {
            (0, 1, 1.0)
        } else if t == n - 1 {
            (n - 2, n - 1, 1.0)
        } else {
            (t - 1, t + 1, 2.0)
        };
        Ok(Self {
            from: poses[a],
            to: poses[b],
            intervals,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureEstimate {
    pub t_hat: f64,
    pub frame_index: usize,
    pub epsilon: f64,
    pub usable: usize,
}

/// Mean ratio of latent-span to neighbour-span displacement over the usable
/// static means, scaled by the neighbour span's interval count.
pub fn estimate_exposure(
    traj: &LatentTrajectory,
    span: &NeighborSpan,
    statics: &[Vector3<f64>],
    intr: &Intrinsics,
    epsilon: f64,
) -> Result<ExposureEstimate, LceeError> {
    let (first, last) = match (traj.poses.first(), traj.poses.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(LceeError::EmptyTrajectory),
    };
    let mut sum = 0.0;
    let mut usable = 0;
    for mu in statics {
        let px = [first, last, &span.from, &span.to].map(|p| on_image(p, intr, mu));
        if let [Some(a), Some(b), Some(c), Some(d)] = px {
            sum += ((a - b).norm() + epsilon) / ((c - d).norm() + epsilon);
            usable += 1;
        }
    }
    if usable == 0 {
        return Err(LceeError::NoUsableStatics);
    }
    Ok(ExposureEstimate {
        t_hat: span.intervals * sum / usable as f64,
        frame_index: traj.frame_index,
        epsilon,
        usable,
    })
}

/// `1.0` when the latent trajectory moves static points the same way as the
/// step from `span.from` to `span.to`, `-1.0` when it runs the other way.
/// A static blur looks the same in either order, so only this tells which
/// end of the trajectory is the earlier one.
pub fn travel_direction(
    traj: &LatentTrajectory,
    span: &NeighborSpan,
    statics: &[Vector3<f64>],
    intr: &Intrinsics,
) -> f64 {
    let (first, last) = match (traj.poses.first(), traj.poses.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return 1.0,
    };
    let mut agree = 0.0;
    for mu in statics {
        let px = [first, last, &span.from, &span.to].map(|p| on_image(p, intr, mu));
        if let [Some(a), Some(b), Some(c), Some(d)] = px {
            agree += (b - a).dot(&(d - c));
        }
    }
    if agree < 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTimestamps {
    pub taus: Vec<f64>,
}

/// `(k - ceil(n/2)) / n` for `k = 1..=n`: the derivative of each timestamp
/// with respect to the exposure.
pub fn timestamp_offsets(n_latent: usize) -> Vec<f64> {
    let mid = n_latent.div_ceil(2) as f64;
    (1..=n_latent)
        .map(|k| (k as f64 - mid) / n_latent as f64)
        .collect()
}

pub fn latent_timestamps(t: f64, t_hat: f64, n_latent: usize) -> LatentTimestamps {
    LatentTimestamps {
        taus: timestamp_offsets(n_latent)
            .into_iter()
            .map(|o| t + t_hat * o)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{screw_exp, ScrewAxis};
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(64.0, 64.0, 31.5, 31.5, 64, 64).unwrap()
    }

    fn traj(poses: Vec<Pose>) -> LatentTrajectory {
        LatentTrajectory {
            screw_axes: vec![ScrewAxis::zero(); poses.len()],
            poses,
            frame_index: 3,
        }
    }

    fn grid(z: f64) -> Vec<Vector3<f64>> {
        let mut v = vec![];
        for i in -2..=2 {
            for j in -2..=2 {
                v.push(Vector3::new(i as f64 * 0.3, j as f64 * 0.3, z));
            }
        }
        v
    }

    #[test]
    fn displacement_examples() {
        let p = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let mu = Vector3::new(0.0, 0.0, 2.0);
        assert_eq!(displacement(&p, &p, &intr(), &mu), Some(0.0));
        let q = Pose::from_translation(Vector3::new(0.35, 0.0, 0.0));
        let d = displacement(&p, &q, &intr(), &mu).unwrap();
        assert!((d - 64.0 * 0.25 / 2.0).abs() < 1e-9);
        assert_eq!(d, displacement(&q, &p, &intr(), &mu).unwrap());
        assert_eq!(displacement(&p, &q, &intr(), &Vector3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn identical_spans_give_two() {
        let prev = Pose::from_translation(Vector3::new(-0.2, 0.05, 0.0));
        let next = screw_exp(&ScrewAxis::from_array(&[0.0, 0.02, 0.0, 0.2, 0.0, 0.0]));
        let span = NeighborSpan { from: prev, to: next, intervals: 2.0 };
        let mut poses = vec![prev; 9];
        poses[8] = next;
        let e = estimate_exposure(&traj(poses), &span, &grid(3.0), &intr(), DEFAULT_EPSILON).unwrap();
        assert!((e.t_hat - 2.0).abs() < 1e-12);
        assert_eq!(e.usable, 25);
    }

    #[test]
    fn static_latents_give_near_zero() {
        let span = NeighborSpan {
            from: Pose::from_translation(Vector3::new(-0.2, 0.0, 0.0)),
            to: Pose::from_translation(Vector3::new(0.2, 0.0, 0.0)),
            intervals: 2.0,
        };
        let e = estimate_exposure(&traj(vec![Pose::identity(); 9]), &span, &grid(3.0), &intr(), 1e-9).unwrap();
        assert!(e.t_hat < 1e-9);
    }

    #[test]
    fn translation_closed_form() {
        let (lat, nbr) = (0.06, 0.4);
        let span = NeighborSpan {
            from: Pose::from_translation(Vector3::new(-nbr / 2.0, 0.0, 0.0)),
            to: Pose::from_translation(Vector3::new(nbr / 2.0, 0.0, 0.0)),
            intervals: 2.0,
        };
        let mut poses = vec![Pose::identity(); 9];
        poses[0] = Pose::from_translation(Vector3::new(-lat / 2.0, 0.0, 0.0));
        poses[8] = Pose::from_translation(Vector3::new(lat / 2.0, 0.0, 0.0));
        let e = estimate_exposure(&traj(poses), &span, &grid(3.0), &intr(), DEFAULT_EPSILON).unwrap();
        assert!((e.t_hat - 2.0 * lat / nbr).abs() < 1e-6);
    }

    #[test]
    fn direction_follows_neighbor_step() {
        let span = NeighborSpan {
            from: Pose::from_translation(Vector3::new(-0.2, 0.1, 0.0)),
            to: Pose::from_translation(Vector3::new(0.2, -0.1, 0.0)),
            intervals: 2.0,
        };
        let mut poses: Vec<Pose> =
            (0..9).map(|k| Pose::from_translation(Vector3::new(0.01 * (k as f64 - 4.0), 0.0, 0.0))).collect();
        assert_eq!(travel_direction(&traj(poses.clone()), &span, &grid(3.0), &intr()), 1.0);
        poses.reverse();
        assert_eq!(travel_direction(&traj(poses), &span, &grid(3.0), &intr()), -1.0);
        assert_eq!(travel_direction(&traj(vec![]), &span, &grid(3.0), &intr()), 1.0);
    }

    #[test]
    fn no_usable_statics() {
        let span = NeighborSpan { from: Pose::identity(), to: Pose::identity(), intervals: 2.0 };
        let behind = vec![Vector3::new(0.0, 0.0, -2.0), Vector3::new(50.0, 0.0, 1.0)];
        assert_eq!(
            estimate_exposure(&traj(vec![Pose::identity(); 9]), &span, &behind, &intr(), DEFAULT_EPSILON),
            Err(LceeError::NoUsableStatics)
        );
    }

    #[test]
    fn boundary_spans() {
        let poses: Vec<Pose> = (0..5)
            .map(|i| Pose::from_translation(Vector3::new(0.1 * i as f64, 0.0, 0.0)))
            .collect();
        let first = NeighborSpan::for_frame(&poses, 0).unwrap();
        assert_eq!((first.from, first.to, first.intervals), (poses[0], poses[1], 1.0));
        let last = NeighborSpan::for_frame(&poses, 4).unwrap();
        assert_eq!((last.from, last.to, last.intervals), (poses[3], poses[4], 1.0));
        let mid = NeighborSpan::for_frame(&poses, 2).unwrap();
        assert_eq!((mid.from, mid.to, mid.intervals), (poses[1], poses[3], 2.0));
        assert!(NeighborSpan::for_frame(&poses, 5).is_err());
        // a boundary frame whose latent span equals one interval
        let mut lat = vec![poses[0]; 9];
        lat[8] = poses[1];
        let e = estimate_exposure(&traj(lat), &first, &grid(3.0), &intr(), DEFAULT_EPSILON).unwrap();
        assert!(e.t_hat.is_finite() && (e.t_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn timestamp_examples() {
        let ts = latent_timestamps(10.0, 0.9, 9);
        assert_eq!(ts.taus[4], 10.0);
        assert!((ts.taus[0] - 9.6).abs() < 1e-12);
        assert!((ts.taus[8] - 10.4).abs() < 1e-12);
        assert!(latent_timestamps(4.0, 0.0, 9).taus.iter().all(|&t| t == 4.0));
        assert_eq!(latent_timestamps(2.0, 0.5, 4).taus[1], 2.0);
    }

    proptest! {
        #[test]
        fn spacing_is_uniform(t in 0.0f64..30.0, t_hat in 0.0f64..3.0, n in 1usize..16) {
            let ts = latent_timestamps(t, t_hat, n);
            prop_assert_eq!(ts.taus[n.div_ceil(2) - 1], t);
            for w in ts.taus.windows(2) {
                prop_assert!((w[1] - w[0] - t_hat / n as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn scale_invariance(lambda in 0.2f64..5.0, lat in 0.01f64..0.3, seed in 0u64..1000) {
            let rot = screw_exp(&ScrewAxis::from_array(&[0.0, 0.01 * (seed % 7) as f64, 0.0, 0.0, 0.0, 0.0]));
            let make = |s: f64| {
                let mk = |x: f64, y: f64| {
                    let mut p = rot;
                    p.translation = Vector3::new(x, y, 0.0) * s;
                    p
                };
                let span = NeighborSpan { from: mk(-0.2, 0.0), to: mk(0.2, 0.05), intervals: 2.0 };
                let mut poses = vec![mk(0.0, 0.0); 9];
                poses[0] = mk(-lat, 0.01);
                poses[8] = mk(lat, -0.01);
                let pts: Vec<Vector3<f64>> = grid(3.0).into_iter().map(|p| p * s).collect();
                estimate_exposure(&traj(poses), &span, &pts, &intr(), 0.0).unwrap().t_hat
            };
            prop_assert!((make(1.0) - make(lambda)).abs() < 1e-9);
        }
    }
}
