//! Classical pose solvers: EPnP and a RANSAC wrapper around it.

mod epnp;
mod ransac;

pub use epnp::{epnp_solve, GAUSS_NEWTON_ITERATIONS};
pub use ransac::{ransac_pnp, RansacConfig, RansacOutput};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::scalar::Real;
use crate::synth::GeoMaps;

/// Default cap on the number of correspondences handed to RANSAC.
pub const MAX_CORRESPONDENCES: usize = 3000;

/// Object-frame points paired with their image projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet<T: Real> {
    pub pts3d: Vec<Vector3<T>>,
    pub pts2d: Vec<Vector2<T>>,
    pub weights: Option<Vec<T>>,
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn new(pts3d: Vec<Vector3<T>>, pts2d: Vec<Vector2<T>>) -> Result<Self> {
        let c = Self { pts3d, pts2d, weights: None };
        c.validate()?;
        Ok(c)
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.pts3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts3d.is_empty()
    }

    pub fn weight(&self, i: usize) -> T {
        self.weights.as_ref().map_or(T::one(), |w| w[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pts3d.len();
        if self.pts2d.len() != n || self.weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(Error::ShapeMismatch("correspondence arrays differ in length".into()));
        }
        if n < 4 {
            return Err(Error::SolverFailure(format!("need at least 4 correspondences, got {n}")));
        }
        let finite = self.pts3d.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.pts2d.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.weights.as_ref().is_none_or(|w| w.iter().all(|x| x.is_finite() && *x >= T::zero()));
        if !finite {
            return Err(Error::SolverFailure("non-finite correspondence".into()));
        }
        Ok(())
    }

    /// Correspondences at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pts3d: indices.iter().map(|&i| self.pts3d[i]).collect(),
            pts2d: indices.iter().map(|&i| self.pts2d[i]).collect(),
            weights: self.weights.as_ref().map(|w| indices.iter().map(|&i| w[i]).collect()),
        }
    }

    /// Keeps at most `max` correspondences with a uniform stride.
    pub fn subsample(&self, max: usize) -> Self {
        let n = self.len();
        if n <= max || max == 0 {
            return self.clone();
        }
        let stride = n.div_ceil(max);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        self.subset(&idx)
    }
}

/// Squared pixel reprojection error of every correspondence; infinite behind the camera.
pub fn squared_reprojection_errors<T: Real>(
    pose: &Pose<T>,
    c: &CorrespondenceSet<T>,
    k: &CameraIntrinsics<T>,
) -> Vec<T> {
    c.pts3d
        .iter()
        .zip(&c.pts2d)
        .map(|(p, uv)| {
            let pc = pose.apply(p);
            if pc.z <= T::zero() {
                T::lit(f64::INFINITY)
            } else {
                (k.project(&pc) - uv).norm_squared()
            }
        })
        .collect()
}

/// Dense maps to correspondences, one per foreground pixel in row-major order.
///
/// Object coordinates are denormalized with `x = c·l − l/2`; image coordinates
/// are scaled by the image size, taken as twice the principal point.
pub fn maps_to_correspondences(
    maps: &GeoMaps,
    k: &CameraIntrinsics<f64>,
    extents: &[f64; 3],
) -> Result<CorrespondenceSet<f64>> {
    let (w, h) = (2.0 * k.cx, 2.0 * k.cy);
    let mut pts3d = Vec::new();
    let mut pts2d = Vec::new();
    for px in 0..maps.pixels() {
        if maps.mask[px] == 0 {
            continue;
        }
        let c = maps.coord3d(px);
        pts3d.push(Vector3::from_fn(|a, _| c[a] as f64 * extents[a] - extents[a] / 2.0));
        let uv = maps.coord2d(px);
        pts2d.push(Vector2::new(uv[0] as f64 * w, uv[1] as f64 * h));
    }
    if pts3d.is_empty() {
        return Err(Error::EmptyMask("map has no foreground pixel".into()));
    }
    Ok(CorrespondenceSet { pts3d, pts2d, weights: None })
}
