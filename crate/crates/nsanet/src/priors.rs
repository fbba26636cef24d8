//! Physical noise priors from pulse-interval ambiguity, plus the
//! multi-resolution prior pyramid consumed by the network's global
//! attention.
//!
//! A sensor firing at pulse repetition frequency `prf` has a maximum
//! unambiguous range `r_max = c / (2 · prf)`. A return georeferenced at
//! distance `range` from the sensor sits in pulse-interval-ambiguity zone
//! `ceil(range / r_max)`, and its offset within that interval,
//! `r_obs = range mod r_max`, measures how far it lies past the last
//! interval transition. Because interval mis-assignment displaces points by
//! whole multiples of `r_max`, the prior noise probability grows linearly
//! across the interval: `prob = r_obs / r_max ∈ [0, 1)`.
//!
//! Per point the pipeline is: window the trajectory to the cloud's GPS-time
//! span, match the point to the sample nearest in time (strictly within the
//! tolerance, ties to the earlier sample), then score the Euclidean range
//! to that sensor position. Points with no matching sample keep a prior of
//! zero and are counted, not rejected: a sparse trajectory should degrade
//! the prior, not kill the run.

use crate::error::{Error, Result};
use crate::point::{PointCloud, PointRecord, Trajectory, TrajectorySample};
use crate::voxel::{FeatureGrid, GridSpec};
use rayon::prelude::*;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Sensor and matching parameters for the prior computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorParams {
    /// Pulse repetition frequency, Hz.
    pub prf: f64,
    /// Pulse propagation speed, m/s. Configurable so tests can use round
    /// numbers; defaults to the speed of light.
    pub pulse_speed: f64,
    /// Maximum |gps_time difference| between a point and its matched
    /// trajectory sample, seconds. The match must be strictly closer.
    pub time_match_tol: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            prf: 5.0e6,
            pulse_speed: SPEED_OF_LIGHT,
            time_match_tol: 1.0e-2,
        }
    }
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.prf > 0.0) || !self.prf.is_finite() {
            return Err(Error::validation(format!(
                "prf must be finite and > 0, got {}",
                self.prf
            )));
        }
        if !(self.pulse_speed > 0.0) || !self.pulse_speed.is_finite() {
            return Err(Error::validation(format!(
                "pulse_speed must be finite and > 0, got {}",
                self.pulse_speed
            )));
        }
        if !(self.time_match_tol > 0.0) {
            return Err(Error::validation("time_match_tol must be > 0"));
        }
        Ok(())
    }

    /// Maximum unambiguous range `c / (2 · prf)`, meters.
    pub fn r_max(&self) -> f64 {
        compute_rmax(self.pulse_speed, self.prf)
    }
}

/// `r_max = c / (2 · prf)`.
pub fn compute_rmax(pulse_speed: f64, prf: f64) -> f64 {
    pulse_speed / (2.0 * prf)
}

/// Everything the prior derives for one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrior {
    /// Euclidean distance from the matched sensor position, meters.
    pub range: f64,
    /// Pulse-interval-ambiguity zone `ceil(range / r_max)`; zone 1 is
    /// unambiguous.
    pub pia_zone: u32,
    /// Offset within the ambiguity interval, `range mod r_max ∈ [0, r_max)`.
    pub r_obs: f64,
    /// Prior noise probability `r_obs / r_max ∈ [0, 1)`.
    pub prob: f64,
}

/// Restrict a trajectory to the samples inside the cloud's GPS-time span
/// widened by the match tolerance. An empty result is an error: the
/// trajectory does not cover the cloud at all, so every match would fail.
pub fn window_trajectory(
    traj: &Trajectory,
    cloud: &PointCloud,
    time_match_tol: f64,
) -> Result<Trajectory> {
    let [t0, t1] = cloud.gps_range();
    let lo = t0 - time_match_tol;
    let hi = t1 + time_match_tol;
    let samples = traj.samples();
    let start = samples.partition_point(|s| s.gps_time < lo);
    let end = samples.partition_point(|s| s.gps_time <= hi);
    if start >= end {
        return Err(Error::validation(format!(
            "trajectory does not cover the cloud time span [{}, {}]",
            t0, t1
        )));
    }
    Ok(traj.slice(start..end))
}

/// Find the trajectory sample nearest in time to `t`. Ties between two
/// equally distant samples resolve to the earlier one. Returns `None` if no
/// sample lies strictly within `tol`.
pub fn match_sample(traj: &Trajectory, t: f64, tol: f64) -> Option<usize> {
    let samples = traj.samples();
    // Binary search for the insertion point, then compare the bracketing
    // samples. partition_point counts the samples with time < t.
    let idx = samples.partition_point(|s| s.gps_time < t);
    let mut best: Option<(usize, f64)> = None;
    // Candidates: the last sample before t and the first at/after t. Strict
    // `<` never replaces an equal distance, so the earliest index wins ties.
    let lo = idx.saturating_sub(1);
    let hi = (idx + 1).min(samples.len());
    for (i, s) in samples.iter().enumerate().take(hi).skip(lo) {
        let d = (s.gps_time - t).abs();
        match best {
            None => best = Some((i, d)),
            Some((_, bd)) if d < bd => best = Some((i, d)),
            _ => {}
        }
    }
    match best {
        Some((i, d)) if d < tol => Some(i),
        _ => None,
    }
}

/// Score one point against one sensor position. A zero range is an error:
/// the point coincides with the sensor and has no defined interval offset.
pub fn compute_point_prior(
    p: &PointRecord,
    s: &TrajectorySample,
    params: &PriorParams,
) -> Result<PointPrior> {
    let r_max = params.r_max();
    let dx = p.x - s.x;
    let dy = p.y - s.y;
    let dz = p.z - s.z;
    let range = (dx * dx + dy * dy + dz * dz).sqrt();
    if range == 0.0 {
        return Err(Error::validation(format!(
            "point at ({}, {}, {}) coincides with the sensor; range is zero",
            p.x, p.y, p.z
        )));
    }
    let pia_zone = (range / r_max).ceil() as u32;
    // Rust `%` is fmod; for positive operands the result is in [0, r_max).
    let r_obs = range % r_max;
    let prob = r_obs / r_max;
    Ok(PointPrior {
        range,
        pia_zone,
        r_obs,
        prob,
    })
}

/// Compute the prior for every point and write it into `prior_prob`.
/// Returns the annotated cloud and the number of points that had no
/// trajectory sample within the tolerance (those keep a prior of zero).
///
/// The per-point work runs in parallel; output order always matches input
/// order regardless of worker count.
pub fn annotate_cloud(
    cloud: PointCloud,
    traj: &Trajectory,
    params: &PriorParams,
) -> Result<(PointCloud, usize)> {
    params.validate()?;
    let windowed = window_trajectory(traj, &cloud, params.time_match_tol)?;
    let scored: Vec<Result<Option<f64>>> = cloud
        .points()
        .par_iter()
        .map(|p| match match_sample(&windowed, p.gps_time, params.time_match_tol) {
            None => Ok(None),
            Some(i) => {
                let prior = compute_point_prior(p, &windowed.samples()[i], params)?;
                Ok(Some(prior.prob))
            }
        })
        .collect();
    let mut unmatched = 0usize;
    let mut priors = Vec::with_capacity(cloud.len());
    for r in scored {
        match r? {
            Some(p) => priors.push(p as f32),
            None => {
                unmatched += 1;
                priors.push(0.0);
            }
        }
    }
    let cloud = cloud.with_priors(&priors)?;
    Ok((cloud, unmatched))
}

/// One resolution level of a prior pyramid: per-cell mean prior and the
/// occupancy (point count) behind each mean. Layout is x-fastest,
/// `(iz·ny + iy)·nx + ix`, matching the voxel grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorLevel {
    /// `[nx, ny, nz]`.
    pub dims: [usize; 3],
    pub probs: Vec<f64>,
    pub occ: Vec<f64>,
}

impl PriorLevel {
    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Occupancy-weighted mean prior over the whole level.
    pub fn weighted_mean(&self) -> f64 {
        let num: f64 = self.probs.iter().zip(&self.occ).map(|(p, o)| p * o).sum();
        let den: f64 = self.occ.iter().sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// The level as a 1-channel tensor `[1, nz, ny, nx]`.
    pub fn as_tensor<T: crate::tensor::Scalar>(&self) -> crate::tensor::Tensor4<T> {
        let values: Vec<T> = self.probs.iter().map(|&p| T::from_f64(p)).collect();
        crate::tensor::Tensor4::from_values([1, self.dims[2], self.dims[1], self.dims[0]], values)
            .expect("dims match probs length by construction")
    }
}

/// Mean-prior grids at successively halved resolution. Level 0 bins points
/// directly; level `ℓ+1` pools level `ℓ` with an occupancy-weighted 2×2×2
/// average, so the occupancy-weighted mean prior is identical at every
/// level.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPyramid {
    pub levels: Vec<PriorLevel>,
}

impl PriorPyramid {
    /// Pyramid over an existing feature grid's per-cell priors.
    pub fn from_grid(grid: &FeatureGrid, n_levels: usize) -> Result<PriorPyramid> {
        let e = grid.spec.edge_voxels;
        let probs: Vec<f64> = grid.priors.iter().map(|&p| p as f64).collect();
        let occ: Vec<f64> = grid
            .projection
            .iter()
            .map(|idxs| idxs.len() as f64)
            .collect();
        build_pyramid_from_level(
            PriorLevel {
                dims: [e, e, e],
                probs,
                occ,
            },
            n_levels,
        )
    }
}

/// Bin a cloud's `prior_prob` into `spec` (cell value = mean prior of the
/// contained points, empty cells 0) and pool up `n_levels` levels.
pub fn build_prior_pyramid(
    cloud: &PointCloud,
    spec: GridSpec,
    n_levels: usize,
) -> Result<PriorPyramid> {
    spec.validate()?;
    let e = spec.edge_voxels;
    let n_cells = spec.n_cells();
    let mut sum = vec![0.0f64; n_cells];
    let mut occ = vec![0.0f64; n_cells];
    for p in cloud.points() {
        if let Some(cell) = spec.cell_of([p.x, p.y, p.z]) {
            let ci = spec.flat(cell);
            sum[ci] += p.prior_prob as f64;
            occ[ci] += 1.0;
        }
    }
    let probs: Vec<f64> = sum
        .iter()
        .zip(&occ)
        .map(|(s, o)| if *o > 0.0 { s / o } else { 0.0 })
        .collect();
    build_pyramid_from_level(
        PriorLevel {
            dims: [e, e, e],
            probs,
            occ,
        },
        n_levels,
    )
}

fn build_pyramid_from_level(level0: PriorLevel, n_levels: usize) -> Result<PriorPyramid> {
    if n_levels == 0 {
        return Err(Error::validation("pyramid needs at least one level"));
    }
    let mut levels = vec![level0];
    while levels.len() < n_levels {
        let prev = levels.last().unwrap();
        if prev.n_cells() == 1 {
            return Err(Error::validation(format!(
                "cannot build {} pyramid levels from a {}³ base grid",
                n_levels, levels[0].dims[0]
            )));
        }
        levels.push(pool_level(prev));
    }
    Ok(PriorPyramid { levels })
}

/// Occupancy-weighted 2×2×2 average pooling; output dims are
/// `ceil(input / 2)` per axis and output occupancy is the summed child
/// occupancy.
fn pool_level(level: &PriorLevel) -> PriorLevel {
    let [nx, ny, nz] = level.dims;
    let (ox, oy, oz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut probs = vec![0.0f64; ox * oy * oz];
    let mut occ = vec![0.0f64; ox * oy * oz];
    for cz in 0..oz {
        for cy in 0..oy {
            for cx in 0..ox {
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for dz in 0..2usize {
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let (iz, iy, ix) = (2 * cz + dz, 2 * cy + dy, 2 * cx + dx);
                            if iz >= nz || iy >= ny || ix >= nx {
                                continue;
                            }
                            let ci = (iz * ny + iy) * nx + ix;
                            num += level.occ[ci] * level.probs[ci];
                            den += level.occ[ci];
                        }
                    }
                }
                let co = (cz * oy + cy) * ox + cx;
                occ[co] = den;
                probs[co] = if den > 0.0 { num / den } else { 0.0 };
            }
        }
    }
    PriorLevel {
        dims: [ox, oy, oz],
        probs,
        occ,
    }
}
