//! Synthetic labeled scenes: terrain, vertical objects, a flight
//! trajectory, and the three characteristic MPIA noise families.
//!
//! The generator is a stand-in for flight data. Geometric realism is
//! secondary; what matters is that the noise reproduces the field
//! phenomenology so the rest of the pipeline has something faithful to
//! learn from:
//!
//! * **sparse** — isolated outliers uniformly distributed through the air
//!   volume, kept a configurable clearance above the terrain and away from
//!   object clusters;
//! * **systematic** — points whose sensor-to-point range sits within a
//!   narrow band of a pulse-interval transition (`range mod r_max` near 0
//!   or near `r_max`), which is exactly where interval mis-assignment puts
//!   ghost returns; across the swath these form the characteristic
//!   parabolic band, densest at the transition itself;
//! * **complex** — Gaussian clusters seeded next to (or overlapping)
//!   object clusters, mimicking vegetation-like false structure.
//!
//! All randomness flows from `SceneConfig::seed` through per-purpose
//! ChaCha streams, so every product is bit-identical for a given config
//! regardless of call order or worker count.

use crate::config::KvView;
use crate::error::{Error, Result};
use crate::point::{PointCloud, PointRecord, Trajectory, TrajectorySample};
use crate::priors::compute_rmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashSet;

/// RNG stream ids per generation purpose.
const STREAM_TERRAIN: u64 = 0;
const STREAM_SPARSE: u64 = 1;
const STREAM_SYSTEMATIC: u64 = 2;
const STREAM_COMPLEX: u64 = 3;

/// Everything that defines one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Side of the square scene footprint, meters.
    pub extent: f64,
    /// Terrain point density, points/m².
    pub ground_density: f64,
    /// Object (tree/building) point density, points/m².
    pub object_density: f64,
    /// Target noise share of the final cloud. Either exactly 0 (no noise)
    /// or within [`NOISE_FRACTION_MIN`], [`NOISE_FRACTION_MAX`].
    pub noise_fraction: f64,
    /// Noise-type mixture; must be ≥ 0 and sum to 1 (± 1e-9).
    pub sparse_fraction: f64,
    pub systematic_fraction: f64,
    pub complex_fraction: f64,
    /// Pulse repetition frequency, Hz.
    pub prf: f64,
    /// Pulse propagation speed, m/s.
    pub pulse_speed: f64,
    /// Sensor altitude above the terrain datum, meters.
    pub altitude: f64,
    /// Master seed for all streams.
    pub seed: u64,
    /// Maximum terrain height variation, meters.
    pub relief: f64,
    /// Half-width of the systematic-noise band around a pulse-interval
    /// transition, meters.
    pub band: f64,
    /// Minimum height of sparse noise above the local terrain, meters.
    pub clearance: f64,
    /// Upper z bound for injected noise, meters.
    pub noise_ceiling: f64,
    /// Platform ground speed, m/s.
    pub flight_speed: f64,
    /// Trajectory sampling rate, Hz.
    pub sample_rate: f64,
}

/// Allowed noise_fraction bounds (a fraction of exactly 0 is also legal and
/// disables injection).
pub const NOISE_FRACTION_MIN: f64 = 0.005;
pub const NOISE_FRACTION_MAX: f64 = 0.05;

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: 100.0,
            ground_density: 4.0,
            object_density: 2.0,
            noise_fraction: 0.02,
            sparse_fraction: 0.3,
            systematic_fraction: 0.4,
            complex_fraction: 0.3,
            prf: 5.0e6,
            pulse_speed: crate::priors::SPEED_OF_LIGHT,
            altitude: 500.0,
            seed: 0,
            relief: 5.0,
            band: 2.0,
            clearance: 8.0,
            noise_ceiling: 30.0,
            flight_speed: 50.0,
            sample_rate: 100.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::validation("extent must be > 0"));
        }
        if !(self.ground_density > 0.0) {
            return Err(Error::validation("ground_density must be > 0"));
        }
        if self.object_density < 0.0 {
            return Err(Error::validation("object_density must be >= 0"));
        }
        if self.noise_fraction != 0.0
            && !(NOISE_FRACTION_MIN..=NOISE_FRACTION_MAX).contains(&self.noise_fraction)
        {
            return Err(Error::validation(format!(
                "noise_fraction must be 0 or in [{}, {}], got {}",
                NOISE_FRACTION_MIN, NOISE_FRACTION_MAX, self.noise_fraction
            )));
        }
        let fr = [
            self.sparse_fraction,
            self.systematic_fraction,
            self.complex_fraction,
        ];
        if fr.iter().any(|&f| f < 0.0) {
            return Err(Error::validation("noise-type fractions must be >= 0"));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "noise-type fractions must sum to 1, got {}",
                sum
            )));
        }
        if !(self.prf > 0.0) || !(self.pulse_speed > 0.0) {
            return Err(Error::validation("prf and pulse_speed must be > 0"));
        }
        if !(self.altitude > self.noise_ceiling) {
            return Err(Error::validation(
                "altitude must be above the noise ceiling",
            ));
        }
        if self.relief < 0.0 || self.clearance < 0.0 || !(self.band > 0.0) {
            return Err(Error::validation(
                "relief and clearance must be >= 0, band > 0",
            ));
        }
        if !(self.noise_ceiling > self.relief + self.clearance) {
            return Err(Error::validation(
                "noise_ceiling must exceed relief + clearance",
            ));
        }
        if !(self.flight_speed > 0.0) || !(self.sample_rate > 0.0) {
            return Err(Error::validation("flight_speed and sample_rate must be > 0"));
        }
        if self.extent / self.flight_speed * self.sample_rate < 1.0 {
            return Err(Error::validation(
                "trajectory would have fewer than two samples; raise sample_rate",
            ));
        }
        Ok(())
    }

    /// Maximum unambiguous range for the configured sensor.
    pub fn r_max(&self) -> f64 {
        compute_rmax(self.pulse_speed, self.prf)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("extent".into(), self.extent.to_string()),
            ("ground_density".into(), self.ground_density.to_string()),
            ("object_density".into(), self.object_density.to_string()),
            ("noise_fraction".into(), self.noise_fraction.to_string()),
            ("sparse_fraction".into(), self.sparse_fraction.to_string()),
            (
                "systematic_fraction".into(),
                self.systematic_fraction.to_string(),
            ),
            ("complex_fraction".into(), self.complex_fraction.to_string()),
            ("prf".into(), self.prf.to_string()),
            ("pulse_speed".into(), self.pulse_speed.to_string()),
            ("altitude".into(), self.altitude.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("relief".into(), self.relief.to_string()),
            ("band".into(), self.band.to_string()),
            ("clearance".into(), self.clearance.to_string()),
            ("noise_ceiling".into(), self.noise_ceiling.to_string()),
            ("flight_speed".into(), self.flight_speed.to_string()),
            ("sample_rate".into(), self.sample_rate.to_string()),
        ]
    }

    pub fn from_kv(view: &KvView) -> Result<SceneConfig> {
        let d = SceneConfig::default();
        let cfg = SceneConfig {
            extent: view.parse_or("extent", d.extent)?,
            ground_density: view.parse_or("ground_density", d.ground_density)?,
            object_density: view.parse_or("object_density", d.object_density)?,
            noise_fraction: view.parse_or("noise_fraction", d.noise_fraction)?,
            sparse_fraction: view.parse_or("sparse_fraction", d.sparse_fraction)?,
            systematic_fraction: view.parse_or("systematic_fraction", d.systematic_fraction)?,
            complex_fraction: view.parse_or("complex_fraction", d.complex_fraction)?,
            prf: view.parse_or("prf", d.prf)?,
            pulse_speed: view.parse_or("pulse_speed", d.pulse_speed)?,
            altitude: view.parse_or("altitude", d.altitude)?,
            seed: view.parse_or("seed", d.seed)?,
            relief: view.parse_or("relief", d.relief)?,
            band: view.parse_or("band", d.band)?,
            clearance: view.parse_or("clearance", d.clearance)?,
            noise_ceiling: view.parse_or("noise_ceiling", d.noise_ceiling)?,
            flight_speed: view.parse_or("flight_speed", d.flight_speed)?,
            sample_rate: view.parse_or("sample_rate", d.sample_rate)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smooth low-frequency terrain: a fixed set of sinusoids with seeded
/// phases, scaled so the height stays within `[0, relief]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerrainField {
    relief: f64,
    inv_extent: f64,
    phases: [f64; 3],
}

impl TerrainField {
    /// Reconstruct the field for a config. Always consumes the same number
    /// of draws from the terrain stream, so any module can rebuild an
    /// identical field from the config alone.
    pub fn new(cfg: &SceneConfig) -> TerrainField {
        let mut rng = scene_rng(cfg.seed, STREAM_TERRAIN);
        TerrainField::sample(&mut rng, cfg)
    }

    fn sample(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> TerrainField {
        let phases = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        TerrainField {
            relief: cfg.relief,
            inv_extent: 1.0 / cfg.extent,
            phases,
        }
    }

    /// Terrain height at (x, y), in `[0, relief]`.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        let (u, v) = (x * self.inv_extent, y * self.inv_extent);
        // amplitudes sum to 0.5, so the bracket stays within [0, 1]
        let s = 0.25 * (tau * (u + 0.31 * v) + self.phases[0]).sin()
            + 0.15 * (tau * (2.3 * v - 0.7 * u) + self.phases[1]).sin()
            + 0.10 * (tau * (1.1 * u + 1.7 * v) + self.phases[2]).sin();
        self.relief * (0.5 + s)
    }
}

/// Straight constant-altitude flight line along +x at `y = extent / 2`,
/// sampled uniformly in time so the horizontal span covers `[0, extent]`
/// exactly.
pub fn generate_trajectory(cfg: &SceneConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let n = ((cfg.extent / cfg.flight_speed) * cfg.sample_rate).round() as usize + 1;
    let spacing = cfg.extent / (n - 1) as f64;
    let dt = spacing / cfg.flight_speed;
    let samples: Vec<TrajectorySample> = (0..n)
        .map(|i| TrajectorySample {
            gps_time: i as f64 * dt,
            x: i as f64 * spacing,
            y: cfg.extent / 2.0,
            z: cfg.altitude,
        })
        .collect();
    let (traj, _) = Trajectory::from_samples(samples)?;
    Ok(traj)
}

/// Index of the trajectory sample whose x is nearest to `x` (the scan
/// instant for a point under a +x flight line).
fn nearest_sample_by_x(traj: &Trajectory, x: f64) -> usize {
    let samples = traj.samples();
    let idx = samples.partition_point(|s| s.x < x);
    let mut best = idx.min(samples.len() - 1);
    if idx > 0 {
        let before = idx - 1;
        if (samples[before].x - x).abs() <= (samples[best].x - x).abs() {
            best = before;
        }
    }
    best
}

/// Per-point gps_time: nearest scan instant plus a small jitter, clamped to
/// the trajectory's time span so cloud times never escape it.
fn assign_time(traj: &Trajectory, x: f64, rng: &mut ChaCha8Rng) -> f64 {
    let samples = traj.samples();
    let span = traj.time_span();
    let i = nearest_sample_by_x(traj, x);
    let dt = (span[1] - span[0]) / (samples.len() - 1) as f64;
    let jitter_max = (dt / 4.0).min(1.0e-3);
    let t = samples[i].gps_time + rng.gen_range(-jitter_max..jitter_max);
    t.clamp(span[0], span[1])
}

fn clamp_intensity(v: f64) -> f32 {
    v.clamp(1.0, 255.0) as f32
}

/// Terrain surface plus clustered vertical objects, all label 0, with
/// gps_time from the nearest scan instant. Deterministic in the config.
pub fn generate_terrain_and_objects(cfg: &SceneConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let traj = generate_trajectory(cfg)?;
    let mut rng = scene_rng(cfg.seed, STREAM_TERRAIN);
    let field = TerrainField::sample(&mut rng, cfg);
    let area = cfg.extent * cfg.extent;
    let intensity_ground = Normal::new(120.0, 30.0).expect("valid normal");
    let intensity_tree = Normal::new(60.0, 20.0).expect("valid normal");
    let intensity_building = Normal::new(160.0, 25.0).expect("valid normal");

    let mut points = Vec::new();

    // Terrain: exact surface samples.
    let n_ground = (cfg.ground_density * area).round() as usize;
    for _ in 0..n_ground {
        let x = rng.gen_range(0.0..cfg.extent);
        let y = rng.gen_range(0.0..cfg.extent);
        let z = field.height(x, y);
        let gps_time = assign_time(&traj, x, &mut rng);
        points.push(PointRecord {
            x,
            y,
            z,
            gps_time,
            intensity: clamp_intensity(intensity_ground.sample(&mut rng)),
            return_number: 1,
            num_returns: 1,
            label: 0,
            prior_prob: 0.0,
        });
    }

    // Objects: ellipsoidal tree canopies and box building shells.
    let n_object_points = (cfg.object_density * area).round() as usize;
    if n_object_points > 0 {
        let n_objects = ((area / 400.0).round() as usize).max(1);
        for oi in 0..n_objects {
            let budget =
                n_object_points / n_objects + usize::from(oi < n_object_points % n_objects);
            if rng.gen_bool(0.5) {
                // tree: uniform points in an axis-aligned ellipsoid
                let (rx, ry): (f64, f64) = (rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0));
                let rz: f64 = rng.gen_range(2.0..5.0);
                let r_margin = rx.max(ry);
                let cx = rng.gen_range(r_margin..cfg.extent - r_margin);
                let cy = rng.gen_range(r_margin..cfg.extent - r_margin);
                let cz = field.height(cx, cy) + rng.gen_range(4.0..10.0);
                for _ in 0..budget {
                    // rejection-sample the unit ball
                    let (mut ux, mut uy, mut uz);
                    loop {
                        ux = rng.gen_range(-1.0..1.0f64);
                        uy = rng.gen_range(-1.0..1.0f64);
                        uz = rng.gen_range(-1.0..1.0f64);
                        if ux * ux + uy * uy + uz * uz <= 1.0 {
                            break;
                        }
                    }
                    let x = cx + ux * rx;
                    let y = cy + uy * ry;
                    let z = cz + uz * rz;
                    let gps_time = assign_time(&traj, x, &mut rng);
                    let return_number = rng.gen_range(1..=2);
                    points.push(PointRecord {
                        x,
                        y,
                        z,
                        gps_time,
                        intensity: clamp_intensity(intensity_tree.sample(&mut rng)),
                        return_number,
                        num_returns: 2,
                        label: 0,
                        prior_prob: 0.0,
                    });
                }
            } else {
                // building: points on the roof and the four wall faces
                let (a, b) = (rng.gen_range(5.0..15.0), rng.gen_range(5.0..15.0));
                let h = rng.gen_range(3.0..12.0);
                let cx = rng.gen_range(a / 2.0..cfg.extent - a / 2.0);
                let cy = rng.gen_range(b / 2.0..cfg.extent - b / 2.0);
                let base = field.height(cx, cy);
                let roof_area = a * b;
                let wall_area = 2.0 * (a + b) * h;
                for _ in 0..budget {
                    let on_roof = rng.gen_range(0.0..roof_area + wall_area) < roof_area;
                    let (x, y, z) = if on_roof {
                        (
                            cx + rng.gen_range(-a / 2.0..a / 2.0),
                            cy + rng.gen_range(-b / 2.0..b / 2.0),
                            base + h,
                        )
                    } else {
                        // pick a wall by unrolled perimeter position
                        let p = rng.gen_range(0.0..2.0 * (a + b));
                        let zf = base + rng.gen_range(0.0..h);
                        if p < a {
                            (cx - a / 2.0 + p, cy - b / 2.0, zf)
                        } else if p < a + b {
                            (cx + a / 2.0, cy - b / 2.0 + (p - a), zf)
                        } else if p < 2.0 * a + b {
                            (cx + a / 2.0 - (p - a - b), cy + b / 2.0, zf)
                        } else {
                            (cx - a / 2.0, cy + b / 2.0 - (p - 2.0 * a - b), zf)
                        }
                    };
                    let gps_time = assign_time(&traj, x, &mut rng);
                    points.push(PointRecord {
                        x,
                        y,
                        z,
                        gps_time,
                        intensity: clamp_intensity(intensity_building.sample(&mut rng)),
                        return_number: 1,
                        num_returns: 1,
                        label: 0,
                        prior_prob: 0.0,
                    });
                }
            }
        }
    }

    Ok(PointCloud::from_points(points))
}

/// Per-type injection targets derived from the clean (label 0) count so the
/// final noise share matches `noise_fraction`:
/// `total = round(f / (1 − f) · clean)`, split by the type fractions with
/// the rounding remainder going to complex.
fn noise_targets(cfg: &SceneConfig, clean: usize) -> (usize, usize, usize) {
    if cfg.noise_fraction == 0.0 || clean == 0 {
        return (0, 0, 0);
    }
    let f = cfg.noise_fraction;
    let total = (f / (1.0 - f) * clean as f64).round() as usize;
    let sparse = (total as f64 * cfg.sparse_fraction).floor() as usize;
    let systematic = (total as f64 * cfg.systematic_fraction).floor() as usize;
    (sparse, systematic, total - sparse - systematic)
}

fn clean_count(cloud: &PointCloud) -> usize {
    cloud.len() - cloud.noise_count()
}

/// 2-m hash cells of elevated clean points (object clusters), used to keep
/// sparse noise away from structure and to seed complex noise next to it.
const OBJECT_CELL: f64 = 2.0;

fn object_cells(cloud: &PointCloud, field: &TerrainField) -> HashSet<(i64, i64, i64)> {
    let mut cells = HashSet::new();
    for p in cloud.points() {
        if p.label == 0 && p.z - field.height(p.x, p.y) > 1.5 {
            cells.insert(cell_key(p.x, p.y, p.z));
        }
    }
    cells
}

fn cell_key(x: f64, y: f64, z: f64) -> (i64, i64, i64) {
    (
        (x / OBJECT_CELL).floor() as i64,
        (y / OBJECT_CELL).floor() as i64,
        (z / OBJECT_CELL).floor() as i64,
    )
}

fn near_object(cells: &HashSet<(i64, i64, i64)>, x: f64, y: f64, z: f64) -> bool {
    let (cx, cy, cz) = cell_key(x, y, z);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if cells.contains(&(cx + dx, cy + dy, cz + dz)) {
                    return true;
                }
            }
        }
    }
    false
}

/// Isolated outliers: uniform over the air volume, at least `clearance`
/// above the local terrain, below the noise ceiling, and away from object
/// clusters.
pub fn inject_sparse_noise(
    cloud: PointCloud,
    cfg: &SceneConfig,
    traj: &Trajectory,
) -> Result<PointCloud> {
    let (n_sparse, _, _) = noise_targets(cfg, clean_count(&cloud));
    if n_sparse == 0 {
        return Ok(cloud);
    }
    let field = TerrainField::new(cfg);
    let cells = object_cells(&cloud, &field);
    let mut rng = scene_rng(cfg.seed, STREAM_SPARSE);
    let mut points = cloud.into_points();
    let mut placed = 0usize;
    let mut attempts = 0usize;
    let budget = n_sparse.saturating_mul(10_000);
    while placed < n_sparse {
        attempts += 1;
        if attempts > budget {
            return Err(Error::validation(
                "could not place sparse noise; air volume too constrained",
            ));
        }
        let x = rng.gen_range(0.0..cfg.extent);
        let y = rng.gen_range(0.0..cfg.extent);
        let floor = field.height(x, y) + cfg.clearance;
        if floor >= cfg.noise_ceiling {
            continue;
        }
        let z = rng.gen_range(floor..cfg.noise_ceiling);
        if near_object(&cells, x, y, z) {
            continue;
        }
        let gps_time = assign_time(traj, x, &mut rng);
        points.push(PointRecord {
            x,
            y,
            z,
            gps_time,
            intensity: clamp_intensity(rng.gen_range(1.0..60.0)),
            return_number: 1,
            num_returns: 1,
            label: 1,
            prior_prob: 0.0,
        });
        placed += 1;
    }
    Ok(PointCloud::from_points(points))
}

/// Ghost returns near pulse-interval transitions: each point lies on a
/// sensor-to-ground ray at range `m·r_max + δ` with `|δ| < band`, so its
/// range modulo `r_max` falls within `band` of 0 or of `r_max`. δ is drawn
/// triangular (densest at the transition), matching the observed falloff.
pub fn inject_systematic_noise(
    cloud: PointCloud,
    cfg: &SceneConfig,
    traj: &Trajectory,
) -> Result<PointCloud> {
    let (_, n_sys, _) = noise_targets(cfg, clean_count(&cloud));
    if n_sys == 0 {
        return Ok(cloud);
    }
    let field = TerrainField::new(cfg);
    let r_max = cfg.r_max();
    let samples = traj.samples();
    let span = traj.time_span();
    let dt = (span[1] - span[0]) / (samples.len() - 1) as f64;
    let jitter_max = (dt / 4.0).min(1.0e-3);
    let mut rng = scene_rng(cfg.seed, STREAM_SYSTEMATIC);
    let mut points = cloud.into_points();
    let mut placed = 0usize;
    let mut attempts = 0usize;
    let budget = n_sys.saturating_mul(10_000);
    'outer: while placed < n_sys {
        attempts += 1;
        if attempts > budget {
            return Err(Error::validation(
                "could not place systematic noise; check prf/altitude/noise_ceiling",
            ));
        }
        let s = samples[rng.gen_range(0..samples.len())];
        let gx = rng.gen_range(0.0..cfg.extent);
        let gy = rng.gen_range(0.0..cfg.extent);
        let gz = field.height(gx, gy);
        let (dx, dy, dz) = (gx - s.x, gy - s.y, gz - s.z);
        let r_ground = (dx * dx + dy * dy + dz * dz).sqrt();
        // triangular offset in (−band, band), peaked at 0
        let delta = cfg.band * (rng.gen_range(0.0..1.0f64) - rng.gen_range(0.0..1.0f64));
        let m_hi = ((r_ground - cfg.band) / r_max).floor() as i64;
        if m_hi < 1 {
            continue;
        }
        // walk transitions upward from the ground; the first one inside the
        // allowed air band wins
        for m in (1..=m_hi).rev() {
            let r = m as f64 * r_max + delta;
            let t = r / r_ground;
            let (x, y, z) = (s.x + dx * t, s.y + dy * t, s.z + dz * t);
            if z > cfg.noise_ceiling {
                break; // higher transitions are higher still
            }
            if z < field.height(x, y) + 0.1 {
                continue;
            }
            let t_jit = (s.gps_time + rng.gen_range(-jitter_max..jitter_max))
                .clamp(span[0], span[1]);
            points.push(PointRecord {
                x,
                y,
                z,
                gps_time: t_jit,
                intensity: clamp_intensity(rng.gen_range(1.0..60.0)),
                return_number: 1,
                num_returns: 1,
                label: 1,
                prior_prob: 0.0,
            });
            placed += 1;
            continue 'outer;
        }
    }
    Ok(PointCloud::from_points(points))
}

/// Vegetation-like false structure: Gaussian clusters seeded at elevated
/// clean points (object clusters) or, in an object-free scene, just above
/// the terrain.
pub fn inject_complex_noise(
    cloud: PointCloud,
    cfg: &SceneConfig,
    traj: &Trajectory,
) -> Result<PointCloud> {
    let (_, _, n_complex) = noise_targets(cfg, clean_count(&cloud));
    if n_complex == 0 {
        return Ok(cloud);
    }
    let field = TerrainField::new(cfg);
    let mut rng = scene_rng(cfg.seed, STREAM_COMPLEX);
    let elevated: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .filter(|p| p.label == 0 && p.z - field.height(p.x, p.y) > 1.5)
        .map(|p| [p.x, p.y, p.z])
        .collect();
    let spread = Normal::new(0.0, 1.5).expect("valid normal");
    let n_clusters = (n_complex / 40).max(1);
    let mut points = cloud.into_points();
    let mut placed = 0usize;
    let mut attempts = 0usize;
    let budget = n_complex.saturating_mul(10_000);
    for ci in 0..n_clusters {
        let center = if elevated.is_empty() {
            let x = rng.gen_range(0.0..cfg.extent);
            let y = rng.gen_range(0.0..cfg.extent);
            [x, y, field.height(x, y) + rng.gen_range(2.0..8.0)]
        } else {
            let seed_pt = elevated[rng.gen_range(0..elevated.len())];
            [
                seed_pt[0] + spread.sample(&mut rng),
                seed_pt[1] + spread.sample(&mut rng),
                seed_pt[2] + spread.sample(&mut rng).abs(),
            ]
        };
        let cluster_budget =
            n_complex / n_clusters + usize::from(ci < n_complex % n_clusters);
        let mut cluster_placed = 0usize;
        while cluster_placed < cluster_budget {
            attempts += 1;
            if attempts > budget {
                return Err(Error::validation(
                    "could not place complex noise; scene too constrained",
                ));
            }
            let x = center[0] + spread.sample(&mut rng);
            let y = center[1] + spread.sample(&mut rng);
            let z = center[2] + spread.sample(&mut rng);
            if x < 0.0 || x >= cfg.extent || y < 0.0 || y >= cfg.extent {
                continue;
            }
            if z < field.height(x, y) || z > cfg.noise_ceiling {
                continue;
            }
            let gps_time = assign_time(traj, x, &mut rng);
            let return_number = rng.gen_range(1..=2);
            points.push(PointRecord {
                x,
                y,
                z,
                gps_time,
                intensity: clamp_intensity(rng.gen_range(1.0..60.0)),
                return_number,
                num_returns: 2,
                label: 1,
                prior_prob: 0.0,
            });
            cluster_placed += 1;
            placed += 1;
        }
    }
    debug_assert_eq!(placed, n_complex);
    Ok(PointCloud::from_points(points))
}

/// Full scene: trajectory, clean geometry, then the three noise injectors
/// in a fixed order. Deterministic in the config; the cloud's GPS range is
/// always inside the trajectory's time span.
pub fn simulate_scene(cfg: &SceneConfig) -> Result<(PointCloud, Trajectory)> {
    cfg.validate()?;
    let traj = generate_trajectory(cfg)?;
    let cloud = generate_terrain_and_objects(cfg)?;
    let cloud = inject_sparse_noise(cloud, cfg, &traj)?;
    let cloud = inject_systematic_noise(cloud, cfg, &traj)?;
    let cloud = inject_complex_noise(cloud, cfg, &traj)?;
    Ok((cloud, traj))
}
