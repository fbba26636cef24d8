//! Dense voxel feature grids with a point↔voxel projection index, label
//! projection back to points, and the voxel post-processing (VPP)
//! refinement.
//!
//! Grid convention: a cube of `edge_voxels³` cells of size `voxel_size`
//! starting at `origin`; a point maps to cell `floor((coord − origin) /
//! voxel_size)` per axis, so a point exactly on a cell boundary belongs to
//! the higher-index cell (the one whose lower corner it touches). Cell
//! storage is flat with x fastest: `((iz·E + iy)·E + ix)`, matching the
//! `(C, D, H, W) = (channel, z, y, x)` tensor layout.

use crate::error::{Error, Result};
use crate::point::PointCloud;
use crate::tensor::Tensor4;
use rayon::prelude::*;

/// Label value for voxels that contain no points.
pub const VOID_LABEL: u8 = 255;

/// Placement and resolution of one voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub edge_voxels: usize,
    pub voxel_size: f64,
}

impl GridSpec {
    pub fn new(origin: [f64; 3], edge_voxels: usize, voxel_size: f64) -> Result<Self> {
        let spec = GridSpec {
            origin,
            edge_voxels,
            voxel_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge_voxels == 0 {
            return Err(Error::validation("edge_voxels must be >= 1"));
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::validation(format!(
                "voxel_size must be finite and > 0, got {}",
                self.voxel_size
            )));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.edge_voxels * self.edge_voxels * self.edge_voxels
    }

    /// Side length of the whole grid in meters.
    pub fn extent(&self) -> f64 {
        self.edge_voxels as f64 * self.voxel_size
    }

    /// Cell coordinates of a point, or `None` if out of bounds.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.edge_voxels as f64 {
                return None;
            }
            cell[a] = f as usize;
        }
        Some(cell)
    }

    /// Flat index of a cell, `((iz·E + iy)·E + ix)`.
    #[inline]
    pub fn flat(&self, cell: [usize; 3]) -> usize {
        let e = self.edge_voxels;
        (cell[2] * e + cell[1]) * e + cell[0]
    }
}

/// Which feature channels to voxelize, in their fixed tensor order:
/// Occ, MZ, NR, INS, R.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSet {
    /// Occupancy: number of points in the cell.
    pub occ: bool,
    /// Mean elevation of the cell's points, normalized to the grid box
    /// (see [`VoxelOptions::mz_absolute`]).
    pub mz: bool,
    /// Mean return number, min-max normalized over occupied cells.
    pub nr: bool,
    /// Mean intensity, min-max normalized over occupied cells.
    pub ins: bool,
    /// Mean prior noise probability, kept raw (it is already in [0,1]).
    pub r: bool,
}

impl ChannelSet {
    /// The default feature pair.
    pub fn occ_mz() -> ChannelSet {
        ChannelSet {
            occ: true,
            mz: true,
            nr: false,
            ins: false,
            r: false,
        }
    }

    pub fn all() -> ChannelSet {
        ChannelSet {
            occ: true,
            mz: true,
            nr: true,
            ins: true,
            r: true,
        }
    }

    pub fn count(&self) -> usize {
        [self.occ, self.mz, self.nr, self.ins, self.r]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.occ {
            v.push("occ");
        }
        if self.mz {
            v.push("mz");
        }
        if self.nr {
            v.push("nr");
        }
        if self.ins {
            v.push("ins");
        }
        if self.r {
            v.push("r");
        }
        v
    }

    /// Parse a `+`-separated channel list, e.g. `occ+mz+r`.
    pub fn parse(text: &str) -> Result<ChannelSet> {
        let mut set = ChannelSet {
            occ: false,
            mz: false,
            nr: false,
            ins: false,
            r: false,
        };
        for part in text.split('+') {
            match part.trim().to_ascii_lowercase().as_str() {
                "occ" => set.occ = true,
                "mz" => set.mz = true,
                "nr" => set.nr = true,
                "ins" => set.ins = true,
                "r" => set.r = true,
                other => {
                    return Err(Error::validation(format!(
                        "unknown channel {:?} (expected occ, mz, nr, ins, r)",
                        other
                    )))
                }
            }
        }
        if set.count() == 0 {
            return Err(Error::validation("empty channel set"));
        }
        Ok(set)
    }
}

impl std::fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.names().join("+"))
    }
}

impl std::str::FromStr for ChannelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<ChannelSet> {
        ChannelSet::parse(s)
    }
}

/// Voxelization switches beyond the channel set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelOptions {
    pub channels: ChannelSet,
    /// When set, MZ stays the raw mean elevation instead of being
    /// normalized to the grid box.
    pub mz_absolute: bool,
}

impl Default for VoxelOptions {
    fn default() -> Self {
        VoxelOptions {
            channels: ChannelSet::occ_mz(),
            mz_absolute: false,
        }
    }
}

/// A dense feature grid over one tile of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub channels: ChannelSet,
    /// `[C][E][E][E]` feature tensor in the fixed channel order.
    pub features: Tensor4<f32>,
    /// Per-cell indices of contained points (into the source cloud).
    pub projection: Vec<Vec<u32>>,
    /// Per-cell majority label: 0, 1, or [`VOID_LABEL`] for empty cells.
    pub labels: Vec<u8>,
    /// Per-cell mean prior probability (0 for empty cells).
    pub priors: Vec<f32>,
    /// Length of the source cloud this grid was built from.
    pub n_source_points: usize,
    /// Points of the source cloud outside this grid.
    pub out_of_bounds: usize,
}

impl FeatureGrid {
    /// Occupancy count of a cell.
    pub fn occupancy(&self, flat: usize) -> usize {
        self.projection[flat].len()
    }

    pub fn occupancy_counts(&self) -> Vec<u32> {
        self.projection.iter().map(|p| p.len() as u32).collect()
    }

    pub fn in_bounds_points(&self) -> usize {
        self.n_source_points - self.out_of_bounds
    }
}

/// Build a feature grid from a cloud. Out-of-bounds points are excluded and
/// counted; a grid that would contain no points at all is an error.
pub fn voxelize(cloud: &PointCloud, spec: GridSpec, opts: VoxelOptions) -> Result<FeatureGrid> {
    spec.validate()?;
    let n_cells = spec.n_cells();
    let mut projection: Vec<Vec<u32>> = vec![Vec::new(); n_cells];
    let mut out_of_bounds = 0usize;
    for (i, p) in cloud.points().iter().enumerate() {
        match spec.cell_of([p.x, p.y, p.z]) {
            Some(cell) => projection[spec.flat(cell)].push(i as u32),
            None => out_of_bounds += 1,
        }
    }
    if out_of_bounds == cloud.len() {
        return Err(Error::validation(
            "no points fall inside the grid; check origin/edge/voxel_size",
        ));
    }

    // Per-cell raw means, accumulated in f64 in point-index order.
    let mut mean_z = vec![0.0f64; n_cells];
    let mut mean_nr = vec![0.0f64; n_cells];
    let mut mean_ins = vec![0.0f64; n_cells];
    let mut mean_prior = vec![0.0f64; n_cells];
    let mut labels = vec![VOID_LABEL; n_cells];
    for (ci, idxs) in projection.iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        let (mut sz, mut snr, mut sins, mut spr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut noise = 0usize;
        for &pi in idxs {
            let p = &cloud.points()[pi as usize];
            sz += p.z;
            snr += p.return_number as f64;
            sins += p.intensity as f64;
            spr += p.prior_prob as f64;
            if p.label == 1 {
                noise += 1;
            }
        }
        let n = idxs.len() as f64;
        mean_z[ci] = sz / n;
        mean_nr[ci] = snr / n;
        mean_ins[ci] = sins / n;
        mean_prior[ci] = spr / n;
        // majority label; an exact tie goes to noise
        labels[ci] = if 2 * noise >= idxs.len() { 1 } else { 0 };
    }

    // Normalizations: MZ against the grid box; NR/INS min-max over occupied
    // cells (a degenerate range maps to 0).
    let minmax = |vals: &[f64]| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (ci, v) in vals.iter().enumerate() {
            if !projection[ci].is_empty() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        (lo, hi)
    };
    let (nr_lo, nr_hi) = minmax(&mean_nr);
    let (ins_lo, ins_hi) = minmax(&mean_ins);
    let norm = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    };

    let e = spec.edge_voxels;
    let c = opts.channels.count();
    let mut features = Tensor4::zeros([c, e, e, e]);
    let mut ch = 0usize;
    let fill = |features: &mut Tensor4<f32>, ch: usize, f: &dyn Fn(usize) -> f64| {
        for ci in 0..n_cells {
            if projection[ci].is_empty() {
                continue;
            }
            features.values_mut()[ch * n_cells + ci] = f(ci) as f32;
        }
    };
    if opts.channels.occ {
        fill(&mut features, ch, &|ci| projection[ci].len() as f64);
        ch += 1;
    }
    if opts.channels.mz {
        if opts.mz_absolute {
            fill(&mut features, ch, &|ci| mean_z[ci]);
        } else {
            let oz = spec.origin[2];
            let extent = spec.extent();
            fill(&mut features, ch, &|ci| (mean_z[ci] - oz) / extent);
        }
        ch += 1;
    }
    if opts.channels.nr {
        fill(&mut features, ch, &|ci| norm(mean_nr[ci], nr_lo, nr_hi));
        ch += 1;
    }
    if opts.channels.ins {
        fill(&mut features, ch, &|ci| norm(mean_ins[ci], ins_lo, ins_hi));
        ch += 1;
    }
    if opts.channels.r {
        fill(&mut features, ch, &|ci| mean_prior[ci]);
        ch += 1;
    }
    debug_assert_eq!(ch, c);

    let priors: Vec<f32> = mean_prior.iter().map(|&v| v as f32).collect();
    Ok(FeatureGrid {
        spec,
        channels: opts.channels,
        features,
        projection,
        labels,
        priors,
        n_source_points: cloud.len(),
        out_of_bounds,
    })
}

/// Cover a cloud's bounds with non-overlapping tiles of
/// `template_edge × template_voxel_size` meters, starting at the bounds
/// minimum, and voxelize each. Tiles containing no points are dropped.
/// Every point lands in exactly one tile.
pub fn tile_cloud(
    cloud: &PointCloud,
    edge_voxels: usize,
    voxel_size: f64,
    opts: VoxelOptions,
) -> Result<Vec<FeatureGrid>> {
    GridSpec::new([0.0; 3], edge_voxels, voxel_size)?;
    let b = cloud.bounds();
    let tile = edge_voxels as f64 * voxel_size;
    // floor(extent/tile) + 1 tiles per axis: a point exactly on the upper
    // bound still lands strictly inside the last tile.
    let counts: [usize; 3] =
        std::array::from_fn(|a| ((b.max[a] - b.min[a]) / tile).floor() as usize + 1);

    let mut specs = Vec::new();
    for tz in 0..counts[2] {
        for ty in 0..counts[1] {
            for tx in 0..counts[0] {
                let origin = [
                    b.min[0] + tx as f64 * tile,
                    b.min[1] + ty as f64 * tile,
                    b.min[2] + tz as f64 * tile,
                ];
                specs.push(GridSpec {
                    origin,
                    edge_voxels,
                    voxel_size,
                });
            }
        }
    }
    let grids: Vec<Option<FeatureGrid>> = specs
        .par_iter()
        .map(|spec| voxelize(cloud, *spec, opts).ok())
        .collect();
    let grids: Vec<FeatureGrid> = grids.into_iter().flatten().collect();
    if grids.is_empty() {
        return Err(Error::validation("tiling produced no occupied tiles"));
    }
    Ok(grids)
}

/// Project per-voxel predictions onto the grid's source points. Points
/// outside the grid are labeled 0 (non-noise).
pub fn project_labels(grid: &FeatureGrid, voxel_pred: &[u8]) -> Result<Vec<u8>> {
    if voxel_pred.len() != grid.spec.n_cells() {
        return Err(Error::shape(format!(
            "{} predictions for {} cells",
            voxel_pred.len(),
            grid.spec.n_cells()
        )));
    }
    let mut out = vec![0u8; grid.n_source_points];
    for (ci, idxs) in grid.projection.iter().enumerate() {
        for &pi in idxs {
            out[pi as usize] = voxel_pred[ci];
        }
    }
    Ok(out)
}

/// Merge per-tile predictions into one per-point labeling. Each tile sets
/// the labels of its own points; the tiles of [`tile_cloud`] are disjoint.
pub fn project_labels_tiles(tiles: &[FeatureGrid], preds: &[Vec<u8>]) -> Result<Vec<u8>> {
    if tiles.len() != preds.len() {
        return Err(Error::shape("one prediction grid per tile required"));
    }
    let n = tiles
        .first()
        .ok_or_else(|| Error::shape("no tiles"))?
        .n_source_points;
    let mut out = vec![0u8; n];
    for (tile, pred) in tiles.iter().zip(preds) {
        if tile.n_source_points != n {
            return Err(Error::shape("tiles come from different clouds"));
        }
        if pred.len() != tile.spec.n_cells() {
            return Err(Error::shape(format!(
                "{} predictions for {} cells",
                pred.len(),
                tile.spec.n_cells()
            )));
        }
        for (ci, idxs) in tile.projection.iter().enumerate() {
            for &pi in idxs {
                out[pi as usize] = pred[ci];
            }
        }
    }
    Ok(out)
}

/// Voxel post-processing: smooth each occupied voxel's noise confidence by
/// the occupancy-weighted mean over its 3×3×3 neighborhood (center
/// included) and relabel as noise where the smoothed score exceeds `tau`.
/// Empty voxels keep their raw argmax label (ties to noise); they project
/// to no points.
///
/// `scores` must be a `[2][E][E][E]` probability tensor summing to 1 per
/// voxel (±1e-6); `occupancy` gives per-cell point counts used as weights.
pub fn vpp_refine(scores: &Tensor4<f32>, occupancy: &[u32], tau: f64) -> Result<Vec<u8>> {
    let [c, d, h, w] = scores.dims();
    if c != 2 {
        return Err(Error::shape(format!("vpp expects 2 channels, got {}", c)));
    }
    let sp = d * h * w;
    if occupancy.len() != sp {
        return Err(Error::shape(format!(
            "occupancy has {} cells, scores {}",
            occupancy.len(),
            sp
        )));
    }
    for s in 0..sp {
        let sum = scores.values()[s] as f64 + scores.values()[sp + s] as f64;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "scores at voxel {} sum to {}, not 1",
                s, sum
            )));
        }
    }

    let labels: Vec<u8> = (0..sp)
        .into_par_iter()
        .map(|s| {
            let x = s % w;
            let y = (s / w) % h;
            let z = s / (w * h);
            if occupancy[s] == 0 {
                // raw argmax with the noise tie-break
                let p1 = scores.values()[sp + s];
                let p0 = scores.values()[s];
                return u8::from(p1 >= p0);
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if nz < 0
                            || nz >= d as i64
                            || ny < 0
                            || ny >= h as i64
                            || nx < 0
                            || nx >= w as i64
                        {
                            continue;
                        }
                        let ns = ((nz as usize * h) + ny as usize) * w + nx as usize;
                        let occ = occupancy[ns] as f64;
                        if occ > 0.0 {
                            num += occ * scores.values()[sp + ns] as f64;
                            den += occ;
                        }
                    }
                }
            }
            let smoothed = num / den; // den >= occupancy[s] > 0
            u8::from(smoothed > tau)
        })
        .collect();
    Ok(labels)
}

/// Write a grid tensor as flat little-endian `f32` (x fastest, then y, z,
/// channel) plus a `.meta` sidecar recording placement:
/// `nx ny nz ox oy oz voxel_size` as `key = value` lines.
pub fn write_grid_tensor(path: &std::path::Path, spec: &GridSpec, t: &Tensor4<f32>) -> Result<()> {
    let [_, d, h, w] = t.dims();
    if d != spec.edge_voxels || h != spec.edge_voxels || w != spec.edge_voxels {
        return Err(Error::shape(format!(
            "tensor spatial dims {}x{}x{} do not match grid edge {}",
            w, h, d, spec.edge_voxels
        )));
    }
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let meta = grid_meta_text(spec);
    let meta_path = meta_path_for(path);
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn grid_meta_text(spec: &GridSpec) -> String {
    let e = spec.edge_voxels.to_string();
    let pairs = [
        ("nx", e.clone()),
        ("ny", e.clone()),
        ("nz", e),
        ("ox", format!("{:?}", spec.origin[0])),
        ("oy", format!("{:?}", spec.origin[1])),
        ("oz", format!("{:?}", spec.origin[2])),
        ("voxel_size", format!("{:?}", spec.voxel_size)),
    ];
    crate::config::format_kv(pairs.iter().map(|(k, v)| (*k, v.as_str())))
}

fn meta_path_for(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// Read a grid tensor written by [`write_grid_tensor`]. The channel count
/// is inferred from the file size; a size that is not a whole number of
/// `edge³` channels is an error.
pub fn read_grid_tensor(path: &std::path::Path) -> Result<(GridSpec, Tensor4<f32>)> {
    let meta_path = meta_path_for(path);
    let kv = crate::config::read_kv_file(&meta_path)?;
    let view = crate::config::KvView::new(&kv, meta_path.display().to_string());
    let nx: usize = view.require_parse("nx")?;
    let ny: usize = view.require_parse("ny")?;
    let nz: usize = view.require_parse("nz")?;
    if nx != ny || ny != nz {
        return Err(Error::validation(format!(
            "grid must be cubic, got {}x{}x{}",
            nx, ny, nz
        )));
    }
    let spec = GridSpec::new(
        [
            view.require_parse("ox")?,
            view.require_parse("oy")?,
            view.require_parse("oz")?,
        ],
        nx,
        view.require_parse("voxel_size")?,
    )?;

    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cell_bytes = spec.n_cells() * 4;
    if cell_bytes == 0 || bytes.len() % cell_bytes != 0 || bytes.is_empty() {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!(
                "file size {} is not a whole number of {}-byte channels",
                bytes.len(),
                cell_bytes
            ),
        ));
    }
    let c = bytes.len() / cell_bytes;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let t = Tensor4::from_values([c, nx, nx, nx], values)?;
    Ok((spec, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point::PointRecord;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64, label: u8) -> PointRecord {
        PointRecord {
            x,
            y,
            z,
            gps_time: 0.0,
            intensity: 50.0,
            return_number: 1,
            num_returns: 1,
            label,
            prior_prob: 0.25,
        }
    }

    fn unit_spec(edge: usize) -> GridSpec {
        GridSpec::new([0.0, 0.0, 0.0], edge, 1.0).unwrap()
    }

    #[test]
    fn two_points_one_cell_mean_z() {
        let spec = unit_spec(4);
        let cloud = PointCloud::from_points(vec![pt(0.5, 0.5, 1.2, 0), pt(0.4, 0.6, 1.8, 0)]);
        let grid = voxelize(&cloud, spec, VoxelOptions::default()).unwrap();
        let ci = spec.flat([0, 0, 1]);
        assert_eq!(grid.occupancy(ci), 2);
        // Occ channel is the count; MZ is (1.5 − 0)/4 under grid-box
        // normalization
        assert_eq!(grid.features.values()[ci], 2.0);
        let mz = grid.features.values()[spec.n_cells() + ci];
        assert!((mz - 1.5 / 4.0).abs() < 1e-6);
        // absolute-MZ switch keeps the raw mean
        let grid_abs = voxelize(
            &cloud,
            spec,
            VoxelOptions {
                mz_absolute: true,
                ..VoxelOptions::default()
            },
        )
        .unwrap();
        let mz_abs = grid_abs.features.values()[spec.n_cells() + ci];
        assert!((mz_abs - 1.5).abs() < 1e-6);
    }

    #[test]
    fn boundary_point_goes_to_higher_cell() {
        let spec = unit_spec(4);
        assert_eq!(spec.cell_of([2.0, 0.5, 0.5]), Some([2, 0, 0]));
        assert_eq!(spec.cell_of([0.0, 0.0, 0.0]), Some([0, 0, 0]));
        // the global upper boundary is out of bounds
        assert_eq!(spec.cell_of([4.0, 0.5, 0.5]), None);
    }

    #[test]
    fn occupancy_sums_to_in_bounds_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let points: Vec<PointRecord> = (0..500)
            .map(|i| {
                pt(
                    rng.gen_range(-1.0..5.0),
                    rng.gen_range(-1.0..5.0),
                    rng.gen_range(-1.0..5.0),
                    (i % 2) as u8,
                )
            })
            .collect();
        let cloud = PointCloud::from_points(points);
        let grid = voxelize(&cloud, unit_spec(4), VoxelOptions::default()).unwrap();
        let total: usize = grid.projection.iter().map(|p| p.len()).sum();
        assert_eq!(total + grid.out_of_bounds, cloud.len());
        let occ_sum: f64 = (0..grid.spec.n_cells())
            .map(|ci| grid.features.values()[ci] as f64)
            .sum();
        assert_eq!(occ_sum as usize, total);
    }

    #[test]
    fn majority_label_with_tie_to_noise() {
        let spec = unit_spec(2);
        // 2 noise + 1 clean → noise; 1 noise + 2 clean → clean; 1+1 tie → noise
        let cloud = PointCloud::from_points(vec![
            pt(0.5, 0.5, 0.5, 1),
            pt(0.5, 0.5, 0.5, 1),
            pt(0.5, 0.5, 0.5, 0),
            pt(1.5, 0.5, 0.5, 1),
            pt(1.5, 0.5, 0.5, 0),
            pt(1.5, 0.5, 0.5, 0),
            pt(0.5, 1.5, 0.5, 1),
            pt(0.5, 1.5, 0.5, 0),
        ]);
        let grid = voxelize(&cloud, spec, VoxelOptions::default()).unwrap();
        assert_eq!(grid.labels[spec.flat([0, 0, 0])], 1);
        assert_eq!(grid.labels[spec.flat([1, 0, 0])], 0);
        assert_eq!(grid.labels[spec.flat([0, 1, 0])], 1);
        assert_eq!(grid.labels[spec.flat([1, 1, 0])], VOID_LABEL);
    }

    #[test]
    fn all_points_out_of_bounds_is_error() {
        let cloud = PointCloud::from_points(vec![pt(10.0, 10.0, 10.0, 0)]);
        assert!(voxelize(&cloud, unit_spec(2), VoxelOptions::default()).is_err());
    }

    #[test]
    fn voxelization_is_point_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let mut points: Vec<PointRecord> = (0..200)
            .map(|i| {
                pt(
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                    (i % 3 == 0) as u8,
                )
            })
            .collect();
        let a = voxelize(
            &PointCloud::from_points(points.clone()),
            unit_spec(4),
            VoxelOptions::default(),
        )
        .unwrap();
        points.shuffle(&mut rng);
        let b = voxelize(
            &PointCloud::from_points(points),
            unit_spec(4),
            VoxelOptions::default(),
        )
        .unwrap();
        // Occ identical everywhere; MZ equal within reassociation noise
        for ci in 0..a.spec.n_cells() {
            assert_eq!(a.features.values()[ci], b.features.values()[ci]);
            let (ma, mb) = (
                a.features.values()[a.spec.n_cells() + ci],
                b.features.values()[b.spec.n_cells() + ci],
            );
            assert!((ma - mb).abs() < 1e-5);
            assert_eq!(a.labels[ci], b.labels[ci]);
        }
    }

    #[test]
    fn project_labels_covers_points_and_leaves_oob_clean() {
        let cloud = PointCloud::from_points(vec![
            pt(0.5, 0.5, 0.5, 0),
            pt(1.5, 1.5, 1.5, 0),
            pt(9.0, 9.0, 9.0, 0), // out of bounds
        ]);
        let spec = unit_spec(2);
        let grid = voxelize(&cloud, spec, VoxelOptions::default()).unwrap();
        let all_noise = vec![1u8; spec.n_cells()];
        let labels = project_labels(&grid, &all_noise).unwrap();
        assert_eq!(labels, vec![1, 1, 0]);
    }

    #[test]
    fn project_ground_truth_roundtrips_to_voxel_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        let points: Vec<PointRecord> = (0..300)
            .map(|_| {
                pt(
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_range(0.0..2.0),
                    rng.gen_bool(0.3) as u8,
                )
            })
            .collect();
        let cloud = PointCloud::from_points(points);
        let spec = unit_spec(2);
        let grid = voxelize(&cloud, spec, VoxelOptions::default()).unwrap();
        // feed ground-truth voxel labels (void → 0 for the prediction map)
        let pred: Vec<u8> = grid.labels.iter().map(|&l| if l == 1 { 1 } else { 0 }).collect();
        let got = project_labels(&grid, &pred).unwrap();
        // oracle: recompute each point's voxel majority by brute force
        for (i, p) in cloud.points().iter().enumerate() {
            let cell = spec.cell_of([p.x, p.y, p.z]).unwrap();
            let mut noise = 0usize;
            let mut total = 0usize;
            for q in cloud.points() {
                if spec.cell_of([q.x, q.y, q.z]) == Some(cell) {
                    total += 1;
                    noise += q.label as usize;
                }
            }
            let want = u8::from(2 * noise >= total);
            assert_eq!(got[i], want, "point {}", i);
        }
    }

    #[test]
    fn tile_cloud_partitions_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        let points: Vec<PointRecord> = (0..400)
            .map(|_| {
                pt(
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                    0,
                )
            })
            .collect();
        let cloud = PointCloud::from_points(points);
        let tiles = tile_cloud(&cloud, 4, 1.0, VoxelOptions::default()).unwrap();
        assert!(tiles.len() > 1);
        let mut seen = vec![0usize; cloud.len()];
        for t in &tiles {
            assert_eq!(t.out_of_bounds, cloud.len() - t.in_bounds_points());
            for idxs in &t.projection {
                for &pi in idxs {
                    seen[pi as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "every point in exactly one tile");
    }

    fn uniform_scores(sp: usize, p1: f32) -> Tensor4<f32> {
        let mut v = vec![1.0 - p1; sp];
        v.extend(vec![p1; sp]);
        Tensor4::from_values([2, sp_dims(sp).0, sp_dims(sp).1, sp_dims(sp).2], v).unwrap()
    }

    fn sp_dims(sp: usize) -> (usize, usize, usize) {
        let e = (sp as f64).cbrt().round() as usize;
        assert_eq!(e * e * e, sp);
        (e, e, e)
    }

    #[test]
    fn vpp_hand_example_isolated_low_confidence_voxel() {
        // center voxel 0.6, its 26 neighbors 0.9, occupancy 1 everywhere:
        // smoothed = (0.6 + 26·0.9)/27 = 0.8889 → noise at τ=0.5
        let e = 3;
        let sp = e * e * e;
        let center = (1 * e + 1) * e + 1;
        let mut v1 = vec![0.9f32; sp];
        v1[center] = 0.6;
        let mut vals = v1.iter().map(|p| 1.0 - p).collect::<Vec<f32>>();
        vals.extend(v1);
        let scores = Tensor4::from_values([2, e, e, e], vals).unwrap();
        let occ = vec![1u32; sp];
        let labels = vpp_refine(&scores, &occ, 0.5).unwrap();
        assert_eq!(labels[center], 1);
        // hand value: recompute the smoothed score
        let smoothed: f64 = (0.6 + 26.0 * 0.9) / 27.0;
        assert!((smoothed - 0.888_888_9).abs() < 1e-6);
    }

    #[test]
    fn vpp_uniform_confidence_is_a_fixed_point() {
        for &p1 in &[0.2f32, 0.7] {
            let scores = uniform_scores(27, p1);
            let occ = vec![3u32; 27];
            for &tau in &[0.1, 0.5, 0.9] {
                let labels = vpp_refine(&scores, &occ, tau).unwrap();
                let want = u8::from(p1 as f64 > tau);
                assert!(labels.iter().all(|&l| l == want));
            }
        }
    }

    #[test]
    fn vpp_all_neighbors_empty_keeps_own_score() {
        let e = 3;
        let sp = e * e * e;
        let center = (1 * e + 1) * e + 1;
        let scores = uniform_scores(sp, 0.6);
        let mut occ = vec![0u32; sp];
        occ[center] = 5;
        let labels = vpp_refine(&scores, &occ, 0.5).unwrap();
        assert_eq!(labels[center], 1); // own score 0.6 > 0.5
        let labels = vpp_refine(&scores, &occ, 0.7).unwrap();
        assert_eq!(labels[center], 0);
    }

    #[test]
    fn vpp_occupancy_weighting_follows_heavy_neighbor() {
        // center (occ 1, conf 0.9) next to a heavy clean neighbor
        // (occ 99, conf 0.1): smoothed = (0.9 + 99·0.1)/100 = 0.108 → clean
        let e = 3;
        let sp = e * e * e;
        let center = (1 * e + 1) * e + 1;
        let neighbor = (1 * e + 1) * e + 2;
        let mut p1 = vec![0.5f32; sp];
        p1[center] = 0.9;
        p1[neighbor] = 0.1;
        let mut vals: Vec<f32> = p1.iter().map(|p| 1.0 - p).collect();
        vals.extend(p1);
        let scores = Tensor4::from_values([2, e, e, e], vals).unwrap();
        let mut occ = vec![0u32; sp];
        occ[center] = 1;
        occ[neighbor] = 99;
        let labels = vpp_refine(&scores, &occ, 0.5).unwrap();
        assert_eq!(labels[center], 0);
        let smoothed: f64 = (1.0 * 0.9 + 99.0 * 0.1) / 100.0;
        assert!((smoothed - 0.108).abs() < 1e-6);
    }

    #[test]
    fn vpp_rejects_unnormalized_scores() {
        let mut scores = uniform_scores(8, 0.5);
        scores.values_mut()[0] = 0.9; // breaks the sum at voxel 0
        let occ = vec![1u32; 8];
        assert!(vpp_refine(&scores, &occ, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn projection_partition_property(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let n = rng.gen_range(1..120);
            let points: Vec<PointRecord> = (0..n)
                .map(|_| pt(rng.gen_range(-2.0..6.0), rng.gen_range(-2.0..6.0), rng.gen_range(-2.0..6.0), 0))
                .collect();
            let cloud = PointCloud::from_points(points);
            match voxelize(&cloud, unit_spec(4), VoxelOptions::default()) {
                Ok(grid) => {
                    let total: usize = grid.projection.iter().map(|p| p.len()).sum();
                    prop_assert_eq!(total + grid.out_of_bounds, cloud.len());
                    for (ci, idxs) in grid.projection.iter().enumerate() {
                        prop_assert_eq!(grid.features.values()[ci] as usize, idxs.len());
                    }
                }
                Err(_) => {
                    // legal only when nothing was in bounds
                    let any_in = cloud.points().iter().any(|p| unit_spec(4).cell_of([p.x, p.y, p.z]).is_some());
                    prop_assert!(!any_in);
                }
            }
        }
    }
}
