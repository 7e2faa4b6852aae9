//! Reconstruction quality metrics: optimally scaled PSNR, point clouds,
//! nearest-neighbour distances, false-positive rate and surface NRMSE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, RealVolume};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    /// `+inf` when the scaled reconstruction matches exactly.
    pub db: f64,
    pub beta: f64,
}

/// PSNR of `beta * recon` against `truth`: `10 log10(n / |beta recon - truth|^2)`.
pub fn psnr_at(recon: &RealVolume, truth: &RealVolume, beta: f64) -> Result<f64> {
    recon.dims().check(&truth.dims())?;
    let err: f64 = recon
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (beta * a - b).powi(2))
        .sum();
    Ok(if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (recon.len() as f64 / err).log10()
    })
}

/// PSNR at the least-squares scale `beta = <recon, truth> / |recon|^2`.
pub fn psnr_scaled(recon: &RealVolume, truth: &RealVolume) -> Result<Psnr> {
    recon.dims().check(&truth.dims())?;
    let energy = recon.norm_sqr();
    if energy == 0.0 {
        return Err(Error::invalid(
            "reconstruction",
            "all-zero volume has no PSNR scale",
        ));
    }
    let beta = recon.dot(truth)? / energy;
    Ok(Psnr {
        db: psnr_at(recon, truth, beta)?,
        beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub pos: [f64; 3],
    pub r: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, by: [f64; 3]) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| Point {
                    pos: [p.pos[0] + by[0], p.pos[1] + by[1], p.pos[2] + by[2]],
                    r: p.r,
                })
                .collect(),
        }
    }
}

/// One point per voxel strictly above `threshold`, at `index * pitch`.
pub fn to_point_cloud(r: &RealVolume, threshold: f64, pitch: [f64; 3]) -> Result<PointCloud> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(
            "threshold",
            format!("{threshold} must be >= 0"),
        ));
    }
    let d = r.dims();
    let points = r
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(j, &v)| {
            let c = d.coords(j);
            Point {
                pos: [0, 1, 2].map(|a| c[a] as f64 * pitch[a]),
                r: v,
            }
        })
        .collect();
    Ok(PointCloud { points })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Nearest neighbour by exhaustive search; ties go to the lowest index.
pub fn brute_force_nearest(points: &[[f64; 3]], query: &[f64; 3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, query);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static 3D k-d tree with exact, lowest-index tie-breaking queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points,
            nodes: Vec::with_capacity(order.len()),
            root: None,
        };
        tree.root = tree.build(&mut order, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut rest[1..], depth + 1);
        self.nodes.push(Node {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the nearest point and the squared distance to it.
    pub fn nearest(&self, query: &[f64; 3]) -> Option<(usize, f64)> {
        let mut best = None;
        if let Some(root) = self.root {
            self.search(root, query, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut Option<(usize, f64)>) {
        let n = &self.nodes[node];
        let d = dist2(&self.points[n.point], q);
        let better = match *best {
            None => true,
            Some((i, b)) => d < b || (d == b && n.point < i),
        };
        if better {
            *best = Some((n.point, d));
        }
        let diff = q[n.axis] - self.points[n.point][n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            // Equal distances must still be visited for the tie-break.
            if best.is_none_or(|(_, b)| diff * diff <= b) {
                self.search(c, q, best);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudMetrics {
    /// Mean nearest-neighbour distance of retained points, in meters.
    pub euclid_m: Option<f64>,
    pub fp_rate: f64,
    pub nrmse: Option<f64>,
    pub beta: Option<f64>,
    pub retained: usize,
    pub removed: usize,
}

/// Compares reconstruction cloud `p` against ground truth `q`. Points of `p`
/// farther than `cutoff` from every point of `q` count as false positives.
pub fn cloud_metrics(p: &PointCloud, q: &PointCloud, cutoff: f64) -> Result<CloudMetrics> {
    if q.is_empty() {
        return Err(Error::invalid("ground-truth cloud", "empty"));
    }
    if !(cutoff >= 0.0) {
        return Err(Error::invalid("cutoff", format!("{cutoff} must be >= 0")));
    }
    let tree = KdTree::new(q.points.iter().map(|pt| pt.pos).collect());
    let matches: Vec<(usize, f64)> = p
        .points
        .par_iter()
        .map(|pt| tree.nearest(&pt.pos).expect("nonempty tree"))
        .collect();
    let mut dist_sum = 0.0;
    let mut cross = 0.0;
    let mut recon_sq = 0.0;
    let mut truth_sq = 0.0;
    let mut pairs = Vec::new();
    for (pt, &(qi, d2)) in p.points.iter().zip(&matches) {
        let d = d2.sqrt();
        if d > cutoff {
            continue;
        }
        let rt = q.points[qi].r;
        dist_sum += d;
        cross += pt.r * rt;
        recon_sq += pt.r * pt.r;
        truth_sq += rt * rt;
        pairs.push((pt.r, rt));
    }
    let retained = pairs.len();
    let removed = p.len() - retained;
    let fp_rate = if p.is_empty() {
        1.0
    } else {
        removed as f64 / p.len() as f64
    };
    if retained == 0 {
        return Ok(CloudMetrics {
            euclid_m: None,
            fp_rate: 1.0,
            nrmse: None,
            beta: None,
            retained,
            removed,
        });
    }
    let beta = (recon_sq > 0.0).then(|| cross / recon_sq);
    let nrmse = match beta {
        Some(b) if truth_sq > 0.0 => {
            let err: f64 = pairs.iter().map(|(r, t)| (b * r - t).powi(2)).sum();
            Some((err / truth_sq).sqrt())
        }
        _ => None,
    };
    Ok(CloudMetrics {
        euclid_m: Some(dist_sum / retained as f64),
        fp_rate,
        nrmse,
        beta,
        retained,
        removed,
    })
}

/// Surface NRMSE of retained pairs at an arbitrary scale `beta`.
pub fn nrmse_at(pairs: &[(f64, f64)], beta: f64) -> f64 {
    let err: f64 = pairs.iter().map(|(r, t)| (beta * r - t).powi(2)).sum();
    let den: f64 = pairs.iter().map(|(_, t)| t * t).sum();
    (err / den).sqrt()
}

/// Imaging geometry used for voxel pitch and the outlier cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryParams {
    pub wavelength_m: f64,
    pub range_m: f64,
    pub aperture_m: f64,
    pub bandwidth_hz: f64,
    /// Voxel pitch per axis; derived from the other values when absent.
    pub pitch_m: Option<[f64; 3]>,
}

impl Default for GeometryParams {
    /// Simulation geometry: 1550 nm, 52.9 m, 6.4 mm aperture and 64 frequency
    /// steps of 0.15 GHz.
    fn default() -> Self {
        GeometryParams {
            wavelength_m: 1550e-9,
            range_m: 52.9,
            aperture_m: 6.4e-3,
            bandwidth_hz: 64.0 * 0.15e9,
            pitch_m: None,
        }
    }
}

impl GeometryParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.wavelength_m,
            self.range_m,
            self.aperture_m,
            self.bandwidth_hz,
        ];
        if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(
                "geometry",
                "wavelength, range, aperture and bandwidth must be > 0",
            ));
        }
        if let Some(p) = self.pitch_m {
            if p.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid("geometry.pitch_m", "entries must be > 0"));
            }
        }
        Ok(())
    }

    /// Cross-range Rayleigh resolution `1.22 lambda d / D`.
    pub fn rayleigh(&self) -> f64 {
        1.22 * self.wavelength_m * self.range_m / self.aperture_m
    }

    /// Voxel pitch on `dims`: the explicit value if set, otherwise
    /// `lambda d f / D` across range (with the pupil diameter a fraction `f`
    /// of the measured grid) and `c / 2B` in range, both divided by `q`.
    pub fn voxel_pitch(&self, dims: Dims, aperture_fraction: f64) -> [f64; 3] {
        if let Some(p) = self.pitch_m {
            return p;
        }
        let q = dims.q().as_f64();
        let cross = self.wavelength_m * self.range_m * aperture_fraction / self.aperture_m / q;
        let range = SPEED_OF_LIGHT / (2.0 * self.bandwidth_hz) / q;
        [cross, cross, range]
    }
}

/// Outlier cutoff: three times the Rayleigh resolution, in meters.
pub fn rayleigh_cutoff(geo: &GeometryParams) -> f64 {
    3.0 * geo.rayleigh()
}

/// Per-column maximum along range and the range index where it occurs
/// (first index on ties), as `nx * ny` row-major maps.
pub fn max_projection(r: &RealVolume) -> (Vec<f64>, Vec<usize>) {
    let d = r.dims();
    let nt = d.nt();
    r.as_slice()
        .chunks_exact(nt)
        .map(|col| {
            col.iter()
                .enumerate()
                .fold((f64::NEG_INFINITY, 0), |(bv, bi), (i, &v)| {
                    if v > bv {
                        (v, i)
                    } else {
                        (bv, bi)
                    }
                })
        })
        .unzip()
}
