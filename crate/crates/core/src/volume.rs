//! Dense 3D grids, the orthonormal 3D DFT and pupil-plane aperture masks.
//!
//! Volumes are stored row-major with the range (time) axis fastest:
//! `index = (ix * ny + iy) * nt + it`. Frequency-domain volumes use the
//! DC-at-zero layout of the FFT, so masks compose directly with transforms.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Zero-padding factor as an exact rational (`1`, `3/2`, `2`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PadFactor {
    num: u16,
    den: u16,
}

impl PadFactor {
    pub const ONE: PadFactor = PadFactor { num: 1, den: 1 };
    pub const THREE_HALVES: PadFactor = PadFactor { num: 3, den: 2 };
    pub const TWO: PadFactor = PadFactor { num: 2, den: 1 };

    pub fn new(num: u16, den: u16) -> Result<Self> {
        if num == 0 || den == 0 || num < den {
            return Err(Error::invalid(
                "padding factor",
                format!("{num}/{den} must be a ratio >= 1"),
            ));
        }
        let g = gcd(num, den);
        Ok(PadFactor {
            num: num / g,
            den: den / g,
        })
    }

    /// Accepts factors that are an exact multiple of one half.
    pub fn from_f64(q: f64) -> Result<Self> {
        let twice = 2.0 * q;
        if !(twice.is_finite() && (twice - twice.round()).abs() < 1e-9 && twice >= 2.0) {
            return Err(Error::invalid(
                "padding factor",
                format!("{q} is not a multiple of 1/2 that is >= 1"),
            ));
        }
        PadFactor::new(twice.round() as u16, 2)
    }

    pub fn num(self) -> u16 {
        self.num
    }

    pub fn den(self) -> u16 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// Padded length for a measured length: nearest even integer to `m * q`
    /// (exact for integer factors).
    fn pad(self, measured: usize) -> usize {
        let exact = measured * self.num as usize;
        if exact % self.den as usize == 0 {
            exact / self.den as usize
        } else {
            2 * ((measured as f64 * self.as_f64() / 2.0).round() as usize)
        }
    }

    fn unpad(self, padded: usize) -> usize {
        (padded as f64 / self.as_f64()).round() as usize
    }
}

impl fmt::Display for PadFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u16, mut b: u16) -> u16 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Grid shape: two cross-range axes and the range axis, after zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    nx: usize,
    ny: usize,
    nt: usize,
    q: PadFactor,
}

impl Dims {
    /// Unpadded grid (`q = 1`).
    pub fn new(nx: usize, ny: usize, nt: usize) -> Result<Self> {
        Self::with_factor(nx, ny, nt, PadFactor::ONE)
    }

    /// Grid obtained by zero-padding a measured `[mx, my, mt]` grid by `q`.
    pub fn padded(measured: [usize; 3], q: PadFactor) -> Result<Self> {
        let [mx, my, mt] = measured;
        let dims = Self::with_factor(q.pad(mx), q.pad(my), q.pad(mt), q)?;
        if dims.measured() != measured {
            return Err(Error::invalid(
                "grid",
                format!(
                    "measured grid {measured:?} padded by {q} gives {dims}, which does not map back"
                ),
            ));
        }
        Ok(dims)
    }

    /// Padded grid with an explicit factor, as stored in volume files.
    pub fn with_factor(nx: usize, ny: usize, nt: usize, q: PadFactor) -> Result<Self> {
        if nx < 2 || ny < 2 || nt < 2 {
            return Err(Error::invalid(
                "grid",
                format!("every axis needs at least 2 voxels, got {nx}x{ny}x{nt}"),
            ));
        }
        let dims = Dims { nx, ny, nt, q };
        if dims.measured().contains(&0) {
            return Err(Error::invalid(
                "grid",
                format!("padding factor {q} leaves an empty measured grid in {dims}"),
            ));
        }
        Ok(dims)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nt]
    }

    pub fn q(&self) -> PadFactor {
        self.q
    }

    /// Total voxel count `n`.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nt
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Extent of the unpadded measurement grid along each axis.
    pub fn measured(&self) -> [usize; 3] {
        [
            self.q.unpad(self.nx),
            self.q.unpad(self.ny),
            self.q.unpad(self.nt),
        ]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, it: usize) -> usize {
        (ix * self.ny + iy) * self.nt + it
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let it = index % self.nt;
        let rest = index / self.nt;
        [rest / self.ny, rest % self.ny, it]
    }

    /// Same grid shape, ignoring the padding factor.
    pub fn same_grid(&self, other: &Dims) -> bool {
        self.shape() == other.shape()
    }

    pub fn check(&self, other: &Dims) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::dims(self, other))
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nt)?;
        if self.q != PadFactor::ONE {
            write!(f, " (q = {})", self.q)?;
        }
        Ok(())
    }
}

/// Real-valued grid, e.g. reflectivity or a covariance diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct RealVolume {
    dims: Dims,
    data: Vec<f64>,
}

/// Complex-valued grid, e.g. reflectance, conditional mean or pupil data.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume {
    dims: Dims,
    data: Vec<Complex64>,
}

macro_rules! volume_common {
    ($ty:ident, $elem:ty, $zero:expr) => {
        impl $ty {
            pub fn from_vec(dims: Dims, data: Vec<$elem>) -> Result<Self> {
                if data.len() != dims.len() {
                    return Err(Error::dims(
                        format!("{} values for {dims}", dims.len()),
                        format!("{} values", data.len()),
                    ));
                }
                Ok($ty { dims, data })
            }

            pub fn zeros(dims: Dims) -> Self {
                $ty {
                    dims,
                    data: vec![$zero; dims.len()],
                }
            }

            pub fn filled(dims: Dims, value: $elem) -> Self {
                $ty {
                    dims,
                    data: vec![value; dims.len()],
                }
            }

            pub fn from_fn(dims: Dims, f: impl FnMut(usize) -> $elem) -> Self {
                $ty {
                    dims,
                    data: (0..dims.len()).map(f).collect(),
                }
            }

            pub fn dims(&self) -> Dims {
                self.dims
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn as_slice(&self) -> &[$elem] {
                &self.data
            }

            pub fn as_mut_slice(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<$elem> {
                self.data
            }

            pub fn get(&self, ix: usize, iy: usize, it: usize) -> $elem {
                self.data[self.dims.index(ix, iy, it)]
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all(|v| v.is_finite())
            }

            /// Relabel the grid (e.g. to change the padding factor) keeping the data.
            pub fn with_dims(self, dims: Dims) -> Result<Self> {
                $ty::from_vec(dims, self.data)
            }
        }

        impl std::ops::Index<usize> for $ty {
            type Output = $elem;
            fn index(&self, i: usize) -> &$elem {
                &self.data[i]
            }
        }

        impl std::ops::IndexMut<usize> for $ty {
            fn index_mut(&mut self, i: usize) -> &mut $elem {
                &mut self.data[i]
            }
        }
    };
}

volume_common!(RealVolume, f64, 0.0);
volume_common!(ComplexVolume, Complex64, Complex64::new(0.0, 0.0));

impl RealVolume {
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> RealVolume {
        RealVolume {
            dims: self.dims,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &RealVolume,
        f: impl Fn(f64, f64) -> f64 + Sync,
    ) -> Result<RealVolume> {
        self.dims.check(&other.dims)?;
        Ok(RealVolume {
            dims: self.dims,
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, other: &RealVolume) -> Result<f64> {
        self.dims.check(&other.dims)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn distance(&self, other: &RealVolume) -> Result<f64> {
        self.dims.check(&other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn scaled(&self, s: f64) -> RealVolume {
        self.map(|v| s * v)
    }

    pub fn to_complex(&self) -> ComplexVolume {
        ComplexVolume {
            dims: self.dims,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

impl ComplexVolume {
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Hermitian inner product `<self, other> = sum conj(self_j) * other_j`.
    pub fn inner(&self, other: &ComplexVolume) -> Result<Complex64> {
        self.dims.check(&other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    pub fn abs_sqr(&self) -> RealVolume {
        RealVolume {
            dims: self.dims,
            data: self.data.iter().map(|v| v.norm_sqr()).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> ComplexVolume {
        ComplexVolume {
            dims: self.dims,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn distance(&self, other: &ComplexVolume) -> Result<f64> {
        self.dims.check(&other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned orthonormal 3D DFT for one grid shape.
///
/// Both directions are scaled by `1/sqrt(n)`, so the transform is unitary.
#[derive(Clone)]
pub struct Fft3 {
    dims: Dims,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft3").field("dims", &self.dims).finish()
    }
}

impl Fft3 {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        let [nx, ny, nt] = dims.shape();
        Fft3 {
            dims,
            forward: [
                planner.plan_fft_forward(nx),
                planner.plan_fft_forward(ny),
                planner.plan_fft_forward(nt),
            ],
            inverse: [
                planner.plan_fft_inverse(nx),
                planner.plan_fft_inverse(ny),
                planner.plan_fft_inverse(nt),
            ],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn transform(&self, v: &ComplexVolume, direction: Direction) -> Result<ComplexVolume> {
        let mut out = v.clone();
        self.transform_in_place(&mut out, direction)?;
        Ok(out)
    }

    pub fn forward(&self, v: &ComplexVolume) -> Result<ComplexVolume> {
        self.transform(v, Direction::Forward)
    }

    pub fn inverse(&self, v: &ComplexVolume) -> Result<ComplexVolume> {
        self.transform(v, Direction::Inverse)
    }

    pub fn transform_in_place(&self, v: &mut ComplexVolume, direction: Direction) -> Result<()> {
        self.dims.check(&v.dims)?;
        let plans = match direction {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        let [nx, ny, nt] = self.dims.shape();
        let data = v.as_mut_slice();

        // Range axis: contiguous lines.
        let plan_t = &plans[2];
        data.par_chunks_mut(nt).for_each_init(
            || vec![Complex64::default(); plan_t.get_inplace_scratch_len()],
            |scratch, line| plan_t.process_with_scratch(line, scratch),
        );

        // Second cross-range axis: strided within each x-slab.
        let plan_y = &plans[1];
        data.par_chunks_mut(ny * nt).for_each_init(
            || {
                (
                    vec![Complex64::default(); ny],
                    vec![Complex64::default(); plan_y.get_inplace_scratch_len()],
                )
            },
            |(line, scratch), slab| {
                for it in 0..nt {
                    for (iy, c) in line.iter_mut().enumerate() {
                        *c = slab[iy * nt + it];
                    }
                    plan_y.process_with_scratch(line, scratch);
                    for (iy, c) in line.iter().enumerate() {
                        slab[iy * nt + it] = *c;
                    }
                }
            },
        );

        // First cross-range axis: stride of a whole slab.
        let plan_x = &plans[0];
        let plane = ny * nt;
        let columns: Vec<Vec<Complex64>> = {
            let src: &[Complex64] = data;
            (0..plane)
                .into_par_iter()
                .map_init(
                    || vec![Complex64::default(); plan_x.get_inplace_scratch_len()],
                    |scratch, j| {
                        let mut line: Vec<Complex64> =
                            (0..nx).map(|ix| src[ix * plane + j]).collect();
                        plan_x.process_with_scratch(&mut line, scratch);
                        line
                    },
                )
                .collect()
        };
        let scale = 1.0 / (self.dims.len() as f64).sqrt();
        for (j, line) in columns.into_iter().enumerate() {
            for (ix, c) in line.into_iter().enumerate() {
                data[ix * plane + j] = c * scale;
            }
        }
        Ok(())
    }
}

/// One-shot orthonormal 3D DFT.
pub fn dft3(v: &ComplexVolume, direction: Direction) -> Result<ComplexVolume> {
    Fft3::new(v.dims()).transform(v, direction)
}

/// Signed frequency of DFT bin `i` on an axis of length `n`.
#[inline]
pub fn signed_frequency(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Binary pupil support on the padded frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureMask {
    dims: Dims,
    mask: Vec<bool>,
    alpha: f64,
}

impl ApertureMask {
    /// Mask with every entry set (`a = 1`), i.e. no aperture model.
    pub fn full(dims: Dims) -> Self {
        ApertureMask {
            dims,
            mask: vec![true; dims.len()],
            alpha: 1.0,
        }
    }

    pub fn from_bools(dims: Dims, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.len() {
            return Err(Error::dims(dims.len(), mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("aperture mask", "mask has no open entries"));
        }
        Ok(ApertureMask {
            dims,
            mask,
            alpha: count as f64 / dims.len() as f64,
        })
    }

    /// Build from a real volume holding exact zeros and ones.
    pub fn from_volume(v: &RealVolume) -> Result<Self> {
        let mut bools = Vec::with_capacity(v.len());
        for &x in v.as_slice() {
            match x {
                0.0 => bools.push(false),
                1.0 => bools.push(true),
                other => {
                    return Err(Error::invalid(
                        "aperture mask",
                        format!("entries must be 0 or 1, found {other}"),
                    ))
                }
            }
        }
        Self::from_bools(v.dims(), bools)
    }

    pub fn to_volume(&self) -> RealVolume {
        RealVolume::from_fn(self.dims, |i| if self.mask[i] { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// Fraction of entries passing the aperture, `||a||_1 / n`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn open_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// Centered circular pupil, replicated over the measured range frames.
///
/// The disk diameter is `diameter_fraction` times the shorter measured
/// cross-range length; a bin is open when its signed frequency lies within
/// the disk and inside the unpadded measurement sub-grid.
pub fn make_aperture(dims: Dims, diameter_fraction: f64) -> Result<ApertureMask> {
    if !(diameter_fraction > 0.0 && diameter_fraction <= 1.0) {
        return Err(Error::invalid(
            "aperture diameter fraction",
            format!("{diameter_fraction} not in (0, 1]"),
        ));
    }
    let [mx, my, mt] = dims.measured();
    let radius = 0.5 * diameter_fraction * mx.min(my) as f64;
    let r2 = radius * radius;
    let inside = |k: i64, m: usize| k >= -((m / 2) as i64) && k < m.div_ceil(2) as i64;

    let [nx, ny, nt] = dims.shape();
    let mut mask = vec![false; dims.len()];
    for ix in 0..nx {
        let kx = signed_frequency(ix, nx);
        if !inside(kx, mx) {
            continue;
        }
        for iy in 0..ny {
            let ky = signed_frequency(iy, ny);
            if !inside(ky, my) || ((kx * kx + ky * ky) as f64) > r2 {
                continue;
            }
            for it in 0..nt {
                if inside(signed_frequency(it, nt), mt) {
                    mask[dims.index(ix, iy, it)] = true;
                }
            }
        }
    }
    ApertureMask::from_bools(dims, mask)
}
