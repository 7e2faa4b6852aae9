//! Lambertian phantoms and fully developed speckle simulation.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::volume::{make_aperture, ComplexVolume, Dims, RealVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Sphere,
    Cube,
    SteppedBlock,
    Plane,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(PhantomKind::Sphere),
            "cube" => Ok(PhantomKind::Cube),
            "stepped-block" => Ok(PhantomKind::SteppedBlock),
            "plane" => Ok(PhantomKind::Plane),
            other => Err(Error::invalid(
                "phantom kind",
                format!("unknown kind {other:?}"),
            )),
        }
    }
}

/// Analytic scene viewed along `+t`.
///
/// `offset` shifts the primitive from the grid center, in voxels. `size` is
/// the radius of a sphere and the half-width of the other primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub kind: PhantomKind,
    pub offset: [f64; 3],
    pub size: f64,
    pub dims: Dims,
}

impl Phantom {
    pub fn new(kind: PhantomKind, dims: Dims, size: f64) -> Self {
        Phantom {
            kind,
            offset: [0.0; 3],
            size,
            dims,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        let s = self.dims.shape();
        [0, 1, 2].map(|a| (s[a] / 2) as f64 + self.offset[a])
    }

    /// Depth extent `[front, back]` along `t` occupied by the surface.
    fn depth_extent(&self) -> [f64; 2] {
        let ct = self.center()[2];
        let h = self.size;
        match self.kind {
            PhantomKind::Sphere | PhantomKind::Cube => [ct - h, ct - h],
            PhantomKind::SteppedBlock => [ct - h / 2.0, ct + h / 2.0],
            PhantomKind::Plane => [ct, ct],
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.size > 0.0 && self.size.is_finite()) {
            return Err(Error::invalid(
                "phantom size",
                format!("{} must be > 0", self.size),
            ));
        }
        let [cx, cy, _] = self.center();
        let [nx, ny, nt] = self.dims.shape();
        let [front, back] = self.depth_extent();
        let within = |lo: f64, hi: f64, n: usize| lo >= 0.0 && hi <= (n - 1) as f64;
        if !within(cx - self.size, cx + self.size, nx)
            || !within(cy - self.size, cy + self.size, ny)
            || !within(front, back, nt)
        {
            return Err(Error::invalid(
                "phantom geometry",
                format!(
                    "{:?} of size {} at offset {:?} exceeds grid {}",
                    self.kind, self.size, self.offset, self.dims
                ),
            ));
        }
        Ok(())
    }

    /// Front surface in column `(x, y)` as `(depth, cos theta)`, if any.
    fn front_surface(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let [cx, cy, ct] = self.center();
        let (dx, dy) = (x - cx, y - cy);
        let h = self.size;
        match self.kind {
            PhantomKind::Sphere => {
                let rho2 = dx * dx + dy * dy;
                if rho2 > h * h {
                    return None;
                }
                let cos = (1.0 - rho2 / (h * h)).sqrt();
                Some((ct - h * cos, cos))
            }
            _ if dx.abs() > h || dy.abs() > h => None,
            PhantomKind::Cube => Some((ct - h, 1.0)),
            PhantomKind::Plane => Some((ct, 1.0)),
            PhantomKind::SteppedBlock => {
                let depth = if dx < 0.0 { ct - h / 2.0 } else { ct + h / 2.0 };
                Some((depth, 1.0))
            }
        }
    }
}

/// Surface reflectivity `max(0, cos theta)` at the front-most voxel of each
/// column, normalized to a unit maximum.
pub fn make_phantom(p: &Phantom) -> Result<RealVolume> {
    p.check()?;
    let dims = p.dims;
    let [nx, ny, nt] = dims.shape();
    let mut r = RealVolume::zeros(dims);
    for ix in 0..nx {
        for iy in 0..ny {
            if let Some((depth, cos)) = p.front_surface(ix as f64, iy as f64) {
                let it = (depth.round() as usize).min(nt - 1);
                r[dims.index(ix, iy, it)] = cos.max(0.0);
            }
        }
    }
    let peak = r.max();
    if peak > 0.0 {
        r = r.scaled(1.0 / peak);
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub looks: usize,
    pub noise_var: f64,
    pub seed: u64,
    pub dims: Dims,
    pub aperture_fraction: f64,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.looks == 0 {
            return Err(Error::invalid("looks", "at least one look is required"));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::invalid(
                "noise_var",
                format!("{} must be > 0", self.noise_var),
            ));
        }
        Ok(())
    }

    /// Forward operator with the configured aperture and `sigma_w^2 = noise_var`.
    pub fn operator(&self) -> Result<ForwardOperator> {
        ForwardOperator::new(
            make_aperture(self.dims, self.aperture_fraction)?,
            self.noise_var,
        )
    }
}

/// Generator for look `l`: ChaCha8 seeded with `seed`, stream `l`.
pub fn look_rng(seed: u64, look: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(look as u64);
    rng
}

fn circular_gaussian(rng: &mut ChaCha8Rng) -> Complex64 {
    let u: f64 = rng.sample(StandardNormal);
    let v: f64 = rng.sample(StandardNormal);
    Complex64::new(u, v) * std::f64::consts::FRAC_1_SQRT_2
}

/// Speckle field `g_j = sqrt(r_j) (u + iv) / sqrt(2)`.
pub fn draw_speckle(r: &RealVolume, rng: &mut ChaCha8Rng) -> Result<ComplexVolume> {
    check_nonnegative(r)?;
    Ok(ComplexVolume::from_fn(r.dims(), |j| {
        circular_gaussian(rng) * r[j].sqrt()
    }))
}

fn check_nonnegative(r: &RealVolume) -> Result<()> {
    if let Some((j, v)) = r.as_slice().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::invalid(
            "reflectivity",
            format!("entry {j} is {v}; must be finite and >= 0"),
        ));
    }
    Ok(())
}

/// One look: speckle draw, forward model, then additive noise, all from the
/// look's own stream.
fn simulate_look(
    r: &RealVolume,
    op: &ForwardOperator,
    noise_var: f64,
    seed: u64,
    look: usize,
) -> Result<ComplexVolume> {
    let mut rng = look_rng(seed, look);
    let g = draw_speckle(r, &mut rng)?;
    let mut y = op.apply(&g)?;
    let sd = noise_var.sqrt();
    for c in y.as_mut_slice() {
        *c += circular_gaussian(&mut rng) * sd;
    }
    Ok(y)
}

/// Independent looks `y_l = A g_l + eta_l` using an explicit operator.
pub fn simulate_looks_with(
    r: &RealVolume,
    op: &ForwardOperator,
    params: &SimParams,
) -> Result<Vec<ComplexVolume>> {
    params.validate()?;
    params.dims.check(&r.dims())?;
    op.mask().dims().check(&r.dims())?;
    check_nonnegative(r)?;
    (0..params.looks)
        .into_par_iter()
        .map(|l| simulate_look(r, op, params.noise_var, params.seed, l))
        .collect()
}

pub fn simulate_looks(r: &RealVolume, params: &SimParams) -> Result<Vec<ComplexVolume>> {
    simulate_looks_with(r, &params.operator()?, params)
}

/// `10 log10(P / noise_var)` with `P` the mean power per open pupil bin.
///
/// For fully developed speckle `E |(A g)_k|^2 = mean(r)` at every open bin.
pub fn snr_db(r: &RealVolume, noise_var: f64) -> f64 {
    10.0 * (r.mean() / noise_var).log10()
}
