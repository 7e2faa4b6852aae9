//! Linear measurement model `y = A g + noise` with `A = D(a) F`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{ApertureMask, ComplexVolume, Direction, Fft3, RealVolume};

/// Aperture-masked orthonormal DFT plus the reconstruction noise variance.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    mask: ApertureMask,
    sigma_w2: f64,
    fft: Fft3,
}

impl ForwardOperator {
    pub fn new(mask: ApertureMask, sigma_w2: f64) -> Result<Self> {
        if !(sigma_w2 >= 0.0 && sigma_w2.is_finite()) {
            return Err(Error::invalid(
                "noise variance",
                format!("{sigma_w2} must be >= 0"),
            ));
        }
        let fft = Fft3::new(mask.dims());
        Ok(ForwardOperator {
            mask,
            sigma_w2,
            fft,
        })
    }

    /// Same noise model with the aperture replaced by `a = 1`.
    pub fn without_aperture(&self) -> Self {
        ForwardOperator {
            mask: ApertureMask::full(self.mask.dims()),
            sigma_w2: self.sigma_w2,
            fft: self.fft.clone(),
        }
    }

    pub fn mask(&self) -> &ApertureMask {
        &self.mask
    }

    pub fn alpha(&self) -> f64 {
        self.mask.alpha()
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    /// Noise floor `sigma_w^2 / alpha`.
    pub fn noise_floor(&self) -> f64 {
        self.sigma_w2 / self.alpha()
    }

    pub fn fft(&self) -> &Fft3 {
        &self.fft
    }

    fn apply_mask(&self, v: &mut ComplexVolume) {
        if self.mask.is_full() {
            return;
        }
        v.as_mut_slice()
            .par_iter_mut()
            .zip(self.mask.as_slice().par_iter())
            .for_each(|(c, &open)| {
                if !open {
                    *c = Complex64::new(0.0, 0.0);
                }
            });
    }

    /// `A g = D(a) F g`.
    pub fn apply(&self, g: &ComplexVolume) -> Result<ComplexVolume> {
        let mut out = self.fft.transform(g, Direction::Forward)?;
        self.apply_mask(&mut out);
        Ok(out)
    }

    /// `A^H y = F^H D(a) y`.
    pub fn adjoint(&self, y: &ComplexVolume) -> Result<ComplexVolume> {
        self.mask.dims().check(&y.dims())?;
        let mut out = y.clone();
        self.apply_mask(&mut out);
        self.fft.transform_in_place(&mut out, Direction::Inverse)?;
        Ok(out)
    }

    /// `A^H A x`, an orthogonal projection for a binary mask.
    pub fn normal(&self, x: &ComplexVolume) -> Result<ComplexVolume> {
        let mut out = self.fft.transform(x, Direction::Forward)?;
        self.apply_mask(&mut out);
        self.fft.transform_in_place(&mut out, Direction::Inverse)?;
        Ok(out)
    }
}

/// Back-projection initializer.
///
/// Returns the conditional means `mu_l = A^H y_l / alpha` and the speckle
/// average `r0 = (1/L) sum_l |A^H y_l|^2`, which doubles as the baseline
/// reconstruction.
pub fn back_project_init(
    ys: &[ComplexVolume],
    op: &ForwardOperator,
) -> Result<(Vec<ComplexVolume>, RealVolume)> {
    if ys.is_empty() {
        return Err(Error::invalid("looks", "at least one look is required"));
    }
    let back: Vec<ComplexVolume> = ys.iter().map(|y| op.adjoint(y)).collect::<Result<_>>()?;
    let r0 = speckle_average_of(&back);
    let inv_alpha = 1.0 / op.alpha();
    let mus = back.into_iter().map(|b| b.scaled(inv_alpha)).collect();
    Ok((mus, r0))
}

/// Speckle-average baseline `(1/L) sum_l |A^H y_l|^2`.
pub fn speckle_average(ys: &[ComplexVolume], op: &ForwardOperator) -> Result<RealVolume> {
    back_project_init(ys, op).map(|(_, r0)| r0)
}

fn speckle_average_of(back: &[ComplexVolume]) -> RealVolume {
    let dims = back[0].dims();
    let scale = 1.0 / back.len() as f64;
    // Sum looks in index order for a schedule-independent result.
    let data = (0..dims.len())
        .into_par_iter()
        .map(|j| back.iter().map(|b| b[j].norm_sqr()).sum::<f64>() * scale)
        .collect();
    RealVolume::from_vec(dims, data).expect("length matches dims")
}
