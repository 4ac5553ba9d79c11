//! Positional encoding and its integrated (region-aware) form.
//!
//! Feature layout is `[sin block | cos block]`, each block frequency-major
//! then dimension: entry `block*(n*L) + j*n + i` holds the trig of
//! `2^j * x_i`. The integrated form attenuates the trig of the mean by
//! `exp(-4^j * var_i / 2)` per entry, which softly removes frequencies that
//! vary over the encoded region.

use crate::geometry::GaussianRegion;
use crate::vecmath::Vec3;
use crate::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("negative variance {0} passed to expected_trig")]
    NegativeVariance(f64),
    #[error("negative covariance diagonal entry {0}")]
    NegativeCovariance(f64),
    #[error("region has no full covariance; concatenated PE requires one")]
    MissingFullCovariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodingVariant {
    /// Plain positional encoding of the region mean (point sampling).
    Pe,
    /// Integrated positional encoding with the diagonal covariance shortcut.
    Ipe,
    /// Positional encoding of the mean concatenated with an encoding of the
    /// signed square root of the covariance entries.
    ConcatPe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Maximum frequency degree for spatial features.
    pub l_pos: usize,
    /// Degree for view-direction features.
    pub l_dir: usize,
    pub variant: EncodingVariant,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { l_pos: 16, l_dir: 4, variant: EncodingVariant::Ipe }
    }
}

impl EncodingConfig {
    /// Length of the spatial feature vector this config produces.
    pub fn spatial_len(&self) -> usize {
        match self.variant {
            EncodingVariant::Pe | EncodingVariant::Ipe => 6 * self.l_pos,
            EncodingVariant::ConcatPe => CONCAT_PE_LEN,
        }
    }

    pub fn dir_len(&self) -> usize {
        6 * self.l_dir
    }
}

/// Expected positional encoding of a Gaussian region, `2*3*L` values.
#[derive(Clone, Debug, PartialEq)]
pub struct IpeFeature {
    pub values: Vec<f64>,
    pub l: usize,
}

impl IpeFeature {
    #[inline]
    pub fn sin_at(&self, freq: usize, dim: usize) -> f64 {
        self.values[freq * 3 + dim]
    }

    #[inline]
    pub fn cos_at(&self, freq: usize, dim: usize) -> f64 {
        self.values[3 * self.l + freq * 3 + dim]
    }
}

/// Write the positional encoding of `values` into `out` (`2*len*L` entries).
pub fn positional_encode_into<T: Real>(values: &[f64], l: usize, out: &mut [T]) {
    let n = values.len();
    debug_assert_eq!(out.len(), 2 * n * l);
    let cos_base = n * l;
    for j in 0..l {
        let scale = (1u64 << j) as f64;
        for (i, &v) in values.iter().enumerate() {
            let (s, c) = (scale * v).sin_cos();
            out[j * n + i] = T::of_f64(s);
            out[cos_base + j * n + i] = T::of_f64(c);
        }
    }
}

/// Positional encoding of a 3-vector: sines then cosines of `2^j x_i`.
pub fn positional_encode(x: Vec3, l: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; 6 * l];
    positional_encode_into(&x.to_array(), l, &mut out);
    out
}

/// Expected sine and cosine of `N(mu, var)`: the trig of the mean attenuated
/// by a Gaussian function of the variance.
pub fn expected_trig(mu: f64, var: f64) -> Result<(f64, f64), EncodingError> {
    if var < 0.0 {
        return Err(EncodingError::NegativeVariance(var));
    }
    let atten = (-0.5 * var).exp();
    Ok((mu.sin() * atten, mu.cos() * atten))
}

/// Attenuation exponents below this produce factors under 1e-12; the sin/cos
/// is skipped and the feature entry written as zero.
const ATTENUATION_CUTOFF: f64 = -27.6;

/// Integrated positional encoding with the diagonal shortcut: the lifted
/// covariance diagonal is `[diag, 4 diag, ..., 4^{L-1} diag]`, so nothing
/// larger than a 3-vector is ever materialized.
pub fn integrated_positional_encode_into<T: Real>(
    mean: &[f64; 3],
    cov_diag: &[f64; 3],
    l: usize,
    out: &mut [T],
) -> Result<(), EncodingError> {
    debug_assert_eq!(out.len(), 6 * l);
    for &v in cov_diag {
        if v < 0.0 {
            return Err(EncodingError::NegativeCovariance(v));
        }
    }
    let cos_base = 3 * l;
    for j in 0..l {
        let scale = (1u64 << j) as f64;
        let var_scale = scale * scale;
        for i in 0..3 {
            let exponent = -0.5 * var_scale * cov_diag[i];
            let idx = j * 3 + i;
            if exponent < ATTENUATION_CUTOFF {
                out[idx] = T::zero();
                out[cos_base + idx] = T::zero();
            } else {
                let atten = exponent.exp();
                let (s, c) = (scale * mean[i]).sin_cos();
                out[idx] = T::of_f64(s * atten);
                out[cos_base + idx] = T::of_f64(c * atten);
            }
        }
    }
    Ok(())
}

pub fn integrated_positional_encode(
    region: &GaussianRegion,
    l: usize,
) -> Result<IpeFeature, EncodingError> {
    let mut values = vec![0.0f64; 6 * l];
    integrated_positional_encode_into(
        &region.mean.to_array(),
        &region.cov_diag.to_array(),
        l,
        &mut values,
    )?;
    Ok(IpeFeature { values, l })
}

/// Degrees used by the concatenated alternative: the mean is encoded with
/// L=12 and the signed square root of the covariance entries with L=2.
pub const CONCAT_PE_L_MEAN: usize = 12;
pub const CONCAT_PE_L_COV: usize = 2;
/// 6*12 mean features plus 2*6*2 covariance features.
pub const CONCAT_PE_LEN: usize = 6 * CONCAT_PE_L_MEAN + 2 * 6 * CONCAT_PE_L_COV;

/// Row-major upper-triangular index order used when flattening covariances.
const TRIU: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Concatenated-PE alternative: PE of the mean plus PE of the signed
/// elementwise square root of the upper-triangular covariance entries.
pub fn concat_positional_encode_into<T: Real>(
    region: &GaussianRegion,
    out: &mut [T],
) -> Result<(), EncodingError> {
    debug_assert_eq!(out.len(), CONCAT_PE_LEN);
    let cov = region.cov_full.ok_or(EncodingError::MissingFullCovariance)?;
    positional_encode_into(&region.mean.to_array(), CONCAT_PE_L_MEAN, &mut out[..6 * CONCAT_PE_L_MEAN]);
    let mut triu = [0.0f64; 6];
    for (slot, &(i, j)) in TRIU.iter().enumerate() {
        let v = cov[i][j];
        triu[slot] = v.signum() * v.abs().sqrt();
    }
    positional_encode_into(&triu, CONCAT_PE_L_COV, &mut out[6 * CONCAT_PE_L_MEAN..]);
    Ok(())
}

pub fn concat_positional_encode(region: &GaussianRegion) -> Result<Vec<f64>, EncodingError> {
    let mut out = vec![0.0f64; CONCAT_PE_LEN];
    concat_positional_encode_into(region, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn pe_at_origin() {
        let f = positional_encode(Vec3::ZERO, 4);
        for (i, v) in f.iter().enumerate() {
            if i < 12 {
                assert_eq!(*v, 0.0, "sin slot {i}");
            } else {
                assert_eq!(*v, 1.0, "cos slot {i}");
            }
        }
    }

    #[test]
    fn pe_at_pi() {
        let f = positional_encode(Vec3::new(std::f64::consts::PI, 0.0, 0.0), 1);
        assert!(f[0].abs() < 1e-12); // sin(pi)
        assert_relative_eq!(f[3], -1.0); // cos(pi)
        assert_relative_eq!(f[4], 1.0); // cos(0) in y slot
    }

    #[test]
    fn pe_matches_scalar_loop() {
        // Independent term-by-term evaluation of the definition.
        let x = Vec3::new(0.3, -1.2, 2.0);
        let l = 3;
        let f = positional_encode(x, l);
        let comps = x.to_array();
        for j in 0..l {
            for (i, &c) in comps.iter().enumerate() {
                let arg = 2f64.powi(j as i32) * c;
                assert_relative_eq!(f[j * 3 + i], arg.sin(), max_relative = 1e-12);
                assert_relative_eq!(f[3 * l + j * 3 + i], arg.cos(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn expected_trig_zero_variance_is_plain_trig() {
        for mu in [-2.0, 0.0, 0.7, 3.5] {
            let (s, c) = expected_trig(mu, 0.0).unwrap();
            assert_eq!(s, mu.sin());
            assert_eq!(c, mu.cos());
        }
    }

    #[test]
    fn expected_trig_known_value() {
        // E[sin] at mu=pi/2 with var = 2 ln 2 is exactly 1/2.
        let (s, _) = expected_trig(std::f64::consts::FRAC_PI_2, 2.0 * 2f64.ln()).unwrap();
        assert_relative_eq!(s, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn expected_trig_large_variance_vanishes() {
        let (s, c) = expected_trig(1.0, 1e4).unwrap();
        assert!(s.abs() < 1e-300 && c.abs() < 1e-300);
    }

    #[test]
    fn expected_trig_rejects_negative_variance() {
        assert!(matches!(
            expected_trig(0.0, -1e-9),
            Err(EncodingError::NegativeVariance(_))
        ));
    }

    #[test]
    fn ipe_with_zero_covariance_equals_pe() {
        let mean = Vec3::new(0.4, -0.9, 1.7);
        let region = GaussianRegion::point(mean);
        let ipe = integrated_positional_encode(&region, 6).unwrap();
        let pe = positional_encode(mean, 6);
        for (a, b) in ipe.values.iter().zip(pe.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ipe_rejects_negative_covariance() {
        let region = GaussianRegion {
            mean: Vec3::ZERO,
            cov_diag: Vec3::new(0.1, -0.1, 0.1),
            cov_full: None,
        };
        assert!(matches!(
            integrated_positional_encode(&region, 4),
            Err(EncodingError::NegativeCovariance(_))
        ));
    }

    #[test]
    fn ipe_kills_frequencies_wider_than_region() {
        // Interval much wider than the period at high frequencies.
        let region = GaussianRegion::isotropic(Vec3::new(0.3, 0.1, -0.2), 4.0);
        let f = integrated_positional_encode(&region, 8).unwrap();
        for j in 2..8 {
            for i in 0..3 {
                assert!(f.sin_at(j, i).abs() < 1e-3, "freq {j} dim {i} not attenuated");
                assert!(f.cos_at(j, i).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn ipe_entries_bounded_by_attenuation_envelope() {
        let mut rng = crate::rng::stream_rng(5, &[crate::rng::stream::ORACLE, 3]);
        for _ in 0..50 {
            let region = GaussianRegion {
                mean: Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ),
                cov_diag: Vec3::new(
                    rng.random_range(0.0..0.5),
                    rng.random_range(0.0..0.5),
                    rng.random_range(0.0..0.5),
                ),
                cov_full: None,
            };
            let l = 6;
            let f = integrated_positional_encode(&region, l).unwrap();
            let min_var = region.cov_diag.x.min(region.cov_diag.y).min(region.cov_diag.z);
            for j in 0..l {
                let bound = (-0.5 * 4f64.powi(j as i32) * min_var).exp() + 1e-12;
                for i in 0..3 {
                    assert!(f.sin_at(j, i).abs() <= bound);
                    assert!(f.cos_at(j, i).abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn ipe_magnitude_monotone_in_covariance() {
        // Growing any diagonal entry can only shrink feature magnitudes.
        let mut rng = crate::rng::stream_rng(6, &[crate::rng::stream::ORACLE, 4]);
        for _ in 0..100 {
            let mean = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let small = Vec3::new(
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
            );
            let grow = Vec3::new(
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
            );
            let a = integrated_positional_encode(
                &GaussianRegion { mean, cov_diag: small, cov_full: None },
                5,
            )
            .unwrap();
            let b = integrated_positional_encode(
                &GaussianRegion { mean, cov_diag: small + grow, cov_full: None },
                5,
            )
            .unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert!(y.abs() <= x.abs() + 1e-12);
            }
        }
    }

    #[test]
    fn concat_pe_zero_covariance() {
        let region = GaussianRegion {
            mean: Vec3::new(0.2, 0.5, -0.1),
            cov_diag: Vec3::ZERO,
            cov_full: Some([[0.0; 3]; 3]),
        };
        let f = concat_positional_encode(&region).unwrap();
        assert_eq!(f.len(), CONCAT_PE_LEN);
        let zero_pe = {
            let mut out = vec![0.0f64; 24];
            positional_encode_into(&[0.0; 6], CONCAT_PE_L_COV, &mut out);
            out
        };
        assert_eq!(&f[6 * CONCAT_PE_L_MEAN..], &zero_pe[..]);
    }

    #[test]
    fn concat_pe_diagonal_covariance_encodes_zero_off_diagonals() {
        let region = GaussianRegion {
            mean: Vec3::ZERO,
            cov_diag: Vec3::new(0.04, 0.09, 0.16),
            cov_full: Some([[0.04, 0.0, 0.0], [0.0, 0.09, 0.0], [0.0, 0.0, 0.16]]),
        };
        let f = concat_positional_encode(&region).unwrap();
        let cov_block = &f[6 * CONCAT_PE_L_MEAN..];
        // triu order: (0,0),(0,1),(0,2),(1,1),(1,2),(2,2); off-diagonal slots
        // are 1, 2, 4, which must encode exactly zero.
        for j in 0..CONCAT_PE_L_COV {
            for slot in [1usize, 2, 4] {
                assert_eq!(cov_block[j * 6 + slot], 0.0, "sin of zero");
                assert_eq!(cov_block[6 * CONCAT_PE_L_COV + j * 6 + slot], 1.0, "cos of zero");
            }
        }
    }

    #[test]
    fn concat_pe_matches_scalar_loop() {
        let cov = [[0.09, 0.01, -0.02], [0.01, 0.25, 0.03], [-0.02, 0.03, 0.49]];
        let mean = Vec3::new(0.3, -0.7, 1.1);
        let region = GaussianRegion {
            mean,
            cov_diag: Vec3::new(0.09, 0.25, 0.49),
            cov_full: Some(cov),
        };
        let f = concat_positional_encode(&region).unwrap();
        // Independent evaluation, writing the definition out by hand.
        let mean_arr = mean.to_array();
        for j in 0..CONCAT_PE_L_MEAN {
            for i in 0..3 {
                let arg = 2f64.powi(j as i32) * mean_arr[i];
                assert_relative_eq!(f[j * 3 + i], arg.sin(), max_relative = 1e-12);
            }
        }
        let triu_vals = [
            (0, 0, 1.0f64),
            (0, 1, 1.0),
            (0, 2, -1.0),
            (1, 1, 1.0),
            (1, 2, 1.0),
            (2, 2, 1.0),
        ];
        let base = 6 * CONCAT_PE_L_MEAN;
        for j in 0..CONCAT_PE_L_COV {
            for (slot, &(r, c, sign)) in triu_vals.iter().enumerate() {
                let v = sign * cov[r][c].abs().sqrt();
                let arg = 2f64.powi(j as i32) * v;
                assert_relative_eq!(f[base + j * 6 + slot], arg.sin(), max_relative = 1e-12);
                assert_relative_eq!(
                    f[base + 6 * CONCAT_PE_L_COV + j * 6 + slot],
                    arg.cos(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn concat_pe_requires_full_covariance() {
        let region = GaussianRegion::isotropic(Vec3::ZERO, 0.1);
        assert!(matches!(
            concat_positional_encode(&region),
            Err(EncodingError::MissingFullCovariance)
        ));
    }

    #[test]
    fn block_order_round_trips() {
        // A reader that indexes (frequency, dimension, sin/cos) recovers the
        // defining scalar exactly.
        let region = GaussianRegion::isotropic(Vec3::new(0.9, -0.4, 0.2), 0.01);
        let l = 5;
        let f = integrated_positional_encode(&region, l).unwrap();
        let mean = region.mean.to_array();
        for j in 0..l {
            for i in 0..3 {
                let (s, c) = expected_trig(
                    2f64.powi(j as i32) * mean[i],
                    4f64.powi(j as i32) * region.cov_diag.to_array()[i],
                )
                .unwrap();
                assert_relative_eq!(f.sin_at(j, i), s, epsilon = 1e-15);
                assert_relative_eq!(f.cos_at(j, i), c, epsilon = 1e-15);
            }
        }
    }
}
