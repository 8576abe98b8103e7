//! Bias-field correction and intensity normalization.
//!
//! The bias model is a separable monomial basis of a given order over
//! coordinates normalized to [-1, 1] per axis: one coefficient per
//! (p, q, r) power triple, x power fastest. Fitting happens in log space
//! over a foreground mask via streaming normal equations; the corrected
//! volume divides out the fitted field, rescaled so the mean foreground
//! intensity is preserved.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    crop_to_foreground, resample, resample_mask, resample_to_shape, BoundingBox, Interp, Mask,
    Volume,
};

/// Fitted multiplicative bias field in log space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasModel {
    pub order: usize,
    /// Coefficients over the separable basis, x power fastest, z slowest.
    pub coefficients: Vec<f64>,
    /// Scalar applied to the exponentiated fit so correction preserves the
    /// mean foreground intensity.
    pub scale: f64,
    /// Positivity shift added to intensities before taking logs (0 when all
    /// foreground intensities were already positive).
    pub shift: f64,
}

impl BiasModel {
    /// Log-field value at normalized coordinates, before scaling.
    pub fn log_field(&self, t: [f64; 3]) -> f64 {
        let k = self.order + 1;
        let mut powers = [[0.0; 8]; 3];
        for a in 0..3 {
            let mut acc = 1.0;
            for p in 0..k {
                powers[a][p] = acc;
                acc *= t[a];
            }
        }
        let mut s = 0.0;
        let mut i = 0;
        for r in 0..k {
            for q in 0..k {
                for p in 0..k {
                    s += self.coefficients[i] * powers[0][p] * powers[1][q] * powers[2][r];
                    i += 1;
                }
            }
        }
        s
    }

    /// Multiplicative correction field over a grid of the given shape.
    pub fn field(&self, shape: [usize; 3]) -> Volume {
        let mut v = Volume::zeros(shape, [1.0; 3]).expect("valid shape");
        let [nx, ny, nz] = shape;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let t = [
                        norm_coord(x, nx),
                        norm_coord(y, ny),
                        norm_coord(z, nz),
                    ];
                    let f = (self.log_field(t).exp() * self.scale) as f32;
                    v.set(x, y, z, f);
                }
            }
        }
        v
    }
}

fn norm_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// Voxels with intensity strictly above `threshold`.
pub fn foreground_mask(v: &Volume, threshold: f32) -> Mask {
    let data = v.data().iter().map(|&x| u8::from(x > threshold)).collect();
    let mut m = Mask::new(v.shape(), v.spacing(), data).expect("same geometry");
    m.set_origin(v.origin());
    m
}

/// Fit and remove a low-order multiplicative bias field.
///
/// Log-intensities over `fg` are fitted by least squares to the separable
/// monomial basis; the corrected volume is the input divided by the
/// exponentiated fit, rescaled so the mean over `fg` is unchanged.
pub fn bias_correct(v: &Volume, fg: &Mask, order: usize) -> Result<(Volume, BiasModel)> {
    if v.shape() != fg.shape() {
        return Err(Error::Shape(format!(
            "volume shape {:?} vs foreground shape {:?}",
            v.shape(),
            fg.shape()
        )));
    }
    if order > 7 {
        return Err(Error::Argument(format!("polynomial order {order} too large")));
    }
    let n_fg = fg.count();
    if n_fg == 0 {
        return Err(Error::Argument("empty foreground mask".into()));
    }

    let mut min_fg = f32::MAX;
    for i in 0..v.num_voxels() {
        if fg.data()[i] == 1 {
            min_fg = min_fg.min(v.data()[i]);
        }
    }
    let shift = if min_fg > 0.0 { 0.0 } else { 1.0 - min_fg as f64 };

    let k = order + 1;
    let nb = k * k * k;
    let [nx, ny, nz] = v.shape();

    // Per-axis monomial powers for every coordinate, reused across voxels.
    let axis_powers = |n: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let t = norm_coord(i, n);
            let mut acc = 1.0;
            for p in 0..k {
                out[i * k + p] = acc;
                acc *= t;
            }
        }
        out
    };
    let px = axis_powers(nx);
    let py = axis_powers(ny);
    let pz = axis_powers(nz);

    // Streaming normal equations A c = b with A = B^T B, b = B^T y.
    let mut a = vec![0f64; nb * nb];
    let mut b = vec![0f64; nb];
    let mut phi = vec![0f64; nb];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if fg.data()[i] == 0 {
                    continue;
                }
                let val = (v.data()[i] as f64 + shift).ln();
                let mut j = 0;
                for r in 0..k {
                    let wz = pz[z * k + r];
                    for q in 0..k {
                        let wyz = wz * py[y * k + q];
                        for p in 0..k {
                            phi[j] = wyz * px[x * k + p];
                            j += 1;
                        }
                    }
                }
                for r in 0..nb {
                    let pr = phi[r];
                    b[r] += pr * val;
                    let row = &mut a[r * nb..(r + 1) * nb];
                    for c in 0..nb {
                        row[c] += pr * phi[c];
                    }
                }
            }
        }
    }

    let am = DMatrix::from_row_slice(nb, nb, &a);
    let bv = DVector::from_column_slice(&b);
    let coeffs = match am.clone().cholesky() {
        Some(ch) => ch.solve(&bv),
        None => {
            let svd = am.svd(false, false);
            let sv = &svd.singular_values;
            let smax = sv.iter().cloned().fold(0.0f64, f64::max);
            let smin = sv.iter().cloned().fold(f64::MAX, f64::min);
            let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            return Err(Error::Fit {
                reason: "singular normal equations in bias fit".into(),
                condition,
            });
        }
    };

    let mut model = BiasModel {
        order,
        coefficients: coeffs.iter().cloned().collect(),
        scale: 1.0,
        shift,
    };

    // Divide out the field, then rescale so mean foreground intensity is
    // exactly preserved.
    let mut corrected = v.clone();
    let mut mean_in = 0f64;
    let mut mean_raw = 0f64;
    let mut fields = vec![0f64; v.num_voxels()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let mut s = 0.0;
                let mut j = 0;
                for r in 0..k {
                    let wz = pz[z * k + r];
                    for q in 0..k {
                        let wyz = wz * py[y * k + q];
                        for p in 0..k {
                            s += model.coefficients[j] * wyz * px[x * k + p];
                            j += 1;
                        }
                    }
                }
                fields[i] = s.exp();
                if fg.data()[i] == 1 {
                    mean_in += v.data()[i] as f64;
                    mean_raw += v.data()[i] as f64 / fields[i];
                }
            }
        }
    }
    mean_in /= n_fg as f64;
    mean_raw /= n_fg as f64;
    let scale = if mean_in != 0.0 && mean_raw != 0.0 {
        mean_raw / mean_in
    } else {
        1.0
    };
    model.scale = scale;
    for i in 0..corrected.num_voxels() {
        corrected.data_mut()[i] = (v.data()[i] as f64 / (fields[i] * scale)) as f32;
    }
    Ok((corrected, model))
}

/// Z-score normalization over a foreground mask, applied everywhere.
/// Uses the population standard deviation.
pub fn zscore_normalize(v: &Volume, fg: &Mask) -> Result<Volume> {
    if v.shape() != fg.shape() {
        return Err(Error::Shape(format!(
            "volume shape {:?} vs foreground shape {:?}",
            v.shape(),
            fg.shape()
        )));
    }
    let n = fg.count();
    if n < 2 {
        return Err(Error::Argument(format!(
            "foreground must have at least 2 voxels, has {n}"
        )));
    }
    let mut mean = 0f64;
    for i in 0..v.num_voxels() {
        if fg.data()[i] == 1 {
            mean += v.data()[i] as f64;
        }
    }
    mean /= n as f64;
    let mut var = 0f64;
    for i in 0..v.num_voxels() {
        if fg.data()[i] == 1 {
            let d = v.data()[i] as f64 - mean;
            var += d * d;
        }
    }
    var /= n as f64;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::Degenerate(
            "zero variance foreground in z-score normalization".into(),
        ));
    }
    let mut out = v.clone();
    for x in out.data_mut() {
        *x = ((*x as f64 - mean) / std) as f32;
    }
    Ok(out)
}

/// Geometry bookkeeping for undoing preprocessing at prediction time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessMeta {
    pub original_shape: [usize; 3],
    pub original_spacing: [f32; 3],
    pub bbox: BoundingBox,
    /// Shape after cropping, before resampling.
    pub cropped_shape: [usize; 3],
    /// Shape the network actually sees.
    pub resampled_shape: [usize; 3],
    pub target_spacing: [f32; 3],
}

/// A fully preprocessed case ready for training or inference.
#[derive(Debug, Clone)]
pub struct PreprocessedCase {
    pub volume: Volume,
    pub mask: Option<Mask>,
    pub meta: PreprocessMeta,
}

/// Standard preprocessing: bias correction over the positive-intensity
/// foreground, tight crop, optional resampling to a target spacing, then
/// z-score normalization over the cropped positive foreground.
pub fn preprocess_case(
    v: &Volume,
    mask: Option<&Mask>,
    bias_order: Option<usize>,
    target_spacing: Option<[f32; 3]>,
) -> Result<PreprocessedCase> {
    let corrected = match bias_order {
        Some(order) => {
            let fg = foreground_mask(v, 0.0);
            if fg.count() == 0 {
                return Err(Error::Argument(
                    "volume has no positive-intensity foreground".into(),
                ));
            }
            bias_correct(v, &fg, order)?.0
        }
        None => v.clone(),
    };

    let (cropped, bbox) = crop_to_foreground(&corrected, 0.0);
    let cropped_shape = cropped.shape();
    let cropped_mask = match mask {
        Some(m) => Some(m.crop(&bbox)?),
        None => None,
    };

    let target = target_spacing.unwrap_or(v.spacing());
    let (resampled, resampled_mask) = if target != v.spacing() {
        let rv = resample(&cropped, target, Interp::Trilinear)?;
        let rm = match &cropped_mask {
            Some(m) => Some(resample_mask(m, target, Interp::Nearest)?),
            None => None,
        };
        (rv, rm)
    } else {
        (cropped, cropped_mask)
    };

    let fg = foreground_mask(&resampled, 0.0);
    let normalized = zscore_normalize(&resampled, &fg)?;

    let meta = PreprocessMeta {
        original_shape: v.shape(),
        original_spacing: v.spacing(),
        bbox,
        cropped_shape,
        resampled_shape: normalized.shape(),
        target_spacing: target,
    };
    Ok(PreprocessedCase {
        volume: normalized,
        mask: resampled_mask,
        meta,
    })
}

/// Map a probability map from preprocessed space back onto the original grid.
/// Voxels outside the preprocessing crop are zero.
pub fn restore_prediction(prob: &Volume, meta: &PreprocessMeta) -> Result<Volume> {
    if prob.shape() != meta.resampled_shape {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match preprocessed shape {:?}",
            prob.shape(),
            meta.resampled_shape
        )));
    }
    let back = if prob.shape() != meta.cropped_shape {
        resample_to_shape(prob, meta.cropped_shape, Interp::Trilinear)?
    } else {
        prob.clone()
    };
    let mut grid = Volume::new(meta.cropped_shape, meta.original_spacing, back.data().to_vec())?;
    grid.set_origin([0.0; 3]);
    let full = grid.embed(meta.original_shape, &meta.bbox)?;
    Ok(full)
}
