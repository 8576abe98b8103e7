//! Synthetic T1-like phantom generator.
//!
//! Phantoms are ellipsoidal "brains" on a zero background with ellipsoidal
//! lesions, a multiplicative separable order-2 polynomial bias field, and
//! additive Gaussian noise inside the brain. Everything is driven by a
//! ChaCha stream seeded from the config, so a given config always produces
//! bit-identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

const PLACEMENT_ATTEMPTS: usize = 100;

/// Parameters for one phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Grid size in voxels, `[x, y, z]`.
    pub shape: [usize; 3],
    /// Voxel spacing in millimetres.
    pub spacing: [f32; 3],
    /// Inclusive range for the number of lesions.
    pub lesion_count_range: (usize, usize),
    /// Inclusive range for per-axis lesion radii in millimetres.
    pub lesion_radius_range: (f32, f32),
    /// Mean tissue intensity inside the brain.
    pub tissue_mean: f32,
    /// Per-voxel tissue intensity standard deviation.
    pub tissue_std: f32,
    /// Additive intensity shift applied to lesion voxels.
    pub lesion_intensity_delta: f32,
    /// Maximum multiplicative deviation of the bias field, in [0, 1).
    pub bias_amplitude: f32,
    /// Standard deviation of additive noise inside the brain.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [48, 48, 48],
            spacing: [1.0; 3],
            lesion_count_range: (1, 3),
            lesion_radius_range: (3.0, 7.0),
            tissue_mean: 1000.0,
            tissue_std: 30.0,
            lesion_intensity_delta: -250.0,
            bias_amplitude: 0.1,
            noise_sigma: 15.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 8) {
            return Err(Error::Argument(format!(
                "phantom shape components must be >= 8, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Argument("phantom spacing must be positive".into()));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(Error::Argument("lesion_count_range min > max".into()));
        }
        if self.lesion_radius_range.0 > self.lesion_radius_range.1
            || self.lesion_radius_range.0 <= 0.0
        {
            return Err(Error::Argument("bad lesion_radius_range".into()));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::Argument("bias_amplitude must be in [0,1)".into()));
        }
        if self.noise_sigma < 0.0 || self.tissue_std < 0.0 {
            return Err(Error::Argument("sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated cohort member.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub id: String,
    pub volume: Volume,
    pub mask: Mask,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            s += d * d;
        }
        s <= 1.0
    }
}

/// Generate one phantom and its lesion mask.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, Mask)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [nx, ny, nz] = cfg.shape;
    let extent = [
        nx as f64 * cfg.spacing[0] as f64,
        ny as f64 * cfg.spacing[1] as f64,
        nz as f64 * cfg.spacing[2] as f64,
    ];
    let brain = Ellipsoid {
        center: [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0],
        semi: [0.4 * extent[0], 0.4 * extent[1], 0.4 * extent[2]],
    };

    // Lesions: uniform count, per-axis radii, uniform centers accepted only
    // when the whole ellipsoid fits inside the brain (conservative test:
    // scaled center distance plus scaled max radius stays within the unit
    // ball of the brain ellipsoid).
    let count = rng.random_range(cfg.lesion_count_range.0..=cfg.lesion_count_range.1);
    let (rmin, rmax) = cfg.lesion_radius_range;
    let mut lesions = Vec::with_capacity(count);
    for li in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut semi = [0f64; 3];
            for s in &mut semi {
                *s = rng.random_range(rmin..=rmax) as f64;
            }
            let mut center = [0f64; 3];
            for a in 0..3 {
                center[a] =
                    rng.random_range((brain.center[a] - brain.semi[a])..=(brain.center[a] + brain.semi[a]));
            }
            let mut dist2 = 0.0;
            let mut margin: f64 = 0.0;
            for a in 0..3 {
                let d = (center[a] - brain.center[a]) / brain.semi[a];
                dist2 += d * d;
                margin = margin.max(semi[a] / brain.semi[a]);
            }
            if dist2.sqrt() + margin <= 1.0 {
                lesions.push(Ellipsoid { center, semi });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "lesion {li} does not fit after {PLACEMENT_ATTEMPTS} attempts \
                 (radius range {rmin}..{rmax} mm vs brain semi-axes {:?})",
                brain.semi
            )));
        }
    }

    let mut vol = Volume::zeros(cfg.shape, cfg.spacing)?;
    let mut mask = Mask::zeros(cfg.shape, cfg.spacing)?;

    // Rasterize brain membership and lesion mask at voxel centers.
    let mut in_brain = vec![false; nx * ny * nz];
    let pos = |i: usize, a: usize| (i as f64 + 0.5) * cfg.spacing[a] as f64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [pos(x, 0), pos(y, 1), pos(z, 2)];
                let i = mask.idx(x, y, z);
                if brain.contains(p) {
                    in_brain[i] = true;
                    if lesions.iter().any(|l| l.contains(p)) {
                        mask.data_mut()[i] = 1;
                    }
                }
            }
        }
    }

    // Tissue intensities in raster order; lesion delta rides on top so the
    // contrast to local tissue is exactly the configured delta.
    let tissue = Normal::new(cfg.tissue_mean as f64, cfg.tissue_std.max(0.0) as f64)
        .map_err(|e| Error::Argument(format!("tissue distribution: {e}")))?;
    for i in 0..vol.num_voxels() {
        if in_brain[i] {
            let mut v = tissue.sample(&mut rng);
            if mask.data()[i] == 1 {
                v += cfg.lesion_intensity_delta as f64;
            }
            vol.data_mut()[i] = v as f32;
        }
    }

    // Separable order-2 bias in log space, scaled so the multiplicative
    // field deviates from 1 by at most bias_amplitude over the brain.
    if cfg.bias_amplitude > 0.0 {
        let mut coeffs = [[0f64; 3]; 3];
        for axis in &mut coeffs {
            for c in axis.iter_mut() {
                *c = rng.random_range(-1.0..=1.0);
            }
        }
        let norm_coord = |i: usize, n: usize| {
            if n > 1 {
                2.0 * i as f64 / (n - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        let mut logp = vec![0f64; nx * ny * nz];
        let mut max_abs = 0f64;
        for z in 0..nz {
            let tz = norm_coord(z, nz);
            let pz = coeffs[2][0] + coeffs[2][1] * tz + coeffs[2][2] * tz * tz;
            for y in 0..ny {
                let ty = norm_coord(y, ny);
                let py = coeffs[1][0] + coeffs[1][1] * ty + coeffs[1][2] * ty * ty;
                for x in 0..nx {
                    let tx = norm_coord(x, nx);
                    let px = coeffs[0][0] + coeffs[0][1] * tx + coeffs[0][2] * tx * tx;
                    let i = x + nx * (y + ny * z);
                    logp[i] = px + py + pz;
                    if in_brain[i] {
                        max_abs = max_abs.max(logp[i].abs());
                    }
                }
            }
        }
        if max_abs > 0.0 {
            let scale = (1.0 + cfg.bias_amplitude as f64).ln() / max_abs;
            for i in 0..vol.num_voxels() {
                if in_brain[i] {
                    let f = (logp[i] * scale).exp();
                    vol.data_mut()[i] = (vol.data()[i] as f64 * f) as f32;
                }
            }
        }
    }

    // Additive noise inside the brain; the background stays exactly zero.
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma as f64).unwrap();
        for i in 0..vol.num_voxels() {
            if in_brain[i] {
                vol.data_mut()[i] = (vol.data()[i] as f64 + noise.sample(&mut rng)) as f32;
            }
        }
    }

    Ok((vol, mask))
}

/// Derive a per-case seed from a master seed (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a cohort of `n` phantoms. `round(n * no_lesion_fraction)` of them
/// (the last ones, by id) are lesion-free. Case ids are `case_000`,
/// `case_001`, ... and stable across runs.
pub fn generate_cohort(
    cfg_template: &PhantomConfig,
    n: usize,
    no_lesion_fraction: f64,
    seed: u64,
) -> Result<Vec<PhantomCase>> {
    if !(0.0..=1.0).contains(&no_lesion_fraction) {
        return Err(Error::Argument(format!(
            "no_lesion_fraction {no_lesion_fraction} outside [0,1]"
        )));
    }
    let empty = (n as f64 * no_lesion_fraction).round() as usize;
    let first_empty = n - empty.min(n);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cfg = cfg_template.clone();
            cfg.seed = derive_seed(seed, i as u64);
            if i >= first_empty {
                cfg.lesion_count_range = (0, 0);
            }
            let (volume, mask) = generate_phantom(&cfg)?;
            Ok(PhantomCase {
                id: format!("case_{i:03}"),
                volume,
                mask,
            })
        })
        .collect()
}
