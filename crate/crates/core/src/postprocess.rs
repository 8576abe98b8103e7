//! Binarization, connected components, ensemble fusion, and the two
//! false-positive filters (slice-classifier gate and per-voxel radiomics
//! gate). Both filters are contractions: the output mask is always a
//! subset of the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::tensor::Tensor;
use crate::volume::{BoundingBox, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Six,
    TwentySix,
}

#[derive(Debug, Clone)]
pub struct LesionComponent {
    pub label: usize,
    /// Flat voxel indices into the source mask, ascending (raster order).
    pub voxels: Vec<usize>,
    pub voxel_count: usize,
    pub volume_mm3: f64,
    pub bbox: BoundingBox,
    pub mean_intensity: Option<f32>,
    /// Shape of the source mask, for decoding flat indices.
    pub grid: [usize; 3],
}

impl LesionComponent {
    pub fn coord(&self, flat: usize) -> [usize; 3] {
        let [nx, ny, _] = self.grid;
        [flat % nx, (flat / nx) % ny, flat / (nx * ny)]
    }
}

fn neighbor_offsets(conn: Connectivity) -> Vec<[i64; 3]> {
    match conn {
        Connectivity::Six => vec![
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [0, 0, 1],
            [0, 0, -1],
        ],
        Connectivity::TwentySix => {
            let mut out = Vec::with_capacity(26);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dx, dy, dz) != (0, 0, 0) {
                            out.push([dx, dy, dz]);
                        }
                    }
                }
            }
            out
        }
    }
}

/// BFS labeling; components are numbered 1.. in raster order of their
/// first-encountered voxel. Also returns the per-voxel label map
/// (0 = background).
pub fn connected_components_with_labels(
    m: &Mask,
    conn: Connectivity,
) -> (Vec<LesionComponent>, Vec<u32>) {
    let [nx, ny, nz] = m.shape();
    let offsets = neighbor_offsets(conn);
    let data = m.data();
    let mut labels = vec![0u32; data.len()];
    let mut comps = Vec::new();
    let vox_mm3 = crate::volume::voxel_volume_mm3(m.spacing());

    for seed in 0..data.len() {
        if data[seed] == 0 || labels[seed] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        let mut queue = std::collections::VecDeque::from([seed]);
        labels[seed] = label;
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            let x = (i % nx) as i64;
            let y = ((i / nx) % ny) as i64;
            let z = (i / (nx * ny)) as i64;
            for o in &offsets {
                let (qx, qy, qz) = (x + o[0], y + o[1], z + o[2]);
                if qx < 0 || qy < 0 || qz < 0 {
                    continue;
                }
                let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                if qx >= nx || qy >= ny || qz >= nz {
                    continue;
                }
                let j = qx + nx * (qy + ny * qz);
                if data[j] == 1 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        voxels.sort_unstable();
        let mut lower = [usize::MAX; 3];
        let mut upper = [0usize; 3];
        for &i in &voxels {
            let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
            for a in 0..3 {
                lower[a] = lower[a].min(c[a]);
                upper[a] = upper[a].max(c[a] + 1);
            }
        }
        comps.push(LesionComponent {
            label: label as usize,
            voxel_count: voxels.len(),
            volume_mm3: voxels.len() as f64 * vox_mm3,
            bbox: BoundingBox::new(lower, upper).expect("nonempty component"),
            mean_intensity: None,
            grid: m.shape(),
            voxels,
        });
    }
    (comps, labels)
}

pub fn connected_components(m: &Mask, conn: Connectivity) -> Vec<LesionComponent> {
    connected_components_with_labels(m, conn).0
}

pub fn attach_intensity(comps: &mut [LesionComponent], v: &Volume) {
    for c in comps.iter_mut() {
        let sum: f64 = c.voxels.iter().map(|&i| v.data()[i] as f64).sum();
        c.mean_intensity = Some((sum / c.voxel_count as f64) as f32);
    }
}

/// Threshold a probability map; strictly greater than `t`.
pub fn binarize(p: &Volume, t: f32) -> Mask {
    let data = p.data().iter().map(|&v| u8::from(v > t)).collect();
    let mut m = Mask::new(p.shape(), p.spacing(), data).expect("shape from volume");
    m.set_origin(p.origin());
    m
}

/// Voxelwise weighted mean of probability maps (uniform by default).
pub fn ensemble_average(maps: &[Volume], weights: Option<&[f64]>) -> Result<Volume> {
    if maps.is_empty() {
        return Err(Error::Argument("ensemble of zero maps".into()));
    }
    let first = &maps[0];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "ensemble shapes disagree: {:?} vs {:?}",
                m.shape(),
                first.shape()
            )));
        }
        if m.spacing() != first.spacing() {
            return Err(Error::Shape("ensemble spacings disagree".into()));
        }
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != maps.len() {
                return Err(Error::Argument(format!(
                    "{} weights for {} maps",
                    w.len(),
                    maps.len()
                )));
            }
            if w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Argument(
                    "weights must be nonnegative with positive sum".into(),
                ));
            }
            w.to_vec()
        }
        None => vec![1.0; maps.len()],
    };
    let wsum: f64 = w.iter().sum();
    let mut acc = vec![0f64; first.num_voxels()];
    for (m, &wi) in maps.iter().zip(&w) {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += wi * v as f64;
        }
    }
    let data = acc.iter().map(|&a| (a / wsum) as f32).collect();
    let mut out = Volume::new(first.shape(), first.spacing(), data)?;
    out.set_origin(first.origin());
    out.set_orientation(first.orientation().clone());
    Ok(out)
}

/// Per-case audit record for a false-positive filter run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub filter: String,
    pub applied: bool,
    pub reason: String,
    pub voxels_in: usize,
    pub voxels_out: usize,
    pub voxels_removed: usize,
    pub components_removed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slices_segmented: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slices_no_lesion: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction_no_lesion: Option<f64>,
}

/// Classifies one axial image slice; returns the lesion probability.
pub trait SliceClassifier {
    fn lesion_probability(&self, slice: &[f32], height: usize, width: usize) -> Result<f64>;
}

impl SliceClassifier for Graph {
    fn lesion_probability(&self, slice: &[f32], height: usize, width: usize) -> Result<f64> {
        let feeds = std::iter::once((
            "x".to_string(),
            Tensor::new(vec![1, 1, height, width], slice.to_vec())?,
        ))
        .collect();
        let probs = self.forward_value(&feeds)?;
        if probs.shape() != [1, 2] {
            return Err(Error::Shape(format!(
                "slice classifier output {:?}, expected [1, 2]",
                probs.shape()
            )));
        }
        Ok(probs.data()[1] as f64)
    }
}

fn extract_slice(v: &Volume, z: usize) -> Vec<f32> {
    let [nx, ny, _] = v.shape();
    let mut buf = vec![0f32; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            buf[y * nx + x] = v.get(x, y, z);
        }
    }
    buf
}

/// All-or-nothing slice-classifier filter. Applies only when the total
/// predicted lesion volume is below `volume_gate_mm3`; classifies exactly
/// the slices holding predicted voxels and empties the mask when the
/// lesion-free fraction strictly exceeds `fraction`.
pub fn slice_filter(
    m: &Mask,
    clf: &dyn SliceClassifier,
    v: &Volume,
    volume_gate_mm3: f64,
    fraction: f64,
) -> Result<(Mask, FilterReport)> {
    if m.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs volume {:?}",
            m.shape(),
            v.shape()
        )));
    }
    let voxels_in = m.count();
    let mut report = FilterReport {
        filter: "slice".into(),
        applied: false,
        reason: String::new(),
        voxels_in,
        voxels_out: voxels_in,
        voxels_removed: 0,
        components_removed: 0,
        slices_segmented: None,
        slices_no_lesion: None,
        fraction_no_lesion: None,
    };
    if voxels_in == 0 {
        report.reason = "not applied (no segmentation)".into();
        return Ok((m.clone(), report));
    }
    if m.volume_mm3() >= volume_gate_mm3 {
        report.reason = format!(
            "not applied (volume {:.1} mm3 >= gate {volume_gate_mm3} mm3)",
            m.volume_mm3()
        );
        return Ok((m.clone(), report));
    }

    let [nx, ny, nz] = m.shape();
    let segmented: Vec<usize> = (0..nz)
        .filter(|&z| {
            (0..ny).any(|y| (0..nx).any(|x| m.get(x, y, z) == 1))
        })
        .collect();
    let mut no_lesion = 0usize;
    for &z in &segmented {
        let slice = extract_slice(v, z);
        let p = clf.lesion_probability(&slice, ny, nx)?;
        if p <= 0.5 {
            no_lesion += 1;
        }
    }
    let frac = no_lesion as f64 / segmented.len() as f64;
    report.slices_segmented = Some(segmented.len());
    report.slices_no_lesion = Some(no_lesion);
    report.fraction_no_lesion = Some(frac);
    report.applied = true;
    if frac > fraction {
        report.reason = format!("removed all voxels ({frac:.2} > {fraction})");
        report.voxels_out = 0;
        report.voxels_removed = voxels_in;
        report.components_removed =
            connected_components(m, Connectivity::TwentySix).len();
        let empty = Mask::new(m.shape(), m.spacing(), vec![0; m.data().len()])?;
        Ok((empty, report))
    } else {
        report.reason = format!("kept ({frac:.2} <= {fraction})");
        Ok((m.clone(), report))
    }
}

/// Classifies one voxel's feature vector; returns the probability that it
/// is a true lesion voxel.
pub trait VoxelClassifier {
    fn keep_probability(&self, features: &[f64]) -> Result<f64>;
}

/// Per-voxel radiomics filter. Components smaller than `voxel_gate`
/// voxels have each voxel classified; voxels with keep probability < 0.5
/// are removed. Larger components pass untouched.
pub fn radiomics_filter(
    m: &Mask,
    v: &Volume,
    clf: &dyn VoxelClassifier,
    voxel_gate: usize,
    conn: Connectivity,
) -> Result<(Mask, FilterReport)> {
    if m.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs volume {:?}",
            m.shape(),
            v.shape()
        )));
    }
    let voxels_in = m.count();
    let mut report = FilterReport {
        filter: "radiomics".into(),
        applied: false,
        reason: String::new(),
        voxels_in,
        voxels_out: voxels_in,
        voxels_removed: 0,
        components_removed: 0,
        slices_segmented: None,
        slices_no_lesion: None,
        fraction_no_lesion: None,
    };
    if voxels_in == 0 {
        report.reason = "not applied (no segmentation)".into();
        return Ok((m.clone(), report));
    }

    let comps = connected_components(m, conn);
    let mut out = m.clone();
    let mut removed = 0usize;
    let mut comps_removed = 0usize;
    let mut touched = 0usize;
    for c in &comps {
        if c.voxel_count >= voxel_gate {
            continue;
        }
        touched += 1;
        let features = crate::radiomics::component_voxel_features(v, m, c)?;
        let mut removed_here = 0usize;
        for (&i, row) in c.voxels.iter().zip(&features) {
            if clf.keep_probability(row)? < 0.5 {
                out.data_mut()[i] = 0;
                removed_here += 1;
            }
        }
        removed += removed_here;
        if removed_here == c.voxel_count {
            comps_removed += 1;
        }
    }
    report.applied = touched > 0;
    report.reason = if touched == 0 {
        format!("not applied (all components >= {voxel_gate} voxels)")
    } else {
        format!("classified {touched} component(s) below {voxel_gate} voxels")
    };
    report.voxels_removed = removed;
    report.voxels_out = voxels_in - removed;
    report.components_removed = comps_removed;
    Ok((out, report))
}
