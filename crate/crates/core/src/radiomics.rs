//! Intensity, shape, and texture features over lesion components, plus a
//! small gradient-boosted-tree classifier with total-gain importance.
//!
//! The per-voxel feature schema is fixed (20 features): 10 first-order
//! statistics and 5 GLCM texture features over the voxel's neighborhood,
//! 4 shape features of the parent component, and the min-max normalized
//! voxel intensity.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{connected_components, Connectivity, LesionComponent, VoxelClassifier};
use crate::volume::{Mask, Volume};

pub const ENTROPY_BINS: usize = 32;
pub const GLCM_LEVELS: usize = 8;
pub const VOXEL_FEATURE_RADIUS: usize = 2;
const GBT_LAMBDA: f64 = 1.0;

pub fn feature_schema() -> Vec<String> {
    [
        "fo_mean",
        "fo_variance",
        "fo_skewness",
        "fo_kurtosis",
        "fo_energy",
        "fo_entropy",
        "fo_min",
        "fo_max",
        "fo_p10",
        "fo_p90",
        "glcm_contrast",
        "glcm_correlation",
        "glcm_energy",
        "glcm_homogeneity",
        "glcm_entropy",
        "shape_volume_mm3",
        "shape_surface_mm2",
        "shape_sphericity",
        "shape_max_diameter_mm",
        "intensity_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Linear-interpolation percentile on a sorted slice, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Ten first-order statistics: mean, population variance, skewness,
/// kurtosis, energy, 32-bin entropy (log2), min, max, p10, p90.
pub fn first_order(values: &[f32]) -> Result<[f64; 10]> {
    if values.is_empty() {
        return Err(Error::Argument("first_order of empty list".into()));
    }
    let n = values.len() as f64;
    let vals: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let mut m2 = 0f64;
    let mut m3 = 0f64;
    let mut m4 = 0f64;
    let mut energy = 0f64;
    for &v in &vals {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        energy += v * v;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skew, kurt) = if m2 > 1e-30 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    } else {
        (0.0, 0.0)
    };

    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);

    let entropy = if max > min {
        let width = (max - min) / ENTROPY_BINS as f64;
        let mut counts = [0usize; ENTROPY_BINS];
        for &v in &vals {
            let b = (((v - min) / width) as usize).min(ENTROPY_BINS - 1);
            counts[b] += 1;
        }
        -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.log2()
            })
            .sum::<f64>()
    } else {
        0.0
    };

    Ok([
        mean,
        m2,
        skew,
        kurt,
        energy,
        entropy,
        min,
        max,
        percentile(&sorted, 0.10),
        percentile(&sorted, 0.90),
    ])
}

/// The 13 unique 3D co-occurrence directions (symmetric counting makes the
/// opposite 13 redundant).
pub fn default_offsets_3d() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(13);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                // keep one representative of each +/- pair
                if dz > 0 || (dz == 0 && (dy > 0 || (dy == 0 && dx > 0))) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Five Haralick features (contrast, correlation, energy, homogeneity,
/// entropy) from a symmetric co-occurrence matrix over the given offsets.
/// `dims` are (nx, ny, nz) with x fastest, matching `Volume` layout.
pub fn glcm_features(
    patch: &[f32],
    dims: [usize; 3],
    levels: usize,
    offsets: &[[i64; 3]],
) -> Result<[f64; 5]> {
    let [nx, ny, nz] = dims;
    if nx * ny * nz != patch.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} do not match {} values",
            patch.len()
        )));
    }
    if levels < 2 {
        return Err(Error::Argument("glcm needs >= 2 levels".into()));
    }
    if patch.len() < 2 {
        return Err(Error::Argument("glcm needs >= 2 voxels".into()));
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in patch {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let quant: Vec<usize> = if hi > lo {
        patch
            .iter()
            .map(|&v| ((((v as f64) - lo) / (hi - lo) * levels as f64) as usize).min(levels - 1))
            .collect()
    } else {
        vec![0; patch.len()]
    };

    let mut counts = vec![0f64; levels * levels];
    let mut total = 0f64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let qi = quant[x + nx * (y + ny * z)];
                for o in offsets {
                    let (qx, qy, qz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                    if qx < 0 || qy < 0 || qz < 0 {
                        continue;
                    }
                    let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                    if qx >= nx || qy >= ny || qz >= nz {
                        continue;
                    }
                    let qj = quant[qx + nx * (qy + ny * qz)];
                    counts[qi * levels + qj] += 1.0;
                    counts[qj * levels + qi] += 1.0;
                    total += 2.0;
                }
            }
        }
    }
    if total == 0.0 {
        return Err(Error::Argument("no co-occurring pairs for offsets".into()));
    }
    for c in counts.iter_mut() {
        *c /= total;
    }

    let mut contrast = 0f64;
    let mut energy = 0f64;
    let mut homogeneity = 0f64;
    let mut entropy = 0f64;
    let mut marginal = vec![0f64; levels];
    for i in 0..levels {
        for j in 0..levels {
            let p = counts[i * levels + j];
            marginal[i] += p;
            if p == 0.0 {
                continue;
            }
            let d = i as f64 - j as f64;
            contrast += p * d * d;
            energy += p * p;
            homogeneity += p / (1.0 + d * d);
            entropy -= p * p.log2();
        }
    }
    // symmetric matrix: row and column marginals coincide
    let mu: f64 = marginal.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
    let var: f64 = marginal
        .iter()
        .enumerate()
        .map(|(i, p)| (i as f64 - mu) * (i as f64 - mu) * p)
        .sum();
    let correlation = if var > 1e-30 {
        let mut cov = 0f64;
        for i in 0..levels {
            for j in 0..levels {
                cov += (i as f64 - mu) * (j as f64 - mu) * counts[i * levels + j];
            }
        }
        cov / var
    } else {
        0.0
    };

    Ok([contrast, correlation, energy, homogeneity, entropy])
}

/// Volume, face-count surface area, sphericity, and max center-to-center
/// diameter of a component.
pub fn shape_features(c: &LesionComponent, spacing: [f32; 3]) -> Result<[f64; 4]> {
    if c.voxels.is_empty() {
        return Err(Error::Argument("shape features of empty component".into()));
    }
    let sp = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    let vox_mm3 = sp[0] * sp[1] * sp[2];
    let volume = c.voxel_count as f64 * vox_mm3;

    let member: HashSet<usize> = c.voxels.iter().copied().collect();
    let [nx, ny, nz] = c.grid;
    let face_area = [sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]];
    let mut surface = 0f64;
    let mut boundary = Vec::new();
    for &i in &c.voxels {
        let [x, y, z] = c.coord(i);
        let mut exposed = false;
        let neighbors: [(i64, i64, i64, usize); 6] = [
            (x as i64 - 1, y as i64, z as i64, 0),
            (x as i64 + 1, y as i64, z as i64, 0),
            (x as i64, y as i64 - 1, z as i64, 1),
            (x as i64, y as i64 + 1, z as i64, 1),
            (x as i64, y as i64, z as i64 - 1, 2),
            (x as i64, y as i64, z as i64 + 1, 2),
        ];
        for (qx, qy, qz, axis) in neighbors {
            let inside = qx >= 0
                && qy >= 0
                && qz >= 0
                && (qx as usize) < nx
                && (qy as usize) < ny
                && (qz as usize) < nz
                && member.contains(&((qx as usize) + nx * ((qy as usize) + ny * (qz as usize))));
            if !inside {
                surface += face_area[axis];
                exposed = true;
            }
        }
        if exposed {
            boundary.push([x, y, z]);
        }
    }

    let sphericity = std::f64::consts::PI.powf(1.0 / 3.0) * (6.0 * volume).powf(2.0 / 3.0) / surface;

    let mut diameter2 = 0f64;
    for (a, pa) in boundary.iter().enumerate() {
        for pb in &boundary[a + 1..] {
            let mut d2 = 0f64;
            for ax in 0..3 {
                let d = (pa[ax] as f64 - pb[ax] as f64) * sp[ax];
                d2 += d * d;
            }
            diameter2 = diameter2.max(d2);
        }
    }

    Ok([volume, surface, sphericity, diameter2.sqrt()])
}

fn neighborhood(v: &Volume, voxel: [usize; 3], radius: usize) -> (Vec<f32>, [usize; 3]) {
    let [nx, ny, nz] = v.shape();
    let r = radius as i64;
    let lo: [usize; 3] = std::array::from_fn(|a| (voxel[a] as i64 - r).max(0) as usize);
    let hi = [
        (voxel[0] + radius + 1).min(nx),
        (voxel[1] + radius + 1).min(ny),
        (voxel[2] + radius + 1).min(nz),
    ];
    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                out.push(v.get(x, y, z));
            }
        }
    }
    (out, dims)
}

fn voxel_row(
    v: &Volume,
    voxel: [usize; 3],
    radius: usize,
    shape_sub: &[f64; 4],
) -> Result<Vec<f64>> {
    let (nbhd, dims) = neighborhood(v, voxel, radius);
    let fo = first_order(&nbhd)?;
    let glcm = glcm_features(&nbhd, dims, GLCM_LEVELS, &default_offsets_3d())?;
    let center = v.get(voxel[0], voxel[1], voxel[2]) as f64;
    let (lo, hi) = (fo[6], fo[7]);
    let norm = if hi > lo { (center - lo) / (hi - lo) } else { 0.0 };

    let mut row = Vec::with_capacity(20);
    row.extend_from_slice(&fo);
    row.extend_from_slice(&glcm);
    row.extend_from_slice(shape_sub);
    row.push(norm);
    Ok(row)
}

/// Feature vectors for every voxel of one component, sharing the shape
/// sub-vector. Rows parallel `c.voxels`.
pub fn component_voxel_features(v: &Volume, m: &Mask, c: &LesionComponent) -> Result<Vec<Vec<f64>>> {
    if v.shape() != m.shape() {
        return Err(Error::Shape("volume/mask shape mismatch".into()));
    }
    let shape_sub = shape_features(c, m.spacing())?;
    c.voxels
        .iter()
        .map(|&i| voxel_row(v, c.coord(i), VOXEL_FEATURE_RADIUS, &shape_sub))
        .collect()
}

/// Feature vector of a single mask voxel (see [`feature_schema`]).
pub fn voxel_features(v: &Volume, m: &Mask, voxel: [usize; 3], radius: usize) -> Result<Vec<f64>> {
    if v.shape() != m.shape() {
        return Err(Error::Shape("volume/mask shape mismatch".into()));
    }
    if m.get(voxel[0], voxel[1], voxel[2]) != 1 {
        return Err(Error::Argument(format!("voxel {voxel:?} outside mask")));
    }
    let comps = connected_components(m, Connectivity::TwentySix);
    let flat = m.idx(voxel[0], voxel[1], voxel[2]);
    let parent = comps
        .iter()
        .find(|c| c.voxels.binary_search(&flat).is_ok())
        .expect("mask voxel belongs to a component");
    let shape_sub = shape_features(parent, m.spacing())?;
    voxel_row(v, voxel, radius, &shape_sub)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn to_csv(&self, labels: Option<&[u8]>) -> String {
        let mut out = self.names.join(",");
        if labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            if let Some(l) = labels {
                out.push_str(&format!(",{}", l[i]));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Leaf weight, already scaled by the learning rate.
    pub value: f64,
    pub leaf: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.leaf {
                return n.value;
            }
            i = if x[n.feature] < n.threshold { n.left } else { n.right };
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GBTModel {
    pub trees: Vec<Tree>,
    /// Prior log-odds of the positive class.
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    /// Total split gain per feature.
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GBTParams {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GBTParams {
    fn default() -> Self {
        GBTParams {
            trees: 50,
            max_depth: 3,
            learning_rate: 0.3,
            seed: 0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logistic_loss(margins: &[f64], y: &[u8]) -> f64 {
    let mut acc = 0f64;
    for (&m, &yi) in margins.iter().zip(y) {
        let p = sigmoid(m).clamp(1e-12, 1.0 - 1e-12);
        acc -= if yi == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    acc / y.len() as f64
}

struct SplitResult {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn best_split(
    rows: &[Vec<f64>],
    idx: &[usize],
    grad: &[f64],
    hess: &[f64],
) -> Option<SplitResult> {
    let n_features = rows[0].len();
    let gsum: f64 = idx.iter().map(|&i| grad[i]).sum();
    let hsum: f64 = idx.iter().map(|&i| hess[i]).sum();
    let parent = gsum * gsum / (hsum + GBT_LAMBDA);

    let mut best: Option<SplitResult> = None;
    for f in 0..n_features {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| rows[a][f].partial_cmp(&rows[b][f]).unwrap().then(a.cmp(&b)));
        let mut gl = 0f64;
        let mut hl = 0f64;
        for pos in 0..order.len() - 1 {
            let i = order[pos];
            gl += grad[i];
            hl += hess[i];
            let (va, vb) = (rows[i][f], rows[order[pos + 1]][f]);
            if va == vb {
                continue;
            }
            let gr = gsum - gl;
            let hr = hsum - hl;
            let gain = 0.5
                * (gl * gl / (hl + GBT_LAMBDA) + gr * gr / (hr + GBT_LAMBDA) - parent);
            if gain > best.as_ref().map_or(1e-12, |b| b.gain) {
                best = Some(SplitResult {
                    feature: f,
                    threshold: (va + vb) / 2.0,
                    gain,
                    left: order[..=pos].to_vec(),
                    right: order[pos + 1..].to_vec(),
                });
            }
        }
    }
    best
}

fn build_node(
    rows: &[Vec<f64>],
    idx: Vec<usize>,
    grad: &[f64],
    hess: &[f64],
    depth: usize,
    max_depth: usize,
    lr: f64,
    nodes: &mut Vec<TreeNode>,
    importance: &mut [f64],
) -> usize {
    let leaf = |nodes: &mut Vec<TreeNode>, idx: &[usize]| -> usize {
        let g: f64 = idx.iter().map(|&i| grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| hess[i]).sum();
        nodes.push(TreeNode {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            value: lr * (-g / (h + GBT_LAMBDA)),
            leaf: true,
        });
        nodes.len() - 1
    };
    if depth >= max_depth || idx.len() < 2 {
        return leaf(nodes, &idx);
    }
    match best_split(rows, &idx, grad, hess) {
        None => leaf(nodes, &idx),
        Some(s) => {
            importance[s.feature] += s.gain;
            let id = nodes.len();
            nodes.push(TreeNode {
                feature: s.feature,
                threshold: s.threshold,
                left: 0,
                right: 0,
                value: 0.0,
                leaf: false,
            });
            let l = build_node(rows, s.left, grad, hess, depth + 1, max_depth, lr, nodes, importance);
            let r = build_node(rows, s.right, grad, hess, depth + 1, max_depth, lr, nodes, importance);
            nodes[id].left = l;
            nodes[id].right = r;
            id
        }
    }
}

/// Gradient boosting on logistic loss with exact greedy splits. Ties are
/// broken toward the lower feature index (schema order). Returns the model
/// and the per-round training loss (length trees + 1, starting at the
/// prior); the trace is non-increasing.
pub fn train_gbt(
    table: &FeatureTable,
    y: &[u8],
    params: &GBTParams,
) -> Result<(GBTModel, Vec<f64>)> {
    let rows = &table.rows;
    if rows.len() < 2 || rows.len() != y.len() {
        return Err(Error::Dataset(format!(
            "need >= 2 labeled rows, got {} rows / {} labels",
            rows.len(),
            y.len()
        )));
    }
    let n_features = rows[0].len();
    if n_features != table.names.len() || rows.iter().any(|r| r.len() != n_features) {
        return Err(Error::Schema("ragged feature rows".into()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Dataset("training labels contain a single class".into()));
    }

    let p0 = (pos as f64 / y.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (p0 / (1.0 - p0)).ln();
    let mut margins = vec![base_score; y.len()];
    let mut importance = vec![0f64; n_features];
    let mut trees = Vec::with_capacity(params.trees);
    let mut trace = vec![logistic_loss(&margins, y)];

    for _ in 0..params.trees {
        let mut grad = vec![0f64; y.len()];
        let mut hess = vec![0f64; y.len()];
        for i in 0..y.len() {
            let p = sigmoid(margins[i]);
            grad[i] = p - y[i] as f64;
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let mut nodes = Vec::new();
        build_node(
            rows,
            (0..rows.len()).collect(),
            &grad,
            &hess,
            0,
            params.max_depth,
            params.learning_rate,
            &mut nodes,
            &mut importance,
        );
        let tree = Tree { nodes };
        for (i, row) in rows.iter().enumerate() {
            margins[i] += tree.eval(row);
        }
        trees.push(tree);
        trace.push(logistic_loss(&margins, y));
    }

    Ok((
        GBTModel {
            trees,
            base_score,
            learning_rate: params.learning_rate,
            feature_names: table.names.clone(),
            importance,
        },
        trace,
    ))
}

pub fn predict_gbt(model: &GBTModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.feature_names.len() {
        return Err(Error::Schema(format!(
            "feature vector length {} does not match schema length {}",
            x.len(),
            model.feature_names.len()
        )));
    }
    let margin: f64 = model.base_score + model.trees.iter().map(|t| t.eval(x)).sum::<f64>();
    Ok(sigmoid(margin))
}

/// Names of the k most important features by total gain; ties keep schema
/// order.
pub fn select_top_k(model: &GBTModel, k: usize) -> Result<Vec<String>> {
    if k > model.feature_names.len() {
        return Err(Error::Argument(format!(
            "k = {k} exceeds {} features",
            model.feature_names.len()
        )));
    }
    let mut order: Vec<usize> = (0..model.feature_names.len()).collect();
    order.sort_by(|&a, &b| {
        model.importance[b]
            .partial_cmp(&model.importance[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(order[..k]
        .iter()
        .map(|&i| model.feature_names[i].clone())
        .collect())
}

impl VoxelClassifier for GBTModel {
    fn keep_probability(&self, features: &[f64]) -> Result<f64> {
        predict_gbt(self, features)
    }
}
