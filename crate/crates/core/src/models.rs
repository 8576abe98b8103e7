//! Network builders and sliding-window inference.
//!
//! Three architectures at configurable scale: a 3D U-Net, a 3D U-Net++
//! (nested skip pathways, no deep supervision), and a 2D DenseNet
//! classifier. All convolution stacks use instance norm and leaky relu
//! (slope 0.01). Segmentation nets end in a two-channel softmax
//! (background, lesion).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Tensor;
use crate::volume::Volume;

pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of pooling steps; the encoder has `depth + 1` levels.
    pub depth: usize,
    pub classes: usize,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.classes < 2 {
            return Err(Error::Argument(
                "unet spec needs in_channels >= 1, base_width >= 1, classes >= 2".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::Argument("unet depth must be >= 1".into()));
        }
        Ok(())
    }
}

pub type UNetPPSpec = UNetSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNetSpec {
    pub growth: usize,
    pub layers_per_block: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl DenseNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.growth == 0 || self.layers_per_block == 0 || self.blocks == 0 || self.classes < 2 {
            return Err(Error::Argument(
                "densenet spec needs growth, layers, blocks >= 1 and classes >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// conv(k3, p1) + instance norm + leaky relu, twice.
fn double_conv3d(
    g: &mut Graph,
    x: NodeId,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let c1 = g.conv3d(x, &format!("{name}.c1"), cin, cout, 3, 1, 1, rng)?;
    let n1 = g.instance_norm(c1, &format!("{name}.n1"), cout)?;
    let a1 = g.leaky_relu(n1, LEAKY_SLOPE);
    let c2 = g.conv3d(a1, &format!("{name}.c2"), cout, cout, 3, 1, 1, rng)?;
    let n2 = g.instance_norm(c2, &format!("{name}.n2"), cout)?;
    Ok(g.leaky_relu(n2, LEAKY_SLOPE))
}

fn width(base: usize, level: usize) -> usize {
    base << level
}

/// Encoder-decoder U-Net with skip connections. Channel width doubles per
/// pooling; the decoder mirrors the encoder with transposed convolutions.
pub fn build_unet3d(spec: &UNetSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.input("x");

    let mut skips = Vec::with_capacity(spec.depth + 1);
    let mut cur = x;
    let mut cin = spec.in_channels;
    for i in 0..=spec.depth {
        if i > 0 {
            cur = g.maxpool(cur, 2, 2);
        }
        let w = width(spec.base_width, i);
        cur = double_conv3d(&mut g, cur, &format!("enc{i}"), cin, w, &mut rng)?;
        skips.push(cur);
        cin = w;
    }

    for i in (0..spec.depth).rev() {
        let w = width(spec.base_width, i);
        let up = g.tconv3d(cur, &format!("up{i}"), width(spec.base_width, i + 1), w, 2, 2, &mut rng)?;
        let cat = g.concat_channels(&[skips[i], up]);
        cur = double_conv3d(&mut g, cat, &format!("dec{i}"), 2 * w, w, &mut rng)?;
    }

    let head = g.conv3d(cur, "head", spec.base_width, spec.classes, 1, 1, 0, &mut rng)?;
    let out = g.softmax_channels(head);
    g.set_output(out);
    Ok(g)
}

/// Nested U-Net: grid nodes X(i,j) for i + j <= depth. X(i,0) is the plain
/// encoder; X(i,j) consumes the concat of X(i,0..j-1) and the upsampled
/// X(i+1,j-1). The head sits on X(0,depth) only.
pub fn build_unetpp3d(spec: &UNetPPSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.input("x");

    let d = spec.depth;
    // grid[i][j] holds X(i,j); backbone column j = 0 first.
    let mut grid: Vec<Vec<NodeId>> = vec![Vec::new(); d + 1];
    let mut cur = x;
    let mut cin = spec.in_channels;
    for i in 0..=d {
        if i > 0 {
            cur = g.maxpool(cur, 2, 2);
        }
        let w = width(spec.base_width, i);
        cur = double_conv3d(&mut g, cur, &format!("x{i}_0"), cin, w, &mut rng)?;
        grid[i].push(cur);
        cin = w;
    }

    for j in 1..=d {
        for i in 0..=(d - j) {
            let w = width(spec.base_width, i);
            let below = grid[i + 1][j - 1];
            let up = g.tconv3d(
                below,
                &format!("up{i}_{j}"),
                width(spec.base_width, i + 1),
                w,
                2,
                2,
                &mut rng,
            )?;
            let mut parts: Vec<NodeId> = grid[i][..j].to_vec();
            parts.push(up);
            let cat = g.concat_channels(&parts);
            let node = double_conv3d(&mut g, cat, &format!("x{i}_{j}"), (j + 1) * w, w, &mut rng)?;
            grid[i].push(node);
        }
    }

    let head = g.conv3d(grid[0][d], "head", spec.base_width, spec.classes, 1, 1, 0, &mut rng)?;
    let out = g.softmax_channels(head);
    g.set_output(out);
    Ok(g)
}

/// 2D DenseNet classifier: stem, dense blocks separated by transition
/// layers (1x1 conv halving channels + 2x2 average pool), global average
/// pool, linear head, softmax.
pub fn build_densenet2d(spec: &DenseNetSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.input("x");

    let mut channels = 2 * spec.growth;
    let stem = g.conv2d(x, "stem", 1, channels, 3, 1, 1, &mut rng)?;
    let sn = g.instance_norm(stem, "stem.n", channels)?;
    let mut cur = g.leaky_relu(sn, LEAKY_SLOPE);

    for b in 0..spec.blocks {
        let mut features = vec![cur];
        for l in 0..spec.layers_per_block {
            let cat = if features.len() == 1 {
                features[0]
            } else {
                g.concat_channels(&features)
            };
            let cin = channels + l * spec.growth;
            let name = format!("b{b}.l{l}");
            let c = g.conv2d(cat, &format!("{name}.c"), cin, spec.growth, 3, 1, 1, &mut rng)?;
            let n = g.instance_norm(c, &format!("{name}.n"), spec.growth)?;
            let a = g.leaky_relu(n, LEAKY_SLOPE);
            features.push(a);
        }
        channels += spec.layers_per_block * spec.growth;
        let block_out = g.concat_channels(&features);
        let tc = g.conv2d(block_out, &format!("t{b}.c"), channels, channels / 2, 1, 1, 0, &mut rng)?;
        channels /= 2;
        cur = g.avgpool(tc, 2, 2);
    }

    let gap = g.global_avg_pool(cur);
    let logits = g.dense(gap, "fc", channels, spec.classes, &mut rng)?;
    let out = g.softmax_channels(logits);
    g.set_output(out);
    Ok(g)
}

pub fn count_params(g: &Graph) -> usize {
    g.params().iter().map(|p| p.value.numel()).sum()
}

/// Append a Dice+CE loss head to a segmentation graph, adding a target
/// input named `t`. Returns the loss node, now the graph output.
pub fn attach_dice_ce(g: &mut Graph, dice_weight: f32, ce_weight: f32) -> NodeId {
    let probs = g.output().expect("graph has an output");
    let t = g.input("t");
    let loss = g.dice_ce(probs, t, dice_weight, ce_weight);
    g.set_output(loss);
    loss
}

// symmetric reflection with the edge included; defined even for n = 1
fn reflect_index(i: usize, n: usize) -> usize {
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn window_starts(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let step = ((patch as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + patch >= n {
            starts.push(n - patch);
            break;
        }
        starts.push(s);
        s += step;
    }
    starts
}

/// Sliding-window probability inference. Returns the lesion-channel
/// probability map aligned voxel-for-voxel with `v`; volumes smaller than
/// the patch are reflect-padded and the output is cropped back.
pub fn predict_probability(g: &Graph, v: &Volume, patch: [usize; 3], overlap: f64) -> Result<Volume> {
    if patch.iter().any(|&p| p == 0) {
        return Err(Error::Argument("patch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Argument(format!(
            "overlap must be in [0, 1), got {overlap}"
        )));
    }
    let [nx, ny, nz] = v.shape();
    // Tensor spatial order is (z, y, x).
    let vol_dims = [nz, ny, nx];
    let patch_zyx = [patch[2], patch[1], patch[0]];
    let padded: [usize; 3] = std::array::from_fn(|a| vol_dims[a].max(patch_zyx[a]));

    let mut data = vec![0f32; padded.iter().product()];
    for z in 0..padded[0] {
        let sz = reflect_index(z, nz);
        for y in 0..padded[1] {
            let sy = reflect_index(y, ny);
            for x in 0..padded[2] {
                let sx = reflect_index(x, nx);
                data[(z * padded[1] + y) * padded[2] + x] = v.get(sx, sy, sz);
            }
        }
    }

    let mut acc = vec![0f64; data.len()];
    let mut hits = vec![0u32; data.len()];
    let starts: [Vec<usize>; 3] =
        std::array::from_fn(|a| window_starts(padded[a], patch_zyx[a], overlap));

    let psp: usize = patch_zyx.iter().product();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let mut win = vec![0f32; psp];
                for z in 0..patch_zyx[0] {
                    for y in 0..patch_zyx[1] {
                        let src = ((z0 + z) * padded[1] + (y0 + y)) * padded[2] + x0;
                        let dst = (z * patch_zyx[1] + y) * patch_zyx[2];
                        win[dst..dst + patch_zyx[2]]
                            .copy_from_slice(&data[src..src + patch_zyx[2]]);
                    }
                }
                let t = Tensor::new(
                    vec![1, 1, patch_zyx[0], patch_zyx[1], patch_zyx[2]],
                    win,
                )?;
                let feeds = std::iter::once(("x".to_string(), t)).collect();
                let probs = g.forward_value(&feeds)?;
                if probs.rank() != 5 || probs.shape()[1] < 2 {
                    return Err(Error::Shape(format!(
                        "expected (1, C>=2, z, y, x) output, got {:?}",
                        probs.shape()
                    )));
                }
                let sp = probs.spatial_len();
                let lesion = &probs.data()[sp..2 * sp];
                for z in 0..patch_zyx[0] {
                    for y in 0..patch_zyx[1] {
                        for x in 0..patch_zyx[2] {
                            let dst = ((z0 + z) * padded[1] + (y0 + y)) * padded[2] + (x0 + x);
                            acc[dst] += lesion[(z * patch_zyx[1] + y) * patch_zyx[2] + x] as f64;
                            hits[dst] += 1;
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![0f32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let src = (z * padded[1] + y) * padded[2] + x;
                out[x + nx * (y + ny * z)] = (acc[src] / hits[src] as f64) as f32;
            }
        }
    }
    let mut result = Volume::new(v.shape(), v.spacing(), out)?;
    result.set_origin(v.origin());
    result.set_orientation(v.orientation().clone());
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn conv3d_params(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k * k + cout
    }

    fn double_conv_params(cin: usize, cout: usize) -> usize {
        conv3d_params(cin, cout, 3) + 2 * cout + conv3d_params(cout, cout, 3) + 2 * cout
    }

    fn tconv_params(cin: usize, cout: usize) -> usize {
        cin * cout * 8 + cout
    }

    #[test]
    fn unet_output_shape_and_softmax() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 4,
            depth: 2,
            classes: 2,
        };
        let g = build_unet3d(&spec, 1).unwrap();
        let n = 8 * 8 * 8;
        let x = Tensor::new(vec![1, 1, 8, 8, 8], (0..n).map(|i| (i as f32 * 0.13).sin()).collect())
            .unwrap();
        let feeds: HashMap<String, Tensor> = std::iter::once(("x".to_string(), x)).collect();
        let out = g.forward_value(&feeds).unwrap();
        assert_eq!(out.shape(), &[1, 2, 8, 8, 8]);
        let sp = out.spatial_len();
        for pos in 0..sp {
            let s = out.data()[pos] + out.data()[sp + pos];
            assert!((s - 1.0).abs() < 1e-5, "channel sum {s} at {pos}");
        }
    }

    #[test]
    fn unet_param_count_matches_closed_form() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 8,
            depth: 3,
            classes: 2,
        };
        let g = build_unet3d(&spec, 0).unwrap();
        let w = [8usize, 16, 32, 64];
        let mut expect = 0;
        expect += double_conv_params(1, w[0]);
        for i in 1..=3 {
            expect += double_conv_params(w[i - 1], w[i]);
        }
        for i in (0..3).rev() {
            expect += tconv_params(w[i + 1], w[i]);
            expect += double_conv_params(2 * w[i], w[i]);
        }
        expect += 2 * 8 * 1 + 2;
        assert_eq!(count_params(&g), expect);
    }

    #[test]
    fn unet_rejects_indivisible_input_at_forward() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 2,
            depth: 3,
            classes: 2,
        };
        let g = build_unet3d(&spec, 0).unwrap();
        let n = 30 * 30 * 30;
        let x = Tensor::new(vec![1, 1, 30, 30, 30], vec![0.1; n]).unwrap();
        let feeds: HashMap<String, Tensor> = std::iter::once(("x".to_string(), x)).collect();
        assert!(matches!(g.forward(&feeds), Err(Error::Shape(_))));
    }

    #[test]
    fn unetpp_shape_and_more_params_than_unet() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 4,
            depth: 2,
            classes: 2,
        };
        let unet = build_unet3d(&spec, 0).unwrap();
        let unetpp = build_unetpp3d(&spec, 0).unwrap();
        assert!(count_params(&unetpp) > count_params(&unet));

        let n = 8 * 8 * 8;
        let x = Tensor::new(vec![1, 1, 8, 8, 8], (0..n).map(|i| (i as f32 * 0.07).cos()).collect())
            .unwrap();
        let feeds: HashMap<String, Tensor> = std::iter::once(("x".to_string(), x)).collect();
        let out = unetpp.forward_value(&feeds).unwrap();
        assert_eq!(out.shape(), &[1, 2, 8, 8, 8]);
    }

    #[test]
    fn unetpp_depth1_isomorphic_to_unet() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 4,
            depth: 1,
            classes: 2,
        };
        let a = build_unet3d(&spec, 7).unwrap();
        let b = build_unetpp3d(&spec, 7).unwrap();
        assert_eq!(a.nodes().len(), b.nodes().len());
        for (na, nb) in a.nodes().iter().zip(b.nodes()) {
            let ka = std::mem::discriminant(&na.op);
            let kb = std::mem::discriminant(&nb.op);
            assert_eq!(ka, kb);
            assert_eq!(na.inputs.len(), nb.inputs.len());
            assert_eq!(na.params.len(), nb.params.len());
        }
        let shapes = |g: &Graph| -> Vec<Vec<usize>> {
            g.params().iter().map(|p| p.value.shape().to_vec()).collect()
        };
        assert_eq!(shapes(&a), shapes(&b));
    }

    #[test]
    fn densenet_channel_trace() {
        let spec = DenseNetSpec {
            growth: 4,
            layers_per_block: 2,
            blocks: 1,
            classes: 2,
        };
        let g = build_densenet2d(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| (i as f32 * 0.1).sin()).collect())
            .unwrap();
        let feeds: HashMap<String, Tensor> = std::iter::once(("x".to_string(), x)).collect();
        let tape = g.forward(&feeds).unwrap();
        // stem 8 channels, block concat 8 + 2*4 = 16, transition 8 at 4x4
        let shapes: Vec<Vec<usize>> = tape.values.iter().map(|t| t.shape().to_vec()).collect();
        assert!(shapes.contains(&vec![1, 8, 8, 8]));
        assert!(shapes.contains(&vec![1, 16, 8, 8]));
        assert!(shapes.contains(&vec![1, 8, 4, 4]));
        let out = tape.values.last().unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!((out.data()[0] + out.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn densenet_block_concat_arithmetic() {
        let spec = DenseNetSpec {
            growth: 3,
            layers_per_block: 4,
            blocks: 2,
            classes: 2,
        };
        let g = build_densenet2d(&spec, 1).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], vec![0.2; 2 * 64]).unwrap();
        let feeds: HashMap<String, Tensor> = std::iter::once(("x".to_string(), x)).collect();
        let tape = g.forward(&feeds).unwrap();
        let shapes: Vec<Vec<usize>> = tape.values.iter().map(|t| t.shape().to_vec()).collect();
        // stem 6; block1 6+12=18 -> trans 9 at 4x4; block2 9+12=21 -> trans 10 at 2x2
        assert!(shapes.contains(&vec![2, 18, 8, 8]));
        assert!(shapes.contains(&vec![2, 9, 4, 4]));
        assert!(shapes.contains(&vec![2, 21, 4, 4]));
        assert!(shapes.contains(&vec![2, 10, 2, 2]));
        assert_eq!(tape.values.last().unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn builders_pass_micro_gradient_check() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 2,
            depth: 1,
            classes: 2,
        };
        let n = 4 * 4 * 4;
        let img: Vec<f32> = (0..n).map(|i| ((i as f32 * 0.41).sin()) + 0.02).collect();
        let tgt: Vec<f32> = (0..n).map(|i| f32::from(i % 7 == 0)).collect();

        for build in [build_unet3d, build_unetpp3d] {
            let mut g = build(&spec, 13).unwrap();
            attach_dice_ce(&mut g, 1.0, 1.0);
            let feeds: HashMap<String, Tensor> = [
                ("x".to_string(), Tensor::new(vec![1, 1, 4, 4, 4], img.clone()).unwrap()),
                ("t".to_string(), Tensor::new(vec![1, 4, 4, 4], tgt.clone()).unwrap()),
            ]
            .into_iter()
            .collect();
            let err = g.gradient_check(&feeds, 1e-3, 3).unwrap();
            assert!(err <= 1e-2, "seg builder gradient check error {err}");
        }

        let dspec = DenseNetSpec {
            growth: 2,
            layers_per_block: 1,
            blocks: 1,
            classes: 2,
        };
        let mut g = build_densenet2d(&dspec, 5).unwrap();
        attach_dice_ce(&mut g, 0.0, 1.0);
        let feeds: HashMap<String, Tensor> = [
            (
                "x".to_string(),
                Tensor::new(vec![2, 1, 6, 6], (0..72).map(|i| (i as f32 * 0.23).cos()).collect())
                    .unwrap(),
            ),
            ("t".to_string(), Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()),
        ]
        .into_iter()
        .collect();
        let err = g.gradient_check(&feeds, 1e-3, 17).unwrap();
        assert!(err <= 1e-2, "densenet gradient check error {err}");
    }

    /// Zero-weight conv head gives a constant 0.5 map; windowed averaging
    /// must reproduce it exactly and respect bounds.
    fn constant_half_net() -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.conv3d(x, "c", 1, 2, 1, 1, 0, &mut rng).unwrap();
        g.set_param_data("c.w", &[0.0, 0.0]).unwrap();
        let s = g.softmax_channels(c);
        g.set_output(s);
        g
    }

    #[test]
    fn predict_constant_net_is_constant() {
        let g = constant_half_net();
        let v = Volume::new(
            [10, 9, 8],
            [1.0, 1.0, 1.0],
            (0..720).map(|i| (i as f32 * 0.3).sin()).collect(),
        )
        .unwrap();
        let p = predict_probability(&g, &v, [4, 4, 4], 0.5).unwrap();
        assert_eq!(p.shape(), v.shape());
        for &x in p.data() {
            assert!((x - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_pads_small_volume() {
        let g = constant_half_net();
        let v = Volume::new([3, 5, 2], [1.0, 1.0, 1.0], vec![1.0; 30]).unwrap();
        let p = predict_probability(&g, &v, [8, 8, 8], 0.5).unwrap();
        assert_eq!(p.shape(), [3, 5, 2]);
    }

    #[test]
    fn predict_probabilities_in_bounds() {
        let spec = UNetSpec {
            in_channels: 1,
            base_width: 2,
            depth: 1,
            classes: 2,
        };
        let g = build_unet3d(&spec, 3).unwrap();
        let v = Volume::new(
            [12, 12, 12],
            [1.0, 1.0, 1.0],
            (0..1728).map(|i| (i as f32 * 0.17).sin() * 2.0).collect(),
        )
        .unwrap();
        let p = predict_probability(&g, &v, [8, 8, 8], 0.5).unwrap();
        for &x in p.data() {
            assert!((0.0..=1.0).contains(&x), "probability {x} out of range");
        }
    }

    #[test]
    fn window_starts_cover_and_clamp() {
        let s = window_starts(20, 8, 0.5);
        assert_eq!(s.first(), Some(&0));
        assert_eq!(s.last(), Some(&12));
        for w in s.windows(2) {
            assert!(w[1] > w[0]);
            assert!(w[1] - w[0] <= 8, "gap would leave voxels uncovered");
        }
        assert_eq!(window_starts(8, 8, 0.5), vec![0]);
        assert_eq!(window_starts(4, 8, 0.5), vec![0]);
    }

    #[test]
    fn flip_equivariance_with_symmetric_kernel() {
        // Kernel symmetric under x-flip: conv then softmax commutes with
        // flipping the volume along x.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.input("x");
        let c = g.conv3d(x, "c", 1, 2, 3, 1, 1, &mut rng).unwrap();
        let w: Vec<f32> = (0..54)
            .map(|i| {
                let k = i % 27;
                let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
                let d = (kz as i32 - 1).abs() + (ky as i32 - 1).abs() + (kx as i32 - 1).abs();
                (0.3 - 0.1 * d as f32) * if i < 27 { 1.0 } else { -1.0 }
            })
            .collect();
        g.set_param_data("c.w", &w).unwrap();
        let s = g.softmax_channels(c);
        g.set_output(s);

        let v = Volume::new(
            [6, 6, 6],
            [1.0, 1.0, 1.0],
            (0..216).map(|i| (i as f32 * 0.19).sin()).collect(),
        )
        .unwrap();
        let mut flipped = v.clone();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let val = v.get(5 - x, y, z);
                    flipped.data_mut()[x + 6 * (y + 6 * z)] = val;
                }
            }
        }
        let p = predict_probability(&g, &v, [6, 6, 6], 0.5).unwrap();
        let pf = predict_probability(&g, &flipped, [6, 6, 6], 0.5).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let a = p.get(5 - x, y, z);
                    let b = pf.get(x, y, z);
                    assert!((a - b).abs() < 1e-5, "flip equivariance broken at {x},{y},{z}");
                }
            }
        }
    }
}
