//! Challenge metrics, paired statistics, size correlation, error heatmaps,
//! and the result manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{crop_to_foreground, Mask, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub dice: f64,
    pub gt_has_lesion: bool,
    pub pred_has_lesion: bool,
    pub gt_volume_mm3: f64,
    pub pred_volume_mm3: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumStat {
    pub n: usize,
    pub mean: f64,
    /// Sample (n-1) standard deviation; 0 when n == 1.
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub dsc_lesion: Option<StratumStat>,
    pub dsc_no_lesion: Option<StratumStat>,
    pub overall: StratumStat,
}

/// 2|P∩G| / (|P|+|G|); both empty → 1, exactly one empty → 0.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "dice of {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        total += (p + g) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Assemble a [`CaseResult`] from a final mask and ground truth.
pub fn case_result(case_id: &str, pred: &Mask, gt: &Mask) -> Result<CaseResult> {
    Ok(CaseResult {
        case_id: case_id.to_string(),
        dice: dice(pred, gt)?,
        gt_has_lesion: !gt.is_empty_mask(),
        pred_has_lesion: !pred.is_empty_mask(),
        gt_volume_mm3: gt.volume_mm3(),
        pred_volume_mm3: pred.volume_mm3(),
    })
}

/// Fraction of cases whose lesion-presence call matches the ground truth.
pub fn subject_accuracy(results: &[CaseResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Argument("no case results".into()));
    }
    let correct = results
        .iter()
        .filter(|r| r.pred_has_lesion == r.gt_has_lesion)
        .count();
    Ok(correct as f64 / results.len() as f64)
}

fn mean_sd_sample(xs: &[f64]) -> StratumStat {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    StratumStat { n, mean, sd }
}

/// DSC stratified by ground-truth lesion presence, plus subject accuracy.
pub fn stratified_dsc(results: &[CaseResult]) -> Result<ChallengeMetrics> {
    if results.is_empty() {
        return Err(Error::Argument("no case results".into()));
    }
    let lesion: Vec<f64> = results
        .iter()
        .filter(|r| r.gt_has_lesion)
        .map(|r| r.dice)
        .collect();
    let no_lesion: Vec<f64> = results
        .iter()
        .filter(|r| !r.gt_has_lesion)
        .map(|r| r.dice)
        .collect();
    let all: Vec<f64> = results.iter().map(|r| r.dice).collect();
    Ok(ChallengeMetrics {
        n: results.len(),
        accuracy: subject_accuracy(results)?,
        dsc_lesion: (!lesion.is_empty()).then(|| mean_sd_sample(&lesion)),
        dsc_no_lesion: (!no_lesion.is_empty()).then(|| mean_sd_sample(&no_lesion)),
        overall: mean_sd_sample(&all),
    })
}

// Lanczos approximation (g = 7, 9 coefficients).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

// Continued fraction for the regularized incomplete beta (Lentz's method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b), |error| well under 1e-8.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-tailed paired t-test: t = mean(d) / (sd(d)/sqrt(n)), df = n-1.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired samples of different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Argument("need at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    if var <= 1e-300 {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let p = incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTestResult {
        t,
        p,
        df: n - 1,
    })
}

/// Pearson correlation between log10(volume) and dice.
pub fn pearson_log_size(volumes_mm3: &[f64], dices: &[f64]) -> Result<f64> {
    if volumes_mm3.len() != dices.len() {
        return Err(Error::Argument("length mismatch".into()));
    }
    if volumes_mm3.len() < 2 {
        return Err(Error::Argument("need at least 2 points".into()));
    }
    if volumes_mm3.iter().any(|&v| v <= 0.0) {
        return Err(Error::Argument("volumes must be positive for log".into()));
    }
    let xs: Vec<f64> = volumes_mm3.iter().map(|v| v.log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = dices.iter().sum::<f64>() / n;
    let mut sxy = 0f64;
    let mut sxx = 0f64;
    let mut syy = 0f64;
    for (x, y) in xs.iter().zip(dices) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return Err(Error::Degenerate(
            "zero variance in log volume or dice".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// FP/FN case-count heatmaps on a common normalized grid. Each case's
/// error voxels scatter (nearest cell) into the grid normalized to that
/// case's foreground bounding box; a case contributes at most 1 per cell.
pub fn error_heatmap(
    cases: &[(&Mask, &Mask, &Volume)],
    grid: [usize; 3],
) -> Result<(Volume, Volume)> {
    if cases.is_empty() {
        return Err(Error::Argument("no cases".into()));
    }
    if grid.iter().any(|&g| g == 0) {
        return Err(Error::Argument("grid dims must be positive".into()));
    }
    let n = grid[0] * grid[1] * grid[2];
    let mut fp_counts = vec![0f32; n];
    let mut fn_counts = vec![0f32; n];
    for (pred, gt, vol) in cases {
        if pred.shape() != gt.shape() || pred.shape() != vol.shape() {
            return Err(Error::Shape("case shapes disagree".into()));
        }
        let (_, bbox) = crop_to_foreground(vol, 0.0);
        let extent: [f64; 3] =
            std::array::from_fn(|a| (bbox.upper[a] - bbox.lower[a]) as f64);
        let mut fp_cells = std::collections::HashSet::new();
        let mut fn_cells = std::collections::HashSet::new();
        let [nx, ny, nz] = pred.shape();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = pred.get(x, y, z);
                    let g = gt.get(x, y, z);
                    if p == g {
                        continue;
                    }
                    let c = [x, y, z];
                    let cell_idx: [usize; 3] = std::array::from_fn(|a| {
                        let u = (c[a] as f64 + 0.5 - bbox.lower[a] as f64) / extent[a];
                        ((u * grid[a] as f64).floor() as i64).clamp(0, grid[a] as i64 - 1)
                            as usize
                    });
                    let flat = cell_idx[0] + grid[0] * (cell_idx[1] + grid[1] * cell_idx[2]);
                    if p == 1 {
                        fp_cells.insert(flat);
                    } else {
                        fn_cells.insert(flat);
                    }
                }
            }
        }
        for i in fp_cells {
            fp_counts[i] += 1.0;
        }
        for i in fn_cells {
            fn_counts[i] += 1.0;
        }
    }
    Ok((
        Volume::new(grid, [1.0; 3], fp_counts)?,
        Volume::new(grid, [1.0; 3], fn_counts)?,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub has_lesion: bool,
}

/// Case index for a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<ManifestCase>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Results table mirroring the challenge layout: one row per labeled
/// setting.
pub fn metrics_to_csv(rows: &[(String, ChallengeMetrics)]) -> String {
    let mut out = String::from(
        "setting,n,accuracy,dsc_lesion_mean,dsc_lesion_sd,dsc_no_lesion_mean,dsc_no_lesion_sd,overall_mean,overall_sd\n",
    );
    let stratum = |s: &Option<StratumStat>| match s {
        Some(v) => format!("{},{}", v.mean, v.sd),
        None => ",".to_string(),
    };
    for (label, m) in rows {
        out.push_str(&format!(
            "{label},{},{},{},{},{},{}\n",
            m.n,
            m.accuracy,
            stratum(&m.dsc_lesion),
            stratum(&m.dsc_no_lesion),
            m.overall.mean,
            m.overall.sd
        ));
    }
    out
}
