//! Cohort evaluation mathematics: Dice and Hausdorff overlap, label error
//! frequency maps, streaming mean/std aggregation, voxel-wise correlation
//! maps, paired Wilcoxon signed-rank testing, Bonferroni correction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::volgrid::{check_same_grid, GridMeta, LabelVolume, ScalarVolume};
use crate::{Error, Result};

/// Dice overlap `2|A n B| / (|A| + |B|)` of one label between two volumes on
/// the same grid; `None` when the label is absent from both.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<Option<f64>> {
    check_same_grid(&a.meta, &b.meta, "dice inputs")?;
    let mut na = 0u64;
    let mut nb = 0u64;
    let mut inter = 0u64;
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        let ia = la == label;
        let ib = lb == label;
        na += ia as u64;
        nb += ib as u64;
        inter += (ia && ib) as u64;
    }
    if na + nb == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * inter as f64 / (na + nb) as f64))
}

const EDT_INF: f64 = 1e30;

/// 1D squared-distance transform (lower envelope of parabolas) with sample
/// positions `i * step`. Heights are finite (`EDT_INF` marks "no seed"), so
/// intersections are always finite and the envelope never underflows past
/// the -inf sentinel.
fn edt_1d(f: &[f64], step: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let x = |i: usize| i as f64 * step;
    let intersect = |q: usize, p: usize| -> f64 {
        ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p))
    };
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let dx = x(q) - x(v[k]);
        d[q] = dx * dx + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm^2) to the nearest voxel with the
/// given label, computed by the separable parabola transform.
fn squared_distance_map(vol: &LabelVolume, label: u16) -> Vec<f64> {
    let meta = &vol.meta;
    let [nx, ny, nz] = meta.dims;
    let mut dist: Vec<f64> = vol
        .labels()
        .iter()
        .map(|&l| if l == label { 0.0 } else { EDT_INF })
        .collect();

    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0f64; max_n];
    let mut out = vec![0f64; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0f64; max_n + 1];

    for (axis, stride, la, lb, sa, sb) in [
        (0usize, 1usize, ny, nz, nx, nx * ny),
        (1, nx, nx, nz, 1, nx * ny),
        (2, nx * ny, nx, ny, 1, nx),
    ] {
        let n = meta.dims[axis];
        if n < 2 {
            continue;
        }
        let step = meta.spacing[axis];
        for b in 0..lb {
            for a in 0..la {
                let base = a * sa + b * sb;
                for i in 0..n {
                    line[i] = dist[base + i * stride];
                }
                edt_1d(&line[..n], step, &mut out[..n], &mut v, &mut z);
                for i in 0..n {
                    dist[base + i * stride] = out[i];
                }
            }
        }
    }
    dist
}

/// Symmetric Hausdorff distance (mm) between the voxel sets carrying `label`
/// in the two volumes: the max of the two directed farthest-nearest
/// distances. Errors when either set is empty.
pub fn hausdorff(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    check_same_grid(&a.meta, &b.meta, "hausdorff inputs")?;
    let has_a = a.labels().iter().any(|&l| l == label);
    let has_b = b.labels().iter().any(|&l| l == label);
    if !has_a || !has_b {
        return Err(Error::EmptyInput(format!(
            "hausdorff: label {label} missing from {}",
            if has_a { "second volume" } else { "first volume" }
        )));
    }
    let dist_to_b = squared_distance_map(b, label);
    let dist_to_a = squared_distance_map(a, label);
    let mut worst = 0f64;
    for (i, &l) in a.labels().iter().enumerate() {
        if l == label {
            worst = worst.max(dist_to_b[i]);
        }
    }
    for (i, &l) in b.labels().iter().enumerate() {
        if l == label {
            worst = worst.max(dist_to_a[i]);
        }
    }
    Ok(worst.sqrt())
}

/// Label error frequency map: per voxel, the percentage of subjects whose
/// label differs from the reference label (background counts as a label).
#[derive(Debug, Clone)]
pub struct LefmVolume {
    pub percent: ScalarVolume,
    pub subjects: usize,
}

pub fn lefm(reference: &LabelVolume, warped: &[&LabelVolume]) -> Result<LefmVolume> {
    if warped.is_empty() {
        return Err(Error::EmptyInput("lefm needs at least one subject".into()));
    }
    for w in warped {
        check_same_grid(&reference.meta, &w.meta, "lefm subject")?;
    }
    let n = warped.len();
    let mut mismatches = vec![0u32; reference.meta.voxel_count()];
    for w in warped {
        for (m, (&r, &s)) in mismatches.iter_mut().zip(reference.labels().iter().zip(w.labels())) {
            *m += (r != s) as u32;
        }
    }
    let percent: Vec<f32> = mismatches
        .iter()
        .map(|&m| (100.0 * m as f64 / n as f64) as f32)
        .collect();
    Ok(LefmVolume {
        percent: ScalarVolume::new(reference.meta.clone(), percent)?,
        subjects: n,
    })
}

/// Streaming per-voxel mean and population standard deviation (Welford).
pub struct MeanStdAccumulator {
    meta: Option<GridMeta>,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Default for MeanStdAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl MeanStdAccumulator {
    pub fn new() -> Self {
        MeanStdAccumulator {
            meta: None,
            count: 0,
            mean: Vec::new(),
            m2: Vec::new(),
        }
    }

    pub fn push(&mut self, vol: &ScalarVolume) -> Result<()> {
        match &self.meta {
            None => {
                self.meta = Some(vol.meta.clone());
                self.mean = vec![0.0; vol.meta.voxel_count()];
                self.m2 = vec![0.0; vol.meta.voxel_count()];
            }
            Some(meta) => check_same_grid(meta, &vol.meta, "aggregate input")?,
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in vol.values().iter().enumerate() {
            let x = v as f64;
            let d = x - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x - self.mean[i]);
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(self) -> Result<(ScalarVolume, ScalarVolume)> {
        let meta = self
            .meta
            .ok_or_else(|| Error::EmptyInput("aggregate over an empty stream".into()))?;
        let n = self.count as f64;
        let mean: Vec<f32> = self.mean.iter().map(|&m| m as f32).collect();
        let std: Vec<f32> = self
            .m2
            .iter()
            .map(|&m2| ((m2 / n).max(0.0)).sqrt() as f32)
            .collect();
        Ok((
            ScalarVolume::with_nan(meta.clone(), mean)?,
            ScalarVolume::with_nan(meta, std)?,
        ))
    }
}

/// One-shot wrapper over [`MeanStdAccumulator`].
pub fn aggregate_mean_std<'a>(
    volumes: impl IntoIterator<Item = &'a ScalarVolume>,
) -> Result<(ScalarVolume, ScalarVolume)> {
    let mut acc = MeanStdAccumulator::new();
    for v in volumes {
        acc.push(v)?;
    }
    acc.finish()
}

/// Subject id -> covariate value (e.g. age in months).
#[derive(Debug, Clone, Default)]
pub struct CovariateTable {
    values: BTreeMap<String, f64>,
}

impl CovariateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, subject: impl Into<String>, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidInput("non-finite covariate".into()));
        }
        let subject = subject.into();
        if self.values.insert(subject.clone(), value).is_some() {
            return Err(Error::InvalidInput(format!("duplicate subject `{subject}`")));
        }
        Ok(())
    }

    pub fn get(&self, subject: &str) -> Option<f64> {
        self.values.get(subject).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Parse `subject,covariate` CSV; a non-numeric first row is treated as a
    /// header and skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = CovariateTable::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (subject, value) = line.split_once(',').ok_or_else(|| {
                Error::InvalidInput(format!("{}:{}: expected `subject,value`", path.display(), ln + 1))
            })?;
            match value.trim().parse::<f64>() {
                Ok(v) => table.insert(subject.trim(), v)?,
                Err(_) if ln == 0 => continue, // header row
                Err(_) => {
                    return Err(Error::InvalidInput(format!(
                        "{}:{}: bad covariate `{value}`",
                        path.display(),
                        ln + 1
                    )))
                }
            }
        }
        Ok(table)
    }
}

/// Voxel-wise Pearson correlation output; invalid voxels (fewer than 3
/// included subjects or zero variance) carry NaN in `r` and `p`, and `n`
/// carries NaN where the subject count is below 3.
#[derive(Debug, Clone)]
pub struct CorrelationMaps {
    pub r: ScalarVolume,
    pub p: ScalarVolume,
    pub n: ScalarVolume,
}

/// Streaming voxel-wise correlation between a per-subject covariate and a
/// per-subject value map. A subject contributes to a voxel only when its
/// inclusion map (the FF image) is non-zero there.
pub struct CorrelationAccumulator {
    meta: Option<GridMeta>,
    n: Vec<u32>,
    mean_x: Vec<f64>,
    mean_y: Vec<f64>,
    m2x: Vec<f64>,
    m2y: Vec<f64>,
    cxy: Vec<f64>,
}

impl Default for CorrelationAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl CorrelationAccumulator {
    pub fn new() -> Self {
        CorrelationAccumulator {
            meta: None,
            n: Vec::new(),
            mean_x: Vec::new(),
            mean_y: Vec::new(),
            m2x: Vec::new(),
            m2y: Vec::new(),
            cxy: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        covariate: f64,
        values: &ScalarVolume,
        include_ff: &ScalarVolume,
    ) -> Result<()> {
        check_same_grid(&values.meta, &include_ff.meta, "correlate value vs FF")?;
        match &self.meta {
            None => {
                let len = values.meta.voxel_count();
                self.meta = Some(values.meta.clone());
                self.n = vec![0; len];
                self.mean_x = vec![0.0; len];
                self.mean_y = vec![0.0; len];
                self.m2x = vec![0.0; len];
                self.m2y = vec![0.0; len];
                self.cxy = vec![0.0; len];
            }
            Some(meta) => check_same_grid(meta, &values.meta, "correlate subject")?,
        }
        for (i, (&y, &ff)) in values.values().iter().zip(include_ff.values()).enumerate() {
            if ff == 0.0 {
                continue;
            }
            self.n[i] += 1;
            let n = self.n[i] as f64;
            let x = covariate;
            let y = y as f64;
            let dx = x - self.mean_x[i];
            self.mean_x[i] += dx / n;
            let dy = y - self.mean_y[i];
            self.mean_y[i] += dy / n;
            self.m2x[i] += dx * (x - self.mean_x[i]);
            self.m2y[i] += dy * (y - self.mean_y[i]);
            self.cxy[i] += dx * (y - self.mean_y[i]);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<CorrelationMaps> {
        let meta = self
            .meta
            .ok_or_else(|| Error::EmptyInput("correlate over an empty stream".into()))?;
        let len = meta.voxel_count();
        let mut r_map = vec![f32::NAN; len];
        let mut p_map = vec![f32::NAN; len];
        let mut n_map = vec![f32::NAN; len];
        for i in 0..len {
            let n = self.n[i];
            if n >= 3 {
                n_map[i] = n as f32;
            }
            if n < 3 || self.m2x[i] <= 0.0 || self.m2y[i] <= 0.0 {
                continue;
            }
            let r = (self.cxy[i] / (self.m2x[i] * self.m2y[i]).sqrt()).clamp(-1.0, 1.0);
            r_map[i] = r as f32;
            p_map[i] = pearson_p(r, n as usize) as f32;
        }
        Ok(CorrelationMaps {
            r: ScalarVolume::with_nan(meta.clone(), r_map)?,
            p: ScalarVolume::with_nan(meta.clone(), p_map)?,
            n: ScalarVolume::with_nan(meta, n_map)?,
        })
    }
}

/// Two-sided p-value of a Pearson r over n samples via the t statistic
/// `t = r sqrt(n-2) / sqrt(1-r^2)`; perfect correlation clamps to p = 0.
pub fn pearson_p(r: f64, n: usize) -> f64 {
    assert!(n >= 3, "pearson_p needs n >= 3");
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Pearson correlation of two equal-length samples (the two-pass textbook
/// form); used by callers that hold both series in memory.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn midranks(abs: &[f64]) -> Vec<f64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied entries share the average rank
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn drop_zeros(diffs: &[f64]) -> Vec<f64> {
    diffs.iter().copied().filter(|&d| d != 0.0).collect()
}

/// W+ statistic and midranks of the nonzero differences.
fn signed_rank_stat(d: &[f64]) -> (f64, Vec<f64>) {
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus = d
        .iter()
        .zip(&ranks)
        .filter(|(&x, _)| x > 0.0)
        .map(|(_, &r)| r)
        .sum();
    (w_plus, ranks)
}

pub const WILCOXON_EXACT_LIMIT: usize = 25;

/// Exact two-sided signed-rank p: the probability, over all 2^n equally
/// likely sign assignments, of a W+ at least as far from its mean as the
/// observed one. Ranks are doubled so midranks stay integral.
pub fn wilcoxon_exact_p(diffs: &[f64]) -> f64 {
    let d = drop_zeros(diffs);
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    assert!(n <= WILCOXON_EXACT_LIMIT, "exact path is limited to n <= 25");
    let (w_plus, ranks) = signed_rank_stat(&d);
    let doubled: Vec<u64> = ranks.iter().map(|&r| (2.0 * r).round() as u64).collect();
    let total: u64 = doubled.iter().sum(); // = n(n+1), twice the mean of 2*W+
    let w2 = (2.0 * w_plus).round() as i64;

    // distribution of 2*W+ (denominator 2^n); counts fit u64 for n <= 25
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut upper = 0usize;
    for &r2 in &doubled {
        let r2 = r2 as usize;
        upper += r2;
        for s in (0..=upper).rev() {
            if s >= r2 && counts[s - r2] > 0 {
                counts[s] += counts[s - r2];
            }
        }
    }

    // symmetric two-sided tail: |s - mean| >= |w2 - mean| with everything
    // scaled by 2 once more so the comparison stays integral
    let twice_mean = total as i64;
    let dev = (2 * w2 - twice_mean).abs();
    let mut tail = 0u64;
    for (s, &c) in counts.iter().enumerate() {
        if (2 * s as i64 - twice_mean).abs() >= dev {
            tail += c;
        }
    }
    tail as f64 / (1u64 << n) as f64
}

/// Normal approximation with midrank tie-corrected variance and a 0.5
/// continuity correction.
pub fn wilcoxon_normal_p(diffs: &[f64]) -> f64 {
    let d = drop_zeros(diffs);
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let (w_plus, ranks) = signed_rank_stat(&d);
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // tie groups over |d|
    let mut sorted: Vec<f64> = ranks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if w_plus == mean || var <= 0.0 {
        return 1.0;
    }
    let continuity = 0.5 * (w_plus - mean).signum();
    let z = (w_plus - mean - continuity) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Two-sided paired Wilcoxon signed-rank p-value. Zero differences drop out;
/// exact sign enumeration up to n = 25, tie-corrected normal approximation
/// with continuity correction beyond.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> f64 {
    let d = drop_zeros(diffs);
    if d.len() <= WILCOXON_EXACT_LIMIT {
        wilcoxon_exact_p(&d)
    } else {
        wilcoxon_normal_p(&d)
    }
}

/// Bonferroni correction: each p becomes `min(1, m * p)`. `m` must be at
/// least the number of tests.
pub fn bonferroni(pvals: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < pvals.len() {
        return Err(Error::InvalidInput(format!(
            "bonferroni m = {m} is below the number of tests {}",
            pvals.len()
        )));
    }
    Ok(pvals.iter().map(|&p| (m as f64 * p).min(1.0)).collect())
}

/// One Dice score row: subject, label, score.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceRow {
    pub subject: String,
    pub label: u16,
    pub label_name: String,
    pub dice: f64,
}

/// Per-(subject, label) Dice scores, one row per pair with nonempty union.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiceTable {
    pub rows: Vec<DiceRow>,
}

impl DiceTable {
    /// Score every label present in either volume for one subject.
    pub fn score_subject(
        &mut self,
        subject: &str,
        reference: &LabelVolume,
        warped: &LabelVolume,
    ) -> Result<()> {
        let mut labels: BTreeSet<u16> = reference.present_labels().into_iter().collect();
        labels.extend(warped.present_labels());
        for label in labels {
            if let Some(score) = dice(reference, warped, label)? {
                let name = if reference.name_of(label).is_empty() {
                    warped.name_of(label).to_string()
                } else {
                    reference.name_of(label).to_string()
                };
                self.rows.push(DiceRow {
                    subject: subject.to_string(),
                    label,
                    label_name: name,
                    dice: score,
                });
            }
        }
        Ok(())
    }

    pub fn mean_dice(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.dice).sum::<f64>() / self.rows.len() as f64)
    }

    /// `subject,label_id,label_name,dice` with full-fidelity float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,label_id,label_name,dice\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.subject, r.label, r.label_name, r.dice);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.is_empty() {
                continue; // header
            }
            let parts: Vec<&str> = line.splitn(4, ',').collect();
            if parts.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "dice table line {}: expected 4 fields",
                    ln + 1
                )));
            }
            // label_name is the third field but dice is last; re-split from
            // the right so names cannot eat the score
            let (subject, label, label_name, dice) = (parts[0], parts[1], parts[2], parts[3]);
            rows.push(DiceRow {
                subject: subject.to_string(),
                label: label
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad label id `{label}`")))?,
                label_name: label_name.to_string(),
                dice: dice
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad dice `{dice}`")))?,
            });
        }
        Ok(DiceTable { rows })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_csv(&text)
    }
}

/// Per-label paired comparison of two Dice tables.
#[derive(Debug, Clone)]
pub struct LabelComparison {
    pub label: u16,
    pub label_name: String,
    pub pairs: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p: f64,
    pub p_adjusted: f64,
}

/// Paired Wilcoxon signed-rank test per label between two Dice tables
/// (pairing on subject), Bonferroni-adjusted across the compared labels.
pub fn compare_dice_tables(a: &DiceTable, b: &DiceTable) -> Result<Vec<LabelComparison>> {
    let mut index_b: BTreeMap<(&str, u16), f64> = BTreeMap::new();
    for r in &b.rows {
        index_b.insert((r.subject.as_str(), r.label), r.dice);
    }
    let mut per_label: BTreeMap<u16, (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &a.rows {
        if let Some(&db) = index_b.get(&(r.subject.as_str(), r.label)) {
            let entry = per_label
                .entry(r.label)
                .or_insert_with(|| (r.label_name.clone(), Vec::new(), Vec::new()));
            entry.1.push(r.dice);
            entry.2.push(db);
        }
    }
    if per_label.is_empty() {
        return Err(Error::EmptyInput("no shared (subject, label) pairs".into()));
    }
    let m = per_label.len();
    let mut out = Vec::with_capacity(m);
    for (label, (name, da, db)) in per_label {
        let diffs: Vec<f64> = db.iter().zip(&da).map(|(b, a)| b - a).collect();
        let p = wilcoxon_signed_rank(&diffs);
        out.push(LabelComparison {
            label,
            label_name: name,
            pairs: da.len(),
            mean_a: da.iter().sum::<f64>() / da.len() as f64,
            mean_b: db.iter().sum::<f64>() / db.len() as f64,
            p,
            p_adjusted: (m as f64 * p).min(1.0),
        });
    }
    Ok(out)
}
