//! Sample quality against the analytic testbed: distance to the nearest
//! mixture mean and agreement with the conditioned target.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::field::LatentField;
use crate::scoremodel::{ConditionField, PixelGMM};

pub const DEFAULT_OFF_MANIFOLD_SIGMAS: f64 = 3.0;

/// Per-pixel results plus their aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEvaluation {
    /// Distance to the nearest mean, in units of `σ0`.
    pub distances: Vec<f64>,
    /// Index of the nearest mean (lowest index on ties).
    pub nearest: Vec<usize>,
    /// `Some(hit)` where the mask exceeds the threshold, `None` elsewhere.
    pub aligned: Vec<Option<bool>>,
    pub summary: Aggregates,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub mean_distance: f64,
    pub p95_distance: f64,
    pub off_manifold_rate: f64,
    /// Fraction of masked pixels whose nearest mean is the target; 1 when
    /// no pixel is masked.
    pub alignment_rate: f64,
    pub masked_pixels: usize,
}

impl Aggregates {
    fn from_parts(distances: &[f64], aligned: impl Iterator<Item = Option<bool>>, off_threshold: f64) -> Self {
        let n = distances.len();
        let mean_distance = distances.iter().sum::<f64>() / n as f64;
        let off = distances.iter().filter(|d| **d > off_threshold).count();
        let (mut masked, mut hits) = (0usize, 0usize);
        for a in aligned.flatten() {
            masked += 1;
            hits += usize::from(a);
        }
        Self {
            mean_distance,
            p95_distance: percentile(distances, 0.95),
            off_manifold_rate: off as f64 / n as f64,
            alignment_rate: if masked == 0 { 1.0 } else { hits as f64 / masked as f64 },
            masked_pixels: masked,
        }
    }

    /// Aggregates over the union of all pixels of several samples.
    pub fn pooled(evals: &[SampleEvaluation], off_threshold_sigmas: f64) -> Result<Self> {
        if evals.is_empty() {
            return Err(invalid("nothing to aggregate"));
        }
        let distances: Vec<f64> = evals.iter().flat_map(|e| e.distances.iter().copied()).collect();
        Ok(Self::from_parts(
            &distances,
            evals.iter().flat_map(|e| e.aligned.iter().copied()),
            off_threshold_sigmas,
        ))
    }
}

/// Nearest-rank percentile, `q ∈ (0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

pub fn evaluate_sample(z0: &LatentField, gmm: &PixelGMM, cond: &ConditionField, mask_threshold: f64) -> Result<SampleEvaluation> {
    evaluate_sample_with(z0, gmm, cond, mask_threshold, DEFAULT_OFF_MANIFOLD_SIGMAS)
}

/// As [`evaluate_sample`] with an explicit off-manifold threshold in `σ0` units.
pub fn evaluate_sample_with(
    z0: &LatentField,
    gmm: &PixelGMM,
    cond: &ConditionField,
    mask_threshold: f64,
    off_threshold_sigmas: f64,
) -> Result<SampleEvaluation> {
    if z0.channels() != gmm.channels() || (z0.height(), z0.width()) != (cond.height(), cond.width()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}x{}", gmm.channels(), cond.height(), cond.width()),
            got: format!("{}x{}x{}", z0.channels(), z0.height(), z0.width()),
        });
    }
    cond.validate_for(gmm)?;
    let sigma0 = gmm.sigma0();
    if !(sigma0 > 0.0) {
        return Err(invalid("distances in sigma0 units need sigma0 > 0"));
    }
    let n = z0.pixel_count();
    let mut distances = Vec::with_capacity(n);
    let mut nearest = Vec::with_capacity(n);
    let mut aligned = Vec::with_capacity(n);
    for p in 0..n {
        let z = z0.pixel(p);
        let (k, d2) = nearest_mean(gmm.means(), &z);
        distances.push(d2.sqrt() / sigma0);
        nearest.push(k);
        aligned.push((cond.mask()[p] > mask_threshold).then(|| k == cond.target()[p]));
    }
    let summary = Aggregates::from_parts(&distances, aligned.iter().copied(), off_threshold_sigmas);
    Ok(SampleEvaluation {
        distances,
        nearest,
        aligned,
        summary,
    })
}

/// Index and squared distance of the closest mean; ties go to the lower index.
pub fn nearest_mean(means: &[Vec<f64>], z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, mu) in means.iter().enumerate() {
        let d2: f64 = mu.iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best
}

/// Indices of the `ceil(fraction · n)` largest keys (lower index first on ties).
pub fn top_fraction_indices(keys: &[f64], fraction: f64) -> Vec<usize> {
    let count = ((fraction * keys.len() as f64).ceil() as usize).clamp(1, keys.len().max(1));
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|a, b| keys[*b].total_cmp(&keys[*a]).then(a.cmp(b)));
    idx.truncate(count.min(keys.len()));
    idx
}

/// Mean of `values` over the pixels whose `keys` are in the top `fraction`.
pub fn top_fraction_mean(values: &[f64], keys: &[f64], fraction: f64) -> Result<f64> {
    if values.len() != keys.len() || values.is_empty() {
        return Err(invalid("values and keys must be equally long and non-empty"));
    }
    let idx = top_fraction_indices(keys, fraction);
    Ok(idx.iter().map(|i| values[*i]).sum::<f64>() / idx.len() as f64)
}

/// Mean of `energy` where `mask > threshold` over its mean elsewhere.
pub fn inside_outside_ratio(energy: &[f64], mask: &[f64], threshold: f64) -> Result<f64> {
    if energy.len() != mask.len() {
        return Err(invalid("energy and mask sizes differ"));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (e, m) in energy.iter().zip(mask) {
        if *m > threshold {
            si += e;
            ni += 1;
        } else {
            so += e;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(invalid("mask must split the grid into two non-empty regions"));
    }
    Ok((si / ni as f64) / (so / no as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub label: String,
    pub summary: Aggregates,
    /// Some other row is strictly better in both alignment and distance.
    pub dominated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoTable {
    pub rows: Vec<ParetoRow>,
}

impl ParetoTable {
    pub const CSV_HEADER: &'static str =
        "config,alignment_rate,mean_distance,p95_distance,off_manifold_rate,dominated";

    pub fn row(&self, label: &str) -> Option<&ParetoRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.label, s.alignment_rate, s.mean_distance, s.p95_distance, s.off_manifold_rate, r.dominated
            );
        }
        out
    }
}

/// Rows sorted by alignment rate (best first, then by distance); flags
/// configs beaten on both axes by some other config.
pub fn pareto_table(results: &[(String, Aggregates)]) -> Result<ParetoTable> {
    if results.len() < 2 {
        return Err(invalid(format!("pareto table needs at least 2 configs, got {}", results.len())));
    }
    let mut rows: Vec<ParetoRow> = results
        .iter()
        .map(|(label, s)| ParetoRow {
            label: label.clone(),
            summary: *s,
            dominated: results.iter().any(|(_, o)| {
                o.alignment_rate > s.alignment_rate && o.mean_distance < s.mean_distance
            }),
        })
        .collect();
    rows.sort_by(|a, b| {
        b.summary
            .alignment_rate
            .total_cmp(&a.summary.alignment_rate)
            .then(a.summary.mean_distance.total_cmp(&b.summary.mean_distance))
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(ParetoTable { rows })
}

/// Per-(config, seed) metrics rows followed by one pooled row per config
/// (seed column `all`).
pub fn metrics_csv(per_config: &[(String, Vec<(u64, SampleEvaluation)>)], off_threshold_sigmas: f64) -> Result<String> {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (label, evals) in per_config {
        for (seed, e) in evals {
            push_metrics_row(&mut out, label, &seed.to_string(), &e.summary);
        }
    }
    for (label, evals) in per_config {
        let all: Vec<SampleEvaluation> = evals.iter().map(|(_, e)| e.clone()).collect();
        push_metrics_row(&mut out, label, "all", &Aggregates::pooled(&all, off_threshold_sigmas)?);
    }
    Ok(out)
}

pub const METRICS_CSV_HEADER: &str =
    "config,seed,alignment_rate,mean_distance,p95_distance,off_manifold_rate,masked_pixels";

fn push_metrics_row(out: &mut String, label: &str, seed: &str, s: &Aggregates) {
    let _ = writeln!(
        out,
        "{label},{seed},{},{},{},{},{}",
        s.alignment_rate, s.mean_distance, s.p95_distance, s.off_manifold_rate, s.masked_pixels
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gmm() -> PixelGMM {
        PixelGMM::uniform(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]],
            0.1,
        )
        .unwrap()
    }

    fn agg(align: f64, dist: f64) -> Aggregates {
        Aggregates {
            mean_distance: dist,
            p95_distance: dist,
            off_manifold_rate: 0.0,
            alignment_rate: align,
            masked_pixels: 1,
        }
    }

    #[test]
    fn perfect_sample() {
        let g = gmm();
        let target = vec![0, 1, 2, 3, 0, 1];
        let cond = ConditionField::new(2, 3, vec![1.0; 6], target.clone()).unwrap();
        let pixels: Vec<Vec<f64>> = target.iter().map(|k| g.means()[*k].clone()).collect();
        let z = LatentField::from_pixels(2, 3, &pixels).unwrap();
        let e = evaluate_sample(&z, &g, &cond, 0.5).unwrap();
        assert_eq!(e.summary.alignment_rate, 1.0);
        assert_eq!(e.summary.mean_distance, 0.0);
        assert_eq!(e.summary.off_manifold_rate, 0.0);
        assert_eq!(e.summary.masked_pixels, 6);
        assert_eq!(e.nearest, target);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = gmm();
        let (k, d2) = nearest_mean(g.means(), &[0.5, 0.5]);
        assert_eq!(k, 0);
        assert!((d2 - 0.5).abs() < 1e-15);
        assert_eq!(nearest_mean(g.means(), &[-0.5, -0.5]).0, 2);
    }

    #[test]
    fn distances_in_sigma_units_and_rates() {
        let g = gmm();
        let cond = ConditionField::new(1, 3, vec![0.0, 0.9, 0.2], vec![0, 1, 1]).unwrap();
        let z = LatentField::from_pixels(1, 3, &[vec![1.05, 0.0], vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let e = evaluate_sample(&z, &g, &cond, 0.5).unwrap();
        assert!((e.distances[0] - 0.5).abs() < 1e-12);
        assert!((e.distances[1] - 5.0).abs() < 1e-12);
        assert_eq!(e.aligned, vec![None, Some(false), None]);
        assert_eq!(e.summary.alignment_rate, 0.0);
        assert!((e.summary.off_manifold_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.summary.p95_distance, e.distances[1]);

        let none = ConditionField::new(1, 3, vec![0.0; 3], vec![0; 3]).unwrap();
        assert_eq!(evaluate_sample(&z, &g, &none, 0.5).unwrap().summary.alignment_rate, 1.0);
        let wrong = ConditionField::new(1, 2, vec![0.0; 2], vec![0; 2]).unwrap();
        assert!(evaluate_sample(&z, &g, &wrong, 0.5).is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.95), 3.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn pareto_examples() {
        let t = pareto_table(&[("a".into(), agg(0.9, 0.5)), ("b".into(), agg(0.8, 0.7))]).unwrap();
        assert_eq!(t.rows[0].label, "a");
        assert!(!t.row("a").unwrap().dominated);
        assert!(t.row("b").unwrap().dominated);

        let t = pareto_table(&[("x".into(), agg(0.9, 0.5)), ("y".into(), agg(0.9, 0.5))]).unwrap();
        assert!(t.rows.iter().all(|r| !r.dominated));

        // better on only one axis does not dominate
        let t = pareto_table(&[("p".into(), agg(0.9, 0.7)), ("q".into(), agg(0.8, 0.5))]).unwrap();
        assert!(t.rows.iter().all(|r| !r.dominated));

        assert!(pareto_table(&[("solo".into(), agg(1.0, 0.0))]).is_err());
        let csv = t.to_csv();
        assert!(csv.starts_with(ParetoTable::CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn top_fraction_and_ratio() {
        let keys = [0.0, 5.0, 1.0, 9.0, 2.0, 3.0, 4.0, 6.0, 7.0, 8.0, 0.5];
        assert_eq!(top_fraction_indices(&keys, 0.1), vec![3, 9]);
        let vals: Vec<f64> = (0..11).map(f64::from).collect();
        assert_eq!(top_fraction_mean(&vals, &keys, 0.1).unwrap(), 6.0);

        let r = inside_outside_ratio(&[10.0, 10.0, 1.0, 3.0], &[1.0, 0.8, 0.0, 0.1], 0.5).unwrap();
        assert_eq!(r, 5.0);
        assert!(inside_outside_ratio(&[1.0, 2.0], &[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn metrics_csv_rows() {
        let g = gmm();
        let cond = ConditionField::new(1, 2, vec![1.0, 0.0], vec![0, 0]).unwrap();
        let z = LatentField::from_pixels(1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = evaluate_sample(&z, &g, &cond, 0.5).unwrap();
        let csv = metrics_csv(&[("cfg2".into(), vec![(0, e.clone()), (1, e)])], 3.0).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("cfg2,0,"));
        assert!(lines[3].starts_with("cfg2,all,1,"));
    }

    proptest! {
        #[test]
        fn rates_bounded_and_threshold_monotone(
            vals in proptest::collection::vec(-2.0f64..2.0, 24),
            mask in proptest::collection::vec(0.0f64..1.0, 12),
            targets in proptest::collection::vec(0usize..4, 12),
            t1 in 0.0f64..10.0, dt in 0.0f64..10.0,
        ) {
            let g = gmm();
            let pixels: Vec<Vec<f64>> = vals.chunks(2).map(|c| c.to_vec()).collect();
            let z = LatentField::from_pixels(3, 4, &pixels).unwrap();
            let cond = ConditionField::new(3, 4, mask, targets).unwrap();
            let a = evaluate_sample_with(&z, &g, &cond, 0.5, t1).unwrap();
            let b = evaluate_sample_with(&z, &g, &cond, 0.5, t1 + dt).unwrap();
            for s in [&a.summary, &b.summary] {
                prop_assert!((0.0..=1.0).contains(&s.alignment_rate));
                prop_assert!((0.0..=1.0).contains(&s.off_manifold_rate));
            }
            prop_assert!(a.distances.iter().all(|d| *d >= 0.0));
            prop_assert!(b.summary.off_manifold_rate <= a.summary.off_manifold_rate);
        }

        #[test]
        fn alignment_ignores_relabelled_non_targets(
            vals in proptest::collection::vec(-2.0f64..2.0, 24),
            mask in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            // every pixel targets component 0; swap the labels of 1, 2 and 3
            let g = gmm();
            let m = g.means();
            let permuted = PixelGMM::uniform(vec![m[0].clone(), m[3].clone(), m[1].clone(), m[2].clone()], 0.1).unwrap();
            let pixels: Vec<Vec<f64>> = vals.chunks(2).map(|c| c.to_vec()).collect();
            let z = LatentField::from_pixels(3, 4, &pixels).unwrap();
            let cond = ConditionField::new(3, 4, mask, vec![0; 12]).unwrap();
            let a = evaluate_sample(&z, &g, &cond, 0.5).unwrap();
            let b = evaluate_sample(&z, &permuted, &cond, 0.5).unwrap();
            prop_assert_eq!(a.summary.alignment_rate, b.summary.alignment_rate);
        }
    }
}
