//! Registration evaluation: overlap and deformation-quality metrics, the
//! 17-point regularization sweep, optimal-weight selection under a folding
//! budget, and report emission.

pub mod report;

use crate::error::{Error, Result};
use crate::geometry::{jacobian_determinant, DisplacementField, VelocityField};
use crate::par;
use crate::real::Real;
use crate::volume::ImageVolume;
use ndarray::ArrayD;

/// One row of a regularization sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub lambda: f64,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub dice30: f64,
    pub fold_pct_mean: f64,
    pub fold_pct_sd: f64,
    pub sdlog_j: f64,
    pub mean_abs_v: f64,
}

/// The 17-point default grid: dense in `[0, 0.2]`, sparse in `[0.3, 1.0]`.
pub fn default_lambda_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..9).map(|i| i as f64 * 0.025).collect();
    grid.extend((3..=10).map(|i| i as f64 * 0.1));
    grid
}

/// Per-label and mean Dice between two label maps. Labels absent from both
/// maps are excluded; labels absent from one score 0.
pub fn dice(
    labels_a: &ArrayD<i32>,
    labels_b: &ArrayD<i32>,
    label_set: &[i32],
) -> Result<(Vec<(i32, f64)>, f64)> {
    if labels_a.shape() != labels_b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "label grids {:?} vs {:?}",
            labels_a.shape(),
            labels_b.shape()
        )));
    }
    if label_set.is_empty() {
        return Err(Error::InvalidInput("empty label set".into()));
    }
    let mut per_label = Vec::with_capacity(label_set.len());
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &l in label_set {
        let mut a_count = 0usize;
        let mut b_count = 0usize;
        let mut inter = 0usize;
        for (&x, &y) in labels_a.iter().zip(labels_b.iter()) {
            let in_a = x == l;
            let in_b = y == l;
            a_count += usize::from(in_a);
            b_count += usize::from(in_b);
            inter += usize::from(in_a && in_b);
        }
        if a_count == 0 && b_count == 0 {
            continue;
        }
        let d = 2.0 * inter as f64 / (a_count + b_count) as f64;
        per_label.push((l, d));
        sum += d;
        counted += 1;
    }
    let mean = if counted == 0 { 0.0 } else { sum / counted as f64 };
    Ok((per_label, mean))
}

/// Dice of two boolean masks.
pub fn dice_binary(a: &ArrayD<bool>, b: &ArrayD<bool>) -> f64 {
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (na + nb) as f64
}

/// Foreground labels (> 0) present in a label map, sorted.
pub fn label_set(labels: &ArrayD<i32>) -> Vec<i32> {
    let mut set: Vec<i32> = labels.iter().copied().filter(|&l| l > 0).collect();
    set.sort_unstable();
    set.dedup();
    set
}

/// Mean of the lowest `ceil(0.3 n)` values.
pub fn dice30(per_pair_dice: &[f64]) -> Result<f64> {
    if per_pair_dice.is_empty() {
        return Err(Error::InvalidInput("empty dice list".into()));
    }
    let mut sorted = per_pair_dice.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite dice"));
    let k = ((0.3 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Percentage of voxels with non-positive Jacobian determinant.
pub fn fold_percentage<F: Real>(phi: &DisplacementField<F>) -> Result<f64> {
    let j = jacobian_determinant(phi)?;
    let folded = j.iter().filter(|x| x.as_f64() <= 0.0).count();
    Ok(100.0 * folded as f64 / j.len() as f64)
}

/// Standard deviation of `log J` over voxels with positive determinant.
/// When every voxel is folded the value is undefined: returns `NaN` with
/// the flag set.
pub fn sdlog_jacobian<F: Real>(phi: &DisplacementField<F>) -> Result<(f64, bool)> {
    let j = jacobian_determinant(phi)?;
    let logs: Vec<f64> = j
        .iter()
        .filter(|x| x.as_f64() > 0.0)
        .map(|x| x.as_f64().ln())
        .collect();
    if logs.is_empty() {
        return Ok((f64::NAN, true));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok((var.sqrt(), false))
}

/// One directed test pair for sweep evaluation.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub fixed: ImageVolume,
    pub moving: ImageVolume,
    pub fixed_id: u64,
    pub moving_id: u64,
}

/// What a registration model produces for one `(lambda, pair)` evaluation.
pub struct RegistrationOutput<F: Real> {
    pub velocity: VelocityField<F>,
    pub forward: DisplacementField<F>,
}

/// Run a registration model over `lambda_grid x pairs` and aggregate
/// metrics per lambda. `run` maps `(lambda, pair)` to the predicted field;
/// evaluation is deterministic and ordered by `(lambda, pair)`.
pub fn lambda_sweep<F, M>(
    run: M,
    pairs: &[EvalPair],
    lambda_grid: &[f64],
) -> Result<Vec<SweepRecord>>
where
    F: Real,
    M: Fn(f64, &EvalPair) -> Result<RegistrationOutput<F>> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no evaluation pairs".into()));
    }
    let mut records = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        // evaluation across pairs is data-parallel; aggregation stays ordered
        let rows = par::map_index_chunks(pairs.len(), 1, |s, _| -> Result<(f64, f64, f64, f64)> {
            let pair = &pairs[s];
            let out = run(lambda, pair)?;
            let moved_labels = crate::geometry::warp_labels(
                pair.moving
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("moving volume lacks labels".into()))?,
                &out.forward,
            )?;
            let fixed_labels = pair
                .fixed
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("fixed volume lacks labels".into()))?;
            let mut set = label_set(fixed_labels);
            for l in label_set(pair.moving.labels.as_ref().unwrap()) {
                if !set.contains(&l) {
                    set.push(l);
                }
            }
            set.sort_unstable();
            let (_, mean_dice) = dice(fixed_labels, &moved_labels, &set)?;
            let fold = fold_percentage(&out.forward)?;
            let (sdlog, _) = sdlog_jacobian(&out.forward)?;
            Ok((mean_dice, fold, sdlog, out.velocity.mean_magnitude()))
        });
        let mut dices = Vec::with_capacity(pairs.len());
        let mut folds = Vec::with_capacity(pairs.len());
        let mut sdlogs = Vec::with_capacity(pairs.len());
        let mut vmags = Vec::with_capacity(pairs.len());
        for row in rows {
            let (d, f, s, v) = row?;
            dices.push(d);
            folds.push(f);
            sdlogs.push(s);
            vmags.push(v);
        }
        let (dice_mean, dice_sd) = mean_sd(&dices);
        let (fold_mean, fold_sd) = mean_sd(&folds);
        let (sdlog_mean, _) = mean_sd(&sdlogs);
        let (v_mean, _) = mean_sd(&vmags);
        records.push(SweepRecord {
            lambda,
            dice_mean,
            dice_sd,
            dice30: dice30(&dices)?,
            fold_pct_mean: fold_mean,
            fold_pct_sd: fold_sd,
            sdlog_j: sdlog_mean,
            mean_abs_v: v_mean,
        });
    }
    Ok(records)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Optimal-lambda selection under a folding budget: among records with mean
/// fold percentage under `fold_budget`, pick the one maximizing mean Dice,
/// breaking ties toward larger lambda. If no record satisfies the budget,
/// return the largest-lambda record with the violation flag set.
pub fn select_optimal_lambda(
    records: &[SweepRecord],
    fold_budget: f64,
) -> Result<(SweepRecord, bool)> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no sweep records".into()));
    }
    let mut best: Option<&SweepRecord> = None;
    for r in records {
        if r.fold_pct_mean < fold_budget {
            best = match best {
                None => Some(r),
                Some(b) => {
                    if r.dice_mean > b.dice_mean
                        || (r.dice_mean == b.dice_mean && r.lambda > b.lambda)
                    {
                        Some(r)
                    } else {
                        Some(b)
                    }
                }
            };
        }
    }
    match best {
        Some(r) => Ok((r.clone(), false)),
        None => {
            let fallback = records
                .iter()
                .max_by(|a, b| a.lambda.partial_cmp(&b.lambda).expect("finite lambda"))
                .expect("nonempty");
            Ok((fallback.clone(), true))
        }
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn square_labels(shape: &[usize], r0: usize, r1: usize, c0: usize, c1: usize) -> ArrayD<i32> {
        let mut m = ArrayD::zeros(IxDyn(shape));
        for i in r0..r1 {
            for j in c0..c1 {
                m[[i, j]] = 1;
            }
        }
        m
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let a = square_labels(&[20, 20], 2, 12, 2, 12);
        let (_, d) = dice(&a, &a, &[1]).unwrap();
        assert_eq!(d, 1.0);
        let b = square_labels(&[20, 20], 13, 19, 13, 19);
        let (_, d0) = dice(&a, &b, &[1]).unwrap();
        assert_eq!(d0, 0.0);
    }

    #[test]
    fn dice_shifted_square_is_half() {
        // 10x10 square shifted by 5: overlap 50, dice = 2*50/200 = 0.5
        let a = square_labels(&[30, 30], 5, 15, 5, 15);
        let b = square_labels(&[30, 30], 10, 20, 5, 15);
        let (_, d) = dice(&a, &b, &[1]).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dice_empty_label_set_rejected() {
        let a = square_labels(&[8, 8], 0, 4, 0, 4);
        assert!(dice(&a, &a, &[]).is_err());
    }

    #[test]
    fn dice30_examples() {
        let mut vals = vec![0.5, 0.6, 0.7];
        vals.extend(std::iter::repeat(0.9).take(7));
        let d = dice30(&vals).unwrap();
        assert!((d - 0.6).abs() < 1e-12);
        assert_eq!(dice30(&[0.8, 0.8, 0.8]).unwrap(), 0.8);
        assert_eq!(dice30(&[0.42]).unwrap(), 0.42);
    }

    #[test]
    fn dice30_never_exceeds_mean() {
        let vals = [0.3, 0.9, 0.8, 0.55, 0.71, 0.66];
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(dice30(&vals).unwrap() <= mean);
    }

    #[test]
    fn fold_metrics_on_identity() {
        let phi = DisplacementField::<f64>::zeros(&[12, 12]);
        assert_eq!(fold_percentage(&phi).unwrap(), 0.0);
        let (sd, flag) = sdlog_jacobian(&phi).unwrap();
        assert!(!flag);
        assert!(sd < 1e-6);
    }

    #[test]
    fn full_fold_field_is_100_percent() {
        let mut phi = DisplacementField::<f64>::zeros(&[12, 12]);
        for i in 0..12 {
            for j in 0..12 {
                phi.data[[i, j, 0]] = -2.0 * i as f64;
            }
        }
        assert_eq!(fold_percentage(&phi).unwrap(), 100.0);
        let (sd, flag) = sdlog_jacobian(&phi).unwrap();
        assert!(flag);
        assert!(sd.is_nan());
    }

    #[test]
    fn uniform_affine_has_zero_sdlog() {
        let mut phi = DisplacementField::<f64>::zeros(&[16, 16]);
        for i in 0..16 {
            for j in 0..16 {
                phi.data[[i, j, 0]] = 0.1 * i as f64;
                phi.data[[i, j, 1]] = 0.1 * j as f64;
            }
        }
        let (sd, flag) = sdlog_jacobian(&phi).unwrap();
        assert!(!flag);
        assert!(sd < 1e-9, "sdlog {sd}");
    }

    #[test]
    fn lambda_grid_has_17_points() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[8], 0.2);
        assert_eq!(*g.last().unwrap(), 1.0);
        for opt in [0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2, 0.3] {
            assert!(
                g.iter().any(|&x| (x - opt).abs() < 1e-12),
                "{opt} not on grid"
            );
        }
    }

    #[test]
    fn selection_prefers_best_dice_under_budget() {
        let rec = |lambda: f64, dice: f64, fold: f64| SweepRecord {
            lambda,
            dice_mean: dice,
            dice_sd: 0.0,
            dice30: dice,
            fold_pct_mean: fold,
            fold_pct_sd: 0.0,
            sdlog_j: 0.1,
            mean_abs_v: 1.0,
        };
        let records = vec![
            rec(0.0, 0.80, 2.0),
            rec(0.1, 0.78, 0.4),
            rec(0.2, 0.76, 0.2),
            rec(1.0, 0.60, 0.0),
        ];
        let (best, flag) = select_optimal_lambda(&records, 0.5).unwrap();
        assert!(!flag);
        assert_eq!(best.lambda, 0.1);
        // all violate -> fallback to max lambda with flag
        let all_bad = vec![rec(0.0, 0.9, 3.0), rec(1.0, 0.5, 1.0)];
        let (fb, flag) = select_optimal_lambda(&all_bad, 0.5).unwrap();
        assert!(flag);
        assert_eq!(fb.lambda, 1.0);
        // single record under budget wins regardless of dice
        let single = vec![rec(0.3, 0.2, 0.1), rec(0.0, 0.99, 5.0)];
        let (only, flag) = select_optimal_lambda(&single, 0.5).unwrap();
        assert!(!flag);
        assert_eq!(only.lambda, 0.3);
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs: Vec<f64> = (0..17).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -x * x).collect();
        assert!((spearman(&xs, &ys) + 1.0).abs() < 1e-12);
        let flat: Vec<f64> = vec![1.0; 17];
        assert_eq!(spearman(&xs, &flat), 0.0);
    }
}
