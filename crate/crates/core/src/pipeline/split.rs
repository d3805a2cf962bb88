use rand::seq::SliceRandom;

use super::PipelineError;
use crate::rng::{stream_rng, Stream};
use crate::volume_io::StudyRecord;

/// Validation counts per stratum: `round(n·fraction)` in total, handed out
/// by largest remainder of `n_s·fraction` (ties to the larger stratum, then
/// the lower label).
pub fn stratum_val_counts(sizes: &[usize], val_fraction: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let total = (n as f64 * val_fraction).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * val_fraction).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(sizes[b].cmp(&sizes[a])).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(counts.iter().sum());
    for &s in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if counts[s] < sizes[s] {
            counts[s] += 1;
            left -= 1;
        }
    }
    counts
}

/// Seeded stratified split by progression label. Both halves keep the
/// input order.
pub fn split_dataset(
    records: &[StudyRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<StudyRecord>, Vec<StudyRecord>), PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyDataset("no records to split".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(PipelineError::InvalidConfig(format!(
            "val_fraction {val_fraction} must lie in (0, 1)"
        )));
    }
    let strata: [Vec<usize>; 2] = [0u8, 1].map(|label| {
        (0..records.len())
            .filter(|&i| (records[i].progression_3yr == 1) == (label == 1))
            .collect()
    });
    let counts = stratum_val_counts(&[strata[0].len(), strata[1].len()], val_fraction);
    let mut rng = stream_rng(seed, Stream::Split, 0);
    let mut is_val = vec![false; records.len()];
    for (mut idx, k) in strata.into_iter().zip(counts) {
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = records.iter().cloned().zip(&is_val).partition(|(_, &v)| v);
    Ok((
        train.into_iter().map(|(r, _)| r).collect(),
        val.into_iter().map(|(r, _)| r).collect(),
    ))
}
