use super::MetricError;
use crate::data::Dataset;

/// Probability that a random positive outranks a random negative, ties
/// counted as one half (Mann–Whitney U with mid-ranks).
pub fn auroc_scores(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid_rank * pos_in_tie as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * q))
}

/// AUROC over the labeled examples of a dataset.
pub fn auroc(d: &Dataset) -> Result<f64, MetricError> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = d
        .examples()
        .iter()
        .filter_map(|e| e.outcome.map(|y| (e.score, y)))
        .unzip();
    auroc_scores(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [false, false, true, true];
        assert_eq!(auroc_scores(&s, &y).unwrap(), 1.0);
        let y_rev = [true, true, false, false];
        assert_eq!(auroc_scores(&s, &y_rev).unwrap(), 0.0);
    }

    #[test]
    fn all_tied_is_half() {
        assert_eq!(auroc_scores(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_undefined() {
        assert_eq!(
            auroc_scores(&[0.1, 0.2], &[true, true]).unwrap_err().code(),
            "UNDEFINED"
        );
    }
}
