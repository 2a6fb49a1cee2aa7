//! Accuracy and privacy measurements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nym::{NymAggregates, NymAssignment};
use crate::ratings::SparseRatings;

pub fn rmse(predictor: impl Fn(usize, usize) -> f64, test: &SparseRatings) -> Result<f64> {
    rmse_with(predictor, test, None)
}

/// RMSE with predictions optionally clipped to a rating domain `(lo, hi)`.
pub fn rmse_with(
    predictor: impl Fn(usize, usize) -> f64,
    test: &SparseRatings,
    clip: Option<(f64, f64)>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let se: f64 = test
        .triplets()
        .iter()
        .map(|t| {
            let mut p = predictor(t.user as usize, t.item as usize);
            if let Some((lo, hi)) = clip {
                p = p.clamp(lo, hi);
            }
            (p - t.value).powi(2)
        })
        .sum();
    Ok((se / test.len() as f64).sqrt())
}

/// Share of users in the largest nym: an attacker's best single guess.
pub fn guessing_probability(assignment: &NymAssignment) -> Result<f64> {
    if assignment.n_users() == 0 {
        return Err(Error::Empty("assignment"));
    }
    let sizes = assignment.nym_sizes();
    let max = *sizes.iter().max().expect("at least one nym");
    Ok(max as f64 / assignment.n_users() as f64)
}

/// Denominator of the association probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    /// Fraction of the nym's users who rated the item.
    #[default]
    UserShare,
    /// Item's share of all ratings submitted under the nym.
    RatingShare,
}

/// Per-nym association probabilities; zero entries are implicit.
#[derive(Clone, Debug, Serialize)]
pub struct Association {
    pub n_items: usize,
    /// `None` for nyms with a zero denominator.
    pub rows: Vec<Option<Vec<(u32, f64)>>>,
}

impl Association {
    pub fn get(&self, nym: usize, item: usize) -> Option<f64> {
        let row = self.rows[nym].as_ref()?;
        Some(
            row.binary_search_by_key(&(item as u32), |&(i, _)| i)
                .map_or(0.0, |k| row[k].1),
        )
    }

    /// Highest-association item per nym.
    pub fn worst_items(&self) -> Vec<Option<(usize, f64)>> {
        self.rows
            .iter()
            .map(|row| {
                let row = row.as_ref()?;
                let mut best: Option<(usize, f64)> = None;
                for &(i, p) in row {
                    if best.is_none_or(|(_, b)| p > b) {
                        best = Some((i as usize, p));
                    }
                }
                Some(best.unwrap_or((0, 0.0)))
            })
            .collect()
    }
}

pub fn association_probability(agg: &NymAggregates, mode: AssociationMode) -> Association {
    let rows = (0..agg.n_nyms())
        .map(|g| {
            let denom = match mode {
                AssociationMode::UserShare => agg.nym_sizes()[g],
                AssociationMode::RatingShare => agg.nym_support(g),
            };
            (denom > 0).then(|| {
                agg.nym_cells(g)
                    .iter()
                    .map(|c| (c.index, f64::from(c.count) / denom as f64))
                    .collect()
            })
        })
        .collect();
    Association {
        n_items: agg.n_items(),
        rows,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PrivacyReport {
    pub p_g: f64,
    pub nym_sizes: Vec<usize>,
    pub association: Association,
    pub worst_item_per_nym: Vec<Option<(usize, f64)>>,
}

pub fn privacy_report(
    assignment: &NymAssignment,
    agg: &NymAggregates,
    mode: AssociationMode,
) -> Result<PrivacyReport> {
    let association = association_probability(agg, mode);
    Ok(PrivacyReport {
        p_g: guessing_probability(assignment)?,
        nym_sizes: assignment.nym_sizes(),
        worst_item_per_nym: association.worst_items(),
        association,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nym::aggregate;
    use crate::ratings::RatingTriplet;

    #[test]
    fn rmse_hand_cases() {
        let t = vec![RatingTriplet::new(0, 0, 3.0), RatingTriplet::new(0, 1, 1.0)];
        let r = SparseRatings::new(1, 2, t).unwrap();
        assert_eq!(rmse(|_, _| 2.0, &r).unwrap(), 1.0);
        assert_eq!(rmse(|_, i| if i == 0 { 3.0 } else { 1.0 }, &r).unwrap(), 0.0);
        assert_eq!(rmse_with(|_, _| 9.0, &r, Some((1.0, 2.0))).unwrap(), 1.0);
        assert!(matches!(rmse(|_, _| 0.0, &SparseRatings::empty(1, 1)), Err(Error::Empty(_))));
    }

    #[test]
    fn guessing_probability_bounds() {
        let uniform = NymAssignment::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(guessing_probability(&uniform).unwrap(), 1.0 / 3.0);
        assert_eq!(guessing_probability(&NymAssignment::single(4)).unwrap(), 1.0);
        let skew = NymAssignment::new(vec![0, 0, 0, 1], 2).unwrap();
        assert_eq!(guessing_probability(&skew).unwrap(), 0.75);
    }

    #[test]
    fn association_fractions() {
        // Nym 0: 4 users, one rated item 0, all rated item 1.
        let mut t = vec![RatingTriplet::new(0, 0, 1.0)];
        t.extend((0..4).map(|u| RatingTriplet::new(u, 1, 2.0)));
        let r = SparseRatings::new(5, 3, t).unwrap();
        let a = NymAssignment::new(vec![0, 0, 0, 0, 1], 3).unwrap();
        let agg = aggregate(&r, &a).unwrap();
        let assoc = association_probability(&agg, AssociationMode::UserShare);
        assert_eq!(assoc.get(0, 0), Some(0.25));
        assert_eq!(assoc.get(0, 1), Some(1.0));
        assert_eq!(assoc.get(0, 2), Some(0.0));
        assert_eq!(assoc.get(1, 0), Some(0.0));
        assert_eq!(assoc.get(2, 0), None);
        assert_eq!(assoc.worst_items()[0], Some((1, 1.0)));
        let share = association_probability(&agg, AssociationMode::RatingShare);
        assert_eq!(share.get(0, 0), Some(0.2));
        assert_eq!(share.get(1, 1), None);
    }
}
