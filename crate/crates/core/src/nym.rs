//! User-to-nym assignment and the per-nym aggregates the system side sees.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorization::FactorModel;
use crate::ratings::SparseRatings;
use crate::rng;

/// Single-membership map from users to nyms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NymAssignment {
    nym_of: Vec<u32>,
    n_nyms: usize,
}

impl NymAssignment {
    pub fn new(nym_of: Vec<u32>, n_nyms: usize) -> Result<Self> {
        if n_nyms == 0 {
            return Err(Error::invalid("nym count must be at least 1"));
        }
        if let Some(&bad) = nym_of.iter().find(|&&g| g as usize >= n_nyms) {
            return Err(Error::invalid(format!("nym {bad} outside [0, {n_nyms})")));
        }
        Ok(NymAssignment { nym_of, n_nyms })
    }

    /// Uniform random assignment drawn from the `assignment` substream of `seed`.
    pub fn random(n_users: usize, n_nyms: usize, seed: u64) -> Result<Self> {
        if n_nyms == 0 {
            return Err(Error::invalid("nym count must be at least 1"));
        }
        let mut rng = rng::substream(seed, rng::ASSIGNMENT);
        let nym_of = (0..n_users)
            .map(|_| rng.random_range(0..n_nyms as u32))
            .collect();
        Ok(NymAssignment { nym_of, n_nyms })
    }

    /// Every user in nym 0.
    pub fn single(n_users: usize) -> Self {
        NymAssignment {
            nym_of: vec![0; n_users],
            n_nyms: 1,
        }
    }

    /// User `u` in nym `u`.
    pub fn identity(n_users: usize) -> Self {
        NymAssignment {
            nym_of: (0..n_users as u32).collect(),
            n_nyms: n_users.max(1),
        }
    }

    pub fn n_users(&self) -> usize {
        self.nym_of.len()
    }

    pub fn n_nyms(&self) -> usize {
        self.n_nyms
    }

    pub fn nym_of(&self, user: usize) -> usize {
        self.nym_of[user] as usize
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.nym_of
    }

    pub(crate) fn set(&mut self, user: usize, nym: usize) {
        self.nym_of[user] = nym as u32;
    }

    pub fn nym_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_nyms];
        for &g in &self.nym_of {
            sizes[g as usize] += 1;
        }
        sizes
    }

    /// Drops nyms without users and relabels the rest to `0..p'` in order.
    /// Returns the kept old nym indices.
    pub fn compact(&mut self) -> Vec<usize> {
        let sizes = self.nym_sizes();
        let kept: Vec<usize> = (0..self.n_nyms).filter(|&g| sizes[g] > 0).collect();
        if kept.is_empty() {
            return (0..self.n_nyms).collect();
        }
        let mut relabel = vec![u32::MAX; self.n_nyms];
        for (new, &old) in kept.iter().enumerate() {
            relabel[old] = new as u32;
        }
        for g in &mut self.nym_of {
            *g = relabel[*g as usize];
        }
        self.n_nyms = kept.len();
        kept
    }

    pub(crate) fn widen(&mut self, n_nyms: usize) {
        debug_assert!(n_nyms >= self.n_nyms);
        self.n_nyms = n_nyms;
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,nym")?;
        for (u, g) in self.nym_of.iter().enumerate() {
            writeln!(w, "{u},{g}")?;
        }
        Ok(())
    }

    /// Reads `user,nym` rows; users must be `0..n` in order.
    pub fn read_csv<R: BufRead>(reader: R, n_nyms: usize) -> Result<Self> {
        let mut nym_of = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if idx == 0 && line.starts_with("user") || line.is_empty() {
                continue;
            }
            let parse_err = |m: &str| Error::Parse {
                line: idx + 1,
                message: m.to_owned(),
            };
            let (u, g) = line
                .split_once(',')
                .ok_or_else(|| parse_err("expected user,nym"))?;
            let u: usize = u.trim().parse().map_err(|_| parse_err("bad user"))?;
            let g: u32 = g.trim().parse().map_err(|_| parse_err("bad nym"))?;
            if u != nym_of.len() {
                return Err(parse_err("users must be listed in order"));
            }
            nym_of.push(g);
        }
        Self::new(nym_of, n_nyms)
    }
}

/// One nonzero (nym, item) aggregate cell; `index` is the other axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggCell {
    pub index: u32,
    pub count: u32,
    pub mean: f64,
}

/// Per-item diagonal counts and per-nym mean ratings.
///
/// Only cells with a nonzero count are stored; a missing cell means the
/// count is zero and the mean is undefined.
#[derive(Clone, Debug)]
pub struct NymAggregates {
    n_nyms: usize,
    n_items: usize,
    item_ptr: Vec<usize>,
    by_item: Vec<AggCell>,
    nym_ptr: Vec<usize>,
    by_nym: Vec<AggCell>,
    nym_sizes: Vec<usize>,
    n_ratings: usize,
}

impl NymAggregates {
    pub fn n_nyms(&self) -> usize {
        self.n_nyms
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Cells of item `v`, one per nym with at least one rater, ascending nym.
    pub fn item_cells(&self, item: usize) -> &[AggCell] {
        &self.by_item[self.item_ptr[item]..self.item_ptr[item + 1]]
    }

    /// Cells of nym `g`, ascending item.
    pub fn nym_cells(&self, nym: usize) -> &[AggCell] {
        &self.by_nym[self.nym_ptr[nym]..self.nym_ptr[nym + 1]]
    }

    pub fn count(&self, nym: usize, item: usize) -> u32 {
        self.cell(nym, item).map_or(0, |c| c.count)
    }

    pub fn mean(&self, nym: usize, item: usize) -> Option<f64> {
        self.cell(nym, item).map(|c| c.mean)
    }

    fn cell(&self, nym: usize, item: usize) -> Option<&AggCell> {
        let cells = self.item_cells(item);
        cells
            .binary_search_by_key(&(nym as u32), |c| c.index)
            .ok()
            .map(|i| &cells[i])
    }

    pub fn nym_sizes(&self) -> &[usize] {
        &self.nym_sizes
    }

    /// Total ratings attributed to nym `g`, i.e. the sum over items of its counts.
    pub fn nym_support(&self, nym: usize) -> usize {
        self.nym_cells(nym).iter().map(|c| c.count as usize).sum()
    }

    pub fn n_ratings(&self) -> usize {
        self.n_ratings
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "nym,item,count,mean")?;
        for g in 0..self.n_nyms {
            for c in self.nym_cells(g) {
                writeln!(w, "{},{},{},{}", g, c.index, c.count, c.mean)?;
            }
        }
        Ok(())
    }

    /// Reads the audit CSV back. `nym_sizes` are not part of that file.
    pub fn read_csv<R: BufRead>(
        reader: R,
        n_nyms: usize,
        n_items: usize,
        nym_sizes: Vec<usize>,
    ) -> Result<Self> {
        let mut cells: Vec<(u32, u32, u32, f64)> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || idx == 0 && line.starts_with("nym") {
                continue;
            }
            let err = || Error::Parse {
                line: idx + 1,
                message: "expected nym,item,count,mean".into(),
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err());
            }
            let g: u32 = f[0].parse().map_err(|_| err())?;
            let v: u32 = f[1].parse().map_err(|_| err())?;
            let c: u32 = f[2].parse().map_err(|_| err())?;
            let mean: f64 = f[3].parse().map_err(|_| err())?;
            if g as usize >= n_nyms || v as usize >= n_items || c == 0 {
                return Err(err());
            }
            cells.push((v, g, c, mean));
        }
        cells.sort_by_key(|&(v, g, _, _)| (v, g));
        let mut item_ptr = vec![0usize; n_items + 1];
        for &(v, ..) in &cells {
            item_ptr[v as usize + 1] += 1;
        }
        for i in 0..n_items {
            item_ptr[i + 1] += item_ptr[i];
        }
        let by_item: Vec<AggCell> = cells
            .iter()
            .map(|&(_, g, count, mean)| AggCell {
                index: g,
                count,
                mean,
            })
            .collect();
        Ok(Self::from_item_major(n_nyms, n_items, item_ptr, by_item, nym_sizes))
    }

    fn from_item_major(
        n_nyms: usize,
        n_items: usize,
        item_ptr: Vec<usize>,
        by_item: Vec<AggCell>,
        nym_sizes: Vec<usize>,
    ) -> Self {
        let mut nym_ptr = vec![0usize; n_nyms + 1];
        for c in &by_item {
            nym_ptr[c.index as usize + 1] += 1;
        }
        for g in 0..n_nyms {
            nym_ptr[g + 1] += nym_ptr[g];
        }
        let mut fill = nym_ptr.clone();
        let mut by_nym = vec![
            AggCell {
                index: 0,
                count: 0,
                mean: 0.0
            };
            by_item.len()
        ];
        for v in 0..n_items {
            for c in &by_item[item_ptr[v]..item_ptr[v + 1]] {
                let g = c.index as usize;
                by_nym[fill[g]] = AggCell {
                    index: v as u32,
                    ..*c
                };
                fill[g] += 1;
            }
        }
        let n_ratings = by_item.iter().map(|c| c.count as usize).sum();
        NymAggregates {
            n_nyms,
            n_items,
            item_ptr,
            by_item,
            nym_ptr,
            by_nym,
            nym_sizes,
            n_ratings,
        }
    }
}

/// Builds the aggregates from all users in `train`.
pub fn aggregate(train: &SparseRatings, assignment: &NymAssignment) -> Result<NymAggregates> {
    aggregate_active(train, assignment, None)
}

/// As [`aggregate`], restricted to users flagged in `active` (cold start).
pub fn aggregate_active(
    train: &SparseRatings,
    assignment: &NymAssignment,
    active: Option<&[bool]>,
) -> Result<NymAggregates> {
    if assignment.n_users() != train.n_users() {
        return Err(Error::invalid(format!(
            "assignment covers {} users, ratings have {}",
            assignment.n_users(),
            train.n_users()
        )));
    }
    if let Some(a) = active {
        if a.len() != train.n_users() {
            return Err(Error::invalid("active mask length mismatch"));
        }
    }
    let p = assignment.n_nyms();
    let is_active = |u: usize| active.is_none_or(|a| a[u]);

    let per_item: Vec<Vec<AggCell>> = (0..train.n_items())
        .into_par_iter()
        .map_init(
            || (vec![(0u32, 0.0f64); p], Vec::<u32>::new()),
            |(acc, touched), v| {
                for &(u, r) in train.item_ratings(v) {
                    let u = u as usize;
                    if !is_active(u) {
                        continue;
                    }
                    let g = assignment.nym_of(u);
                    if acc[g].0 == 0 {
                        touched.push(g as u32);
                    }
                    acc[g].0 += 1;
                    acc[g].1 += r;
                }
                touched.sort_unstable();
                let cells = touched
                    .iter()
                    .map(|&g| {
                        let (count, sum) = acc[g as usize];
                        AggCell {
                            index: g,
                            count,
                            mean: sum / f64::from(count),
                        }
                    })
                    .collect();
                for &g in touched.iter() {
                    acc[g as usize] = (0, 0.0);
                }
                touched.clear();
                cells
            },
        )
        .collect();

    let mut item_ptr = Vec::with_capacity(train.n_items() + 1);
    item_ptr.push(0);
    let mut by_item = Vec::new();
    for cells in per_item {
        by_item.extend(cells);
        item_ptr.push(by_item.len());
    }
    let mut nym_sizes = vec![0usize; p];
    for u in (0..train.n_users()).filter(|&u| is_active(u)) {
        nym_sizes[assignment.nym_of(u)] += 1;
    }
    Ok(NymAggregates::from_item_major(
        p,
        train.n_items(),
        item_ptr,
        by_item,
        nym_sizes,
    ))
}

/// Squared-error residual of one user's ratings under every nym.
pub fn nym_residuals(user_ratings: &[(u32, f64)], model: &FactorModel) -> Vec<f64> {
    let u = model.u_tilde();
    let v = model.v();
    let mut res = vec![0.0; u.ncols()];
    for &(item, r) in user_ratings {
        let vv = v.column(item as usize);
        for (g, acc) in res.iter_mut().enumerate() {
            let e = r - u.column(g).dot(&vv);
            *acc += e * e;
        }
    }
    res
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (g, &x) in values.iter().enumerate().skip(1) {
        if x < values[best] {
            best = g;
        }
    }
    best
}

/// The nym minimizing the user's own residual sum. A user without ratings
/// keeps `current`.
pub fn choose_nym(user_ratings: &[(u32, f64)], model: &FactorModel, current: usize) -> usize {
    if user_ratings.is_empty() {
        return current;
    }
    argmin(&nym_residuals(user_ratings, model))
}

/// A user's nym change, with the residuals before and after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NymMove {
    pub user: usize,
    pub from: usize,
    pub to: usize,
    pub residual_from: f64,
    pub residual_to: f64,
}

/// Evaluates each listed user against the model. Only users whose best nym is
/// strictly better than their current one move. Each evaluation reads only
/// that user's ratings and the public model.
pub fn propose_moves(
    train: &SparseRatings,
    model: &FactorModel,
    assignment: &NymAssignment,
    users: &[usize],
) -> Vec<NymMove> {
    users
        .par_iter()
        .filter_map(|&u| {
            let ratings = train.user_ratings(u);
            if ratings.is_empty() {
                return None;
            }
            let res = nym_residuals(ratings, model);
            let from = assignment.nym_of(u);
            let to = argmin(&res);
            (res[to] < res[from]).then_some(NymMove {
                user: u,
                from,
                to,
                residual_from: res[from],
                residual_to: res[to],
            })
        })
        .collect()
}

/// Block-2 update for the listed users; everyone else is unchanged.
pub fn update_all_nyms(
    train: &SparseRatings,
    model: &FactorModel,
    assignment: &NymAssignment,
    users: &[usize],
) -> NymAssignment {
    let mut next = assignment.clone();
    for m in propose_moves(train, model, assignment, users) {
        next.set(m.user, m.to);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::{FactorModel, Hyperparams};
    use crate::ratings::RatingTriplet;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (SparseRatings, NymAssignment) {
        // users 0,1 -> nym 0; user 2 -> nym 1; item 0 rated 4, 2, 5.
        let t = vec![
            RatingTriplet::new(0, 0, 4.0),
            RatingTriplet::new(1, 0, 2.0),
            RatingTriplet::new(2, 0, 5.0),
            RatingTriplet::new(2, 1, 1.0),
        ];
        let r = SparseRatings::new(3, 3, t).unwrap();
        (r, NymAssignment::new(vec![0, 0, 1], 2).unwrap())
    }

    fn model(u: &[f64], d: usize, v: &[f64]) -> FactorModel {
        let p = u.len() / d;
        let m = v.len() / d;
        FactorModel::new(
            DMatrix::from_column_slice(d, p, u),
            DMatrix::from_column_slice(d, m, v),
            Hyperparams::with_dim(d),
        )
        .unwrap()
    }

    #[test]
    fn aggregate_averages_per_nym() {
        let (r, a) = fixture();
        let agg = aggregate(&r, &a).unwrap();
        assert_eq!((agg.count(0, 0), agg.count(1, 0)), (2, 1));
        assert_eq!(agg.mean(0, 0), Some(3.0));
        assert_eq!(agg.mean(1, 0), Some(5.0));
        // item 2 has no ratings
        assert_eq!((agg.count(0, 2), agg.count(1, 2)), (0, 0));
        assert_eq!(agg.mean(0, 2), None);
        assert_eq!(agg.nym_sizes(), &[2, 1]);
        assert_eq!(agg.nym_support(1), 2);
        assert_eq!(agg.n_ratings(), 4);
    }

    #[test]
    fn single_nym_gives_item_means() {
        let (r, _) = fixture();
        let agg = aggregate(&r, &NymAssignment::single(3)).unwrap();
        assert!((agg.mean(0, 0).unwrap() - 11.0 / 3.0).abs() < 1e-12);
        assert_eq!(agg.mean(0, 1), Some(1.0));
    }

    #[test]
    fn active_mask_excludes_users() {
        let (r, a) = fixture();
        let agg = aggregate_active(&r, &a, Some(&[true, false, true])).unwrap();
        assert_eq!(agg.count(0, 0), 1);
        assert_eq!(agg.mean(0, 0), Some(4.0));
        assert_eq!(agg.nym_sizes(), &[1, 1]);
    }

    #[test]
    fn aggregates_csv_roundtrip() {
        let (r, a) = fixture();
        let agg = aggregate(&r, &a).unwrap();
        let mut buf = Vec::new();
        agg.write_csv(&mut buf).unwrap();
        let back = NymAggregates::read_csv(buf.as_slice(), 2, 3, vec![2, 1]).unwrap();
        for v in 0..3 {
            assert_eq!(back.item_cells(v), agg.item_cells(v));
        }
    }

    #[test]
    fn choose_nym_scalar_case() {
        // d=1, U~=(1, 2), V=1, R=2: residuals 1 vs 0.
        let m = model(&[1.0, 2.0], 1, &[1.0]);
        assert_eq!(choose_nym(&[(0, 2.0)], &m, 0), 1);
    }

    #[test]
    fn choose_nym_ties_go_low_and_empty_keeps_current() {
        let m = model(&[0.5, 0.5, 0.5], 1, &[1.0]);
        assert_eq!(choose_nym(&[(0, 3.0)], &m, 2), 0);
        assert_eq!(choose_nym(&[], &m, 2), 2);
    }

    #[test]
    fn choose_nym_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let u: Vec<f64> = (0..d * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = model(&u, d, &v);
        let ratings: Vec<(u32, f64)> = (0..8).map(|i| (i, rng.random_range(-2.0..2.0))).collect();
        // Independent evaluation straight from the flat buffers.
        let mut best = (f64::INFINITY, usize::MAX);
        for g in 0..5 {
            let mut s = 0.0;
            for &(i, r) in &ratings {
                let pred: f64 = (0..d).map(|k| u[g * d + k] * v[i as usize * d + k]).sum();
                s += (r - pred) * (r - pred);
            }
            if s < best.0 {
                best = (s, g);
            }
        }
        assert_eq!(choose_nym(&ratings, &m, 0), best.1);
        let res = nym_residuals(&ratings, &m);
        assert!(res.iter().all(|&x| x >= res[best.1]));
    }

    #[test]
    fn update_all_nyms_subsets() {
        let (r, a) = fixture();
        let m = model(&[5.0, 1.0], 1, &[1.0, 0.0, 1.0]);
        assert_eq!(update_all_nyms(&r, &m, &a, &[]), a);
        let next = update_all_nyms(&r, &m, &a, &[2]);
        assert_eq!(next.as_slice(), &[0, 0, 0]);
        let one = NymAssignment::single(3);
        let m1 = model(&[1.0], 1, &[1.0, 1.0, 1.0]);
        assert_eq!(update_all_nyms(&r, &m1, &one, &[0, 1, 2]), one);
    }

    #[test]
    fn compact_relabels() {
        let mut a = NymAssignment::new(vec![3, 1, 3, 1], 5).unwrap();
        assert_eq!(a.compact(), vec![1, 3]);
        assert_eq!(a.as_slice(), &[1, 0, 1, 0]);
        assert_eq!(a.n_nyms(), 2);
    }

    #[test]
    fn aggregate_is_permutation_equivariant() {
        let (r, a) = fixture();
        let perm = [1u32, 0];
        let b = NymAssignment::new(a.as_slice().iter().map(|&g| perm[g as usize]).collect(), 2)
            .unwrap();
        let (x, y) = (aggregate(&r, &a).unwrap(), aggregate(&r, &b).unwrap());
        for v in 0..3 {
            for g in 0..2 {
                assert_eq!(x.count(g, v), y.count(perm[g] as usize, v));
                assert_eq!(x.mean(g, v), y.mean(perm[g] as usize, v));
            }
        }
    }

    #[test]
    fn assignment_csv_roundtrip() {
        let a = NymAssignment::new(vec![2, 0, 1], 3).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(NymAssignment::read_csv(buf.as_slice(), 3).unwrap(), a);
    }
}
