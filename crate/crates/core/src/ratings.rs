//! Sparse user-item rating storage, loading, splitting.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingTriplet {
    pub user: u32,
    pub item: u32,
    pub value: f64,
}

impl RatingTriplet {
    pub fn new(user: usize, item: usize, value: f64) -> Self {
        RatingTriplet {
            user: user as u32,
            item: item as u32,
            value,
        }
    }
}

/// Compressed index over one axis: `entries[ptr[i]..ptr[i + 1]]` belong to row `i`.
#[derive(Clone, Debug, Default)]
struct Csr {
    ptr: Vec<usize>,
    entries: Vec<(u32, f64)>,
}

impl Csr {
    fn build(rows: usize, triplets: &[RatingTriplet], by_user: bool) -> Csr {
        let key = |t: &RatingTriplet| if by_user { t.user } else { t.item } as usize;
        let mut ptr = vec![0usize; rows + 1];
        for t in triplets {
            ptr[key(t) + 1] += 1;
        }
        for i in 0..rows {
            ptr[i + 1] += ptr[i];
        }
        let mut fill = ptr.clone();
        let mut entries = vec![(0u32, 0.0); triplets.len()];
        for t in triplets {
            let k = key(t);
            let other = if by_user { t.item } else { t.user };
            entries[fill[k]] = (other, t.value);
            fill[k] += 1;
        }
        Csr { ptr, entries }
    }

    fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.entries[self.ptr[i]..self.ptr[i + 1]]
    }
}

/// The observed rating set together with per-user and per-item views.
///
/// Immutable once built. Both views keep entries in triplet order.
#[derive(Clone, Debug)]
pub struct SparseRatings {
    n_users: usize,
    n_items: usize,
    triplets: Vec<RatingTriplet>,
    by_user: Csr,
    by_item: Csr,
}

impl SparseRatings {
    pub fn new(n_users: usize, n_items: usize, triplets: Vec<RatingTriplet>) -> Result<Self> {
        if n_users > u32::MAX as usize || n_items > u32::MAX as usize {
            return Err(Error::invalid("dimensions exceed u32 index range"));
        }
        for t in &triplets {
            if t.user as usize >= n_users || t.item as usize >= n_items {
                return Err(Error::invalid(format!(
                    "triplet ({}, {}) outside {}x{}",
                    t.user, t.item, n_users, n_items
                )));
            }
            if !t.value.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite rating for ({}, {})",
                    t.user, t.item
                )));
            }
        }
        if let Some(i) = find_duplicate(n_users, n_items, &triplets) {
            let t = triplets[i];
            return Err(Error::Duplicate {
                line: i + 1,
                user: t.user.to_string(),
                item: t.item.to_string(),
            });
        }
        Ok(Self::from_valid(n_users, n_items, triplets))
    }

    pub fn empty(n_users: usize, n_items: usize) -> Self {
        Self::from_valid(n_users, n_items, Vec::new())
    }

    fn from_valid(n_users: usize, n_items: usize, triplets: Vec<RatingTriplet>) -> Self {
        let by_user = Csr::build(n_users, &triplets, true);
        let by_item = Csr::build(n_items, &triplets, false);
        SparseRatings {
            n_users,
            n_items,
            triplets,
            by_user,
            by_item,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[RatingTriplet] {
        &self.triplets
    }

    /// `(item, value)` pairs rated by `user`.
    pub fn user_ratings(&self, user: usize) -> &[(u32, f64)] {
        self.by_user.row(user)
    }

    /// `(user, value)` pairs for `item`.
    pub fn item_ratings(&self, item: usize) -> &[(u32, f64)] {
        self.by_item.row(item)
    }

    pub fn density(&self) -> f64 {
        let cells = self.n_users as f64 * self.n_items as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.len() as f64 / cells
        }
    }

    pub fn global_mean(&self) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        Some(self.triplets.iter().map(|t| t.value).sum::<f64>() / self.len() as f64)
    }

    /// Keeps the triplets matching `keep`, retaining the parent's dimensions.
    pub fn filter(&self, mut keep: impl FnMut(&RatingTriplet) -> bool) -> SparseRatings {
        let kept = self.triplets.iter().copied().filter(|t| keep(t)).collect();
        Self::from_valid(self.n_users, self.n_items, kept)
    }

    /// Canonical interchange form: `user,item,rating` with dense indices.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,item,rating")?;
        for t in &self.triplets {
            writeln!(w, "{},{},{}", t.user, t.item, t.value)?;
        }
        Ok(())
    }
}

/// Index of the first triplet (in input order) that repeats an earlier (user, item).
fn find_duplicate(n_users: usize, n_items: usize, triplets: &[RatingTriplet]) -> Option<usize> {
    let mut ptr = vec![0usize; n_users + 1];
    for t in triplets {
        ptr[t.user as usize + 1] += 1;
    }
    for i in 0..n_users {
        ptr[i + 1] += ptr[i];
    }
    let mut order = vec![0usize; triplets.len()];
    let mut fill = ptr.clone();
    for (i, t) in triplets.iter().enumerate() {
        order[fill[t.user as usize]] = i;
        fill[t.user as usize] += 1;
    }
    let mut mark = vec![u32::MAX; n_items];
    let mut first = None::<usize>;
    for u in 0..n_users {
        for &i in &order[ptr[u]..ptr[u + 1]] {
            let item = triplets[i].item as usize;
            if mark[item] == u as u32 {
                first = Some(first.map_or(i, |f| f.min(i)));
            }
            mark[item] = u as u32;
        }
    }
    first
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `u,i,r`
    CsvComma,
    /// MovieLens `u::i::r::timestamp`
    ColonColon,
    Tab,
}

impl Format {
    fn separator(self) -> &'static str {
        match self {
            Format::CsvComma => ",",
            Format::ColonColon => "::",
            Format::Tab => "\t",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" | "csv_comma" | "comma" => Ok(Format::CsvComma),
            "coloncolon" | "movielens" | "::" => Ok(Format::ColonColon),
            "tab" | "tsv" => Ok(Format::Tab),
            other => Err(Error::Config(format!("unknown ratings format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::CsvComma => "csv",
            Format::ColonColon => "coloncolon",
            Format::Tab => "tab",
        })
    }
}

/// External ids in dense-index order.
#[derive(Clone, Debug, Default)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

struct RawLine<'a> {
    user: &'a str,
    item: &'a str,
    value: f64,
}

fn split_line<'a>(line: &'a str, format: Format, lineno: usize) -> Result<RawLine<'a>> {
    let mut fields = line.split(format.separator()).map(str::trim);
    let (Some(user), Some(item), Some(rating)) = (fields.next(), fields.next(), fields.next())
    else {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected user{0}item{0}rating", format.separator()),
        });
    };
    let value: f64 = rating.parse().map_err(|_| Error::Parse {
        line: lineno,
        message: format!("invalid rating `{rating}`"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            line: lineno,
            message: format!("non-finite rating `{rating}`"),
        });
    }
    Ok(RawLine { user, item, value })
}

/// Iterates the data lines of a ratings stream. A first line whose rating
/// column is not numeric is treated as a header and skipped.
fn for_each_line<R: BufRead>(
    reader: R,
    format: Format,
    mut f: impl FnMut(usize, RawLine<'_>) -> Result<()>,
) -> Result<()> {
    let mut seen_data = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match split_line(trimmed, format, lineno) {
            Ok(raw) => {
                seen_data = true;
                f(lineno, raw)?;
            }
            Err(_) if !seen_data && looks_like_header(trimmed, format) => {
                seen_data = true;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn looks_like_header(line: &str, format: Format) -> bool {
    let third = line.split(format.separator()).nth(2).map(str::trim);
    match third {
        Some(r) => r.parse::<f64>().is_err(),
        None => !line.starts_with(|c: char| c.is_ascii_digit()),
    }
}

/// Loads triplets, densely re-indexing user and item ids in first-seen order.
pub fn load_triplets<R: BufRead>(reader: R, format: Format) -> Result<SparseRatings> {
    load_triplets_with_ids(reader, format).map(|(r, _)| r)
}

pub fn load_triplets_with_ids<R: BufRead>(
    reader: R,
    format: Format,
) -> Result<(SparseRatings, IdMap)> {
    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let mut ids = IdMap::default();
    let mut triplets = Vec::new();
    let mut lines = Vec::new();
    for_each_line(reader, format, |lineno, raw| {
        let u = intern(&mut users, &mut ids.users, raw.user);
        let i = intern(&mut items, &mut ids.items, raw.item);
        triplets.push(RatingTriplet {
            user: u,
            item: i,
            value: raw.value,
        });
        lines.push(lineno);
        Ok(())
    })?;
    if let Some(dup) = find_duplicate(ids.users.len(), ids.items.len(), &triplets) {
        let t = triplets[dup];
        return Err(Error::Duplicate {
            line: lines[dup],
            user: ids.users[t.user as usize].clone(),
            item: ids.items[t.item as usize].clone(),
        });
    }
    let ratings = SparseRatings::from_valid(ids.users.len(), ids.items.len(), triplets);
    Ok((ratings, ids))
}

fn intern(map: &mut HashMap<String, u32>, names: &mut Vec<String>, key: &str) -> u32 {
    if let Some(&i) = map.get(key) {
        return i;
    }
    let i = names.len() as u32;
    map.insert(key.to_owned(), i);
    names.push(key.to_owned());
    i
}

/// Loads triplets whose ids already are dense indices (e.g. the canonical
/// CSV written by [`SparseRatings::write_csv`]), against known dimensions.
pub fn load_indexed<R: BufRead>(
    reader: R,
    format: Format,
    n_users: usize,
    n_items: usize,
) -> Result<SparseRatings> {
    parse_indexed(reader, format, Some((n_users, n_items)))
}

/// Like [`load_indexed`], with dimensions one past the largest ids seen.
pub fn load_indexed_auto<R: BufRead>(reader: R, format: Format) -> Result<SparseRatings> {
    parse_indexed(reader, format, None)
}

fn parse_indexed<R: BufRead>(
    reader: R,
    format: Format,
    dims: Option<(usize, usize)>,
) -> Result<SparseRatings> {
    let (user_bound, item_bound) = dims.unwrap_or((u32::MAX as usize, u32::MAX as usize));
    let mut triplets = Vec::new();
    let mut lines = Vec::new();
    for_each_line(reader, format, |lineno, raw| {
        let parse = |s: &str, bound: usize, what: &str| -> Result<u32> {
            match s.parse::<usize>() {
                Ok(i) if i < bound => Ok(i as u32),
                _ => Err(Error::Parse {
                    line: lineno,
                    message: format!("{what} index `{s}` not in [0, {bound})"),
                }),
            }
        };
        triplets.push(RatingTriplet {
            user: parse(raw.user, user_bound, "user")?,
            item: parse(raw.item, item_bound, "item")?,
            value: raw.value,
        });
        lines.push(lineno);
        Ok(())
    })?;
    let (n_users, n_items) = dims.unwrap_or_else(|| {
        let nu = triplets.iter().map(|t| t.user as usize + 1).max().unwrap_or(0);
        let ni = triplets.iter().map(|t| t.item as usize + 1).max().unwrap_or(0);
        (nu, ni)
    });
    if let Some(dup) = find_duplicate(n_users, n_items, &triplets) {
        let t = triplets[dup];
        return Err(Error::Duplicate {
            line: lines[dup],
            user: t.user.to_string(),
            item: t.item.to_string(),
        });
    }
    Ok(SparseRatings::from_valid(n_users, n_items, triplets))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_fraction: train,
            valid_fraction: valid,
            test_fraction: test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("split fractions must be nonnegative"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: SparseRatings,
    pub valid: SparseRatings,
    pub test: SparseRatings,
}

/// Per-triplet seeded partition into train/valid/test.
pub fn split(ratings: &SparseRatings, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, rng::SPLIT);
    let cut_train = spec.train_fraction;
    let cut_valid = spec.train_fraction + spec.valid_fraction;
    let mut parts: [Vec<RatingTriplet>; 3] = Default::default();
    for t in ratings.triplets() {
        let x: f64 = rng.random();
        let k = if x < cut_train {
            0
        } else if x < cut_valid {
            1
        } else {
            2
        };
        parts[k].push(*t);
    }
    let [train, valid, test] =
        parts.map(|p| SparseRatings::from_valid(ratings.n_users, ratings.n_items, p));
    Ok(Split { train, valid, test })
}

/// Drops each triplet independently with probability `missing_fraction`.
pub fn remove_entries(
    ratings: &SparseRatings,
    missing_fraction: f64,
    seed: u64,
) -> Result<SparseRatings> {
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(Error::invalid("missing_fraction must be in [0, 1)"));
    }
    let mut rng = rng::substream(seed, rng::REMOVAL);
    Ok(ratings.filter(|_| rng.random::<f64>() >= missing_fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SparseRatings {
        let t = vec![
            RatingTriplet::new(0, 1, 4.0),
            RatingTriplet::new(1, 0, 2.0),
            RatingTriplet::new(0, 0, 3.5),
            RatingTriplet::new(2, 1, 1.0),
        ];
        SparseRatings::new(3, 2, t).unwrap()
    }

    #[test]
    fn parse_coloncolon() {
        let r = load_triplets("1::10::4.0\n2::10::2.0".as_bytes(), Format::ColonColon).unwrap();
        assert_eq!((r.n_users(), r.n_items(), r.len()), (2, 1, 2));
        assert_eq!(r.item_ratings(0), &[(0, 4.0), (1, 2.0)]);
    }

    #[test]
    fn empty_stream() {
        let r = load_triplets("".as_bytes(), Format::CsvComma).unwrap();
        assert_eq!((r.n_users(), r.n_items(), r.len()), (0, 0, 0));
        assert_eq!(r.density(), 0.0);
    }

    #[test]
    fn header_and_extra_fields() {
        let src = "user,item,rating,ts\nalice,x,5,99\nbob,x,3,100\nalice,y,1,101\n";
        let (r, ids) = load_triplets_with_ids(src.as_bytes(), Format::CsvComma).unwrap();
        assert_eq!(ids.users, ["alice", "bob"]);
        assert_eq!(ids.items, ["x", "y"]);
        assert_eq!(r.user_ratings(0), &[(0, 5.0), (1, 1.0)]);
        let tsv = load_triplets("7\t8\t2.5\n".as_bytes(), Format::Tab).unwrap();
        assert_eq!(tsv.triplets()[0].value, 2.5);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let src = "1,1,3\n2,2,oops\n";
        match load_triplets(src.as_bytes(), Format::CsvComma) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match load_triplets("1,1\n".as_bytes(), Format::CsvComma) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_pair_rejected() {
        let src = "1,1,3\n2,1,4\n1,1,5\n";
        match load_triplets(src.as_bytes(), Format::CsvComma) {
            Err(Error::Duplicate { line, user, item }) => {
                assert_eq!((line, user.as_str(), item.as_str()), (3, "1", "1"))
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let dup = vec![RatingTriplet::new(0, 0, 1.0), RatingTriplet::new(0, 0, 2.0)];
        assert!(matches!(
            SparseRatings::new(1, 1, dup),
            Err(Error::Duplicate { .. })
        ));
    }

    #[test]
    fn out_of_range_index_rejected() {
        assert!(SparseRatings::new(1, 1, vec![RatingTriplet::new(1, 0, 1.0)]).is_err());
        assert!(load_indexed("0,5,1.0".as_bytes(), Format::CsvComma, 1, 2).is_err());
    }

    #[test]
    fn views_are_transposes() {
        let r = small();
        assert_eq!(r.user_ratings(0), &[(1, 4.0), (0, 3.5)]);
        assert_eq!(r.item_ratings(1), &[(0, 4.0), (2, 1.0)]);
        assert_eq!(r.density(), 4.0 / 6.0);
        assert_eq!(r.global_mean(), Some(10.5 / 4.0));
    }

    #[test]
    fn identity_split() {
        let r = small();
        let s = split(&r, &SplitSpec::new(1.0, 0.0, 0.0, 3).unwrap()).unwrap();
        assert_eq!(s.train.triplets(), r.triplets());
        assert!(s.valid.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.8, 0.1, 0.2, 0).is_err());
        assert!(SplitSpec::new(1.1, -0.1, 0.0, 0).is_err());
        assert!(SplitSpec::new(0.85, 0.05, 0.10, 0).is_ok());
    }

    fn dense(n: usize, m: usize) -> SparseRatings {
        let t = (0..n)
            .flat_map(|u| (0..m).map(move |v| RatingTriplet::new(u, v, (u * m + v) as f64)))
            .collect();
        SparseRatings::new(n, m, t).unwrap()
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let r = dense(10, 10);
        let spec = SplitSpec::new(0.85, 0.05, 0.10, 1).unwrap();
        let a = split(&r, &spec).unwrap();
        let b = split(&r, &spec).unwrap();
        assert_eq!(a.train.len() + a.valid.len() + a.test.len(), 100);
        assert_eq!(a.test.triplets(), b.test.triplets());
        let mut all: Vec<_> = [&a.train, &a.valid, &a.test]
            .iter()
            .flat_map(|s| s.triplets().iter().map(|t| (t.user, t.item)))
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(a.test.n_users(), 10);
    }

    #[test]
    fn removal_identity_and_binomial_concentration() {
        let r = dense(100, 100);
        assert_eq!(remove_entries(&r, 0.0, 5).unwrap().len(), r.len());
        // Binomial(10_000, 0.5): mean 5000, sd 50.
        let kept = remove_entries(&r, 0.5, 5).unwrap().len() as f64;
        assert!((kept - 5000.0).abs() <= 3.0 * 50.0, "kept {kept}");
        assert!(remove_entries(&r, 1.0, 5).is_err());
    }

    proptest! {
        #[test]
        fn csv_roundtrip(cells in proptest::collection::btree_map((0u32..7, 0u32..5), -10.0f64..10.0, 0..30)) {
            let t: Vec<_> = cells.iter().map(|(&(u, i), &v)| RatingTriplet { user: u, item: i, value: v }).collect();
            let r = SparseRatings::new(7, 5, t).unwrap();
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            let back = load_indexed(buf.as_slice(), Format::CsvComma, 7, 5).unwrap();
            prop_assert_eq!(back.triplets(), r.triplets());
            let su: usize = (0..7).map(|u| back.user_ratings(u).len()).sum();
            let si: usize = (0..5).map(|i| back.item_ratings(i).len()).sum();
            prop_assert_eq!(su, back.len());
            prop_assert_eq!(si, back.len());
        }
    }
}
