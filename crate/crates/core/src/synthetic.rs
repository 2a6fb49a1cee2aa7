//! Clustered synthetic ratings with known ground truth.
//!
//! Group centres are drawn in the latent space, users scatter around their
//! group's centre, items are Gaussian, and the full matrix is `UᵀV`. Entries
//! are then removed uniformly at random.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nym::NymAssignment;
use crate::ratings::{RatingTriplet, SparseRatings};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub p_groups: usize,
    pub n_users: usize,
    pub m_items: usize,
    pub d: usize,
    /// Spread of users around their group centre.
    pub cluster_std: f64,
    pub center_std: f64,
    pub item_std: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The 5-group, 100-item, d = 4 family at 1000 users, 50% missing.
    fn default() -> Self {
        SyntheticSpec {
            p_groups: 5,
            n_users: 1000,
            m_items: 100,
            d: 4,
            cluster_std: 1e-4,
            center_std: 1.0,
            item_std: 1.0,
            missing_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p_groups == 0 || self.n_users == 0 || self.m_items == 0 || self.d == 0 {
            return Err(Error::invalid("synthetic sizes must all be >= 1"));
        }
        for (name, x) in [
            ("cluster_std", self.cluster_std),
            ("center_std", self.center_std),
            ("item_std", self.item_std),
        ] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative")));
            }
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::invalid("missing_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticInstance {
    pub spec: SyntheticSpec,
    /// Retained entries.
    pub ratings: SparseRatings,
    /// Removed entries, the natural test set.
    pub held_out: SparseRatings,
    /// Ground-truth group of each user.
    pub true_labels: Vec<u32>,
    pub centres: DMatrix<f64>,
    /// True user factors, d×n.
    pub users: DMatrix<f64>,
    /// True item factors, d×m.
    pub items: DMatrix<f64>,
}

impl SyntheticInstance {
    /// The full-matrix value `U_uᵀV_v`.
    pub fn oracle(&self, user: usize, item: usize) -> f64 {
        true_rating(&self.users, &self.items, user, item)
    }

    pub fn label_assignment(&self) -> NymAssignment {
        NymAssignment::new(self.true_labels.clone(), self.spec.p_groups)
            .expect("labels are below p_groups")
    }

    pub fn write_labels_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "user,group")?;
        for (u, g) in self.true_labels.iter().enumerate() {
            writeln!(w, "{u},{g}")?;
        }
        Ok(())
    }
}

fn true_rating(users: &DMatrix<f64>, items: &DMatrix<f64>, user: usize, item: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..users.nrows() {
        s += users[(k, user)] * items[(k, item)];
    }
    s
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticInstance> {
    spec.validate()?;
    let normal = |std: f64| Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()));
    let (centre_dist, spread, item_dist) = (
        normal(spec.center_std)?,
        normal(spec.cluster_std)?,
        normal(spec.item_std)?,
    );
    let d = spec.d;
    let mut rng = rng::substream(spec.seed, rng::SYNTHETIC);

    let mut centres = DMatrix::zeros(d, spec.p_groups);
    for x in centres.iter_mut() {
        *x = centre_dist.sample(&mut rng);
    }
    // Users are dealt to groups round-robin, so group sizes differ by at most one.
    let true_labels: Vec<u32> = (0..spec.n_users)
        .map(|u| (u % spec.p_groups) as u32)
        .collect();
    let mut users = DMatrix::zeros(d, spec.n_users);
    for (u, &g) in true_labels.iter().enumerate() {
        for k in 0..d {
            users[(k, u)] = centres[(k, g as usize)] + spread.sample(&mut rng);
        }
    }
    let mut items = DMatrix::zeros(d, spec.m_items);
    for x in items.iter_mut() {
        *x = item_dist.sample(&mut rng);
    }

    let mut keep_rng = rng::substream(spec.seed, rng::REMOVAL);
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for u in 0..spec.n_users {
        for v in 0..spec.m_items {
            let t = RatingTriplet::new(u, v, true_rating(&users, &items, u, v));
            if keep_rng.random::<f64>() >= spec.missing_fraction {
                kept.push(t);
            } else {
                removed.push(t);
            }
        }
    }
    Ok(SyntheticInstance {
        spec: *spec,
        ratings: SparseRatings::new(spec.n_users, spec.m_items, kept)?,
        held_out: SparseRatings::new(spec.n_users, spec.m_items, removed)?,
        true_labels,
        centres,
        users,
        items,
    })
}

/// Whether two labelings induce the same partition of users.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    use std::collections::HashMap;
    let mut ab: HashMap<u32, u32> = HashMap::new();
    let mut ba: HashMap<u32, u32> = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x
    })
}
