//! Classic matrix factorization by alternating least squares, one factor
//! column per user. Same priors and stopping rule as the nym factorization so
//! that comparisons differ only in the grouping.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorization::{gaussian_pair, solve_spd, Hyperparams};
use crate::ratings::SparseRatings;

#[derive(Clone, Debug, PartialEq)]
pub struct UserFactorModel {
    /// d×n user factors.
    pub u: DMatrix<f64>,
    /// d×m item factors.
    pub v: DMatrix<f64>,
    pub hyper: Hyperparams,
    /// Prediction for items never rated in training.
    pub global_mean: f64,
    pub item_rated: Vec<bool>,
}

impl UserFactorModel {
    pub fn objective(&self, train: &SparseRatings) -> f64 {
        let mut res = 0.0;
        for t in train.triplets() {
            let e = t.value
                - self
                    .u
                    .column(t.user as usize)
                    .dot(&self.v.column(t.item as usize));
            res += e * e;
        }
        res / self.hyper.sigma2
            + self.u.norm_squared() / self.hyper.sigma2_u
            + self.v.norm_squared() / self.hyper.sigma2_v
    }
}

#[derive(Clone, Debug)]
pub struct AlsFit {
    pub model: UserFactorModel,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Ridge solve of one factor column against the fixed other side.
fn solve_column(
    ratings: &[(u32, f64)],
    other: &DMatrix<f64>,
    ridge: f64,
) -> Result<Option<DVector<f64>>> {
    if ratings.is_empty() {
        return Ok(None);
    }
    let d = other.nrows();
    let mut a = DMatrix::<f64>::identity(d, d) * ridge;
    let mut b = DVector::<f64>::zeros(d);
    for &(j, r) in ratings {
        let x = other.column(j as usize);
        a.ger(1.0, &x, &x, 1.0);
        b.axpy(r, &x, 1.0);
    }
    solve_spd(a, b).map(Some)
}

/// Alternates the per-user and per-item ridge solves from a Gaussian start.
pub fn als_factorize(train: &SparseRatings, hyper: &Hyperparams) -> Result<AlsFit> {
    hyper.validate()?;
    let (n, m) = (train.n_users(), train.n_items());
    if n == 0 || m == 0 {
        return Err(Error::invalid("ALS needs at least one user and one item"));
    }
    let (u, v) = gaussian_pair(hyper.d, n, m, hyper)?;
    let mut model = UserFactorModel {
        u,
        v,
        hyper: *hyper,
        global_mean: train.global_mean().unwrap_or(0.0),
        item_rated: (0..m).map(|i| !train.item_ratings(i).is_empty()).collect(),
    };
    let mut prev = model.objective(train);
    let mut trace = vec![prev];
    let mut converged = false;
    for iteration in 1..=hyper.max_iters {
        let users: Vec<_> = (0..n)
            .into_par_iter()
            .map(|u| solve_column(train.user_ratings(u), &model.v, hyper.ridge_u()))
            .collect::<Result<_>>()?;
        for (u, col) in users.into_iter().enumerate() {
            if let Some(col) = col {
                model.u.set_column(u, &col);
            }
        }
        let items: Vec<_> = (0..m)
            .into_par_iter()
            .map(|i| solve_column(train.item_ratings(i), &model.u, hyper.ridge_v()))
            .collect::<Result<_>>()?;
        for (i, col) in items.into_iter().enumerate() {
            if let Some(col) = col {
                model.v.set_column(i, &col);
            }
        }
        let obj = model.objective(train);
        if !obj.is_finite() {
            return Err(Error::Divergence {
                iteration,
                value: obj,
            });
        }
        trace.push(obj);
        if (obj - prev).abs() / (1.0 + prev.abs()) < hyper.epsilon {
            converged = true;
            break;
        }
        prev = obj;
    }
    Ok(AlsFit {
        model,
        trace,
        converged,
    })
}

/// `U_userᵀV_item`, or the global training mean for items never rated.
pub fn predict_baseline(model: &UserFactorModel, user: usize, item: usize) -> f64 {
    if !model.item_rated[item] {
        return model.global_mean;
    }
    model.u.column(user).dot(&model.v.column(item))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::RatingTriplet;
    use crate::synthetic::{generate, SyntheticSpec};

    #[test]
    fn scalar_prediction_and_fallback() {
        let t = vec![RatingTriplet::new(0, 0, 1.0), RatingTriplet::new(1, 0, 3.0)];
        let r = SparseRatings::new(2, 2, t).unwrap();
        let mut fit = als_factorize(&r, &Hyperparams::with_dim(1)).unwrap();
        fit.model.u[(0, 0)] = 2.0;
        fit.model.v[(0, 0)] = 0.5;
        assert_eq!(predict_baseline(&fit.model, 0, 0), 1.0);
        assert_eq!(predict_baseline(&fit.model, 0, 1), 2.0);
    }

    #[test]
    fn trace_descends_and_unrated_users_keep_init() {
        let inst = generate(&SyntheticSpec {
            n_users: 60,
            m_items: 30,
            missing_fraction: 0.6,
            ..Default::default()
        })
        .unwrap();
        let train = inst.ratings.filter(|t| t.user != 7);
        let h = Hyperparams::with_dim(4);
        let (u0, _) = gaussian_pair(4, 60, 30, &h).unwrap();
        let fit = als_factorize(&train, &h).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(fit.model.u.column(7), u0.column(7));
    }

    #[test]
    fn recovers_exact_low_rank() {
        let inst = generate(&SyntheticSpec {
            n_users: 40,
            m_items: 25,
            d: 2,
            cluster_std: 1.0,
            missing_fraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        let h = Hyperparams {
            sigma2_u: 1e8,
            sigma2_v: 1e8,
            epsilon: 1e-15,
            max_iters: 5000,
            ..Hyperparams::with_dim(2)
        };
        let fit = als_factorize(&inst.ratings, &h).unwrap();
        let mut se = 0.0;
        for t in inst.ratings.triplets() {
            let e = predict_baseline(&fit.model, t.user as usize, t.item as usize) - t.value;
            se += e * e;
        }
        let rmse = (se / inst.ratings.len() as f64).sqrt();
        assert!(rmse < 1e-4, "rmse {rmse}");
    }
}
