//! System-side factorization of nym aggregates into nym and item factors.
//!
//! The objective minimized here is the negative log-posterior over nym
//! aggregates, dropping constants:
//!
//! ```text
//! (1/σ²) Σ_v Σ_g c_gv (r̃_gv − Ũ_gᵀV_v)² + (1/σ_Ũ²)‖Ũ‖² + (1/σ_V²)‖V‖²
//! ```
//!
//! Each half-step solves the exact d×d normal equations for one column, so
//! the objective never increases between iterations.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nym::{NymAggregates, NymAssignment};
use crate::ratings::SparseRatings;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Latent dimension.
    pub d: usize,
    /// Observation variance σ².
    pub sigma2: f64,
    /// Prior variance of the nym (or user) factors.
    pub sigma2_u: f64,
    /// Prior variance of the item factors.
    pub sigma2_v: f64,
    /// Relative objective change below which factorization stops.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Standard deviation of the Gaussian initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d: 4,
            sigma2: 1.0,
            sigma2_u: 1000.0,
            sigma2_v: 1000.0,
            epsilon: 1e-4,
            max_iters: 200,
            init_std: 1.0,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn with_dim(d: usize) -> Self {
        Hyperparams {
            d,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("latent dimension d must be >= 1"));
        }
        for (name, x) in [
            ("sigma2", self.sigma2),
            ("sigma2_u", self.sigma2_u),
            ("sigma2_v", self.sigma2_v),
            ("epsilon", self.epsilon),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::invalid("init_std must be nonnegative"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        Ok(())
    }

    /// Ridge weight σ²/σ_Ũ² in the nym-factor normal equations.
    pub fn ridge_u(&self) -> f64 {
        self.sigma2 / self.sigma2_u
    }

    /// Ridge weight σ²/σ_V² in the item-factor normal equations.
    pub fn ridge_v(&self) -> f64 {
        self.sigma2 / self.sigma2_v
    }
}

/// Nym factors Ũ (d×p) and item factors V (d×m); column g is Ũ_g, column v is V_v.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    u_tilde: DMatrix<f64>,
    v: DMatrix<f64>,
    pub hyper: Hyperparams,
}

impl FactorModel {
    pub fn new(u_tilde: DMatrix<f64>, v: DMatrix<f64>, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        if u_tilde.nrows() != hyper.d || v.nrows() != hyper.d {
            return Err(Error::invalid(format!(
                "factor rows ({}, {}) do not match d = {}",
                u_tilde.nrows(),
                v.nrows(),
                hyper.d
            )));
        }
        if u_tilde.ncols() == 0 {
            return Err(Error::invalid("model needs at least one nym"));
        }
        if u_tilde.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("factor entries must be finite"));
        }
        Ok(FactorModel { u_tilde, v, hyper })
    }

    pub fn u_tilde(&self) -> &DMatrix<f64> {
        &self.u_tilde
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn n_nyms(&self) -> usize {
        self.u_tilde.ncols()
    }

    pub fn n_items(&self) -> usize {
        self.v.ncols()
    }

    pub fn d(&self) -> usize {
        self.hyper.d
    }

    pub fn predict_nym(&self, nym: usize, item: usize) -> f64 {
        self.u_tilde.column(nym).dot(&self.v.column(item))
    }

    pub(crate) fn set_u_tilde(&mut self, u: DMatrix<f64>) {
        debug_assert_eq!(u.nrows(), self.hyper.d);
        self.u_tilde = u;
    }

    pub(crate) fn set_v(&mut self, v: DMatrix<f64>) {
        self.v = v;
    }

    /// Prior terms (1/σ_Ũ²)‖Ũ‖² + (1/σ_V²)‖V‖².
    pub fn prior_penalty(&self) -> f64 {
        self.u_tilde.norm_squared() / self.hyper.sigma2_u
            + self.v.norm_squared() / self.hyper.sigma2_v
    }

    /// Row-major text dump: a `d,p,m` header, then Ũ's d rows, then V's d rows.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "d,p,m")?;
        writeln!(w, "{},{},{}", self.d(), self.n_nyms(), self.n_items())?;
        for mat in [&self.u_tilde, &self.v] {
            for row in mat.row_iter() {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(reader: R, hyper: Hyperparams) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("model dump truncated before {what}"),
                }),
            }
        };
        next("header")?;
        let (ln, dims) = next("dimensions")?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: ln,
                message: "bad dimensions".into(),
            })?;
        let [d, p, m] = dims[..] else {
            return Err(Error::Parse {
                line: ln,
                message: "expected d,p,m".into(),
            });
        };
        let mut read_matrix = |cols: usize| -> Result<DMatrix<f64>> {
            let mut rows = Vec::with_capacity(d * cols);
            for _ in 0..d {
                let (ln, l) = next("matrix row")?;
                let vals: Vec<f64> = if cols == 0 {
                    Vec::new()
                } else {
                    l.split(',')
                        .map(|s| s.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Parse {
                            line: ln,
                            message: "bad matrix entry".into(),
                        })?
                };
                if vals.len() != cols {
                    return Err(Error::Parse {
                        line: ln,
                        message: format!("expected {cols} values, found {}", vals.len()),
                    });
                }
                rows.extend(vals);
            }
            Ok(DMatrix::from_row_slice(d, cols, &rows))
        };
        let u = read_matrix(p)?;
        let v = read_matrix(m)?;
        FactorModel::new(u, v, Hyperparams { d, ..hyper })
    }
}

/// Gaussian initialization from the `init` substream of `hyper.seed`.
pub fn init_model(p: usize, m: usize, hyper: &Hyperparams) -> Result<FactorModel> {
    hyper.validate()?;
    if p == 0 || m == 0 {
        return Err(Error::invalid("p and m must be >= 1"));
    }
    let (u, v) = gaussian_pair(hyper.d, p, m, hyper)?;
    FactorModel::new(u, v, *hyper)
}

/// Draws a d×cols_a then a d×cols_b matrix, column-major, from one stream.
pub(crate) fn gaussian_pair(
    d: usize,
    cols_a: usize,
    cols_b: usize,
    hyper: &Hyperparams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let normal = Normal::new(0.0, hyper.init_std)
        .map_err(|e| Error::invalid(format!("init_std: {e}")))?;
    let mut rng = rng::substream(hyper.seed, rng::INIT);
    let mut a = DMatrix::zeros(d, cols_a);
    for x in a.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    let mut b = DMatrix::zeros(d, cols_b);
    for x in b.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    Ok((a, b))
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let dim = a.nrows();
    match a.cholesky() {
        Some(ch) => Ok(ch.solve(&b)),
        None => Err(Error::Singular { dim }),
    }
}

/// Nym-factor half-step: for every nym with ratings, solve
/// `(σ²/σ_Ũ² I + Σ_w c_gw V_w V_wᵀ) Ũ_g = Σ_v c_gv r̃_gv V_v`.
/// Nyms without ratings keep their current column.
pub fn update_u(agg: &NymAggregates, model: &FactorModel) -> Result<DMatrix<f64>> {
    check_dims(agg, model)?;
    let d = model.d();
    let ridge = model.hyper.ridge_u();
    let v = model.v();
    let cols: Vec<Option<DVector<f64>>> = (0..model.n_nyms())
        .into_par_iter()
        .map(|g| {
            let cells = agg.nym_cells(g);
            if cells.is_empty() {
                return Ok(None);
            }
            let mut a = DMatrix::<f64>::identity(d, d) * ridge;
            let mut b = DVector::<f64>::zeros(d);
            for c in cells {
                let vv = v.column(c.index as usize);
                let w = f64::from(c.count);
                a.ger(w, &vv, &vv, 1.0);
                b.axpy(w * c.mean, &vv, 1.0);
            }
            solve_spd(a, b).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut out = model.u_tilde().clone();
    for (g, col) in cols.into_iter().enumerate() {
        if let Some(col) = col {
            out.set_column(g, &col);
        }
    }
    Ok(out)
}

/// Item-factor half-step: for every rated item, solve
/// `(σ²/σ_V² I + Σ_g c_gv Ũ_g Ũ_gᵀ) V_v = Σ_g c_gv r̃_gv Ũ_g`.
/// Items without ratings keep their current column.
pub fn update_v(agg: &NymAggregates, model: &FactorModel) -> Result<DMatrix<f64>> {
    check_dims(agg, model)?;
    let d = model.d();
    let ridge = model.hyper.ridge_v();
    let u = model.u_tilde();
    let cols: Vec<Option<DVector<f64>>> = (0..model.n_items())
        .into_par_iter()
        .map(|item| {
            let cells = agg.item_cells(item);
            if cells.is_empty() {
                return Ok(None);
            }
            let mut a = DMatrix::<f64>::identity(d, d) * ridge;
            let mut b = DVector::<f64>::zeros(d);
            for c in cells {
                let ug = u.column(c.index as usize);
                let w = f64::from(c.count);
                a.ger(w, &ug, &ug, 1.0);
                b.axpy(w * c.mean, &ug, 1.0);
            }
            solve_spd(a, b).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut out = model.v().clone();
    for (item, col) in cols.into_iter().enumerate() {
        if let Some(col) = col {
            out.set_column(item, &col);
        }
    }
    Ok(out)
}

fn check_dims(agg: &NymAggregates, model: &FactorModel) -> Result<()> {
    if agg.n_nyms() != model.n_nyms() || agg.n_items() != model.n_items() {
        return Err(Error::invalid(format!(
            "aggregates are {}x{}, model is {}x{}",
            agg.n_nyms(),
            agg.n_items(),
            model.n_nyms(),
            model.n_items()
        )));
    }
    Ok(())
}

/// Σ_v Σ_g c_gv (r̃_gv − Ũ_gᵀV_v)², without the 1/σ² factor.
pub fn nym_residual(agg: &NymAggregates, model: &FactorModel) -> f64 {
    (0..agg.n_items())
        .map(|item| {
            let vv = model.v().column(item);
            agg.item_cells(item)
                .iter()
                .map(|c| {
                    let e = c.mean - model.u_tilde().column(c.index as usize).dot(&vv);
                    f64::from(c.count) * e * e
                })
                .sum::<f64>()
        })
        .sum()
}

/// Negative log-posterior over nym aggregates, constants dropped.
pub fn neg_log_posterior_nym(agg: &NymAggregates, model: &FactorModel) -> f64 {
    nym_residual(agg, model) / model.hyper.sigma2 + model.prior_penalty()
}

/// Σ_{(u,v)} (R_uv − Ũ_{nym(u)}ᵀV_v)² over the active users' ratings.
pub fn full_residual(
    train: &SparseRatings,
    assignment: &NymAssignment,
    model: &FactorModel,
    active: Option<&[bool]>,
) -> f64 {
    (0..train.n_users())
        .filter(|&u| active.is_none_or(|a| a[u]))
        .map(|u| {
            let ug = model.u_tilde().column(assignment.nym_of(u));
            train
                .user_ratings(u)
                .iter()
                .map(|&(item, r)| {
                    let e = r - ug.dot(&model.v().column(item as usize));
                    e * e
                })
                .sum::<f64>()
        })
        .sum()
}

/// Negative log-posterior over individual ratings, constants dropped.
pub fn neg_log_posterior_full(
    train: &SparseRatings,
    assignment: &NymAssignment,
    model: &FactorModel,
) -> f64 {
    full_residual(train, assignment, model, None) / model.hyper.sigma2 + model.prior_penalty()
}

#[derive(Clone, Debug)]
pub struct Factorization {
    pub model: FactorModel,
    /// Objective before the first iteration, then after each (Ũ, V) pair.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl Factorization {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    pub fn objective(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial objective")
    }
}

/// Alternates [`update_u`] and [`update_v`] until the relative objective
/// change `|E' − E| / (1 + |E|)` drops below `epsilon`, or `max_iters`.
pub fn factorize(agg: &NymAggregates, model: FactorModel) -> Result<Factorization> {
    check_dims(agg, &model)?;
    let hyper = model.hyper;
    let mut model = model;
    let mut prev = neg_log_posterior_nym(agg, &model);
    let mut trace = vec![prev];
    let mut converged = false;
    for iteration in 1..=hyper.max_iters {
        let u = update_u(agg, &model)?;
        model.set_u_tilde(u);
        let v = update_v(agg, &model)?;
        model.set_v(v);
        let obj = neg_log_posterior_nym(agg, &model);
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
    Ok(Factorization {
        model,
        trace,
        converged,
    })
}

pub fn write_trace_csv<W: Write>(trace: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iter,objective")?;
    for (i, x) in trace.iter().enumerate() {
        writeln!(w, "{i},{x}")?;
    }
    Ok(())
}
