//! End-to-end driver: cold-start arrival, alternating system factorization
//! and private nym choice, factorization scheduling, adaptive nym count, and
//! local prediction refinement.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{
    factorize, full_residual, init_model, solve_spd, FactorModel, Hyperparams,
};
use crate::nym::{aggregate_active, propose_moves, NymAssignment};
use crate::ratings::SparseRatings;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Fraction of users that run their nym choice between factorizations.
    pub factorization_period: f64,
    /// Upper bound on full user permutations.
    pub passes: usize,
    pub seed: u64,
    /// When false users never change nym (the assignment is pinned).
    pub update_nyms: bool,
    /// At the end of each pass, move one idle nym (unused, or predicting
    /// like a larger nym) next to the worst-fitting nym.
    pub reseed_idle: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            factorization_period: 0.1,
            passes: 30,
            seed: 0,
            update_nyms: true,
            reseed_idle: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.factorization_period > 0.0 && self.factorization_period <= 1.0) {
            return Err(Error::invalid("factorization_period must be in (0, 1]"));
        }
        if self.passes == 0 {
            return Err(Error::invalid("passes must be >= 1"));
        }
        Ok(())
    }

    fn window(&self, n_users: usize) -> usize {
        ((self.factorization_period * n_users as f64).ceil() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub enabled: bool,
    /// Stop once the training mean squared error per rating is below this.
    pub error_threshold: f64,
    pub max_nyms: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            enabled: true,
            error_threshold: 1e-3,
            max_nyms: 64,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.error_threshold.is_finite() && self.error_threshold > 0.0) {
            return Err(Error::invalid("error_threshold must be positive"));
        }
        if self.max_nyms == 0 {
            return Err(Error::invalid("max_nyms must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JointEvent {
    /// New users joined the active rating set; the objective may rise.
    Arrival,
    /// One user moved to a strictly better nym.
    Switch,
    /// A system factorization finished.
    Factorization,
    /// An idle nym was moved; users holding it may fit worse until they
    /// switch away.
    Reseed,
}

impl JointEvent {
    fn as_str(self) -> &'static str {
        match self {
            JointEvent::Arrival => "arrival",
            JointEvent::Switch => "switch",
            JointEvent::Factorization => "factorization",
            JointEvent::Reseed => "reseed",
        }
    }
}

/// The per-rating objective over the active set after one event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JointStep {
    pub pass: usize,
    pub event: JointEvent,
    pub objective: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BlcTrace {
    /// Objective trace of every system factorization, in order.
    pub block1: Vec<Vec<f64>>,
    pub joint: Vec<JointStep>,
    pub switches_per_pass: Vec<usize>,
}

impl BlcTrace {
    /// First step at which the objective rose by more than `rel_slack`
    /// (relative). Only factorizations and switches are checked.
    pub fn first_ascent(&self, rel_slack: f64) -> Option<(usize, f64, f64)> {
        let rises = |a: f64, b: f64| b > a + rel_slack * a.abs().max(1.0);
        let mut step = 0;
        for tr in &self.block1 {
            for w in tr.windows(2) {
                if rises(w[0], w[1]) {
                    return Some((step, w[0], w[1]));
                }
                step += 1;
            }
        }
        self.joint
            .windows(2)
            .enumerate()
            .find(|(_, w)| {
                matches!(w[1].event, JointEvent::Switch | JointEvent::Factorization)
                    && rises(w[0].objective, w[1].objective)
            })
            .map(|(i, w)| (i, w[0].objective, w[1].objective))
    }

    /// Block-1 objectives concatenated, as `iter,objective` rows.
    pub fn write_block1_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,objective")?;
        for (i, x) in self.block1.iter().flatten().enumerate() {
            writeln!(w, "{i},{x}")?;
        }
        Ok(())
    }

    pub fn write_joint_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,pass,event,objective")?;
        for (i, s) in self.joint.iter().enumerate() {
            writeln!(w, "{},{},{},{}", i, s.pass, s.event.as_str(), s.objective)?;
        }
        Ok(())
    }
}

/// Fallback for items without training ratings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFallback {
    pub global_mean: f64,
    pub item_rated: Vec<bool>,
}

impl ItemFallback {
    pub fn from_ratings(train: &SparseRatings) -> Self {
        ItemFallback {
            global_mean: train.global_mean().unwrap_or(0.0),
            item_rated: (0..train.n_items())
                .map(|i| !train.item_ratings(i).is_empty())
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlcFit {
    pub model: FactorModel,
    pub assignment: NymAssignment,
    pub fallback: ItemFallback,
    pub trace: BlcTrace,
}

impl BlcFit {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        predict(&self.model, &self.assignment, &self.fallback, user, item)
    }

    /// Per-rating training residual under the final assignment.
    pub fn train_mse(&self, train: &SparseRatings) -> f64 {
        if train.is_empty() {
            return 0.0;
        }
        full_residual(train, &self.assignment, &self.model, None) / train.len() as f64
    }
}

/// `Ũ_{nym(user)}ᵀ V_item`, or the global training mean for unrated items.
pub fn predict(
    model: &FactorModel,
    assignment: &NymAssignment,
    fallback: &ItemFallback,
    user: usize,
    item: usize,
) -> f64 {
    if !fallback.item_rated[item] {
        return fallback.global_mean;
    }
    model.predict_nym(assignment.nym_of(user), item)
}

fn user_residual(ratings: &[(u32, f64)], model: &FactorModel, nym: usize) -> f64 {
    let ug = model.u_tilde().column(nym);
    ratings
        .iter()
        .map(|&(i, r)| {
            let e = r - ug.dot(&model.v().column(i as usize));
            e * e
        })
        .sum()
}

/// Cold-start run from a Gaussian model and a uniform random assignment.
pub fn run_blc(
    train: &SparseRatings,
    p: usize,
    hyper: &Hyperparams,
    schedule: &Schedule,
) -> Result<BlcFit> {
    if p == 0 {
        return Err(Error::invalid("nym count must be >= 1"));
    }
    let model = init_model(p, train.n_items().max(1), hyper)?;
    let assignment = NymAssignment::random(train.n_users(), p, schedule.seed)?;
    run_blc_from(train, model, assignment, schedule, true)
}

/// Runs the alternation from a given model and assignment.
///
/// With `cold_start`, users join one window at a time in a random order,
/// contributing all their ratings on arrival; otherwise everyone is active
/// from the start. Users in a window choose their nym against the model
/// frozen at the window start; aggregates are then rebuilt and the system
/// factorization runs, warm-started. The run ends after `passes`
/// permutations or after a full pass without any switch.
pub fn run_blc_from(
    train: &SparseRatings,
    model: FactorModel,
    assignment: NymAssignment,
    schedule: &Schedule,
    cold_start: bool,
) -> Result<BlcFit> {
    schedule.validate()?;
    let n = train.n_users();
    if assignment.n_users() != n {
        return Err(Error::invalid("assignment does not cover the training users"));
    }
    if assignment.n_nyms() != model.n_nyms() || model.n_items() != train.n_items() {
        return Err(Error::invalid("model dimensions do not match data"));
    }
    let sigma2 = model.hyper.sigma2;
    let mut model = model;
    let mut assignment = assignment;
    let mut active = vec![!cold_start; n];
    let mut residual = if cold_start {
        0.0
    } else {
        full_residual(train, &assignment, &model, None)
    };
    let mut trace = BlcTrace::default();
    let mut rng = rng::substream(schedule.seed, rng::PERMUTATION);
    let mut reseed_rng = rng::substream(schedule.seed, rng::RESEED);
    let rms_rating = if train.is_empty() {
        0.0
    } else {
        (train.triplets().iter().map(|t| t.value * t.value).sum::<f64>() / train.len() as f64)
            .sqrt()
    };
    let window = schedule.window(n);
    let mut order: Vec<usize> = (0..n).collect();

    for pass in 0..schedule.passes {
        let all_active = active.iter().all(|&a| a);
        order.shuffle(&mut rng);
        let mut switches = 0;
        for chunk in order.chunks(window) {
            let mut changed = false;
            let mut arrived = false;
            for &u in chunk {
                if !active[u] {
                    active[u] = true;
                    let ratings = train.user_ratings(u);
                    if !ratings.is_empty() {
                        residual += user_residual(ratings, &model, assignment.nym_of(u));
                        arrived = true;
                    }
                }
            }
            if arrived {
                changed = true;
                trace.joint.push(JointStep {
                    pass,
                    event: JointEvent::Arrival,
                    objective: residual / sigma2 + model.prior_penalty(),
                });
            }
            if schedule.update_nyms {
                let prior = model.prior_penalty();
                for mv in propose_moves(train, &model, &assignment, chunk) {
                    assignment.set(mv.user, mv.to);
                    residual += mv.residual_to - mv.residual_from;
                    switches += 1;
                    changed = true;
                    trace.joint.push(JointStep {
                        pass,
                        event: JointEvent::Switch,
                        objective: residual / sigma2 + prior,
                    });
                }
            }
            if changed {
                let agg = aggregate_active(train, &assignment, Some(&active))?;
                let fac = factorize(&agg, model)?;
                model = fac.model;
                trace.block1.push(fac.trace);
                residual = full_residual(train, &assignment, &model, Some(&active));
                trace.joint.push(JointStep {
                    pass,
                    event: JointEvent::Factorization,
                    objective: residual / sigma2 + model.prior_penalty(),
                });
            }
        }
        trace.switches_per_pass.push(switches);
        let mut reseeded = false;
        if schedule.update_nyms && schedule.reseed_idle {
            reseeded = reseed_idle(train, &mut model, &assignment, rms_rating, &mut reseed_rng)?;
            if reseeded {
                residual = full_residual(train, &assignment, &model, Some(&active));
                trace.joint.push(JointStep {
                    pass,
                    event: JointEvent::Reseed,
                    objective: residual / sigma2 + model.prior_penalty(),
                });
            }
        }
        if all_active && switches == 0 && !reseeded {
            break;
        }
    }

    Ok(BlcFit {
        model,
        assignment,
        fallback: ItemFallback::from_ratings(train),
        trace,
    })
}

/// One stage of the adaptive nym-count search.
#[derive(Clone, Debug, Serialize)]
pub struct AdaptiveStage {
    /// Nyms available during the stage's run.
    pub nyms: usize,
    /// Nyms left after pruning unused ones.
    pub nyms_used: usize,
    /// Training mean squared error per rating after the stage.
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptiveFit {
    pub fit: BlcFit,
    pub stages: Vec<AdaptiveStage>,
    /// Traces of the earlier stages; the last stage's is in `fit.trace`.
    pub stage_traces: Vec<BlcTrace>,
}

/// Starts with one nym, and after each converged run doubles the nym count by
/// adding a noisy copy of every nym vector, pruning nyms nobody uses.
/// The noise std is half the minimum distance between nym vectors. Stops
/// when the training error per rating is below the threshold, when doubling
/// would exceed `max_nyms`, or when a doubling leaves no extra nym in use.
pub fn run_blc_adaptive(
    train: &SparseRatings,
    hyper: &Hyperparams,
    schedule: &Schedule,
    adaptive: &AdaptiveConfig,
) -> Result<AdaptiveFit> {
    if !adaptive.enabled {
        return Err(Error::invalid("adaptive nym selection is disabled"));
    }
    adaptive.validate()?;
    let mut noise_rng = rng::substream(schedule.seed, rng::ADAPTIVE);
    let mut fit = run_blc(train, 1, hyper, schedule)?;
    let mut stages = Vec::new();
    let mut stage_traces = Vec::new();
    loop {
        let nyms = fit.model.n_nyms();
        prune(&mut fit);
        let error = fit.train_mse(train);
        stages.push(AdaptiveStage {
            nyms,
            nyms_used: fit.model.n_nyms(),
            error,
        });
        let p = fit.model.n_nyms();
        let stalled = stages.len() > 1 && p <= stages[stages.len() - 2].nyms_used;
        if error < adaptive.error_threshold || 2 * p > adaptive.max_nyms || stalled {
            break;
        }
        let model = duplicate_nyms(&fit.model, &mut noise_rng)?;
        let mut assignment = fit.assignment.clone();
        assignment.widen(2 * p);
        let next = run_blc_from(train, model, assignment, schedule, false)?;
        stage_traces.push(std::mem::take(&mut fit.trace));
        fit = next;
    }
    Ok(AdaptiveFit {
        fit,
        stages,
        stage_traces,
    })
}

/// Removes unused nyms and compacts indices.
fn prune(fit: &mut BlcFit) {
    let kept = fit.assignment.compact();
    if kept.len() == fit.model.n_nyms() {
        return;
    }
    let u = fit.model.u_tilde().select_columns(&kept);
    fit.model.set_u_tilde(u);
}

/// Smallest Euclidean distance between distinct nym vectors; `None` for p < 2.
pub fn min_nym_distance(u: &DMatrix<f64>) -> Option<f64> {
    let p = u.ncols();
    let mut best: Option<f64> = None;
    for a in 0..p {
        for b in a + 1..p {
            let dist = (u.column(a) - u.column(b)).norm();
            best = Some(best.map_or(dist, |x: f64| x.min(dist)));
        }
    }
    best
}

/// Gaussian with std `fraction` of the minimum distance between `u`'s
/// columns, or `fallback` when that distance is zero or undefined.
fn split_noise(u: &DMatrix<f64>, fraction: f64, fallback: f64) -> Result<Normal<f64>> {
    let std = match min_nym_distance(u) {
        Some(dist) if dist > 0.0 => fraction * dist,
        _ => fallback,
    };
    Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))
}

fn duplicate_nyms(model: &FactorModel, rng: &mut rng::Rng) -> Result<FactorModel> {
    let (d, p) = (model.d(), model.n_nyms());
    let normal = split_noise(model.u_tilde(), RESEED_NOISE, RESEED_NOISE * model.hyper.init_std)?;
    let mut u = DMatrix::zeros(d, 2 * p);
    u.columns_mut(0, p).copy_from(model.u_tilde());
    for g in 0..p {
        for k in 0..d {
            u[(k, p + g)] = model.u_tilde()[(k, g)] + normal.sample(rng);
        }
    }
    FactorModel::new(u, model.v().clone(), model.hyper)
}

/// Reseed noise relative to the minimum nym distance. Small enough that the
/// copy splits the donor's users along a hyperplane through its vector.
const RESEED_NOISE: f64 = 1e-4;

/// Two nyms are redundant when the RMS difference of their predictions over
/// all items is below this fraction of the RMS training rating.
const REDUNDANT_TOL: f64 = 0.01;

fn rms_prediction_gap(model: &FactorModel, g: usize, h: usize) -> f64 {
    let diff = model.u_tilde().column(g) - model.u_tilde().column(h);
    (diff.transpose() * model.v()).norm() / (model.n_items() as f64).sqrt()
}

/// Moves one idle nym next to the worst-fitting nym so it can take part
/// again. Idle means no rating user holds it, or it predicts like a larger
/// nym. Nothing moves while every nym fits its users' ratings within the
/// redundancy tolerance. Returns whether a nym moved.
fn reseed_idle(
    train: &SparseRatings,
    model: &mut FactorModel,
    assignment: &NymAssignment,
    rms_rating: f64,
    rng: &mut rng::Rng,
) -> Result<bool> {
    let p = model.n_nyms();
    let mut sizes = vec![0usize; p];
    let mut support = vec![0usize; p];
    let mut residual = vec![0.0; p];
    for u in 0..train.n_users() {
        let ratings = train.user_ratings(u);
        if !ratings.is_empty() {
            let g = assignment.nym_of(u);
            sizes[g] += 1;
            support[g] += ratings.len();
            residual[g] += user_residual(ratings, model, g);
        }
    }
    let used: Vec<usize> = (0..p).filter(|&g| sizes[g] > 0).collect();
    if used.is_empty() || used.len() == 1 && p == 1 {
        return Ok(false);
    }
    let tol = REDUNDANT_TOL * rms_rating;
    let redundant = |g: usize, h: usize| rms_prediction_gap(model, g, h) < tol;
    let target = (0..p).find(|&g| sizes[g] == 0).or_else(|| {
        let mut best: Option<usize> = None;
        for (i, &g) in used.iter().enumerate() {
            for &h in &used[i + 1..] {
                if redundant(g, h) {
                    // The smaller one goes; h > g breaks ties.
                    let c = if sizes[g] < sizes[h] { g } else { h };
                    if best.is_none_or(|b| (sizes[c], c) < (sizes[b], b)) {
                        best = Some(c);
                    }
                }
            }
        }
        best
    });
    let Some(target) = target else {
        return Ok(false);
    };
    let donor = used
        .iter()
        .copied()
        .filter(|&g| g != target && (sizes[target] == 0 || !redundant(g, target)))
        .filter(|&g| residual[g] > tol * tol * support[g] as f64)
        .max_by(|&g, &h| residual[g].total_cmp(&residual[h]).then(h.cmp(&g)));
    let Some(donor) = donor else {
        return Ok(false);
    };
    let others: Vec<usize> = used.iter().copied().filter(|&g| g != target).collect();
    let normal = split_noise(
        &model.u_tilde().select_columns(&others),
        RESEED_NOISE,
        RESEED_NOISE * model.hyper.init_std,
    )?;
    let mut u = model.u_tilde().clone();
    for r in 0..model.d() {
        u[(r, target)] = u[(r, donor)] + normal.sample(rng);
    }
    model.set_u_tilde(u);
    Ok(true)
}

/// A user's refined position in the latent space.
#[derive(Clone, Debug)]
pub struct LocalPredictor<'a> {
    pub x: DVector<f64>,
    v: &'a DMatrix<f64>,
}

impl LocalPredictor<'_> {
    pub fn predict(&self, item: usize) -> f64 {
        self.x.dot(&self.v.column(item))
    }
}

/// Solves the user's weighted least-squares problem anchored to their nym:
///
/// ```text
/// x = (1/σ_L² I + Σ_v V_v V_vᵀ + w I)⁻¹ (Σ_v R_uv V_v + w Ũ_nym)
/// ```
///
/// Runs on the user's side with only their own ratings and the public model.
pub fn predict_local<'a>(
    model: &'a FactorModel,
    user_ratings: &[(u32, f64)],
    nym: usize,
    w: f64,
    sigma2_l: f64,
) -> Result<LocalPredictor<'a>> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::invalid("local weight w must be nonnegative"));
    }
    if !(sigma2_l.is_finite() && sigma2_l > 0.0) {
        return Err(Error::invalid("sigma2_l must be positive"));
    }
    let d = model.d();
    let mut a = DMatrix::<f64>::identity(d, d) * (1.0 / sigma2_l + w);
    let mut b = model.u_tilde().column(nym) * w;
    for &(item, r) in user_ratings {
        let vv = model.v().column(item as usize);
        a.ger(1.0, &vv, &vv, 1.0);
        b.axpy(r, &vv, 1.0);
    }
    Ok(LocalPredictor {
        x: solve_spd(a, b)?,
        v: model.v(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::RatingTriplet;

    #[test]
    fn single_user_single_nym() {
        let t = vec![RatingTriplet::new(0, 0, 3.0), RatingTriplet::new(0, 1, -1.0)];
        let r = SparseRatings::new(1, 3, t).unwrap();
        let h = Hyperparams {
            epsilon: 1e-12,
            max_iters: 10_000,
            ..Hyperparams::with_dim(1)
        };
        let fit = run_blc(&r, 1, &h, &Schedule::default()).unwrap();
        assert_eq!(fit.assignment.as_slice(), &[0]);
        assert!((fit.predict(0, 0) - 3.0).abs() < 1e-2);
        assert_eq!(fit.predict(0, 2), 1.0);
        assert!(fit.trace.first_ascent(1e-10).is_none());
    }

    #[test]
    fn scalar_predict() {
        let m = FactorModel::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 3.0),
            Hyperparams::with_dim(1),
        )
        .unwrap();
        let fb = ItemFallback {
            global_mean: 0.0,
            item_rated: vec![true],
        };
        assert_eq!(predict(&m, &NymAssignment::single(1), &fb, 0, 0), 6.0);
    }

    #[test]
    fn local_anchor_only_limit() {
        let m = FactorModel::new(
            DMatrix::from_column_slice(2, 2, &[1.0, 2.0, -0.5, 0.25]),
            DMatrix::from_column_slice(2, 2, &[0.3, 0.7, 1.1, -0.4]),
            Hyperparams::with_dim(2),
        )
        .unwrap();
        let lp = predict_local(&m, &[], 1, 1.0, 1e15).unwrap();
        for item in 0..2 {
            assert!((lp.predict(item) - m.predict_nym(1, item)).abs() < 1e-12);
        }
        assert!(predict_local(&m, &[], 0, -1.0, 1.0).is_err());
        assert!(predict_local(&m, &[], 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn min_distance() {
        let u = DMatrix::from_column_slice(1, 3, &[0.0, 3.0, 1.0]);
        assert_eq!(min_nym_distance(&u), Some(1.0));
        assert_eq!(min_nym_distance(&DMatrix::zeros(2, 1)), None);
    }

    #[test]
    fn schedule_validation() {
        let bad = Schedule {
            factorization_period: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(Schedule::default().window(1000), 100);
        let per_user = Schedule {
            factorization_period: 1e-9,
            ..Default::default()
        };
        assert_eq!(per_user.window(1000), 1);
    }
}
