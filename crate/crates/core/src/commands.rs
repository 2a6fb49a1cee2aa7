//! The `generate`, `train`, `evaluate`, `sweep` and `bench` commands.
//!
//! Each command reads a [`RunConfig`] and writes its outputs under
//! `<out>/<run_id>/`. Result files are a pure function of the configuration
//! and input files; only `timings.csv` and `bench.csv` hold wall-clock values.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baseline::{als_factorize, predict_baseline, UserFactorModel};
use crate::blc::{
    predict_local, run_blc, run_blc_adaptive, AdaptiveStage, BlcFit, BlcTrace, ItemFallback,
};
use crate::config::{Algo, RunConfig};
use crate::error::{Error, Result};
use crate::factorization::{
    factorize, init_model, write_trace_csv, FactorModel, Hyperparams,
};
use crate::metrics::{privacy_report, rmse_with, PrivacyReport};
use crate::nym::{aggregate, propose_moves, NymAssignment};
use crate::ratings::{load_indexed_auto, load_triplets, split, RatingTriplet, SparseRatings};
use crate::rng;
use crate::synthetic::{generate, SyntheticInstance};

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Parse { .. } | Error::Duplicate { .. } | Error::Empty(_) => 3,
        Error::Divergence { .. } | Error::Singular { .. } => 4,
        Error::Io(_) => 1,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Creates `<out>/<run_id>/` and echoes the configuration into it.
fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir().join(cfg.run_id());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

/// Training data and, when available, a test set.
pub struct Dataset {
    pub train: SparseRatings,
    pub test: Option<SparseRatings>,
    pub synthetic: Option<SyntheticInstance>,
}

/// Loads and splits `data`, or generates synthetic ratings whose removed
/// entries form the test set.
pub fn prepare_data(cfg: &RunConfig) -> Result<Dataset> {
    let Some(path) = &cfg.data else {
        let inst = generate(&cfg.synthetic())?;
        let test = (!inst.held_out.is_empty()).then(|| inst.held_out.clone());
        return Ok(Dataset {
            train: inst.ratings.clone(),
            test,
            synthetic: Some(inst),
        });
    };
    let reader = BufReader::new(File::open(path)?);
    let format = cfg.format()?;
    let ratings = if cfg.indexed.unwrap_or(false) {
        load_indexed_auto(reader, format)?
    } else {
        load_triplets(reader, format)?
    };
    if ratings.is_empty() {
        return Err(Error::Empty("ratings file"));
    }
    let parts = split(&ratings, &cfg.split_spec()?)?;
    Ok(Dataset {
        train: parts.train,
        test: (!parts.test.is_empty()).then_some(parts.test),
        synthetic: None,
    })
}

/// A trained model of either kind.
#[derive(Clone, Debug)]
pub enum Trained {
    Blc {
        fit: BlcFit,
        stages: Vec<AdaptiveStage>,
    },
    Als {
        model: UserFactorModel,
        trace: Vec<f64>,
    },
}

impl Trained {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        match self {
            Trained::Blc { fit, .. } => fit.predict(user, item),
            Trained::Als { model, .. } => predict_baseline(model, user, item),
        }
    }

    pub fn nyms(&self) -> usize {
        match self {
            Trained::Blc { fit, .. } => fit.model.n_nyms(),
            Trained::Als { model, .. } => model.u.ncols(),
        }
    }

    pub fn assignment(&self) -> Option<&NymAssignment> {
        match self {
            Trained::Blc { fit, .. } => Some(&fit.assignment),
            Trained::Als { .. } => None,
        }
    }
}

pub fn train_model(cfg: &RunConfig, train: &SparseRatings) -> Result<Trained> {
    let hyper = cfg.hyper();
    match cfg.algo() {
        Algo::Blc => Ok(Trained::Blc {
            fit: run_blc(train, cfg.nyms(), &hyper, &cfg.schedule())?,
            stages: Vec::new(),
        }),
        Algo::BlcAdaptive => {
            let ad = run_blc_adaptive(train, &hyper, &cfg.schedule(), &cfg.adaptive())?;
            Ok(Trained::Blc {
                fit: ad.fit,
                stages: ad.stages,
            })
        }
        Algo::Als => {
            let fit = als_factorize(train, &hyper)?;
            Ok(Trained::Als {
                model: fit.model,
                trace: fit.trace,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub algo: Algo,
    pub hyper: Hyperparams,
    pub n_users: usize,
    pub n_items: usize,
    pub n_nyms: usize,
    pub fallback: ItemFallback,
}

#[derive(Clone, Debug, Serialize)]
struct TimingRow<'a> {
    phase: &'a str,
    n: usize,
    m: usize,
    p: usize,
    d: usize,
    seconds: f64,
}

fn write_timings(path: &Path, rows: &[TimingRow<'_>]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "phase,n,m,p,d,seconds")?;
        for r in rows {
            writeln!(w, "{},{},{},{},{},{:.6}", r.phase, r.n, r.m, r.p, r.d, r.seconds)?;
        }
        Ok(())
    })
}

pub fn save_model(dir: &Path, algo: Algo, trained: &Trained, train: &SparseRatings) -> Result<()> {
    let (meta, model) = match trained {
        Trained::Blc { fit, stages } => {
            fit.assignment.write_csv(create(&dir.join("assignment.csv"))?)?;
            aggregate(train, &fit.assignment)?.write_csv(create(&dir.join("aggregates.csv"))?)?;
            fit.trace.write_block1_csv(create(&dir.join("trace.csv"))?)?;
            fit.trace.write_joint_csv(create(&dir.join("joint_trace.csv"))?)?;
            if !stages.is_empty() {
                write_with(&dir.join("nym_count_trace.csv"), |w| {
                    writeln!(w, "stage,nyms,nyms_used,error")?;
                    for (i, s) in stages.iter().enumerate() {
                        writeln!(w, "{i},{},{},{}", s.nyms, s.nyms_used, s.error)?;
                    }
                    Ok(())
                })?;
            }
            let meta = ModelMeta {
                algo,
                hyper: fit.model.hyper,
                n_users: train.n_users(),
                n_items: train.n_items(),
                n_nyms: fit.model.n_nyms(),
                fallback: fit.fallback.clone(),
            };
            (meta, fit.model.clone())
        }
        Trained::Als { model, trace } => {
            write_trace_csv(trace, create(&dir.join("trace.csv"))?)?;
            let meta = ModelMeta {
                algo,
                hyper: model.hyper,
                n_users: train.n_users(),
                n_items: train.n_items(),
                n_nyms: model.u.ncols(),
                fallback: ItemFallback {
                    global_mean: model.global_mean,
                    item_rated: model.item_rated.clone(),
                },
            };
            (meta, FactorModel::new(model.u.clone(), model.v.clone(), model.hyper)?)
        }
    };
    model.write_dump(create(&dir.join("model.csv"))?)?;
    write_json(&dir.join("model_meta.json"), &meta)
}

pub fn load_model(dir: &Path) -> Result<(ModelMeta, Trained)> {
    let meta: ModelMeta = serde_json::from_reader(BufReader::new(File::open(
        dir.join("model_meta.json"),
    )?))
    .map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("model_meta.json: {e}"),
    })?;
    let model = FactorModel::read_dump(
        BufReader::new(File::open(dir.join("model.csv"))?),
        meta.hyper,
    )?;
    let trained = match meta.algo {
        Algo::Blc | Algo::BlcAdaptive => {
            let assignment = NymAssignment::read_csv(
                BufReader::new(File::open(dir.join("assignment.csv"))?),
                model.n_nyms(),
            )?;
            Trained::Blc {
                fit: BlcFit {
                    model,
                    assignment,
                    fallback: meta.fallback.clone(),
                    trace: BlcTrace::default(),
                },
                stages: Vec::new(),
            }
        }
        Algo::Als => Trained::Als {
            model: UserFactorModel {
                u: model.u_tilde().clone(),
                v: model.v().clone(),
                hyper: meta.hyper,
                global_mean: meta.fallback.global_mean,
                item_rated: meta.fallback.item_rated.clone(),
            },
            trace: Vec::new(),
        },
    };
    Ok((meta, trained))
}

/// Writes the synthetic ratings, held-out entries, labels and spec.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    let inst = generate(&cfg.synthetic())?;
    inst.ratings.write_csv(create(&dir.join("ratings.csv"))?)?;
    inst.held_out.write_csv(create(&dir.join("heldout.csv"))?)?;
    inst.write_labels_csv(create(&dir.join("labels.csv"))?)?;
    write_json(&dir.join("spec.json"), &inst.spec)?;
    Ok(dir)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub algo: Algo,
    pub n_users: usize,
    pub n_items: usize,
    pub n_ratings: usize,
    pub nyms: usize,
    pub test_rmse: Option<f64>,
}

/// Trains the configured algorithm and writes model, assignment, traces and
/// timings.
pub fn cmd_train(cfg: &RunConfig) -> Result<(PathBuf, TrainSummary)> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    let t0 = Instant::now();
    let data = prepare_data(cfg)?;
    let load_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let trained = train_model(cfg, &data.train)?;
    let train_s = t1.elapsed().as_secs_f64();
    save_model(&dir, cfg.algo(), &trained, &data.train)?;
    let test_rmse = match &data.test {
        Some(test) => Some(rmse_with(|u, i| trained.predict(u, i), test, clip(cfg))?),
        None => None,
    };
    let summary = TrainSummary {
        algo: cfg.algo(),
        n_users: data.train.n_users(),
        n_items: data.train.n_items(),
        n_ratings: data.train.len(),
        nyms: trained.nyms(),
        test_rmse,
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    let (n, m, p, d) = (summary.n_users, summary.n_items, summary.nyms, cfg.hyper().d);
    write_timings(
        &dir.join("timings.csv"),
        &[
            TimingRow { phase: "load", n, m, p, d, seconds: load_s },
            TimingRow { phase: "train", n, m, p, d, seconds: train_s },
        ],
    )?;
    Ok((dir, summary))
}

fn clip(cfg: &RunConfig) -> Option<(f64, f64)> {
    cfg.clip.map(|[lo, hi]| (lo, hi))
}

#[derive(Clone, Debug, Serialize)]
pub struct WorstItem {
    pub nym: usize,
    pub item: Option<usize>,
    pub probability: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub algo: Algo,
    pub evaluated_on: &'static str,
    pub n_ratings: usize,
    pub rmse: f64,
    pub rmse_local: Option<f64>,
    pub nyms: usize,
    pub p_g: Option<f64>,
    pub nym_sizes: Option<Vec<usize>>,
    pub worst_item_per_nym: Option<Vec<WorstItem>>,
}

/// Scores a saved model on the test set (or the training set when there is
/// none) and reports privacy measures for nym models.
///
/// The data configuration saved with the model is reused, so the same split
/// is reconstructed; keys in `cfg` override it.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(PathBuf, EvalReport)> {
    let model_dir = cfg
        .model_dir
        .clone()
        .ok_or_else(|| Error::Config("evaluate needs model_dir".into()))?;
    let saved = RunConfig::load(&model_dir.join("config.toml"))?;
    let mut merged = saved.merged(cfg)?;
    if cfg.run_id.is_none() {
        merged.run_id = Some(format!("{}-eval", saved.run_id()));
    }
    merged.validate()?;
    let (meta, trained) = load_model(&model_dir)?;
    let data = prepare_data(&merged)?;
    if data.train.n_users() != meta.n_users || data.train.n_items() != meta.n_items {
        return Err(Error::Config(
            "data does not match the saved model's dimensions".into(),
        ));
    }
    let dir = run_dir(&merged)?;
    let (set, evaluated_on) = match &data.test {
        Some(t) => (t, "test"),
        None => (&data.train, "train"),
    };
    let rmse = rmse_with(|u, i| trained.predict(u, i), set, clip(&merged))?;
    let mut report = EvalReport {
        algo: meta.algo,
        evaluated_on,
        n_ratings: set.len(),
        rmse,
        rmse_local: None,
        nyms: trained.nyms(),
        p_g: None,
        nym_sizes: None,
        worst_item_per_nym: None,
    };
    if let Trained::Blc { fit, .. } = &trained {
        if merged.local.unwrap_or(false) {
            report.rmse_local = Some(local_rmse(&merged, fit, &data.train, set)?);
        }
        let agg = aggregate(&data.train, &fit.assignment)?;
        let privacy = privacy_report(
            &fit.assignment,
            &agg,
            merged.association.unwrap_or_default(),
        )?;
        write_privacy(&dir, &privacy)?;
        report.p_g = Some(privacy.p_g);
        report.nym_sizes = Some(privacy.nym_sizes.clone());
        report.worst_item_per_nym = Some(
            privacy
                .worst_item_per_nym
                .iter()
                .enumerate()
                .map(|(nym, w)| WorstItem {
                    nym,
                    item: w.map(|(i, _)| i),
                    probability: w.map(|(_, p)| p),
                })
                .collect(),
        );
    }
    write_json(&dir.join("report.json"), &report)?;
    Ok((dir, report))
}

fn write_privacy(dir: &Path, privacy: &PrivacyReport) -> Result<()> {
    write_with(&dir.join("association.csv"), |w| {
        writeln!(w, "nym,item,probability")?;
        for (g, row) in privacy.association.rows.iter().enumerate() {
            for &(i, p) in row.iter().flatten() {
                writeln!(w, "{g},{i},{p}")?;
            }
        }
        Ok(())
    })?;
    write_with(&dir.join("worst_item.csv"), |w| {
        writeln!(w, "nym,users,item,probability")?;
        for (g, worst) in privacy.worst_item_per_nym.iter().enumerate() {
            let users = privacy.nym_sizes[g];
            match worst {
                Some((i, p)) => writeln!(w, "{g},{users},{i},{p}")?,
                None => writeln!(w, "{g},{users},,")?,
            }
        }
        Ok(())
    })
}

/// RMSE of the per-user refined predictions.
fn local_rmse(
    cfg: &RunConfig,
    fit: &BlcFit,
    train: &SparseRatings,
    test: &SparseRatings,
) -> Result<f64> {
    let (w, s2) = (cfg.local_w(), cfg.local_sigma2());
    let mut se = 0.0;
    for u in 0..test.n_users() {
        let rated = test.user_ratings(u);
        if rated.is_empty() {
            continue;
        }
        let local = predict_local(&fit.model, train.user_ratings(u), fit.assignment.nym_of(u), w, s2)?;
        for &(item, r) in rated {
            let mut p = if fit.fallback.item_rated[item as usize] {
                local.predict(item as usize)
            } else {
                fit.fallback.global_mean
            };
            if let Some((lo, hi)) = clip(cfg) {
                p = p.clamp(lo, hi);
            }
            se += (p - r) * (p - r);
        }
    }
    Ok((se / test.len() as f64).sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub algo: Algo,
    pub nyms: usize,
    pub cluster_std: f64,
    pub missing: f64,
    pub period: f64,
    pub seed: u64,
    pub rmse: f64,
    pub nyms_used: usize,
    pub seconds: f64,
}

/// Trains and scores every cell of the grid, once per seed, and writes
/// `sweep.csv` plus a per-cell `summary.csv` with mean and std over seeds.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    let synth = cfg.synthetic();
    let sched = cfg.schedule();
    let algos = cfg.sweep_algo.clone().unwrap_or_else(|| vec![cfg.algo()]);
    let nyms = cfg.sweep_nyms.clone().unwrap_or_else(|| vec![cfg.nyms()]);
    let stds = cfg.sweep_cluster_std.clone().unwrap_or_else(|| vec![synth.cluster_std]);
    let missing = cfg.sweep_missing.clone().unwrap_or_else(|| vec![synth.missing_fraction]);
    let periods = cfg.sweep_period.clone().unwrap_or_else(|| vec![sched.factorization_period]);
    let seeds = cfg.sweep_seeds.clone().unwrap_or_else(|| vec![cfg.seed()]);

    let mut rows = Vec::new();
    for &std in &stds {
        for &miss in &missing {
            for &seed in &seeds {
                let mut base = cfg.clone();
                base.cluster_std = Some(std);
                base.missing = Some(miss);
                base.seed = Some(seed);
                base.validate()?;
                let data = prepare_data(&base)?;
                let test = data
                    .test
                    .as_ref()
                    .ok_or(Error::Empty("sweep needs a test set"))?;
                for &algo in &algos {
                    // ALS has no nyms and no schedule; one run covers those axes.
                    let (nym_axis, period_axis) = if algo == Algo::Als {
                        (&nyms[..1], &periods[..1])
                    } else {
                        (&nyms[..], &periods[..])
                    };
                    for &p in nym_axis {
                        for &period in period_axis {
                            let mut c = base.clone();
                            c.algo = Some(algo);
                            c.nyms = Some(p);
                            c.period = Some(period);
                            c.validate()?;
                            let t = Instant::now();
                            let trained = train_model(&c, &data.train)?;
                            let seconds = t.elapsed().as_secs_f64();
                            let rmse = rmse_with(|u, i| trained.predict(u, i), test, clip(&c))?;
                            let nyms_used = match &trained {
                                Trained::Blc { fit, .. } => {
                                    fit.assignment.nym_sizes().iter().filter(|&&s| s > 0).count()
                                }
                                Trained::Als { model, .. } => model.u.ncols(),
                            };
                            rows.push(SweepRow {
                                algo,
                                nyms: if algo == Algo::Als { 0 } else { p },
                                cluster_std: std,
                                missing: miss,
                                period: if algo == Algo::Als { 0.0 } else { period },
                                seed,
                                rmse,
                                nyms_used,
                                seconds,
                            });
                        }
                    }
                }
            }
        }
    }
    write_with(&dir.join("sweep.csv"), |w| {
        writeln!(w, "algo,nyms,cluster_std,missing,period,seed,rmse,nyms_used")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.algo.as_str(),
                r.nyms,
                r.cluster_std,
                r.missing,
                r.period,
                r.seed,
                r.rmse,
                r.nyms_used
            )?;
        }
        Ok(())
    })?;
    write_with(&dir.join("summary.csv"), |w| {
        writeln!(w, "algo,nyms,cluster_std,missing,period,runs,rmse_mean,rmse_std")?;
        for cell in summarize(&rows) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                cell.algo.as_str(),
                cell.nyms,
                cell.cluster_std,
                cell.missing,
                cell.period,
                cell.runs,
                cell.mean,
                cell.std
            )?;
        }
        Ok(())
    })?;
    write_with(&dir.join("timings.csv"), |w| {
        writeln!(w, "phase,n,m,p,d,seconds")?;
        for r in &rows {
            writeln!(
                w,
                "train_{},{},{},{},{},{:.6}",
                r.algo.as_str(),
                synth.n_users,
                synth.m_items,
                r.nyms,
                synth.d,
                r.seconds
            )?;
        }
        Ok(())
    })?;
    Ok((dir, rows))
}

/// Mean and sample std of RMSE over seeds, per grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub algo: Algo,
    pub nyms: usize,
    pub cluster_std: f64,
    pub missing: f64,
    pub period: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut cells: Vec<(SweepCell, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = |c: &SweepCell| {
            c.algo == r.algo
                && c.nyms == r.nyms
                && c.cluster_std == r.cluster_std
                && c.missing == r.missing
                && c.period == r.period
        };
        match cells.iter_mut().find(|(c, _)| key(c)) {
            Some((_, xs)) => xs.push(r.rmse),
            None => cells.push((
                SweepCell {
                    algo: r.algo,
                    nyms: r.nyms,
                    cluster_std: r.cluster_std,
                    missing: r.missing,
                    period: r.period,
                    runs: 0,
                    mean: 0.0,
                    std: 0.0,
                },
                vec![r.rmse],
            )),
        }
    }
    cells
        .into_iter()
        .map(|(mut c, xs)| {
            let n = xs.len() as f64;
            c.runs = xs.len();
            c.mean = xs.iter().sum::<f64>() / n;
            c.std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - c.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            c
        })
        .collect()
}

/// Perturbs a fraction of the ratings with unit Gaussian noise.
fn perturb(ratings: &SparseRatings, fraction: f64, seed: u64) -> Result<SparseRatings> {
    let mut rng = rng::substream(seed, rng::BENCH);
    let noise = Normal::new(0.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let triplets: Vec<RatingTriplet> = ratings
        .triplets()
        .iter()
        .map(|t| {
            let mut t = *t;
            if rng.random::<f64>() < fraction {
                t.value += noise.sample(&mut rng);
            }
            t
        })
        .collect();
    SparseRatings::new(ratings.n_users(), ratings.n_items(), triplets)
}

/// Times aggregation, cold factorization, one round of nym choice, and the
/// warm-start re-factorization after a fraction of ratings change, over a
/// grid of sizes. Writes `bench.csv` with `phase,n,m,p,d,seconds` rows.
pub fn cmd_bench(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = run_dir(cfg)?;
    let synth = cfg.synthetic();
    let hyper = cfg.hyper();
    let users = cfg.bench_users.clone().unwrap_or_else(|| vec![synth.n_users]);
    let items = cfg.bench_items.clone().unwrap_or_else(|| vec![synth.m_items]);
    let nyms = cfg.bench_nyms.clone().unwrap_or_else(|| vec![cfg.nyms()]);
    let repeats = cfg.bench_repeats.unwrap_or(3).max(1);
    let change = cfg.bench_change.unwrap_or(0.01);
    let mut rows = Vec::new();
    for &n in &users {
        for &m in &items {
            for &p in &nyms {
                for rep in 0..repeats {
                    let seed = cfg.seed().wrapping_add(rep as u64);
                    let inst = generate(&crate::synthetic::SyntheticSpec {
                        n_users: n,
                        m_items: m,
                        seed,
                        ..synth
                    })?;
                    let h = Hyperparams { seed, ..hyper };
                    let assignment = NymAssignment::random(n, p, seed)?;
                    let mut time = |phase: &'static str, f: &mut dyn FnMut() -> Result<()>| {
                        let t = Instant::now();
                        f()?;
                        rows.push(TimingRow { phase, n, m, p, d: h.d, seconds: t.elapsed().as_secs_f64() });
                        Ok::<_, Error>(())
                    };
                    let mut agg = None;
                    time("aggregate", &mut || {
                        agg = Some(aggregate(&inst.ratings, &assignment)?);
                        Ok(())
                    })?;
                    let agg = agg.expect("set above");
                    let mut cold = None;
                    time("factorize_cold", &mut || {
                        cold = Some(factorize(&agg, init_model(p, m, &h)?)?.model);
                        Ok(())
                    })?;
                    let cold = cold.expect("set above");
                    let all: Vec<usize> = (0..n).collect();
                    time("nym_choice", &mut || {
                        propose_moves(&inst.ratings, &cold, &assignment, &all);
                        Ok(())
                    })?;
                    let changed = perturb(&inst.ratings, change, seed)?;
                    let agg2 = aggregate(&changed, &assignment)?;
                    time("factorize_warm", &mut || {
                        factorize(&agg2, cold.clone())?;
                        Ok(())
                    })?;
                }
            }
        }
    }
    write_timings(&dir.join("bench.csv"), &rows)?;
    Ok(dir)
}

/// Reads a whole ratings CSV written by this crate (dense ids, header).
pub fn read_canonical(path: &Path) -> Result<SparseRatings> {
    let reader: Box<dyn BufRead> = Box::new(BufReader::new(File::open(path)?));
    load_indexed_auto(reader, crate::ratings::Format::CsvComma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::Config(String::new())),
            exit_code(&Error::Parse { line: 1, message: String::new() }),
            exit_code(&Error::Divergence { iteration: 1, value: f64::NAN }),
            exit_code(&Error::Io(std::io::Error::other("x"))),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }

    #[test]
    fn summary_mean_and_std() {
        let row = |seed, rmse| SweepRow {
            algo: Algo::Blc,
            nyms: 5,
            cluster_std: 0.0,
            missing: 0.5,
            period: 0.1,
            seed,
            rmse,
            nyms_used: 5,
            seconds: 0.0,
        };
        let cells = summarize(&[row(0, 1.0), row(1, 3.0)]);
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].runs, cells[0].mean), (2, 2.0));
        assert!((cells[0].std - 2f64.sqrt()).abs() < 1e-15);
    }
}
