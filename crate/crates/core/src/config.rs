//! Flat TOML run configuration shared by all commands.
//!
//! Every key is optional; unset keys take library defaults. Unknown keys are
//! rejected. `key=value` overrides use TOML value syntax, with bare words
//! taken as strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blc::{AdaptiveConfig, Schedule};
use crate::error::{Error, Result};
use crate::factorization::Hyperparams;
use crate::metrics::AssociationMode;
use crate::ratings::{Format, SplitSpec};
use crate::synthetic::SyntheticSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    #[default]
    Blc,
    BlcAdaptive,
    Als,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Blc => "blc",
            Algo::BlcAdaptive => "blc_adaptive",
            Algo::Als => "als",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Ratings file; synthetic data is generated when unset.
    pub data: Option<PathBuf>,
    pub format: Option<String>,
    /// Ids in `data` are dense 0-based indices, kept as they are.
    pub indexed: Option<bool>,
    /// Train, validation and test fractions for `data`.
    pub split: Option<[f64; 3]>,

    pub groups: Option<usize>,
    pub users: Option<usize>,
    pub items: Option<usize>,
    pub cluster_std: Option<f64>,
    pub center_std: Option<f64>,
    pub item_std: Option<f64>,
    pub missing: Option<f64>,

    pub algo: Option<Algo>,
    pub d: Option<usize>,
    pub nyms: Option<usize>,
    pub sigma2: Option<f64>,
    pub sigma2_u: Option<f64>,
    pub sigma2_v: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_iters: Option<usize>,
    pub init_std: Option<f64>,

    pub period: Option<f64>,
    pub passes: Option<usize>,
    pub reseed_idle: Option<bool>,
    pub error_threshold: Option<f64>,
    pub max_nyms: Option<usize>,

    /// Also report refined per-user predictions.
    pub local: Option<bool>,
    pub local_w: Option<f64>,
    pub local_sigma2: Option<f64>,
    pub association: Option<AssociationMode>,
    /// Rating domain `[lo, hi]` for clipped RMSE.
    pub clip: Option<[f64; 2]>,

    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
    pub threads: Option<usize>,
    pub model_dir: Option<PathBuf>,

    pub sweep_algo: Option<Vec<Algo>>,
    pub sweep_nyms: Option<Vec<usize>>,
    pub sweep_cluster_std: Option<Vec<f64>>,
    pub sweep_missing: Option<Vec<f64>>,
    pub sweep_period: Option<Vec<f64>>,
    pub sweep_seeds: Option<Vec<u64>>,

    pub bench_users: Option<Vec<usize>>,
    pub bench_items: Option<Vec<usize>>,
    pub bench_nyms: Option<Vec<usize>>,
    pub bench_repeats: Option<usize>,
    /// Fraction of ratings perturbed before the warm-start re-factorization.
    pub bench_change: Option<f64>,
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Keys set in `other` replace those here.
    pub fn merged(&self, other: &RunConfig) -> Result<Self> {
        let mut base = self.to_table()?;
        base.extend(other.to_table()?);
        toml::Value::Table(base).try_into().map_err(toml_err)
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(toml_err)
    }

    /// Applies `key=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table()?;
        for kv in overrides {
            let kv = kv.as_ref();
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        toml::Value::Table(table).try_into().map_err(toml_err)
    }

    pub fn algo(&self) -> Algo {
        self.algo.unwrap_or_default()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn format(&self) -> Result<Format> {
        self.format
            .as_deref()
            .map_or(Ok(Format::CsvComma), str::parse)
    }

    pub fn hyper(&self) -> Hyperparams {
        let def = Hyperparams::default();
        Hyperparams {
            d: self.d.unwrap_or(def.d),
            sigma2: self.sigma2.unwrap_or(def.sigma2),
            sigma2_u: self.sigma2_u.unwrap_or(def.sigma2_u),
            sigma2_v: self.sigma2_v.unwrap_or(def.sigma2_v),
            epsilon: self.epsilon.unwrap_or(def.epsilon),
            max_iters: self.max_iters.unwrap_or(def.max_iters),
            init_std: self.init_std.unwrap_or(def.init_std),
            seed: self.seed(),
        }
    }

    pub fn schedule(&self) -> Schedule {
        let def = Schedule::default();
        Schedule {
            factorization_period: self.period.unwrap_or(def.factorization_period),
            passes: self.passes.unwrap_or(def.passes),
            seed: self.seed(),
            update_nyms: true,
            reseed_idle: self.reseed_idle.unwrap_or(def.reseed_idle),
        }
    }

    pub fn adaptive(&self) -> AdaptiveConfig {
        let def = AdaptiveConfig::default();
        AdaptiveConfig {
            enabled: true,
            error_threshold: self.error_threshold.unwrap_or(def.error_threshold),
            max_nyms: self.max_nyms.unwrap_or(def.max_nyms),
        }
    }

    pub fn nyms(&self) -> usize {
        self.nyms.unwrap_or(5)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        let def = SyntheticSpec::default();
        SyntheticSpec {
            p_groups: self.groups.unwrap_or(def.p_groups),
            n_users: self.users.unwrap_or(def.n_users),
            m_items: self.items.unwrap_or(def.m_items),
            d: self.d.unwrap_or(def.d),
            cluster_std: self.cluster_std.unwrap_or(def.cluster_std),
            center_std: self.center_std.unwrap_or(def.center_std),
            item_std: self.item_std.unwrap_or(def.item_std),
            missing_fraction: self.missing.unwrap_or(def.missing_fraction),
            seed: self.seed(),
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let [a, b, c] = self.split.unwrap_or([0.8, 0.0, 0.2]);
        SplitSpec::new(a, b, c, self.seed())
    }

    pub fn local_w(&self) -> f64 {
        self.local_w.unwrap_or(1.0)
    }

    pub fn local_sigma2(&self) -> f64 {
        self.local_sigma2.unwrap_or(1000.0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| "run".to_string())
    }

    /// Checks every value that will be used, before any computation.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.format().map_err(cfg)?;
        self.hyper().validate().map_err(cfg)?;
        self.schedule().validate().map_err(cfg)?;
        self.adaptive().validate().map_err(cfg)?;
        if self.data.is_none() {
            self.synthetic().validate().map_err(cfg)?;
        } else {
            self.split_spec().map_err(cfg)?;
        }
        if self.nyms() == 0 {
            return Err(Error::Config("nyms must be >= 1".into()));
        }
        if !(self.local_w().is_finite() && self.local_w() >= 0.0) {
            return Err(Error::Config("local_w must be nonnegative".into()));
        }
        if !(self.local_sigma2().is_finite() && self.local_sigma2() > 0.0) {
            return Err(Error::Config("local_sigma2 must be positive".into()));
        }
        if let Some([lo, hi]) = self.clip {
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config("clip needs lo < hi".into()));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if let Some(f) = self.bench_change {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config("bench_change must be in [0, 1)".into()));
            }
        }
        let run_id = self.run_id();
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == ".." {
            return Err(Error::Config(format!("invalid run_id `{run_id}`")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("nyms = 3\nbogus = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_replace_and_parse() {
        let base = RunConfig::from_toml("nyms = 3\nperiod = 0.5").unwrap();
        let c = base
            .with_overrides(&["nyms=7", "algo=als", "sweep_nyms=[1,2]", "format = tab"])
            .unwrap();
        assert_eq!(c.nyms, Some(7));
        assert_eq!(c.period, Some(0.5));
        assert_eq!(c.algo(), Algo::Als);
        assert_eq!(c.sweep_nyms, Some(vec![1, 2]));
        assert_eq!(c.format().unwrap(), Format::Tab);
        assert!(base.with_overrides(&["nope=1"]).is_err());
        assert!(base.with_overrides(&["nyms"]).is_err());
    }

    #[test]
    fn merge_prefers_other() {
        let a = RunConfig::from_toml("nyms = 3\nseed = 1").unwrap();
        let b = RunConfig::from_toml("seed = 9").unwrap();
        let m = a.merged(&b).unwrap();
        assert_eq!((m.nyms, m.seed), (Some(3), Some(9)));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in ["period = 0.0", "sigma2 = -1.0", "nyms = 0", "missing = 1.0", "run_id = \"a/b\""] {
            let c = RunConfig::from_toml(bad).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_toml("nyms = 3\nclip = [1.0, 5.0]\nalgo = \"blc_adaptive\"").unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
