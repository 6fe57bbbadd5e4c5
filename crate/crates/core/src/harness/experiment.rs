//! The per-seed pipeline and sweeps over it.
//!
//! pretrain (cached) → adapter init → burn-in → SWAG collection and BMA for
//! the Bayesian methods, point prediction otherwise → metrics on the target
//! validation split.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint::{decode_backbone, encode_backbone, fnv1a64, Checkpoint};
use super::config::ExperimentConfig;
use super::dataset::{make_dataset, DatasetPair, DatasetSpec};
use super::report::{Axis, MetricsRecord};
use crate::adapters::{param_count, AdapterMode, AdapterModule, AdapterSet, Method};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::nn::{pretrain, Backbone, BackboneConfig, Batch, PretrainConfig, Pretrained};
use crate::rng::RngStream;
use crate::swag::{bma_predict, SwagPosterior, SwagState};
use crate::train::{adapter_objective, burn_in, Phase, TrainConfig};

#[derive(Serialize)]
struct PretrainKey<'a> {
    backbone: &'a BackboneConfig,
    pretrain: &'a PretrainConfig,
    family: &'a str,
    classes: usize,
    n_source: usize,
    noise: f64,
    radius: f64,
    seq_len: usize,
    dataset_seed: u64,
    pretrain_seed: u64,
}

/// Hash of everything that determines the pretrained backbone. Target-shift
/// parameters are excluded, so sweeps over them reuse one backbone.
pub fn pretrain_key(cfg: &ExperimentConfig) -> u64 {
    let d = &cfg.dataset;
    let key = PretrainKey {
        backbone: &cfg.backbone,
        pretrain: &cfg.pretrain,
        family: d.family.as_str(),
        classes: d.classes,
        n_source: d.n_source,
        noise: d.noise,
        radius: d.radius,
        seq_len: d.seq_len,
        dataset_seed: d.seed,
        pretrain_seed: cfg.pretrain_seed,
    };
    fnv1a64(&serde_json::to_vec(&key).expect("key serializes"))
}

/// In-memory cache of pretrained backbones, optionally backed by checkpoint
/// files in a directory.
#[derive(Debug, Default)]
pub struct PretrainCache {
    mem: Mutex<HashMap<u64, Arc<Pretrained>>>,
    dir: Option<PathBuf>,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            mem: Mutex::default(),
            dir: Some(dir.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.mem.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_train(
        &self,
        cfg: &ExperimentConfig,
        data: &DatasetPair,
    ) -> Result<Arc<Pretrained>> {
        let key = pretrain_key(cfg);
        if let Some(p) = self.mem.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(p));
        }
        let path = self
            .dir
            .as_ref()
            .map(|d| d.join(format!("backbone-{key:016x}.ckpt")));
        let pre = match path.as_ref().filter(|p| p.exists()) {
            Some(p) => {
                let net = decode_backbone(&Checkpoint::load(p)?)?;
                let acc = source_accuracy(&net, &data.source.train)?;
                Pretrained {
                    net,
                    source_accuracy: acc,
                    epochs: 0,
                }
            }
            None => {
                let pre = pretrain(
                    &cfg.backbone,
                    &cfg.pretrain,
                    &data.source.train,
                    &RngStream::new(cfg.pretrain_seed).derive("pretrain"),
                )?;
                if let Some(p) = &path {
                    std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                    encode_backbone(&pre.net).save(p)?;
                }
                pre
            }
        };
        let pre = Arc::new(pre);
        self.mem
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&pre));
        Ok(pre)
    }
}

fn source_accuracy(net: &Backbone, data: &Batch) -> Result<f64> {
    Ok(crate::metrics::accuracy(
        &net.predict_proba(data, &AdapterSet::new())?,
        &data.labels,
    ))
}

/// ⌊n·f⌋ examples (at least one) chosen by a seeded permutation, kept in
/// their original order.
pub fn subsample(data: &Batch, fraction: f64, rng: &RngStream) -> Batch {
    if fraction >= 1.0 {
        return data.clone();
    }
    let n = ((data.len() as f64 * fraction).floor() as usize).max(1);
    let mut idx = rng.derive("subsample").permutation(data.len());
    idx.truncate(n);
    idx.sort_unstable();
    data.select(&idx)
}

/// Adapters for every site of `net` under `method`. LoRA draws `A` from the
/// `adapters` stream of `rng`; LoRA-XS is deterministic given the weights.
pub fn init_adapters(
    net: &Backbone,
    cfg: &ExperimentConfig,
    rng: &RngStream,
) -> Result<AdapterSet> {
    let mode = cfg.method.mode();
    let mut draw = rng.derive("adapters");
    let mut set = AdapterSet::new();
    for (site, m, n) in net.config().adapter_sites(mode) {
        let module = match mode {
            AdapterMode::Lora => {
                AdapterModule::init_lora(site, m, n, cfg.rank, cfg.alpha, &mut draw)?
            }
            AdapterMode::LoraXs => {
                let w0 = net
                    .site_weight(site)
                    .ok_or_else(|| Error::invalid(format!("no weight at {site}")))?;
                AdapterModule::init_lora_xs(site, w0, cfg.rank, cfg.alpha)?
            }
        };
        set.insert(module);
    }
    if cfg.train_head {
        let (m, n) = net.head().w0.shape();
        set = set.with_head_delta(m, n);
    }
    Ok(set)
}

/// Trained state for one seed.
#[derive(Debug, Clone)]
pub struct Fitted {
    /// Adapters at the final θ (the SWAG mean is not unpacked).
    pub adapters: AdapterSet,
    pub posterior: Option<SwagPosterior>,
    pub train_size: usize,
}

pub fn fit(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &DatasetPair,
    net: &Backbone,
) -> Result<Fitted> {
    let rng = RngStream::new(seed);
    let train = subsample(&data.target.train, cfg.subsample, &rng);
    let mut adapters = init_adapters(net, cfg, &rng)?;
    let train_rng = rng.derive("train");
    let burn = TrainConfig {
        burn_in_epochs: cfg.burn_in_epochs(),
        ..cfg.train
    };
    let mut runner = burn_in(net, &mut adapters, &train, &burn, &train_rng)?;
    let posterior = if cfg.method.is_bayesian() {
        let mut theta = adapters.pack().values;
        if cfg.swag_epochs == 0 {
            Some(SwagPosterior::point_mass(&theta))
        } else {
            let swag = TrainConfig {
                lr_max: cfg.swag_lr.unwrap_or(cfg.train.lr_max),
                ..cfg.train
            };
            let schedule = swag.schedule(Phase::SwagCollect, cfg.swag_epochs, train.len());
            let mut state = SwagState::new(theta.len(), cfg.cov_rank);
            {
                let mut probe = adapters.clone();
                let objective = adapter_objective(net, &mut probe);
                runner.run(
                    &mut theta,
                    &train,
                    &schedule,
                    cfg.swag_epochs,
                    &train_rng,
                    objective,
                    |_, t| state.collect(t),
                )?;
            }
            adapters.unpack(&theta)?;
            Some(state.finalize_with(cfg.cov_normalization)?)
        }
    } else {
        None
    };
    Ok(Fitted {
        adapters,
        posterior,
        train_size: train.len(),
    })
}

pub fn predict(
    cfg: &ExperimentConfig,
    seed: u64,
    net: &Backbone,
    fitted: &Fitted,
    batch: &Batch,
) -> Result<crate::linalg::Matrix> {
    match &fitted.posterior {
        Some(post) => {
            let rng = RngStream::new(seed).derive("bma");
            Ok(bma_predict(net, &fitted.adapters, post, batch, cfg.samples, &rng)?.probs)
        }
        None => net.predict_proba(batch, &fitted.adapters),
    }
}

fn base_record(cfg: &ExperimentConfig, seed: u64) -> MetricsRecord {
    MetricsRecord {
        dataset: cfg.dataset_label(),
        method: cfg.method,
        r: cfg.rank,
        k: cfg.effective_cov_rank(),
        seed,
        subsample: cfg.subsample,
        param_count: 0,
        accuracy: f64::NAN,
        ece: f64::NAN,
        nll: f64::NAN,
        brier: f64::NAN,
        wall_time_s: 0.0,
        failed: None,
        bins: Vec::new(),
    }
}

/// Stored parameter count of a run: |θ|, times (k+2) for SWAG posteriors.
pub fn stored_param_count(method: Method, theta_len: usize, k: usize) -> u64 {
    let factor = if method.is_bayesian() {
        k as u64 + 2
    } else {
        1
    };
    theta_len as u64 * factor
}

/// One seed end to end. Divergence is recorded, not propagated.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &DatasetPair,
    net: &Backbone,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let mut rec = base_record(cfg, seed);
    let theta_len = init_adapters(net, cfg, &RngStream::new(seed))?.param_count();
    rec.param_count = stored_param_count(cfg.method, theta_len, cfg.cov_rank);
    let outcome =
        fit(cfg, seed, data, net).and_then(|f| predict(cfg, seed, net, &f, &data.target.val));
    match outcome {
        Ok(probs) => {
            let ev = evaluate(&probs, &data.target.val.labels, cfg.ece_bins);
            rec.accuracy = ev.accuracy;
            rec.ece = ev.ece;
            rec.nll = ev.nll;
            rec.brier = ev.brier;
            rec.bins = ev.bins;
        }
        Err(e @ Error::Divergence(_)) => rec.failed = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    if cfg.timing {
        rec.wall_time_s = start.elapsed().as_secs_f64();
    }
    Ok(rec)
}

fn count_only_records(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let preset = cfg.count_preset().expect("count-only config");
    let k = cfg.effective_cov_rank().unwrap_or(0);
    let count = param_count(cfg.method, &preset, cfg.rank, k)?;
    Ok(cfg
        .seeds
        .iter()
        .map(|&seed| MetricsRecord {
            param_count: count,
            ..base_record(cfg, seed)
        })
        .collect())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    run_all(std::slice::from_ref(cfg), &PretrainCache::new())
}

/// Runs every (config, seed) pair, seeds in parallel. Output order is config
/// order, then seed order, independent of scheduling.
pub fn run_all(cfgs: &[ExperimentConfig], cache: &PretrainCache) -> Result<Vec<MetricsRecord>> {
    for cfg in cfgs {
        cfg.validate()?;
    }
    let mut datasets: HashMap<String, Arc<DatasetPair>> = HashMap::new();
    let mut prepared: Vec<Option<(Arc<DatasetPair>, Arc<Pretrained>)>> =
        Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        if cfg.count_preset().is_some() {
            prepared.push(None);
            continue;
        }
        let key = dataset_key(&cfg.dataset);
        let data = match datasets.get(&key) {
            Some(d) => Arc::clone(d),
            None => {
                let d = Arc::new(make_dataset(&cfg.dataset)?);
                datasets.insert(key, Arc::clone(&d));
                d
            }
        };
        let pre = cache.get_or_train(cfg, &data)?;
        prepared.push(Some((data, pre)));
    }
    let jobs: Vec<(usize, u64)> = cfgs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<Vec<MetricsRecord>>> = jobs
        .par_iter()
        .map(|&(i, seed)| match &prepared[i] {
            None => Ok(count_only_records(&ExperimentConfig {
                seeds: vec![seed],
                ..cfgs[i].clone()
            })?),
            Some((data, pre)) => Ok(vec![run_seed(&cfgs[i], seed, data, &pre.net)?]),
        })
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn dataset_key(spec: &DatasetSpec) -> String {
    serde_json::to_string(spec).expect("spec serializes")
}

/// Config with `axis` set to `value`. Integer axes reject fractional values.
pub fn with_axis(base: &ExperimentConfig, axis: Axis, value: f64) -> Result<ExperimentConfig> {
    let as_count = || -> Result<usize> {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{} expects whole numbers, got {value}",
                axis.as_str()
            )));
        }
        Ok(value as usize)
    };
    let mut cfg = base.clone();
    match axis {
        Axis::Rank => cfg.rank = as_count()?,
        Axis::CovRank => cfg.cov_rank = as_count()?,
        Axis::Subsample => cfg.subsample = value,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Cross product of axis values and seeds, flat, in axis-value order.
pub fn sweep(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
    cache: &PretrainCache,
) -> Result<Vec<MetricsRecord>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one axis value"));
    }
    let cfgs = values
        .iter()
        .map(|&v| with_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    run_all(&cfgs, cache)
}
