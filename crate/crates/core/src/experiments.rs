//! Seeded end-to-end scenarios: build toy domains, train phase-1 models under
//! different initialization recipes, then probe and merge them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{weight_matching_detailed, DEFAULT_MAX_SWEEPS};
use crate::buffers::BufferPolicy;
use crate::container::{Checkpoint, DType};
use crate::error::{Error, Result};
use crate::merge::midpoint_with;
use crate::metrics::harmonic_mean;
use crate::probe::{sweep, SweepReport, DEFAULT_STEPS};
use crate::runtime::{
    evaluate, generate_domain, train_from, AffineTransform, ArchSpec, Dataset, Init, StatsWindow, SyntheticDomain,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScenarioName {
    SharedPretrain,
    RandomInit,
    SharedInitNoPretrain,
    SplitSource,
    DisjointSubsets,
    BufferAblation,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 6] = [
        ScenarioName::SharedPretrain,
        ScenarioName::RandomInit,
        ScenarioName::SharedInitNoPretrain,
        ScenarioName::SplitSource,
        ScenarioName::DisjointSubsets,
        ScenarioName::BufferAblation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::SharedPretrain => "shared_pretrain",
            ScenarioName::RandomInit => "random_init",
            ScenarioName::SharedInitNoPretrain => "shared_init_no_pretrain",
            ScenarioName::SplitSource => "split_source",
            ScenarioName::DisjointSubsets => "disjoint_subsets",
            ScenarioName::BufferAblation => "buffer_ablation",
        }
    }
}

/// Shape of the toy task shared by every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: usize,
    pub classes: usize,
    /// Gaussian components per class.
    pub modes: usize,
    pub hidden: Vec<usize>,
    pub train_size: usize,
    pub eval_size: usize,
    /// Samples per domain in the pretraining set.
    pub pretrain_size: usize,
    pub center_scale: f64,
    pub spread: f64,
    /// Rotation angle between the two domains, in radians.
    pub rotation: f64,
    /// Length of the shift vector between the two domains.
    pub shift: f64,
    pub label_noise: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            dims: 16,
            classes: 5,
            modes: 4,
            hidden: vec![64, 64],
            train_size: 4096,
            eval_size: 1024,
            pretrain_size: 4096,
            center_scale: 1.0,
            spread: 0.8,
            rotation: 0.5,
            shift: 1.0,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    /// The calibrated defaults: batch 16, lr 0.2, momentum 0.9, no decay.
    pub fn sgd(epochs: usize) -> Self {
        Schedule { epochs, batch_size: 16, lr: 0.2, momentum: 0.9, weight_decay: 0.0 }
    }

    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            init: Init::FreshRandom { seed },
            dtype: DType::F32,
            stats_window: StatsWindow::Epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub seeds: Vec<u64>,
    pub geometry: Geometry,
    /// Training on the union of both domains before fine-tuning.
    pub pretrain: Schedule,
    /// Per-domain training from the pretrained weights.
    pub finetune: Schedule,
    /// Per-domain training from fresh weights, for arms without pretraining.
    pub scratch: Schedule,
    pub steps: usize,
    /// Buffer policy for interior sweep points.
    pub buffer_policy: BufferPolicy,
}

impl ScenarioConfig {
    pub fn new(name: ScenarioName, seeds: Vec<u64>) -> Self {
        ScenarioConfig {
            name,
            seeds,
            geometry: Geometry::default(),
            pretrain: Schedule::sgd(30),
            finetune: Schedule::sgd(20),
            scratch: Schedule::sgd(20),
            steps: DEFAULT_STEPS,
            buffer_policy: BufferPolicy::Gaussian,
        }
    }

    pub fn arch(&self) -> ArchSpec {
        let g = &self.geometry;
        ArchSpec::mlp(g.dims, &g.hidden, g.classes, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("a scenario needs at least one seed".into()));
        }
        let g = &self.geometry;
        if g.classes < 2 || g.dims < 2 {
            return Err(Error::Validation("scenarios need at least 2 classes and 2 dims".into()));
        }
        self.arch().validate()
    }
}

/// Statistically independent stream `tag` of `seed` (SplitMix64 finalizer).
fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const TASK: u64 = 1;
    pub const BASIS: u64 = 2;
    pub const SHIFT: u64 = 3;
    pub const TRAIN_A: u64 = 10;
    pub const TRAIN_B: u64 = 11;
    pub const EVAL_A: u64 = 12;
    pub const EVAL_B: u64 = 13;
    pub const PRETRAIN_A: u64 = 14;
    pub const PRETRAIN_B: u64 = 15;
    pub const INIT_A: u64 = 20;
    pub const INIT_B: u64 = 21;
    pub const INIT_PRETRAIN: u64 = 22;
    pub const SHUFFLE_A: u64 = 30;
    pub const SHUFFLE_B: u64 = 31;
    pub const SHUFFLE_PRETRAIN: u64 = 32;
}

/// Train/eval data of both domains for one seed.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub train_a: Dataset,
    pub train_b: Dataset,
    pub eval_a: Dataset,
    pub eval_b: Dataset,
    pub pretrain: Dataset,
}

/// Domain `a` and `b` views of one task, rotated by `∓rotation/2` in a seeded
/// basis and shifted by `∓shift/2` along a seeded direction.
pub fn domain_specs(g: &Geometry, seed: u64) -> (SyntheticDomain, SyntheticDomain) {
    let basis = derive(seed, stream::BASIS);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, stream::SHIFT));
    let mut u: Vec<f64> = (0..g.dims).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x *= 0.5 * g.shift / norm);
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let make = |transform| SyntheticDomain {
        task_seed: derive(seed, stream::TASK),
        seed: 0,
        dims: g.dims,
        classes: g.classes,
        size: 0,
        modes: g.modes,
        center_scale: g.center_scale,
        spread: g.spread,
        transform,
        label_noise: g.label_noise,
    };
    (
        make(AffineTransform::rotation(g.dims, -0.5 * g.rotation, basis, neg)),
        make(AffineTransform::rotation(g.dims, 0.5 * g.rotation, basis, u)),
    )
}

pub fn build_domains(g: &Geometry, seed: u64) -> Result<DomainPair> {
    let (a, b) = domain_specs(g, seed);
    let draw = |d: &SyntheticDomain, tag: u64, size: usize| {
        generate_domain(&SyntheticDomain { seed: derive(seed, tag), size, ..d.clone() })
    };
    let pa = draw(&a, stream::PRETRAIN_A, g.pretrain_size)?;
    let pb = draw(&b, stream::PRETRAIN_B, g.pretrain_size)?;
    Ok(DomainPair {
        train_a: draw(&a, stream::TRAIN_A, g.train_size)?,
        train_b: draw(&b, stream::TRAIN_B, g.train_size)?,
        eval_a: draw(&a, stream::EVAL_A, g.eval_size)?,
        eval_b: draw(&b, stream::EVAL_B, g.eval_size)?,
        pretrain: Dataset::concat(&[&pa, &pb])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub sweep: SweepReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEval {
    pub arm: String,
    pub buffers: BufferPolicy,
    pub per_domain: Vec<(String, f64)>,
    pub harmonic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub arms: Vec<Arm>,
    pub merges: Vec<MergeEval>,
    /// Whether weight matching between the two phase-1 models returned the
    /// identity on every layer, where the scenario checks it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity_alignment: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl SummaryStats {
    pub fn of(values: Vec<f64>) -> Self {
        let mut s = values.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        SummaryStats {
            median,
            min: s.first().copied().unwrap_or(f64::NAN),
            max: s.last().copied().unwrap_or(f64::NAN),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioName,
    pub config: ScenarioConfig,
    pub seeds: Vec<SeedReport>,
    /// `barrier.<arm>`, `harmonic.<arm>.<buffers>` and `endpoint_harmonic.<arm>`
    /// aggregated over seeds.
    pub summary: BTreeMap<String, SummaryStats>,
}

impl ScenarioReport {
    pub fn stat(&self, key: &str) -> Option<&SummaryStats> {
        self.summary.get(key)
    }
}

struct Seeded<'a> {
    cfg: &'a ScenarioConfig,
    arch: ArchSpec,
    seed: u64,
    data: DomainPair,
}

impl Seeded<'_> {
    fn fresh(&self, stream: u64) -> Result<Checkpoint> {
        self.arch.init_checkpoint(derive(self.seed, stream), DType::F64)
    }

    fn fit(&self, start: &Checkpoint, data: &Dataset, schedule: &Schedule, shuffle: u64) -> Result<Checkpoint> {
        train_from(&self.arch, data, &schedule.config(derive(self.seed, shuffle)), start)
    }

    fn pretrained(&self) -> Result<Checkpoint> {
        let init = self.fresh(stream::INIT_PRETRAIN)?;
        self.fit(&init, &self.data.pretrain, &self.cfg.pretrain, stream::SHUFFLE_PRETRAIN)
    }

    fn both_domains(&self) -> Vec<(String, Dataset)> {
        vec![("domain_a".into(), self.data.eval_a.clone()), ("domain_b".into(), self.data.eval_b.clone())]
    }

    fn sweep(&self, name: &str, a: &Checkpoint, b: &Checkpoint, domains: &[(String, Dataset)]) -> Result<Arm> {
        self.sweep_with(name, a, b, domains, self.cfg.buffer_policy)
    }

    fn sweep_with(
        &self,
        name: &str,
        a: &Checkpoint,
        b: &Checkpoint,
        domains: &[(String, Dataset)],
        policy: BufferPolicy,
    ) -> Result<Arm> {
        let mut report = sweep(a, b, domains, &self.arch, self.cfg.steps, policy)?;
        report.meta.insert("scenario".into(), self.cfg.name.as_str().into());
        report.meta.insert("seed".into(), self.seed.to_string());
        report.meta.insert("arm".into(), name.into());
        Ok(Arm { name: name.into(), sweep: report })
    }

    fn merge_eval(
        &self,
        arm: &str,
        a: &Checkpoint,
        b: &Checkpoint,
        domains: &[(String, Dataset)],
        policy: BufferPolicy,
    ) -> Result<MergeEval> {
        let merged = midpoint_with(a, b, policy)?;
        let per_domain = domains
            .iter()
            .map(|(tag, d)| Ok((tag.clone(), evaluate(&self.arch, &merged, d)?.accuracy)))
            .collect::<Result<Vec<_>>>()?;
        let harmonic = harmonic_mean(&per_domain.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
        Ok(MergeEval { arm: arm.into(), buffers: policy, per_domain, harmonic })
    }
}

fn run_seed(cfg: &ScenarioConfig, seed: u64) -> Result<SeedReport> {
    let s = Seeded { cfg, arch: cfg.arch(), seed, data: build_domains(&cfg.geometry, seed)? };
    let d = &s.data;
    let mut report = SeedReport { seed, arms: Vec::new(), merges: Vec::new(), identity_alignment: None };
    match cfg.name {
        ScenarioName::SharedPretrain | ScenarioName::BufferAblation => {
            let p = s.pretrained()?;
            let a = s.fit(&p, &d.train_a, &cfg.finetune, stream::SHUFFLE_A)?;
            let b = s.fit(&p, &d.train_b, &cfg.finetune, stream::SHUFFLE_B)?;
            let domains = s.both_domains();
            if cfg.name == ScenarioName::SharedPretrain {
                report.arms.push(s.sweep("shared_pretrain", &a, &b, &domains)?);
                let m = weight_matching_detailed(&a, &b, &s.arch, DEFAULT_MAX_SWEEPS)?;
                report.identity_alignment = Some(m.perms.is_identity());
                report.merges.push(s.merge_eval("shared_pretrain", &a, &b, &domains, BufferPolicy::Gaussian)?);
            } else {
                for policy in [BufferPolicy::KeepFirst, BufferPolicy::Gaussian] {
                    report.arms.push(s.sweep_with(policy.as_str(), &a, &b, &domains, policy)?);
                    report.merges.push(s.merge_eval(policy.as_str(), &a, &b, &domains, policy)?);
                }
            }
        }
        ScenarioName::RandomInit | ScenarioName::SharedInitNoPretrain => {
            let init_a = s.fresh(stream::INIT_A)?;
            let init_b = if cfg.name == ScenarioName::RandomInit { s.fresh(stream::INIT_B)? } else { init_a.clone() };
            let a = s.fit(&init_a, &d.train_a, &cfg.scratch, stream::SHUFFLE_A)?;
            let b = s.fit(&init_b, &d.train_b, &cfg.scratch, stream::SHUFFLE_B)?;
            let domains = s.both_domains();
            report.arms.push(s.sweep(cfg.name.as_str(), &a, &b, &domains)?);
            report.merges.push(s.merge_eval(cfg.name.as_str(), &a, &b, &domains, BufferPolicy::Gaussian)?);
        }
        ScenarioName::SplitSource => {
            let p = s.pretrained()?;
            let n = d.train_a.len();
            let first: Vec<usize> = (0..n / 2).collect();
            let second: Vec<usize> = (n / 2..n).collect();
            let a = s.fit(&p, &d.train_a.select(&first), &cfg.finetune, stream::SHUFFLE_A)?;
            let b = s.fit(&p, &d.train_a.select(&second), &cfg.finetune, stream::SHUFFLE_B)?;
            let domains = vec![("domain_a".to_string(), d.eval_a.clone())];
            report.arms.push(s.sweep("split_source", &a, &b, &domains)?);
            report.merges.push(s.merge_eval("split_source", &a, &b, &domains, BufferPolicy::Gaussian)?);
        }
        ScenarioName::DisjointSubsets => {
            let k = cfg.geometry.classes;
            let lower: Vec<usize> = (0..k / 2).collect();
            let upper: Vec<usize> = (k / 2..k).collect();
            let (train_lo, train_hi) = (d.train_a.filter_classes(&lower), d.train_a.filter_classes(&upper));
            // Each model scores zero on the other's classes, so curves are
            // accuracy over the full class set.
            let domains = vec![("full".to_string(), d.eval_a.clone())];
            let p = s.pretrained()?;
            let a = s.fit(&p, &train_lo, &cfg.finetune, stream::SHUFFLE_A)?;
            let b = s.fit(&p, &train_hi, &cfg.finetune, stream::SHUFFLE_B)?;
            report.arms.push(s.sweep("pretrained", &a, &b, &domains)?);
            report.merges.push(s.merge_eval("pretrained", &a, &b, &domains, BufferPolicy::Gaussian)?);
            let a = s.fit(&s.fresh(stream::INIT_A)?, &train_lo, &cfg.scratch, stream::SHUFFLE_A)?;
            let b = s.fit(&s.fresh(stream::INIT_B)?, &train_hi, &cfg.scratch, stream::SHUFFLE_B)?;
            report.arms.push(s.sweep("random", &a, &b, &domains)?);
            report.merges.push(s.merge_eval("random", &a, &b, &domains, BufferPolicy::Gaussian)?);
        }
    }
    Ok(report)
}

fn summarize(seeds: &[SeedReport]) -> BTreeMap<String, SummaryStats> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for arm in &s.arms {
            let r = &arm.sweep;
            cols.entry(format!("barrier.{}", arm.name)).or_default().push(r.barrier);
            let ends = r.harmonic[0].min(*r.harmonic.last().unwrap());
            cols.entry(format!("endpoint_harmonic.{}", arm.name)).or_default().push(ends);
        }
        for m in &s.merges {
            cols.entry(format!("harmonic.{}.{}", m.arm, m.buffers.as_str())).or_default().push(m.harmonic);
        }
    }
    cols.into_iter().map(|(k, v)| (k, SummaryStats::of(v))).collect()
}

/// Runs every seed (concurrently) and aggregates the results.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            run_seed(cfg, seed).map_err(|e| Error::Scenario {
                scenario: cfg.name.as_str().into(),
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&seeds);
    Ok(ScenarioReport { scenario: cfg.name, config: cfg.clone(), seeds, summary })
}

impl ScenarioReport {
    /// Long-form curve data: one row per seed, arm, λ and curve.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("seed,arm,lambda,curve,value\n");
        for seed in &self.seeds {
            for arm in &seed.arms {
                let r = &arm.sweep;
                for (i, l) in r.lambdas.iter().enumerate() {
                    for d in &r.per_domain {
                        let _ = writeln!(s, "{},{},{l:.4},{},{:.4}", seed.seed, arm.name, d.tag, d.values[i]);
                    }
                    let _ = writeln!(s, "{},{},{l:.4},harmonic,{:.4}", seed.seed, arm.name, r.harmonic[i]);
                }
            }
        }
        s
    }

    /// `report.json`, `plot_data.csv` and `seed_<seed>_<arm>.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        put("report.json".into(), serde_json::to_string_pretty(self)? + "\n")?;
        put("plot_data.csv".into(), self.plot_csv())?;
        for seed in &self.seeds {
            for arm in &seed.arms {
                put(format!("seed_{}_{}.csv", seed.seed, arm.name), arm.sweep.to_csv())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(SummaryStats::of(vec![3.0, 1.0, 2.0]).median, 2.0);
        assert_eq!(SummaryStats::of(vec![4.0, 1.0, 2.0, 3.0]).median, 2.5);
    }

    #[test]
    fn domains_share_labels_not_features() {
        let g = Geometry { train_size: 64, eval_size: 16, pretrain_size: 16, ..Geometry::default() };
        let (a, b) = domain_specs(&g, 3);
        let da = generate_domain(&SyntheticDomain { seed: 1, size: 32, ..a }).unwrap();
        let db = generate_domain(&SyntheticDomain { seed: 1, size: 32, ..b }).unwrap();
        assert_eq!(da.labels, db.labels);
        assert_ne!(da.features, db.features);
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive(1, stream::TRAIN_A), derive(1, stream::TRAIN_B));
        assert_ne!(derive(1, stream::TRAIN_A), derive(2, stream::TRAIN_A));
    }
}
