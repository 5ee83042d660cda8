//! Experiment orchestration: random instances, every enabled method, NMSE
//! traces as flat records and their median summary.

mod config;
mod records;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

pub use config::{
    config_from_str, load_config, BaselineSection, ExperimentConfig, Methods, MlvampSection,
    SeSection,
};
pub use records::{load_csv, read_csv, save_csv, write_csv, Method, RunRecord, CSV_HEADER};

use crate::baseline;
use crate::error::{Error, Result};
use crate::mlvamp::{self, nmse_db};
use crate::model::{
    build_random_factored, forward_sample_with, sample_input, FactoredNetwork, Trajectory,
};
use crate::rng::{child_seed, stream_rng};
use crate::se::{predicted_nmse_db, run_se, DisturbanceModel};

/// Fraction of failed instances above which an experiment counts as failed.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

// Per-instance streams, fixed so that toggling a method leaves the others alone.
const NETWORK_STREAM: u64 = 0;
const SIGNAL_STREAM: u64 = 1;
const BASELINE_STREAM: u64 = 2;
const SE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFailure {
    pub ny: usize,
    pub seed: u64,
    pub method: Method,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<InstanceFailure>,
    pub instances: usize,
}

impl ExperimentOutcome {
    pub fn failed_instances(&self) -> usize {
        let mut seen: Vec<(usize, u64)> = self.failures.iter().map(|f| (f.ny, f.seed)).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Errors if more than [`MAX_FAILED_FRACTION`] of the instances failed.
    pub fn check(&self) -> Result<()> {
        let failed = self.failed_instances();
        if failed as f64 > MAX_FAILED_FRACTION * self.instances as f64 {
            return Err(Error::InvalidArgument(format!(
                "{failed} of {} instances failed; first: {}",
                self.instances,
                self.failures.first().map_or("", |f| f.message.as_str())
            )));
        }
        Ok(())
    }
}

/// One synthetic problem: network, truth and observation.
pub struct Instance {
    pub seed: u64,
    pub network: FactoredNetwork<f64>,
    pub truth: Trajectory<f64>,
    pub y: DVector<f64>,
}

pub fn instance_seed(master: u64, ny_index: usize, instances: usize, i: usize) -> u64 {
    child_seed(master, (ny_index * instances + i) as u64)
}

pub fn build_instance(cfg: &ExperimentConfig, ny: usize, seed: u64) -> Result<Instance> {
    let network = build_random_factored(&cfg.network_for(ny), child_seed(seed, NETWORK_STREAM))?;
    let mut rng = stream_rng(seed, SIGNAL_STREAM);
    let z0 = sample_input(network.network(), &mut rng);
    let truth = forward_sample_with(network.network(), &z0, &mut rng)?;
    let y = truth.z.last().expect("trajectory has an output").clone();
    Ok(Instance {
        seed,
        network,
        truth,
        y,
    })
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_mlvamp(cfg: &ExperimentConfig, ny: usize, inst: &Instance) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let res = mlvamp::run(
        &inst.network,
        &inst.y,
        Some(&inst.truth),
        cfg.mlvamp.options(),
    )?;
    let wall_ms = elapsed_ms(t);
    let mut out = Vec::new();
    for rec in &res.records {
        for (layer, &v) in rec.nmse_db.iter().enumerate() {
            out.push(RunRecord {
                ny,
                seed: inst.seed,
                method: Method::Mlvamp,
                layer,
                half_iter: rec.half_iter,
                nmse_db: v,
                wall_ms,
                converged: res.converged,
            });
        }
    }
    Ok(out)
}

fn run_baseline(cfg: &ExperimentConfig, ny: usize, inst: &Instance) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let opts = cfg.baseline.options(child_seed(inst.seed, BASELINE_STREAM));
    let out = baseline::minimize(inst.network.network(), &inst.y, &opts)?;
    let wall_ms = elapsed_ms(t);
    Ok(vec![RunRecord {
        ny,
        seed: inst.seed,
        method: Method::Baseline,
        layer: 0,
        half_iter: opts.iters,
        nmse_db: nmse_db(&out.z0, &inst.truth.z[0])?,
        wall_ms,
        converged: true,
    }])
}

fn run_prediction(cfg: &ExperimentConfig, ny: usize, inst: &Instance) -> Result<Vec<RunRecord>> {
    let t = Instant::now();
    let model = DisturbanceModel::from_network(&inst.network)?;
    let se = run_se(&model, &cfg.se_options(child_seed(inst.seed, SE_STREAM)))?;
    let wall_ms = elapsed_ms(t);
    let mut out = Vec::new();
    for half_iter in 0..2 * se.iterations.len() {
        for layer in 0..model.positions() {
            out.push(RunRecord {
                ny,
                seed: inst.seed,
                method: Method::Se,
                layer,
                half_iter,
                nmse_db: predicted_nmse_db(&se, layer, half_iter)?,
                wall_ms,
                converged: se.converged,
            });
        }
    }
    Ok(out)
}

fn run_instance(
    cfg: &ExperimentConfig,
    ny: usize,
    seed: u64,
    first: bool,
) -> (Vec<RunRecord>, Vec<InstanceFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let fail = |method: Method, e: Error| InstanceFailure {
        ny,
        seed,
        method,
        message: e.to_string(),
    };
    let inst = match build_instance(cfg, ny, seed) {
        Ok(inst) => inst,
        Err(e) => {
            failures.push(fail(Method::Mlvamp, e));
            return (records, failures);
        }
    };
    let jobs: [(bool, Method, MethodRunner); 3] = [
        (cfg.methods.mlvamp, Method::Mlvamp, run_mlvamp),
        (cfg.methods.baseline, Method::Baseline, run_baseline),
        (cfg.methods.se && first, Method::Se, run_prediction),
    ];
    for (enabled, method, job) in jobs {
        if !enabled {
            continue;
        }
        match job(cfg, ny, &inst) {
            Ok(r) => records.extend(r),
            Err(e) => failures.push(fail(method, e)),
        }
    }
    (records, failures)
}

type MethodRunner = fn(&ExperimentConfig, usize, &Instance) -> Result<Vec<RunRecord>>;

/// Runs every enabled method on `instances` random problems per output width.
/// Instances run in parallel; state evolution runs once per width on the
/// first instance's network. Records come back in a fixed order and are also
/// written to `cfg.output` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut outcome = ExperimentOutcome::default();
    for (ny_index, &ny) in cfg.ny_sweep.iter().enumerate() {
        let parts: Vec<_> = (0..cfg.instances)
            .into_par_iter()
            .map(|i| {
                run_instance(
                    cfg,
                    ny,
                    instance_seed(cfg.seed, ny_index, cfg.instances, i),
                    i == 0,
                )
            })
            .collect();
        for (records, failures) in parts {
            outcome.records.extend(records);
            outcome.failures.extend(failures);
        }
        outcome.instances += cfg.instances;
    }
    if let Some(path) = &cfg.output {
        save_csv(&outcome.records, path)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub ny: usize,
    pub method: Method,
    pub median_nmse_db: f64,
    pub instances: usize,
}

/// Median of `values`, averaging the middle pair for even counts. Negative
/// infinity sorts below everything else.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    })
}

/// Final-half-iteration layer-0 NMSE per instance, keyed by `(ny, method)`.
pub fn final_layer0(records: &[RunRecord]) -> BTreeMap<(usize, Method), Vec<f64>> {
    let mut last: BTreeMap<(usize, Method, u64), (usize, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.layer == 0) {
        let e = last
            .entry((r.ny, r.method, r.seed))
            .or_insert((r.half_iter, r.nmse_db));
        if r.half_iter >= e.0 {
            *e = (r.half_iter, r.nmse_db);
        }
    }
    let mut out: BTreeMap<(usize, Method), Vec<f64>> = BTreeMap::new();
    for ((ny, method, _), (_, v)) in last {
        out.entry((ny, method)).or_default().push(v);
    }
    out
}

/// Median over instances of the final layer-0 NMSE, per width and method.
pub fn aggregate(records: &[RunRecord]) -> Vec<SummaryRow> {
    final_layer0(records)
        .into_iter()
        .map(|((ny, method), mut v)| SummaryRow {
            ny,
            method,
            instances: v.len(),
            median_nmse_db: median(&mut v).expect("nonempty group"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, half_iter: usize, nmse_db: f64) -> RunRecord {
        RunRecord {
            ny: 10,
            seed,
            method: Method::Mlvamp,
            layer: 0,
            half_iter,
            nmse_db,
            wall_ms: 1.0,
            converged: true,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0]), Some(3.0));
        assert_eq!(median(&mut [-10.0, -30.0, -20.0]), Some(-20.0));
        assert_eq!(median(&mut [1.0, 4.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(
            median(&mut [f64::NEG_INFINITY, -5.0, f64::NEG_INFINITY]),
            Some(f64::NEG_INFINITY)
        );
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn aggregate_uses_last_half_iteration() {
        let recs = vec![
            record(1, 0, 0.0),
            record(1, 3, -10.0),
            record(2, 3, -20.0),
            record(3, 3, -30.0),
            record(2, 1, 5.0),
        ];
        let rows = aggregate(&recs);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].median_nmse_db, -20.0);
        assert_eq!(rows[0].instances, 3);
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            network: crate::model::SyntheticConfig {
                input_dim: 5,
                hidden: vec![20],
                ..Default::default()
            },
            ny_sweep: vec![30],
            instances: 2,
            seed: 4,
            methods: Methods {
                mlvamp: true,
                baseline: false,
                se: false,
            },
            mlvamp: MlvampSection {
                max_iters: 15,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn record_count_contract() {
        let cfg = small_config();
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty());
        // One hidden layer: input, pre- and post-activation per half-iteration.
        let per_instance: Vec<usize> = (0..2)
            .map(|i| {
                let seed = instance_seed(cfg.seed, 0, 2, i);
                out.records.iter().filter(|r| r.seed == seed).count()
            })
            .collect();
        for (i, &n) in per_instance.iter().enumerate() {
            let seed = instance_seed(cfg.seed, 0, 2, i);
            let halves = out
                .records
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| r.half_iter)
                .max()
                .unwrap()
                + 1;
            assert_eq!(n, 3 * halves);
        }
    }

    #[test]
    fn reproducible_from_master_seed() {
        let mut cfg = small_config();
        cfg.methods.baseline = true;
        let strip = |v: Vec<RunRecord>| -> Vec<RunRecord> {
            v.into_iter()
                .map(|r| RunRecord { wall_ms: 0.0, ..r })
                .collect()
        };
        let a = strip(run_experiment(&cfg).unwrap().records);
        let b = strip(run_experiment(&cfg).unwrap().records);
        assert_eq!(a, b);
        // Switching the baseline off leaves the message-passing records unchanged.
        cfg.methods.baseline = false;
        let c = strip(run_experiment(&cfg).unwrap().records);
        let a_mlvamp: Vec<_> = a
            .into_iter()
            .filter(|r| r.method == Method::Mlvamp)
            .collect();
        assert_eq!(a_mlvamp, c);
    }

    #[test]
    fn failure_threshold() {
        let mut out = ExperimentOutcome {
            instances: 10,
            ..Default::default()
        };
        out.failures.push(InstanceFailure {
            ny: 1,
            seed: 1,
            method: Method::Baseline,
            message: "x".into(),
        });
        assert!(out.check().is_ok());
        out.failures.push(InstanceFailure {
            ny: 1,
            seed: 2,
            method: Method::Baseline,
            message: "y".into(),
        });
        assert!(out.check().is_err());
    }
}
