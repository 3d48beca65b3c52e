use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ExperimentKind, ExperimentSpec, GroundTruthSource};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::metrics::{test_log_predictive, write_trace, EnergyReference};
use crate::samplers::{self, mirror_langevin_chain, Algorithm, TraceOptions};
use crate::targets::{
    bayesian_logistic_regression, quadratic_simplex_target, random_quadratic_matrix, read_reference_sample,
    selective_density_2d, sparse_dirichlet_posterior, synthetic_logistic_data, write_reference_sample, LogisticSplits,
    Target,
};

pub const SUMMARY_HEADER: [&str; 11] = [
    "sampler",
    "algorithm",
    "rate",
    "seed",
    "status",
    "final_energy_distance",
    "final_mksd2",
    "validation_log_predictive",
    "test_log_predictive",
    "trace_file",
    "error",
];

/// The target of an experiment plus, for logistic regression, the held-out
/// splits used for scoring.
pub struct ExperimentTarget {
    pub target: Box<dyn Target>,
    pub splits: Option<LogisticSplits>,
}

pub fn build_experiment_target(spec: &ExperimentSpec) -> Result<ExperimentTarget> {
    let d = spec.dimension;
    let t = &spec.target;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    Ok(match spec.experiment {
        ExperimentKind::Dirichlet20 => ExperimentTarget {
            target: Box::new(sparse_dirichlet_posterior(&vec![t.prior; d + 1], &t.counts)?),
            splits: None,
        },
        ExperimentKind::Quadratic20 => ExperimentTarget {
            target: Box::new(quadratic_simplex_target(random_quadratic_matrix(d, &mut rng), t.sigma)?),
            splits: None,
        },
        ExperimentKind::Selective2d => ExperimentTarget {
            target: Box::new(selective_density_2d()),
            splits: None,
        },
        ExperimentKind::Logistic => {
            let splits = synthetic_logistic_data(t.n_train, t.n_validation, t.n_test, d, &mut rng)?;
            let target = bayesian_logistic_regression(splits.train.x.clone(), splits.train.y.clone())?;
            ExperimentTarget {
                target: Box::new(target),
                splits: Some(splits),
            }
        }
    })
}

fn chain_start(domain: Domain) -> DVector<f64> {
    match domain {
        Domain::Simplex(d) => DVector::from_element(d, 1.0 / (d as f64 + 1.0)),
        Domain::Orthant(d) | Domain::Euclidean(d) => DVector::from_element(d, 1.0),
    }
}

/// The reference sample for energy distances, if the spec has one.
pub fn ground_truth_sample(spec: &ExperimentSpec, target: &dyn Target) -> Result<Option<Vec<DVector<f64>>>> {
    let gt = &spec.ground_truth;
    match gt.source {
        GroundTruthSource::None => Ok(None),
        GroundTruthSource::Exact => {
            let mut rng = ChaCha8Rng::seed_from_u64(gt.chain.seed);
            target
                .sample_exact(gt.size, &mut rng)
                .map(Some)
                .ok_or_else(|| Error::config("ground_truth.source", "target has no exact sampler"))
        }
        GroundTruthSource::MirrorLangevin => {
            mirror_langevin_chain(target, chain_start(target.domain()), gt.size, &gt.chain).map(|c| Some(c.points))
        }
        GroundTruthSource::File => {
            let path = gt
                .path
                .as_ref()
                .ok_or_else(|| Error::config("ground_truth.path", "required when source = \"file\""))?;
            read_reference_sample(path, spec.dimension).map(Some)
        }
    }
}

/// Write the spec's reference sample to `<output_dir>/reference.csv` and
/// return its path. File-backed references are returned as is.
pub fn generate_ground_truth(spec: &ExperimentSpec) -> Result<Option<PathBuf>> {
    if spec.ground_truth.source == GroundTruthSource::File {
        return Ok(spec.ground_truth.path.clone());
    }
    let target = build_experiment_target(spec)?;
    let Some(sample) = ground_truth_sample(spec, target.target.as_ref())? else {
        return Ok(None);
    };
    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let path = spec.output_dir.join("reference.csv");
    write_reference_sample(&path, &sample)?;
    Ok(Some(path))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellOutcome {
    Finished {
        final_energy_distance: Option<f64>,
        final_mksd2: Option<f64>,
        validation_log_predictive: Option<f64>,
        test_log_predictive: Option<f64>,
    },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub algorithm: Algorithm,
    pub rate: f64,
    pub seed: u64,
    pub trace_file: Option<PathBuf>,
    pub outcome: CellOutcome,
}

impl CellResult {
    pub fn is_finished(&self) -> bool {
        matches!(self.outcome, CellOutcome::Finished { .. })
    }
}

fn trace_file_name(label: &str, rate: f64, seed: u64) -> String {
    format!("{label}_lr{rate}_seed{seed}.csv")
}

/// Run one (sampler, rate, seed) cell and write its trace under
/// `<output_dir>/traces`. Sampler failures are reported in the outcome;
/// config and I/O failures are returned as errors.
pub fn run_cell(
    spec: &ExperimentSpec,
    sampler: usize,
    rate: f64,
    seed: u64,
    target: &ExperimentTarget,
    reference: Option<&EnergyReference>,
) -> Result<CellResult> {
    let sweep = &spec.samplers[sampler];
    let mut cfg = sweep.config.clone();
    cfg.step_size = rate;
    cfg.seed = seed;
    let opts = TraceOptions {
        every: spec.trace_every,
        reference,
        mksd: spec.mksd,
        wall_clock: spec.wall_clock,
    };
    let mut result = CellResult {
        label: sweep.label.clone(),
        algorithm: cfg.algorithm,
        rate,
        seed,
        trace_file: None,
        outcome: CellOutcome::Failed(String::new()),
    };
    let (particles, trace) = match samplers::run(&cfg, target.target.as_ref(), &opts) {
        Ok(out) => out,
        Err(e @ Error::Config { .. }) => return Err(e),
        Err(e) => {
            result.outcome = CellOutcome::Failed(e.to_string());
            return Ok(result);
        }
    };
    let dir = spec.output_dir.join("traces");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(trace_file_name(&sweep.label, rate, seed));
    write_trace(&trace, &path)?;
    result.trace_file = Some(path);
    let last = trace.last().cloned().unwrap_or_default();
    let thetas = particles.thetas();
    let (validation, test) = match &target.splits {
        Some(s) => (
            Some(test_log_predictive(&thetas, &s.validation)?),
            Some(test_log_predictive(&thetas, &s.test)?),
        ),
        None => (None, None),
    };
    result.outcome = CellOutcome::Finished {
        final_energy_distance: last.energy_distance,
        final_mksd2: last.mksd2,
        validation_log_predictive: validation,
        test_log_predictive: test,
    };
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub reference_file: Option<PathBuf>,
    pub summary_file: PathBuf,
}

impl ExperimentReport {
    /// Labels of samplers for which every cell failed.
    pub fn failed_samplers(&self) -> Vec<String> {
        let mut labels: Vec<String> = Vec::new();
        for c in &self.cells {
            if !labels.contains(&c.label) {
                labels.push(c.label.clone());
            }
        }
        labels
            .into_iter()
            .filter(|l| !self.cells.iter().any(|c| &c.label == l && c.is_finished()))
            .collect()
    }
}

/// Generate the reference sample, run every cell, and write traces plus
/// `summary.csv` to the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let target = build_experiment_target(spec)?;
    let sample = ground_truth_sample(spec, target.target.as_ref())?;
    let reference_file = match (&sample, spec.ground_truth.source) {
        (Some(_), GroundTruthSource::File) => spec.ground_truth.path.clone(),
        (Some(s), _) => {
            let path = spec.output_dir.join("reference.csv");
            write_reference_sample(&path, s)?;
            Some(path)
        }
        (None, _) => None,
    };
    let reference = sample.map(EnergyReference::new).transpose()?;
    let cells = spec.cells();
    let run = |&(i, rate, seed): &(usize, f64, u64)| run_cell(spec, i, rate, seed, &target, reference.as_ref());
    let results: Vec<CellResult> = if spec.concurrent {
        cells.par_iter().map(run).collect::<Result<_>>()?
    } else {
        cells.iter().map(run).collect::<Result<_>>()?
    };
    let summary_file = spec.output_dir.join("summary.csv");
    write_summary(&results, &summary_file)?;
    Ok(ExperimentReport {
        cells: results,
        reference_file,
        summary_file,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn write_summary(cells: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for c in cells {
        let (status, ed, mk, val, test, err) = match &c.outcome {
            CellOutcome::Finished {
                final_energy_distance,
                final_mksd2,
                validation_log_predictive,
                test_log_predictive,
            } => (
                "ok",
                fmt(*final_energy_distance),
                fmt(*final_mksd2),
                fmt(*validation_log_predictive),
                fmt(*test_log_predictive),
                String::new(),
            ),
            CellOutcome::Failed(msg) => (
                "failed",
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                msg.clone(),
            ),
        };
        let trace = c
            .trace_file
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        w.write_record([
            c.label.as_str(),
            c.algorithm.name(),
            &c.rate.to_string(),
            &c.seed.to_string(),
            status,
            &ed,
            &mk,
            &val,
            &test,
            &trace,
            &err,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The selected rate for one sampler and its seed-averaged scores.
#[derive(Clone, Debug, PartialEq)]
pub struct BestRate {
    pub label: String,
    pub rate: f64,
    pub mean_energy_distance: Option<f64>,
    pub mean_validation_log_predictive: Option<f64>,
    pub mean_test_log_predictive: Option<f64>,
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = xs.iter().copied().collect();
    let vals = vals?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Best rate per sampler: smallest seed-averaged final energy distance when
/// a reference exists, otherwise largest seed-averaged validation log
/// predictive. Rates with any failed seed are skipped.
pub fn best_rates(report: &ExperimentReport) -> Vec<BestRate> {
    let mut labels: Vec<&str> = Vec::new();
    for c in &report.cells {
        if !labels.contains(&c.label.as_str()) {
            labels.push(&c.label);
        }
    }
    let mut out = Vec::new();
    for label in labels {
        let mut rates: Vec<f64> = Vec::new();
        for c in report.cells.iter().filter(|c| c.label == label) {
            if !rates.contains(&c.rate) {
                rates.push(c.rate);
            }
        }
        let mut best: Option<(f64, BestRate)> = None;
        for rate in rates {
            let cells: Vec<&CellResult> = report
                .cells
                .iter()
                .filter(|c| c.label == label && c.rate == rate)
                .collect();
            let mut ed = Vec::new();
            let mut val = Vec::new();
            let mut test = Vec::new();
            let mut ok = true;
            for c in &cells {
                match &c.outcome {
                    CellOutcome::Finished {
                        final_energy_distance,
                        validation_log_predictive,
                        test_log_predictive,
                        ..
                    } => {
                        ed.push(*final_energy_distance);
                        val.push(*validation_log_predictive);
                        test.push(*test_log_predictive);
                    }
                    CellOutcome::Failed(_) => ok = false,
                }
            }
            if !ok {
                continue;
            }
            let candidate = BestRate {
                label: label.to_string(),
                rate,
                mean_energy_distance: mean(&ed),
                mean_validation_log_predictive: mean(&val),
                mean_test_log_predictive: mean(&test),
            };
            let score = match (candidate.mean_energy_distance, candidate.mean_validation_log_predictive) {
                (Some(e), _) => e,
                (None, Some(v)) => -v,
                (None, None) => continue,
            };
            if !score.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, candidate));
            }
        }
        if let Some((_, b)) = best {
            out.push(b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::parse_spec;
    use crate::metrics::read_trace;

    fn small_spec(dir: &Path, extra: &str) -> ExperimentSpec {
        let text = format!(
            "experiment = \"dirichlet20\"\ndimension = 3\nn = 6\niterations = 12\ntrace_every = 5\n\
             output_dir = \"out\"\n[ground_truth]\nsize = 50\n{extra}"
        );
        parse_spec(&text, dir).unwrap()
    }

    #[test]
    fn every_cell_writes_a_trace_with_the_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(dir.path(), "");
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.cells.len(), 9);
        for c in &report.cells {
            assert!(c.is_finished(), "{c:?}");
            let trace = read_trace(c.trace_file.as_ref().unwrap()).unwrap();
            // ⌈12 / 5⌉ + 1 rows: 0, 5, 10, 12.
            assert_eq!(trace.len(), 4);
            assert!(trace
                .rows()
                .iter()
                .all(|r| r.energy_distance.is_some() && r.mksd2.is_some()));
        }
        let summary = std::fs::read_to_string(&report.summary_file).unwrap();
        assert!(summary.starts_with(&SUMMARY_HEADER.join(",")));
        assert_eq!(summary.lines().count(), 10);
        assert_eq!(best_rates(&report).len(), 3);
    }

    #[test]
    fn reruns_and_concurrent_runs_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&small_spec(a.path(), "")).unwrap();
        let rb = run_experiment(&small_spec(b.path(), "")).unwrap();
        let mut spec = small_spec(b.path(), "");
        spec.concurrent = true;
        spec.output_dir = b.path().join("par");
        let rp = run_experiment(&spec).unwrap();
        for ((x, y), z) in ra.cells.iter().zip(&rb.cells).zip(&rp.cells) {
            let bx = std::fs::read(x.trace_file.as_ref().unwrap()).unwrap();
            let by = std::fs::read(y.trace_file.as_ref().unwrap()).unwrap();
            let bz = std::fs::read(z.trace_file.as_ref().unwrap()).unwrap();
            assert_eq!(bx, by);
            assert_eq!(bx, bz);
        }
        assert_eq!(
            std::fs::read(ra.reference_file.unwrap()).unwrap(),
            std::fs::read(rb.reference_file.unwrap()).unwrap()
        );
    }

    #[test]
    fn dirichlet_ground_truth_matches_posterior_mean() {
        let dir = tempfile::tempdir().unwrap();
        let spec = parse_spec("experiment = \"dirichlet20\"\ndimension = 5", dir.path()).unwrap();
        let path = generate_ground_truth(&spec).unwrap().unwrap();
        let sample = read_reference_sample(&path, 5).unwrap();
        assert_eq!(sample.len(), 1000);
        // Posterior Dirichlet(α + n) with α = 0.1 and counts (90, 5, 5, 0, 0, 0).
        let conc = [90.1, 5.1, 5.1, 0.1, 0.1, 0.1];
        let a0: f64 = conc.iter().sum();
        for j in 0..5 {
            let m = conc[j] / a0;
            let var = m * (1.0 - m) / (a0 + 1.0);
            let se = (var / 1000.0).sqrt();
            let emp = sample.iter().map(|x| x[j]).sum::<f64>() / 1000.0;
            assert!((emp - m).abs() <= 4.0 * se, "coordinate {j}: {emp} vs {m}");
        }
        let again = dir.path().join("again");
        let mut spec2 = spec.clone();
        spec2.output_dir = again;
        let path2 = generate_ground_truth(&spec2).unwrap().unwrap();
        assert_eq!(std::fs::read(path).unwrap(), std::fs::read(path2).unwrap());
    }

    #[test]
    fn diverging_cells_are_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let text = "experiment = \"logistic\"\nn = 3\niterations = 30\noutput_dir = \"out\"\n\
                    [target]\nn_train = 200\nn_validation = 50\nn_test = 50\n\
                    [[samplers]]\nalgorithm = \"svgd\"\nrates = [1e300, 0.001]\nbatch_size = 50\n";
        let spec = parse_spec(text, dir.path()).unwrap();
        let report = run_experiment(&spec).map_err(|e| e.to_string()).unwrap();
        assert!(matches!(report.cells[0].outcome, CellOutcome::Failed(_)));
        assert!(report.cells[1].is_finished());
        let best = best_rates(&report);
        assert_eq!(best[0].rate, 0.001);
        assert!(best[0].mean_test_log_predictive.unwrap() < 0.0);
        assert!(report.failed_samplers().is_empty());
    }
}
