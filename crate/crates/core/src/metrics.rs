//! Sample-quality metrics and run traces.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::targets::{log_sigmoid, LogisticData};

fn mean_cross_distance(x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
    let rows: Vec<f64> = x
        .par_iter()
        .map(|a| y.iter().map(|b| (a - b).norm()).sum::<f64>())
        .collect();
    rows.iter().sum::<f64>() / (x.len() * y.len()) as f64
}

fn check_samples(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs non-empty samples".into()));
    }
    let d = x[0].len();
    for p in x.iter().chain(y) {
        check_dim(d, p.len())?;
    }
    Ok(())
}

/// V-statistic energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖`.
pub fn energy_distance(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<f64> {
    check_samples(x, y)?;
    Ok(2.0 * mean_cross_distance(x, y) - mean_cross_distance(x, x) - mean_cross_distance(y, y))
}

/// A fixed reference sample with its within-sample term cached.
#[derive(Clone, Debug)]
pub struct EnergyReference {
    sample: Vec<DVector<f64>>,
    self_term: f64,
}

impl EnergyReference {
    pub fn new(sample: Vec<DVector<f64>>) -> Result<Self> {
        check_samples(&sample, &sample)?;
        let self_term = mean_cross_distance(&sample, &sample);
        Ok(Self { sample, self_term })
    }

    pub fn sample(&self) -> &[DVector<f64>] {
        &self.sample
    }

    pub fn distance(&self, x: &[DVector<f64>]) -> Result<f64> {
        check_samples(x, &self.sample)?;
        Ok(2.0 * mean_cross_distance(x, &self.sample) - mean_cross_distance(x, x) - self.self_term)
    }
}

/// Mean over test points of `log((1/n) Σ_i p(y | x, w_i))`.
pub fn test_log_predictive(particles: &[DVector<f64>], data: &LogisticData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if particles.is_empty() {
        return Err(Error::InvalidArgument("no particles".into()));
    }
    for w in particles {
        check_dim(data.x.ncols(), w.len())?;
    }
    let n = particles.len() as f64;
    let w = DMatrix::from_columns(particles);
    let logits = &data.x * w;
    let mut total = 0.0;
    for i in 0..data.len() {
        let sign = if data.y[i] == 1.0 { 1.0 } else { -1.0 };
        let logs: Vec<f64> = logits.row(i).iter().map(|z| log_sigmoid(sign * z)).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + (logs.iter().map(|l| (l - m).exp()).sum::<f64>() / n).ln();
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub seconds: Option<f64>,
    pub energy_distance: Option<f64>,
    pub mksd2: Option<f64>,
    pub step_scale: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: [&str; 5] = ["iter", "seconds", "energy_distance", "mksd2", "step_scale"];

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.iter <= last.iter {
                return Err(Error::InvalidArgument(format!(
                    "trace iterations must increase ({} after {})",
                    row.iter, last.iter
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn parse_opt(s: &str, row: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::InvalidArgument(format!("trace row {row}: bad number `{s}`")))
}

pub fn write_trace(trace: &RunTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in trace.rows() {
        w.write_record([
            r.iter.to_string(),
            fmt_opt(r.seconds),
            fmt_opt(r.energy_distance),
            fmt_opt(r.mksd2),
            fmt_opt(r.step_scale),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<RunTrace> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "unexpected trace header in {}",
            path.display()
        )));
    }
    let mut trace = RunTrace::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let iter = rec[0]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("trace row {i}: bad iteration")))?;
        trace.push(TraceRow {
            iter,
            seconds: parse_opt(&rec[1], i)?,
            energy_distance: parse_opt(&rec[2], i)?,
            mksd2: parse_opt(&rec[3], i)?,
            step_scale: parse_opt(&rec[4], i)?,
        })?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pts(rows: &[&[f64]]) -> Vec<DVector<f64>> {
        rows.iter().map(|r| DVector::from_column_slice(r)).collect()
    }

    #[test]
    fn energy_distance_examples() {
        let x = pts(&[&[0.0, 1.0], &[2.0, 0.5], &[-1.0, 3.0]]);
        assert!(energy_distance(&x, &x).unwrap().abs() < 1e-12);
        assert_eq!(energy_distance(&pts(&[&[0.0]]), &pts(&[&[1.0]])).unwrap(), 2.0);
        let shuffled = pts(&[&[2.0, 0.5], &[-1.0, 3.0], &[0.0, 1.0]]);
        let y = pts(&[&[0.3, 0.3], &[1.0, -1.0]]);
        assert_relative_eq!(
            energy_distance(&x, &y).unwrap(),
            energy_distance(&shuffled, &y).unwrap(),
            epsilon = 1e-14
        );
        assert!(energy_distance(&x, &pts(&[&[1.0]])).is_err());
        let reference = EnergyReference::new(y.clone()).unwrap();
        assert_relative_eq!(
            reference.distance(&x).unwrap(),
            energy_distance(&x, &y).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn energy_distance_separates_small_multisets() {
        // Brute force over multisets of {0, 1, 2} with up to three elements.
        let mut sets = Vec::new();
        for a in 0..3 {
            sets.push(vec![a]);
            for b in a..3 {
                sets.push(vec![a, b]);
                for c in b..3 {
                    sets.push(vec![a, b, c]);
                }
            }
        }
        let to_pts = |s: &[i32]| {
            s.iter()
                .map(|&v| DVector::from_element(1, v as f64))
                .collect::<Vec<_>>()
        };
        let hist = |s: &[i32]| {
            let mut h = [0.0; 3];
            for &v in s {
                h[v as usize] += 1.0 / s.len() as f64;
            }
            h
        };
        for a in &sets {
            for b in &sets {
                let e = energy_distance(&to_pts(a), &to_pts(b)).unwrap();
                assert!(e >= -1e-12);
                let same = hist(a).iter().zip(hist(b)).all(|(x, y)| (x - y).abs() < 1e-12);
                assert_eq!(same, e.abs() < 1e-12, "{a:?} vs {b:?}: {e}");
            }
        }
    }

    #[test]
    fn log_predictive_examples() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.5, -0.3, 1.0, 2.0, -1.0, 0.0, 0.7, 1.5, 1.5]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let data = LogisticData { x, y };
        let zero = [DVector::zeros(2)];
        assert_relative_eq!(test_log_predictive(&zero, &data).unwrap(), 0.5f64.ln(), epsilon = 1e-15);

        let ws = pts(&[&[0.4, -0.2], &[-1.0, 0.8], &[0.1, 0.1]]);
        let dup = pts(&[
            &[0.4, -0.2],
            &[-1.0, 0.8],
            &[0.1, 0.1],
            &[0.4, -0.2],
            &[-1.0, 0.8],
            &[0.1, 0.1],
        ]);
        let a = test_log_predictive(&ws, &data).unwrap();
        assert_relative_eq!(a, test_log_predictive(&dup, &data).unwrap(), epsilon = 1e-14);

        let mut brute = 0.0;
        for i in 0..5 {
            let mut p = 0.0;
            for w in &ws {
                let z = data.x.row(i).transpose().dot(w);
                let s = 1.0 / (1.0 + (-z).exp());
                p += if data.y[i] == 1.0 { s } else { 1.0 - s };
            }
            brute += (p / 3.0).ln();
        }
        assert_relative_eq!(a, brute / 5.0, epsilon = 1e-12);

        let empty = LogisticData {
            x: DMatrix::zeros(0, 2),
            y: DVector::zeros(0),
        };
        assert!(test_log_predictive(&ws, &empty).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&RunTrace::new(), &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "iter,seconds,energy_distance,mksd2,step_scale\n"
        );

        let mut t = RunTrace::new();
        t.push(TraceRow {
            iter: 0,
            seconds: None,
            energy_distance: Some(0.1 + 0.2),
            mksd2: Some(1.0 / 3.0),
            step_scale: Some(1e-300),
        })
        .unwrap();
        t.push(TraceRow {
            iter: 10,
            seconds: Some(0.25),
            energy_distance: Some(std::f64::consts::PI),
            mksd2: None,
            step_scale: Some(-2.5e7),
        })
        .unwrap();
        assert!(t
            .clone()
            .push(TraceRow {
                iter: 10,
                ..Default::default()
            })
            .is_err());
        write_trace(&t, &path).unwrap();
        assert_eq!(read_trace(&path).unwrap(), t);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("0,,"));
    }

    proptest! {
        #[test]
        fn energy_distance_symmetric_and_translation_invariant(
            xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..6),
            ys in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..6),
            shift in prop::collection::vec(-100.0f64..100.0, 2),
        ) {
            let x: Vec<_> = xs.into_iter().map(DVector::from_vec).collect();
            let y: Vec<_> = ys.into_iter().map(DVector::from_vec).collect();
            let s = DVector::from_vec(shift);
            let e = energy_distance(&x, &y).unwrap();
            prop_assert!(e >= -1e-12);
            prop_assert!((e - energy_distance(&y, &x).unwrap()).abs() < 1e-12);
            let xt: Vec<_> = x.iter().map(|p| p + &s).collect();
            let yt: Vec<_> = y.iter().map(|p| p + &s).collect();
            prop_assert!((e - energy_distance(&xt, &yt).unwrap()).abs() < 1e-10);
        }
    }
}
