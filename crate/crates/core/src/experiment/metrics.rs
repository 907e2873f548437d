use std::io::Write;

use serde::Serialize;

use crate::master::UpdateRecord;
use crate::worker::Prediction;

use super::ExperimentError;

/// Cumulative counters after `samples` predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Samples per task seen so far (`samples / K`, rounded down).
    pub epoch: u64,
    pub samples: u64,
    pub mistakes: Vec<u64>,
    pub seen: Vec<u64>,
    /// Mean over tasks seen at least once of `mistakes / seen`.
    pub macro_error: f64,
}

impl MetricsRecord {
    pub fn task_error(&self, task: usize) -> Option<f64> {
        (self.seen[task] > 0).then(|| self.mistakes[task] as f64 / self.seen[task] as f64)
    }

    pub fn total_mistakes(&self) -> u64 {
        self.mistakes.iter().sum()
    }
}

pub fn macro_average(mistakes: &[u64], seen: &[u64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (m, s) in mistakes.iter().zip(seen) {
        if *s > 0 {
            sum += *m as f64 / *s as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Replays predictions in stream order and emits a record every `interval`
/// samples per task, plus one for the final state.
pub fn cumulative_error(predictions: &[Prediction], k: usize, interval: usize) -> Vec<MetricsRecord> {
    let mut sorted: Vec<&Prediction> = predictions.iter().collect();
    sorted.sort_by_key(|p| p.seq);
    let step = (k.max(1) * interval.max(1)) as u64;
    let mut mistakes = vec![0u64; k];
    let mut seen = vec![0u64; k];
    let mut out = Vec::new();
    let snapshot = |n: u64, mistakes: &[u64], seen: &[u64]| MetricsRecord {
        epoch: n / k.max(1) as u64,
        samples: n,
        mistakes: mistakes.to_vec(),
        seen: seen.to_vec(),
        macro_error: macro_average(mistakes, seen),
    };
    for (i, p) in sorted.iter().enumerate() {
        seen[p.task] += 1;
        mistakes[p.task] += u64::from(p.mistake);
        let n = i as u64 + 1;
        if n % step == 0 {
            out.push(snapshot(n, &mistakes, &seen));
        }
    }
    let n = sorted.len() as u64;
    if n > 0 && n % step != 0 {
        out.push(snapshot(n, &mistakes, &seen));
    }
    out
}

/// Support of one transmitted gradient, in the order the master applied them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SparsityRow {
    pub round: u64,
    pub worker: usize,
    pub blocks: Vec<usize>,
}

impl SparsityRow {
    /// `#` for a nonzero block, `.` otherwise.
    pub fn bitmap(&self, k: usize) -> String {
        let mut s = vec![b'.'; k];
        for &b in &self.blocks {
            if b < k {
                s[b] = b'#';
            }
        }
        String::from_utf8(s).expect("ascii")
    }
}

pub fn sparsity_trace(updates: &[UpdateRecord], first: usize) -> Vec<SparsityRow> {
    updates
        .iter()
        .take(first)
        .map(|u| SparsityRow {
            round: u.round,
            worker: u.worker,
            blocks: u.blocks.clone(),
        })
        .collect()
}

/// Mean fraction of nonzero blocks over all applied gradients.
pub fn mean_sparsity(updates: &[UpdateRecord], k: usize) -> Option<f64> {
    if updates.is_empty() || k == 0 {
        return None;
    }
    let total: usize = updates.iter().map(|u| u.nonzero_blocks).sum();
    Some(total as f64 / (updates.len() * k) as f64)
}

pub fn write_curve_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "samples", "mistakes", "macro_error"])?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.samples.to_string(),
            r.total_mistakes().to_string(),
            r.macro_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_per_task_csv<W: Write>(out: W, last: &MetricsRecord) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "seen", "mistakes", "error"])?;
    // Tasks are numbered from 1 in reports.
    for t in 0..last.seen.len() {
        w.write_record([
            (t + 1).to_string(),
            last.seen[t].to_string(),
            last.mistakes[t].to_string(),
            last.task_error(t).map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sparsity_csv<W: Write>(out: W, rows: &[SparsityRow], k: usize) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "worker", "nonzero", "bitmap"])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.worker.to_string(),
            r.blocks.len().to_string(),
            r.bitmap(k),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(pattern: impl Iterator<Item = (usize, bool)>) -> Vec<Prediction> {
        pattern
            .enumerate()
            .map(|(i, (task, mistake))| Prediction {
                seq: i as u64,
                task,
                mistake,
                model_version: 0,
            })
            .collect()
    }

    #[test]
    fn three_in_ten() {
        let p = preds((0..10).map(|i| (0, i < 3)));
        let r = cumulative_error(&p, 1, 100);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].macro_error, 0.3);
    }

    #[test]
    fn all_correct_is_zero_throughout() {
        let p = preds((0..400).map(|i| (i % 4, false)));
        let r = cumulative_error(&p, 4, 10);
        assert_eq!(r.len(), 10);
        assert!(r.iter().all(|x| x.macro_error == 0.0));
        assert_eq!(r.last().unwrap().epoch, 100);
    }

    #[test]
    fn alternating_tends_to_half() {
        let p = preds((0..10_001).map(|i| (0, i % 2 == 1)));
        let r = cumulative_error(&p, 1, 1000);
        assert!((r.last().unwrap().macro_error - 0.5).abs() < 1e-3);
    }

    #[test]
    fn order_comes_from_seq() {
        let mut p = preds((0..20).map(|i| (i % 2, i < 10)));
        p.reverse();
        let r = cumulative_error(&p, 2, 5);
        assert_eq!(r[0].samples, 10);
        assert_eq!(r[0].macro_error, 1.0);
    }

    #[test]
    fn macro_ignores_unseen_tasks() {
        assert_eq!(macro_average(&[1, 0, 0], &[2, 0, 4]), 0.25);
        assert_eq!(macro_average(&[0, 0], &[0, 0]), 0.0);
    }

    #[test]
    fn bitmap_and_csv() {
        let row = SparsityRow {
            round: 1,
            worker: 2,
            blocks: vec![0, 3],
        };
        assert_eq!(row.bitmap(5), "#..#.");
        let mut buf = Vec::new();
        write_sparsity_csv(&mut buf, &[row], 5).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,worker,nonzero,bitmap\n1,2,2,#..#.\n"
        );
    }
}
