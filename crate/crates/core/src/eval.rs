//! Frame- and window-level metrics, leave-one-supertrial-out folds and
//! ribbon export. The error class is the positive class throughout.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::dataio::FormatError;
use crate::error::{at_path, Error, Result};
use crate::model::CogModel;
use crate::objective::majority_label;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels(pred: &[u8], truth: &[u8]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Usage(format!(
                "{} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> Metrics {
        let (tp, fp, tn, fn_) = (
            self.tp as f64,
            self.fp as f64,
            self.tn as f64,
            self.fn_ as f64,
        );
        let f1_den = 2.0 * tp + fp + fn_;
        let j_den = tp + fp + fn_;
        let n = self.total();
        Metrics {
            f1: if f1_den > 0.0 { 2.0 * tp / f1_den } else { 0.0 },
            accuracy: if n > 0 { (tp + tn) / n as f64 } else { 0.0 },
            jaccard: if j_den > 0.0 { tp / j_den } else { 0.0 },
            counts: *self,
            no_positives: j_den == 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub f1: f64,
    pub accuracy: f64,
    pub jaccard: f64,
    pub counts: ConfusionCounts,
    /// Neither predictions nor labels contain an error, so F1 and Jaccard
    /// are reported as 0 by convention.
    pub no_positives: bool,
}

pub fn frame_metrics(pred: &[u8], truth: &[u8]) -> Result<Metrics> {
    if truth.is_empty() && pred.is_empty() {
        return Err(Error::Usage("cannot score an empty sequence".into()));
    }
    Ok(ConfusionCounts::from_labels(pred, truth)?.metrics())
}

/// Sliding-window protocol expressed in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub fps: f64,
    pub window_s: f64,
    pub stride_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            fps: 5.0,
            window_s: 2.0,
            stride_s: 1.2,
        }
    }
}

impl WindowSpec {
    /// `(window, stride)` in frames.
    pub fn frames(&self) -> Result<(usize, usize)> {
        let whole = |secs: f64, what: &str| {
            let f = self.fps * secs;
            let r = f.round();
            if (f - r).abs() > 1e-9 || r < 1.0 {
                return Err(Error::Usage(format!(
                    "{what} of {secs} s at {} fps is not a whole number of frames",
                    self.fps
                )));
            }
            Ok(r as usize)
        };
        Ok((
            whole(self.window_s, "window")?,
            whole(self.stride_s, "stride")?,
        ))
    }
}

/// Full windows only; window `w` covers `[w·stride, w·stride + window)`.
pub fn windowize(t: usize, spec: &WindowSpec) -> Result<Vec<Range<usize>>> {
    let (w, s) = spec.frames()?;
    if t < w {
        return Ok(Vec::new());
    }
    Ok((0..=(t - w) / s).map(|i| i * s..i * s + w).collect())
}

pub fn window_labels(seq: &[u8], spec: &WindowSpec) -> Result<Vec<u8>> {
    Ok(windowize(seq.len(), spec)?
        .into_iter()
        .map(|r| majority_label(&seq[r]))
        .collect())
}

/// Window confusion counts; `None` when no full window fits.
pub fn window_counts(
    pred: &[u8],
    truth: &[u8],
    spec: &WindowSpec,
) -> Result<Option<ConfusionCounts>> {
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let p = window_labels(pred, spec)?;
    if p.is_empty() {
        return Ok(None);
    }
    let t = window_labels(truth, spec)?;
    Ok(Some(ConfusionCounts::from_labels(&p, &t)?))
}

pub fn window_metrics(pred: &[u8], truth: &[u8], spec: &WindowSpec) -> Result<Option<Metrics>> {
    Ok(window_counts(pred, truth, spec)?.map(|c| c.metrics()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    /// Held-out trial number (1-based).
    pub trial: u32,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Fold `i` holds out trial `i` of every surgeon. Input is `(surgeon, trial, id)`.
pub fn loso_folds(videos: &[(u32, u32, String)]) -> Result<Vec<Fold>> {
    let mut seen = std::collections::HashSet::new();
    for (s, t, id) in videos {
        if !(1..=5).contains(t) {
            return Err(Error::Usage(format!(
                "video `{id}` has trial {t}, expected 1..=5"
            )));
        }
        if !seen.insert((*s, *t)) {
            return Err(Error::Usage(format!(
                "surgeon {s} has trial {t} more than once"
            )));
        }
    }
    (1..=5)
        .map(|trial| {
            let (test, train): (Vec<_>, Vec<_>) = videos.iter().partition(|v| v.1 == trial);
            if test.is_empty() {
                return Err(Error::Usage(format!("no video has trial {trial}")));
            }
            let ids = |v: Vec<&(u32, u32, String)>| v.into_iter().map(|x| x.2.clone()).collect();
            Ok(Fold {
                trial,
                train: ids(train),
                test: ids(test),
            })
        })
        .collect()
}

pub const RIBBON_HEADER: &str = "frame,truth,pred";

pub fn ribbon_csv(pred: &[u8], truth: &[u8]) -> Result<String> {
    if pred.len() != truth.len() {
        return Err(Error::Usage("ribbon sequences differ in length".into()));
    }
    let mut out = String::from(RIBBON_HEADER);
    out.push('\n');
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        writeln!(out, "{i},{t},{p}").expect("writing to a string");
    }
    Ok(out)
}

/// Parses ribbon CSV back into `(pred, truth)`.
pub fn parse_ribbon(text: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut lines = text.lines();
    if lines.next() != Some(RIBBON_HEADER) {
        return Err(FormatError::Csv {
            line: 1,
            detail: "missing ribbon header".into(),
        }
        .into());
    }
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (i, row) in lines.enumerate() {
        let line = i + 2;
        let bad = |detail: String| Error::from(FormatError::Csv { line, detail });
        let cells: Vec<&str> = row.split(',').collect();
        let [frame, t, p] = cells[..] else {
            return Err(bad(format!("expected 3 columns, found {}", cells.len())));
        };
        if frame.parse::<usize>().ok() != Some(i) {
            return Err(bad(format!("frame index `{frame}` out of order")));
        }
        let bit = |s: &str| match s {
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(bad(format!("`{s}` is not 0 or 1"))),
        };
        truth.push(bit(t)?);
        pred.push(bit(p)?);
    }
    Ok((pred, truth))
}

pub fn ribbon_export(pred: &[u8], truth: &[u8], path: &Path) -> Result<()> {
    fs::write(path, ribbon_csv(pred, truth)?).map_err(at_path(path))?;
    Ok(())
}

/// Thresholded frame decisions from error probabilities.
pub fn decisions<R: Real>(p: &[R], threshold: f64) -> Vec<u8> {
    p.iter()
        .map(|v| u8::from(v.as_f64() >= threshold))
        .collect()
}

/// Pooled frame and window counts over a set of labelled sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PooledCounts {
    pub frame: ConfusionCounts,
    pub window: ConfusionCounts,
}

impl PooledCounts {
    pub fn add(&mut self, pred: &[u8], truth: &[u8], spec: &WindowSpec) -> Result<()> {
        self.frame
            .merge(&ConfusionCounts::from_labels(pred, truth)?);
        if let Some(w) = window_counts(pred, truth, spec)? {
            self.window.merge(&w);
        }
        Ok(())
    }
}

/// Runs the model over each `(frames, labels)` pair and pools the counts.
pub fn evaluate<R: Real>(
    model: &CogModel<R>,
    videos: &[(&crate::tensor::Tensor<R>, &[u8])],
    threshold: f64,
    spec: &WindowSpec,
) -> Result<PooledCounts> {
    let mut pooled = PooledCounts::default();
    for (frames, labels) in videos {
        let p = model.error_probabilities(frames)?;
        pooled.add(&decisions(&p, threshold), labels, spec)?;
    }
    Ok(pooled)
}

/// Metrics of one evaluated split (a fold, or the whole set).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub frame: Metrics,
    pub window: Option<Metrics>,
}

impl EvalRow {
    pub fn from_counts(name: impl Into<String>, c: &PooledCounts) -> Self {
        Self {
            name: name.into(),
            frame: c.frame.metrics(),
            window: (c.window.total() > 0).then(|| c.window.metrics()),
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

type Getter = fn(&EvalRow) -> Option<f64>;

const COLUMNS: [(&str, Getter); 6] = [
    ("frame_f1", |r| Some(r.frame.f1)),
    ("frame_acc", |r| Some(r.frame.accuracy)),
    ("frame_jaccard", |r| Some(r.frame.jaccard)),
    ("window_f1", |r| r.window.map(|m| m.f1)),
    ("window_acc", |r| r.window.map(|m| m.accuracy)),
    ("window_jaccard", |r| r.window.map(|m| m.jaccard)),
];

impl EvalReport {
    /// `(mean, std)` per column over the rows where it is defined.
    pub fn summary(&self) -> Vec<Option<(f64, f64)>> {
        COLUMNS
            .iter()
            .map(|(_, get)| {
                let xs: Vec<f64> = self.rows.iter().filter_map(get).collect();
                mean_std(&xs)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split");
        for (name, _) in COLUMNS {
            write!(out, ",{name}").expect("writing to a string");
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            out.push_str(&r.name);
            for (_, get) in COLUMNS {
                write!(out, ",{}", cell(get(r))).expect("writing to a string");
            }
            out.push('\n');
        }
        if self.rows.len() > 1 {
            let summary = self.summary();
            for (label, pick) in [("mean", 0), ("std", 1)] {
                out.push_str(label);
                for s in &summary {
                    let v = s.map(|(m, sd)| if pick == 0 { m } else { sd });
                    write!(out, ",{}", cell(v)).expect("writing to a string");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Percentages, with `mean ± std` when there is more than one row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>15} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
            "split",
            "frame F1",
            "frame Acc",
            "frame Jacc",
            "window F1",
            "window Acc",
            "window Jacc"
        );
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        for r in &self.rows {
            write!(out, "{:<10}", r.name).expect("writing to a string");
            for (_, get) in COLUMNS {
                write!(out, " {:>15}", pct(get(r))).expect("writing to a string");
            }
            out.push('\n');
        }
        if self.rows.len() > 1 {
            write!(out, "{:<10}", "mean±std").expect("writing to a string");
            for s in self.summary() {
                let cell = s.map_or("-".to_string(), |(m, sd)| {
                    format!("{:.1}±{:.1}", 100.0 * m, 100.0 * sd)
                });
                write!(out, " {cell:>15}").expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }
}

/// Applies `f` to every item on at most `threads` scoped worker threads,
/// keeping the output order.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let u = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(u);
            });
        }
    });
    slots
        .into_iter()
        .map(|u| u.expect("every item visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let y = [0, 1, 1, 0, 1];
        let m = frame_metrics(&y, &y).unwrap();
        assert_eq!((m.f1, m.accuracy, m.jaccard), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_positive_at_65_percent() {
        let truth: Vec<u8> = (0..100).map(|i| u8::from(i < 65)).collect();
        let m = frame_metrics(&[1; 100], &truth).unwrap();
        assert!((m.accuracy - 0.65).abs() < 1e-15);
        assert!((m.f1 - 2.0 * 0.65 / 1.65).abs() < 1e-15);
        assert!((m.f1 - 0.7879).abs() < 1e-4);
        assert!((m.jaccard - 0.65).abs() < 1e-15);
    }

    #[test]
    fn empty_positive_convention() {
        let m = frame_metrics(&[0; 8], &[0; 8]).unwrap();
        assert_eq!((m.f1, m.accuracy, m.jaccard), (0.0, 1.0, 0.0));
        assert!(m.no_positives);
    }

    #[test]
    fn length_mismatch() {
        assert!(frame_metrics(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn window_examples() {
        let s = WindowSpec::default();
        assert_eq!(s.frames().unwrap(), (10, 6));
        assert_eq!(windowize(10, &s).unwrap().len(), 1);
        assert_eq!(windowize(16, &s).unwrap(), vec![0..10, 6..16]);
        assert!(windowize(9, &s).unwrap().is_empty());
        let truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        assert_eq!(window_labels(&truth, &s).unwrap(), vec![1]);
        assert_eq!(window_metrics(&[0; 9], &[0; 9], &s).unwrap(), None);
        let odd = WindowSpec {
            fps: 5.0,
            window_s: 2.1,
            stride_s: 1.2,
        };
        assert!(windowize(20, &odd).is_err());
    }

    #[test]
    fn fold_examples() {
        let mut v = Vec::new();
        for s in 1..=8 {
            for t in 1..=5 {
                v.push((s, t, format!("s{s}t{t}")));
            }
        }
        let folds = loso_folds(&v).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!((f.test.len(), f.train.len()), (8, 32));
        }
        let one: Vec<_> = (1..=5).map(|t| (1, t, format!("t{t}"))).collect();
        assert!(loso_folds(&one)
            .unwrap()
            .iter()
            .all(|f| f.test.len() == 1 && f.train.len() == 4));
        let mut dup = one.clone();
        dup.push((1, 3, "again".into()));
        assert!(loso_folds(&dup).is_err());
        assert!(loso_folds(&one[..4]).is_err());
        assert!(loso_folds(&[(1, 6, "x".into())]).is_err());
    }

    #[test]
    fn ribbon_examples() {
        let csv = ribbon_csv(&[1, 0, 1], &[1, 1, 0]).unwrap();
        assert_eq!(csv, "frame,truth,pred\n0,1,1\n1,1,0\n2,0,1\n");
        assert_eq!(ribbon_csv(&[], &[]).unwrap(), "frame,truth,pred\n");
        assert_eq!(parse_ribbon(&csv).unwrap(), (vec![1, 0, 1], vec![1, 1, 0]));
        assert!(parse_ribbon("frame,truth,pred\n0,1\n").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        ribbon_export(&[0, 1], &[1, 1], &path).unwrap();
        assert_eq!(
            parse_ribbon(&fs::read_to_string(path).unwrap()).unwrap(),
            (vec![0, 1], vec![1, 1])
        );
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), Some((7.0, 0.0)));
    }

    #[test]
    fn report_formats() {
        let c = |tp, fp, tn, fn_| ConfusionCounts { tp, fp, tn, fn_ };
        let report = EvalReport {
            rows: vec![
                EvalRow {
                    name: "fold1".into(),
                    frame: c(5, 1, 3, 1).metrics(),
                    window: Some(c(1, 0, 1, 0).metrics()),
                },
                EvalRow {
                    name: "fold2".into(),
                    frame: c(2, 2, 2, 2).metrics(),
                    window: None,
                },
            ],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "split,frame_f1,frame_acc,frame_jaccard,window_f1,window_acc,window_jaccard"
        );
        assert!(lines[2].ends_with(",,,"));
        assert!(lines[3].starts_with("mean,"));
        assert!(lines[4].starts_with("std,"));
        assert!(report.to_table().contains('±'));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u64> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            assert_eq!(
                parallel_map(&xs, threads, |x| x * x),
                xs.iter().map(|x| x * x).collect::<Vec<_>>()
            );
        }
        assert!(parallel_map(&[] as &[u8], 4, |x| *x).is_empty());
    }

    fn brute(pred: &[u8], truth: &[u8]) -> (u64, u64, u64, u64) {
        let mut c = (0, 0, 0, 0);
        for i in 0..pred.len() {
            if pred[i] == 1 && truth[i] == 1 {
                c.0 += 1
            }
            if pred[i] == 1 && truth[i] == 0 {
                c.1 += 1
            }
            if pred[i] == 0 && truth[i] == 0 {
                c.2 += 1
            }
            if pred[i] == 0 && truth[i] == 1 {
                c.3 += 1
            }
        }
        c
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..60)) {
            let (p, t): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let m = frame_metrics(&p, &t).unwrap();
            let (tp, fp, tn, fn_) = brute(&p, &t);
            prop_assert_eq!(m.counts, ConfusionCounts { tp, fp, tn, fn_ });
            let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
            let f1 = if 2.0 * tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
            prop_assert_eq!(m.f1, f1);
            prop_assert_eq!(m.accuracy, (tp + tn) / p.len() as f64);
        }

        #[test]
        fn swap_preserves_accuracy(pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..60)) {
            let (p, t): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let a = frame_metrics(&p, &t).unwrap();
            let b = frame_metrics(&t, &p).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!((a.counts.fp, a.counts.fn_), (b.counts.fn_, b.counts.fp));
        }

        #[test]
        fn folds_partition(surgeons in 1u32..6, skip in proptest::collection::vec(0u32..30, 0..5)) {
            let videos: Vec<_> = (1..=surgeons)
                .flat_map(|s| (1..=5).map(move |t| (s, t, format!("{s}-{t}"))))
                .filter(|(s, t, _)| *s == 1 || !skip.contains(&(s * 5 + t)))
                .collect();
            let folds = loso_folds(&videos).unwrap();
            let mut all: Vec<String> = folds.iter().flat_map(|f| f.test.clone()).collect();
            all.sort();
            let mut expected: Vec<String> = videos.iter().map(|v| v.2.clone()).collect();
            expected.sort();
            prop_assert_eq!(all, expected);
            for f in &folds {
                prop_assert!(f.train.iter().all(|id| !f.test.contains(id)));
                prop_assert_eq!(f.train.len() + f.test.len(), videos.len());
            }
        }
    }
}
