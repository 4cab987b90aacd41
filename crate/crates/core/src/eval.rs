//! Pairwise judging, win rates with Wilson intervals, and metric reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::write_atomic;
use crate::error::{Error, IoContext, Result};
use crate::image::RasterImage;
use crate::metrics::{Metric, MetricSuite, MetricVector};
use crate::preference::{normalize_aggregate, normalized_table};
use crate::scalar::Scalar;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    A,
    B,
    Tie,
}

impl Verdict {
    pub fn swapped(self) -> Self {
        match self {
            Verdict::A => Verdict::B,
            Verdict::B => Verdict::A,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// Decides which of two outputs better matches the ground truth.
pub trait Judge<S: Scalar> {
    /// Called before each round; randomized judges reseed here.
    fn begin_round(&mut self, _round: usize) {}
    fn judge(&mut self, a: &RasterImage<S>, b: &RasterImage<S>, gt: &RasterImage<S>) -> Result<Verdict>;
}

/// Normalize-and-sum over the pair (`N = 2`) against the ground truth.
pub fn automatic_judge<S: Scalar>(a: &RasterImage<S>, b: &RasterImage<S>, gt: &RasterImage<S>, suite: &dyn MetricSuite<S>) -> Result<Verdict> {
    let agg = normalize_aggregate(&[suite.evaluate(a, gt)?, suite.evaluate(b, gt)?])?;
    Ok(match agg[0].partial_cmp(&agg[1]) {
        Some(std::cmp::Ordering::Greater) => Verdict::A,
        Some(std::cmp::Ordering::Less) => Verdict::B,
        _ => Verdict::Tie,
    })
}

pub struct AutomaticJudge<'a, S> {
    pub suite: &'a dyn MetricSuite<S>,
}

impl<S: Scalar> Judge<S> for AutomaticJudge<'_, S> {
    fn judge(&mut self, a: &RasterImage<S>, b: &RasterImage<S>, gt: &RasterImage<S>) -> Result<Verdict> {
        automatic_judge(a, b, gt, self.suite)
    }
}

/// Wraps a judge and resolves its ties with a fair coin seeded per round.
pub struct RandomTieBreak<J> {
    pub inner: J,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl<J> RandomTieBreak<J> {
    pub fn new(inner: J, seed: u64) -> Self {
        Self { inner, seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<S: Scalar, J: Judge<S>> Judge<S> for RandomTieBreak<J> {
    fn begin_round(&mut self, round: usize) {
        self.inner.begin_round(round);
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.rng.set_stream(round as u64);
    }

    fn judge(&mut self, a: &RasterImage<S>, b: &RasterImage<S>, gt: &RasterImage<S>) -> Result<Verdict> {
        Ok(match self.inner.judge(a, b, gt)? {
            Verdict::Tie if self.rng.random::<bool>() => Verdict::A,
            Verdict::Tie => Verdict::B,
            v => v,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrialCounts {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl TrialCounts {
    pub fn record(&mut self, v: Verdict) {
        match v {
            Verdict::A => self.wins += 1,
            Verdict::B => self.losses += 1,
            Verdict::Tie => self.ties += 1,
        }
    }

    pub fn trials(&self) -> usize {
        self.wins + self.losses + self.ties
    }

    /// Wins over decided trials, `None` when every trial tied.
    pub fn rate(&self) -> Option<f64> {
        let decided = self.wins + self.losses;
        (decided > 0).then(|| self.wins as f64 / decided as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateResult {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `wins / (wins + losses)`; ties are reported but excluded.
    pub rate: f64,
    /// Pooled Wilson 95% interval.
    pub ci95: (f64, f64),
    pub per_round: Vec<TrialCounts>,
}

/// Wilson score interval for `wins` successes out of `n`.
pub fn wilson_interval(wins: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 || wins > n {
        return Err(Error::InvalidArgument(format!("wilson interval needs 0 <= wins <= n, n > 0 (got {wins}/{n})")));
    }
    let (n, p) = (n as f64, wins as f64 / n as f64);
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(((centre - half).max(0.0), (centre + half).min(1.0)))
}

/// Pools per-round counts into one rate and interval.
pub fn win_rate_from_rounds(rounds: &[TrialCounts]) -> Result<WinRateResult> {
    let mut total = TrialCounts::default();
    for r in rounds {
        total.wins += r.wins;
        total.losses += r.losses;
        total.ties += r.ties;
    }
    let rate = total.rate().ok_or(Error::AllTies(total.trials()))?;
    let (lo, hi) = wilson_interval(total.wins, total.wins + total.losses, Z95)?;
    Ok(WinRateResult { wins: total.wins, losses: total.losses, ties: total.ties, rate, ci95: (lo.min(rate), hi.max(rate)), per_round: rounds.to_vec() })
}

/// Judges aligned output lists once per round (the judge is told the round
/// so randomized judges can reseed) and pools the rounds.
pub fn win_rate<S: Scalar>(
    outputs_a: &[RasterImage<S>],
    outputs_b: &[RasterImage<S>],
    gts: &[RasterImage<S>],
    judge: &mut dyn Judge<S>,
    rounds: usize,
) -> Result<WinRateResult> {
    if outputs_a.len() != outputs_b.len() || outputs_a.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("unaligned lists: {} / {} / {}", outputs_a.len(), outputs_b.len(), gts.len())));
    }
    if rounds == 0 || gts.is_empty() {
        return Err(Error::InvalidArgument("need at least one round and one trial".into()));
    }
    let mut per_round = Vec::with_capacity(rounds);
    for r in 0..rounds {
        judge.begin_round(r);
        let mut counts = TrialCounts::default();
        for ((a, b), gt) in outputs_a.iter().zip(outputs_b).zip(gts) {
            counts.record(judge.judge(a, b, gt)?);
        }
        per_round.push(counts);
    }
    win_rate_from_rounds(&per_round)
}

/// A de-randomized human pairwise choice: `a`/`b` name the true methods.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseChoice {
    pub trial_id: String,
    pub annotator_id: String,
    pub round: usize,
    pub choice: Verdict,
}

/// Win rate of method A from human choices, one round per distinct round number.
pub fn win_rate_from_choices(choices: &[PairwiseChoice]) -> Result<WinRateResult> {
    let mut rounds = BTreeMap::<usize, TrialCounts>::new();
    for c in choices {
        rounds.entry(c.round).or_default().record(c.choice);
    }
    if rounds.is_empty() {
        return Err(Error::InvalidArgument("no pairwise choices".into()));
    }
    win_rate_from_rounds(&rounds.into_values().collect::<Vec<_>>())
}

/// Mean raw metrics of one method over the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub metrics: MetricVector<f64>,
}

/// Element-wise mean of metric vectors.
pub fn mean_metrics<S: Scalar>(vectors: &[MetricVector<S>]) -> Result<MetricVector<f64>> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("no metric vectors to average".into()));
    }
    let mut values = [0.0; 8];
    for v in vectors {
        for (acc, x) in values.iter_mut().zip(v.values) {
            *acc += x.as_f64();
        }
    }
    values.iter_mut().for_each(|v| *v /= vectors.len() as f64);
    Ok(MetricVector { values })
}

/// Normalized, positive-trend values per method (radar-plot input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedReport {
    pub metrics: Vec<String>,
    pub methods: Vec<NormalizedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub method: String,
    pub values: Vec<f64>,
}

pub fn normalize_report(tables: &[MethodMetrics]) -> NormalizedReport {
    let vectors: Vec<_> = tables.iter().map(|t| t.metrics).collect();
    NormalizedReport {
        metrics: Metric::ALL.iter().map(|m| m.name().to_string()).collect(),
        methods: tables.iter().zip(normalized_table(&vectors)).map(|(t, row)| NormalizedRow { method: t.method.clone(), values: row.to_vec() }).collect(),
    }
}

pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "metrics_normalized.json";

/// Writes raw metrics as CSV and normalized values as JSON into `dir`.
pub fn export_report(tables: &[MethodMetrics], dir: &Path) -> Result<()> {
    if tables.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one method".into()));
    }
    let mut csv = String::from("method");
    for m in Metric::ALL {
        csv.push(',');
        csv.push_str(m.name());
    }
    csv.push('\n');
    for t in tables {
        if t.method.contains([',', '\n', '"']) {
            return Err(Error::InvalidArgument(format!("method name {:?} cannot be written to CSV", t.method)));
        }
        csv.push_str(&t.method);
        for v in t.metrics.values {
            csv.push(',');
            csv.push_str(&format!("{v:?}"));
        }
        csv.push('\n');
    }
    write_atomic(&dir.join(REPORT_CSV), csv.as_bytes())?;
    write_atomic(&dir.join(REPORT_JSON), &serde_json::to_vec_pretty(&normalize_report(tables))?)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MethodMetrics>> {
    let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
    let malformed = |line: usize, reason: String| Error::Malformed { path: path.to_path_buf(), line, reason };
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines.next().map(|(_, l)| l.split(',').collect()).unwrap_or_default();
    let expected: Vec<&str> = std::iter::once("method").chain(Metric::ALL.iter().map(|m| m.name())).collect();
    if header != expected {
        return Err(malformed(1, format!("header {header:?}, expected {expected:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(malformed(i + 1, format!("{} cells, expected 9", cells.len())));
        }
        let mut values = [0.0; 8];
        for (v, c) in values.iter_mut().zip(&cells[1..]) {
            *v = c.parse().map_err(|e| malformed(i + 1, format!("{c:?}: {e}")))?;
        }
        out.push(MethodMetrics { method: cells[0].to_string(), metrics: MetricVector { values } });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BuiltinSuite;

    #[test]
    fn wilson_arithmetic() {
        let (lo, hi) = wilson_interval(3, 4, Z95).unwrap();
        assert!(lo > 0.2 && hi < 1.0 && lo < 0.75 && hi > 0.75, "{lo} {hi}");
        // closed form at p = 1/2, n = 100: centre 0.5, half = z/(1+z^2/n) * sqrt(0.25/n + z^2/(4n^2))
        let (lo, hi) = wilson_interval(50, 100, Z95).unwrap();
        let half = Z95 / (1.0 + Z95 * Z95 / 100.0) * (0.25 / 100.0 + Z95 * Z95 / 40_000.0f64).sqrt();
        assert!((lo - (0.5 - half)).abs() < 1e-12 && (hi - (0.5 + half)).abs() < 1e-12);
        assert!(wilson_interval(0, 0, Z95).is_err());
    }

    #[test]
    fn rates_exclude_ties_and_all_ties_error() {
        let r = win_rate_from_rounds(&[TrialCounts { wins: 3, losses: 1, ties: 2 }]).unwrap();
        assert_eq!(r.rate, 0.75);
        assert_eq!(r.ties, 2);
        assert!(matches!(win_rate_from_rounds(&[TrialCounts { wins: 0, losses: 0, ties: 5 }]), Err(Error::AllTies(5))));
    }

    #[test]
    fn judge_dominance_tie_and_swap() {
        let gt = RasterImage::<f64>::from_fn(16, 16, |x, y| [((x * y) % 7) as f64 / 7.0, x as f64 / 16.0, 0.3]);
        let degraded = crate::degrade::gaussian_blur(&gt, 1.5).map(|v| v * 0.8);
        assert_eq!(automatic_judge(&gt, &degraded, &gt, &BuiltinSuite).unwrap(), Verdict::A);
        assert_eq!(automatic_judge(&degraded, &gt, &gt, &BuiltinSuite).unwrap(), Verdict::B);
        assert_eq!(automatic_judge(&degraded, &degraded, &gt, &BuiltinSuite).unwrap(), Verdict::Tie);
    }

    #[test]
    fn report_normalization() {
        let one = vec![MethodMetrics { method: "a".into(), metrics: MetricVector { values: [1.0; 8] } }];
        assert!(normalize_report(&one).methods[0].values.iter().all(|v| *v == 0.5));
        let two = vec![one[0].clone(), MethodMetrics { method: "b".into(), metrics: MetricVector { values: [2.0; 8] } }];
        let n = normalize_report(&two);
        for m in Metric::ALL {
            let (a, b) = (n.methods[0].values[m.index()], n.methods[1].values[m.index()]);
            assert_eq!((a, b), if m.higher_is_better() { (0.0, 1.0) } else { (1.0, 0.0) });
        }
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tables = vec![
            MethodMetrics { method: "pretrained".into(), metrics: MetricVector { values: [31.5, 0.91, 0.1, 0.2, 5.5, 60.0, 0.4, 0.3] } },
            MethodMetrics { method: "dspo".into(), metrics: MetricVector { values: [1.0 / 3.0, 0.1, 1e-17, 2.0, 3.0, 4.0, 5.0, 6.0] } },
        ];
        export_report(&tables, dir.path()).unwrap();
        assert_eq!(read_report_csv(&dir.path().join(REPORT_CSV)).unwrap(), tables);
        let json: NormalizedReport = serde_json::from_slice(&std::fs::read(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
        assert_eq!(json.methods.len(), 2);
    }
}
