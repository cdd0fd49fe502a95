//! Panel and recurrent datasets, CSV IO, and synthetic generators.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ArdKernel, Interval};
use crate::linalg::pivoted_cholesky_with;
use crate::numerics::linspace;

/// Gaps between consecutive intervals below this are closed on ingestion.
const GAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub interval: Interval,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSubject {
    pub id: String,
    pub window: Interval,
    pub records: Vec<PanelRecord>,
}

impl PanelSubject {
    /// Validates and normalizes a subject: records are sorted by start,
    /// tiny gaps are closed, and the window is the union of the intervals.
    pub fn new(id: impl Into<String>, mut records: Vec<PanelRecord>) -> Result<Self> {
        let id = id.into();
        if records.is_empty() {
            return Err(Error::InvalidData(format!("subject {id} has no records")));
        }
        records.sort_by(|a, b| a.interval.start.total_cmp(&b.interval.start));
        for i in 1..records.len() {
            let prev_end = records[i - 1].interval.end;
            let start = records[i].interval.start;
            if start < prev_end - GAP_TOL {
                return Err(Error::InvalidData(format!(
                    "subject {id}: interval [{}, {}] overlaps the previous one ending at {prev_end}",
                    start, records[i].interval.end
                )));
            }
            if start > prev_end + GAP_TOL {
                return Err(Error::InvalidData(format!(
                    "subject {id}: gap between {prev_end} and {start}"
                )));
            }
            if start != prev_end {
                records[i].interval.start = prev_end;
                if records[i].interval.end < prev_end {
                    records[i].interval.end = prev_end;
                }
            }
        }
        let window = Interval::new(records[0].interval.start, records[records.len() - 1].interval.end)?;
        Ok(Self { id, window, records })
    }

    pub fn total_count(&self) -> u64 {
        self.records.iter().map(|r| r.count).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub subjects: Vec<PanelSubject>,
}

impl PanelDataset {
    pub fn new(subjects: Vec<PanelSubject>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, s) in subjects.iter().enumerate() {
            if seen.insert(s.id.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(Self { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn num_intervals(&self) -> usize {
        self.subjects.iter().map(|s| s.records.len()).sum()
    }

    pub fn total_count(&self) -> u64 {
        self.subjects.iter().map(|s| s.total_count()).sum()
    }

    /// Sum of window lengths over subjects.
    pub fn total_length(&self) -> f64 {
        self.subjects.iter().map(|s| s.window.length()).sum()
    }

    /// Smallest interval containing every subject window.
    pub fn hull(&self) -> Option<Interval> {
        let start = self.subjects.iter().map(|s| s.window.start).reduce(f64::min)?;
        let end = self.subjects.iter().map(|s| s.window.end).reduce(f64::max)?;
        Some(Interval { start, end })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentSubject {
    pub id: String,
    pub window: Interval,
    pub timestamps: Vec<f64>,
}

impl RecurrentSubject {
    pub fn new(id: impl Into<String>, window: Interval, mut timestamps: Vec<f64>) -> Result<Self> {
        let id = id.into();
        timestamps.sort_by(f64::total_cmp);
        if let Some(t) = timestamps.iter().find(|t| !window.contains(**t)) {
            return Err(Error::InvalidData(format!(
                "subject {id}: timestamp {t} outside window [{}, {}]",
                window.start, window.end
            )));
        }
        Ok(Self { id, window, timestamps })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecurrentDataset {
    pub subjects: Vec<RecurrentSubject>,
}

impl RecurrentDataset {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.subjects.iter().map(|s| s.timestamps.len()).sum()
    }

    pub fn hull(&self) -> Option<Interval> {
        let start = self.subjects.iter().map(|s| s.window.start).reduce(f64::min)?;
        let end = self.subjects.iter().map(|s| s.window.end).reduce(f64::max)?;
        Some(Interval { start, end })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }
}

/// A nonnegative intensity function on the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntensitySpec {
    /// `high` on `[2k·half_period, (2k+1)·half_period)`, `low` elsewhere.
    SquareWave {
        high: f64,
        low: f64,
        half_period: f64,
    },
    Constant {
        value: f64,
    },
    /// Linear interpolation through `(x, λ)` knots, flat beyond the ends.
    Table {
        x: Vec<f64>,
        values: Vec<f64>,
    },
}

impl IntensitySpec {
    /// The square wave `h₁` (7 and 2 alternating every 10 time units).
    pub fn h1() -> Self {
        IntensitySpec::SquareWave {
            high: 7.0,
            low: 2.0,
            half_period: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            IntensitySpec::SquareWave { high, low, half_period } => {
                *high >= 0.0 && *low >= 0.0 && *half_period > 0.0 && high.is_finite() && low.is_finite()
            }
            IntensitySpec::Constant { value } => *value >= 0.0 && value.is_finite(),
            IntensitySpec::Table { x, values } => {
                !x.is_empty()
                    && x.len() == values.len()
                    && x.windows(2).all(|w| w[1] > w[0])
                    && values.iter().all(|v| *v >= 0.0 && v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid intensity specification {self:?}"
            )))
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            IntensitySpec::SquareWave { high, low, half_period } => {
                if (t / half_period).floor().rem_euclid(2.0) == 0.0 {
                    *high
                } else {
                    *low
                }
            }
            IntensitySpec::Constant { value } => *value,
            IntensitySpec::Table { x, values } => interpolate(x, values, t),
        }
    }

    /// An upper bound of the intensity on `window`.
    pub fn upper_bound(&self, window: Interval) -> f64 {
        match self {
            IntensitySpec::SquareWave { high, low, .. } => high.max(*low),
            IntensitySpec::Constant { value } => *value,
            IntensitySpec::Table { x, values } => {
                let mut m = interpolate(x, values, window.start).max(interpolate(x, values, window.end));
                for (xi, vi) in x.iter().zip(values) {
                    if window.contains(*xi) {
                        m = m.max(*vi);
                    }
                }
                m
            }
        }
    }
}

/// Piecewise-linear interpolation, constant outside the knot range.
pub(crate) fn interpolate(x: &[f64], y: &[f64], t: f64) -> f64 {
    let n = x.len();
    if t <= x[0] {
        return y[0];
    }
    if t >= x[n - 1] {
        return y[n - 1];
    }
    let hi = x.partition_point(|v| *v <= t).min(n - 1);
    let lo = hi - 1;
    let w = (t - x[lo]) / (x[hi] - x[lo]);
    y[lo] + w * (y[hi] - y[lo])
}

/// 7 if `⌊x/10⌋` is even, else 2.
pub fn square_wave_h1(x: f64) -> f64 {
    if (x / 10.0).floor().rem_euclid(2.0) == 0.0 {
        7.0
    } else {
        2.0
    }
}

/// Squares a zero-mean GP draw on an even grid over `domain`.
pub fn draw_gp_intensity(kernel: &ArdKernel, domain: Interval, grid_size: usize, seed: u64) -> Result<IntensitySpec> {
    if grid_size < 2 {
        return Err(Error::Domain("grid_size must be at least 2".into()));
    }
    let x = linspace(domain.start, domain.end, grid_size);
    let factor = pivoted_cholesky_with(
        vec![kernel.variance(); grid_size],
        |p| x.iter().map(|xi| kernel.eval(*xi, x[p])).collect(),
        1e-12,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..factor.ncols()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let values = (0..grid_size)
        .map(|i| {
            let f: f64 = factor.row(i).iter().zip(&z).map(|(a, b)| a * b).sum();
            f * f
        })
        .collect();
    Ok(IntensitySpec::Table { x, values })
}

/// Lewis thinning of a dominating homogeneous process.
pub fn sample_ipp(intensity: &IntensitySpec, window: Interval, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_ipp_with(intensity, window, &mut rng)
}

pub(crate) fn sample_ipp_with<R: Rng + ?Sized>(intensity: &IntensitySpec, window: Interval, rng: &mut R) -> Vec<f64> {
    let lmax = intensity.upper_bound(window);
    if !(lmax > 0.0) || window.length() <= 0.0 {
        return Vec::new();
    }
    let gap = Exp::new(lmax).expect("positive rate");
    let mut out = Vec::new();
    let mut t = window.start;
    loop {
        t += gap.sample(rng);
        if t >= window.end {
            break;
        }
        if rng.random::<f64>() * lmax < intensity.eval(t) {
            out.push(t);
        }
    }
    out
}

/// Splits `window` at cumulative Dirichlet(θ) weights and counts the events
/// falling in each piece.
pub fn censor_to_panel(
    id: impl Into<String>,
    events: &[f64],
    window: Interval,
    theta: &[f64],
    seed: u64,
) -> Result<PanelSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    censor_to_panel_with(id, events, window, theta, &mut rng)
}

pub(crate) fn censor_to_panel_with<R: Rng + ?Sized>(
    id: impl Into<String>,
    events: &[f64],
    window: Interval,
    theta: &[f64],
    rng: &mut R,
) -> Result<PanelSubject> {
    if theta.is_empty() || theta.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Domain("Dirichlet concentrations must be positive".into()));
    }
    let draws: Vec<f64> = theta
        .iter()
        .map(|&t| {
            if t == 1.0 {
                Exp1.sample(rng)
            } else {
                Gamma::new(t, 1.0).expect("positive shape").sample(rng)
            }
        })
        .collect();
    let total: f64 = draws.iter().sum();
    let n = theta.len();
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(window.start);
    let mut acc = 0.0;
    for w in &draws[..n - 1] {
        acc += w / total;
        bounds.push((window.start + acc * window.length()).min(window.end));
    }
    bounds.push(window.end);

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (s, e) = (bounds[i], bounds[i + 1]);
        let last = i == n - 1;
        let count = events
            .iter()
            .filter(|&&t| t >= s && (t < e || (last && t <= e)))
            .count() as u64;
        records.push(PanelRecord {
            interval: Interval { start: s, end: e },
            count,
        });
    }
    PanelSubject::new(id, records)
}

/// Row indices for a subject-level split, each side in original order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidData("a split needs at least 2 subjects".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn train_test_split(data: &PanelDataset, train_fraction: f64, seed: u64) -> Result<(PanelDataset, PanelDataset)> {
    let (train, test) = split_indices(data.len(), train_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(row: usize, column: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        reason: reason.into(),
    }
}

fn parse_float(field: Option<&str>, row: usize, column: &str) -> Result<f64> {
    let raw = field.ok_or_else(|| parse_err(row, column, "missing field"))?;
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(row, column, format!("not a number: {raw:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(row, column, format!("non-finite value {raw:?}")));
    }
    Ok(v)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = found.iter().map(str::trim).collect();
    if got != expected {
        return Err(parse_err(
            1,
            "header",
            format!("expected {:?}, found {:?}", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Reads the `subject_id,t_start,t_end,count` format.
pub fn read_panel_csv(path: impl AsRef<Path>) -> Result<PanelDataset> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_panel_csv(&text)
}

pub fn parse_panel_csv(text: &str) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    check_header(rdr.headers()?, &["subject_id", "t_start", "t_end", "count"])?;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<PanelRecord>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, "row", e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(row, "row", format!("expected 4 fields, found {}", rec.len())));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(row, "subject_id", "empty subject id"));
        }
        let start = parse_float(rec.get(1), row, "t_start")?;
        let end = parse_float(rec.get(2), row, "t_end")?;
        if end < start {
            return Err(parse_err(row, "t_end", format!("end {end} precedes start {start}")));
        }
        let raw = rec[3].trim();
        let count: u64 = match raw.parse::<i64>() {
            Ok(c) if c >= 0 => c as u64,
            Ok(c) => return Err(parse_err(row, "count", format!("negative count {c}"))),
            Err(_) => return Err(parse_err(row, "count", format!("not a nonnegative integer: {raw:?}"))),
        };
        if !grouped.contains_key(&id) {
            order.push(id.clone());
        }
        grouped.entry(id).or_default().push(PanelRecord {
            interval: Interval { start, end },
            count,
        });
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let recs = grouped.remove(&id).unwrap_or_default();
            PanelSubject::new(id, recs)
        })
        .collect::<Result<Vec<_>>>()?;
    PanelDataset::new(subjects)
}

pub fn write_panel_csv(data: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(panel_csv_string(data).as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn panel_csv_string(data: &PanelDataset) -> String {
    let mut out = String::from("subject_id,t_start,t_end,count\n");
    for s in &data.subjects {
        for r in &s.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.id,
                fmt_f64(r.interval.start),
                fmt_f64(r.interval.end),
                r.count
            ));
        }
    }
    out
}

const WINDOWS_MARKER: &str = "#windows";

/// Reads `subject_id,t` event rows, then a `#windows` line followed by
/// `subject_id,window_start,window_end` rows.
pub fn read_recurrent_csv(path: impl AsRef<Path>) -> Result<RecurrentDataset> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_recurrent_csv(&text)
}

pub fn parse_recurrent_csv(text: &str) -> Result<RecurrentDataset> {
    let lines: Vec<&str> = text.lines().collect();
    let marker = lines
        .iter()
        .position(|l| l.trim() == WINDOWS_MARKER)
        .ok_or_else(|| parse_err(lines.len() + 1, "section", "missing #windows section"))?;
    let events_text = lines[..marker].join("\n");
    let windows_text = lines[marker + 1..].join("\n");

    let mut rdr = csv::ReaderBuilder::new().from_reader(events_text.as_bytes());
    check_header(rdr.headers()?, &["subject_id", "t"])?;
    let mut events: HashMap<String, (usize, Vec<f64>)> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, "row", e.to_string()))?;
        if rec.len() != 2 {
            return Err(parse_err(row, "row", format!("expected 2 fields, found {}", rec.len())));
        }
        let t = parse_float(rec.get(1), row, "t")?;
        events
            .entry(rec[0].trim().to_string())
            .or_insert((row, Vec::new()))
            .1
            .push(t);
    }

    let offset = marker + 1;
    let mut rdr = csv::ReaderBuilder::new().from_reader(windows_text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(offset + 1, "header", e.to_string()))?
        .clone();
    check_header(&headers, &["subject_id", "window_start", "window_end"])
        .map_err(|_| parse_err(offset + 1, "header", "expected subject_id,window_start,window_end"))?;
    let mut subjects = Vec::new();
    let mut seen = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = offset + i + 2;
        let rec = rec.map_err(|e| parse_err(row, "row", e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(row, "row", format!("expected 3 fields, found {}", rec.len())));
        }
        let id = rec[0].trim().to_string();
        if seen.insert(id.clone(), row).is_some() {
            return Err(parse_err(row, "subject_id", format!("duplicate window for {id}")));
        }
        let start = parse_float(rec.get(1), row, "window_start")?;
        let end = parse_float(rec.get(2), row, "window_end")?;
        if end < start {
            return Err(parse_err(
                row,
                "window_end",
                format!("end {end} precedes start {start}"),
            ));
        }
        let ts = events.remove(&id).map(|(_, ts)| ts).unwrap_or_default();
        subjects.push(RecurrentSubject::new(id, Interval { start, end }, ts)?);
    }
    if let Some((id, (row, _))) = events.into_iter().min_by_key(|(_, (row, _))| *row) {
        return Err(parse_err(
            row,
            "subject_id",
            format!("subject {id} has events but no window"),
        ));
    }
    Ok(RecurrentDataset { subjects })
}

pub fn write_recurrent_csv(data: &RecurrentDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(recurrent_csv_string(data).as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn recurrent_csv_string(data: &RecurrentDataset) -> String {
    let mut out = String::from("subject_id,t\n");
    for s in &data.subjects {
        for t in &s.timestamps {
            out.push_str(&format!("{},{}\n", s.id, fmt_f64(*t)));
        }
    }
    out.push_str(WINDOWS_MARKER);
    out.push_str("\nsubject_id,window_start,window_end\n");
    for s in &data.subjects {
        out.push_str(&format!(
            "{},{},{}\n",
            s.id,
            fmt_f64(s.window.start),
            fmt_f64(s.window.end)
        ));
    }
    out
}

/// Settings for the synthetic panel-data protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDesign {
    pub n_subjects: usize,
    pub window: Interval,
    pub theta: Vec<f64>,
    /// Per-subject multiplicative rate factors drawn uniformly from this
    /// range; `None` means every subject shares the intensity.
    pub rate_multipliers: Option<(f64, f64)>,
}

impl SyntheticDesign {
    /// 100 subjects on `[0, 60]`, 10 intervals with flat Dirichlet weights.
    pub fn standard() -> Self {
        Self {
            n_subjects: 100,
            window: Interval { start: 0.0, end: 60.0 },
            theta: vec![1.0; 10],
            rate_multipliers: None,
        }
    }
}

/// Recurrent events and their panel censoring for every subject.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub recurrent: RecurrentDataset,
    pub panel: PanelDataset,
    pub multipliers: Vec<f64>,
}

pub fn simulate(intensity: &IntensitySpec, design: &SyntheticDesign, seed: u64) -> Result<SyntheticData> {
    intensity.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recurrent = Vec::with_capacity(design.n_subjects);
    let mut panel = Vec::with_capacity(design.n_subjects);
    let mut multipliers = Vec::with_capacity(design.n_subjects);
    let width = (design.n_subjects.max(1) - 1).to_string().len();
    for k in 0..design.n_subjects {
        let id = format!("s{k:0width$}");
        let mult = match design.rate_multipliers {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => 1.0,
        };
        let events = if mult == 1.0 {
            sample_ipp_with(intensity, design.window, &mut rng)
        } else {
            let scaled = scale_intensity(intensity, mult);
            sample_ipp_with(&scaled, design.window, &mut rng)
        };
        panel.push(censor_to_panel_with(
            id.clone(),
            &events,
            design.window,
            &design.theta,
            &mut rng,
        )?);
        recurrent.push(RecurrentSubject::new(id, design.window, events)?);
        multipliers.push(mult);
    }
    Ok(SyntheticData {
        recurrent: RecurrentDataset { subjects: recurrent },
        panel: PanelDataset::new(panel)?,
        multipliers,
    })
}

fn scale_intensity(spec: &IntensitySpec, c: f64) -> IntensitySpec {
    match spec {
        IntensitySpec::SquareWave { high, low, half_period } => IntensitySpec::SquareWave {
            high: high * c,
            low: low * c,
            half_period: *half_period,
        },
        IntensitySpec::Constant { value } => IntensitySpec::Constant { value: value * c },
        IntensitySpec::Table { x, values } => IntensitySpec::Table {
            x: x.clone(),
            values: values.iter().map(|v| v * c).collect(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: f64, e: f64, c: u64) -> PanelRecord {
        PanelRecord {
            interval: Interval { start: s, end: e },
            count: c,
        }
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn h1_definition() {
        assert_eq!(square_wave_h1(5.0), 7.0);
        assert_eq!(square_wave_h1(15.0), 2.0);
        assert_eq!(square_wave_h1(20.0), 7.0);
        assert_eq!(square_wave_h1(0.0), 7.0);
        assert_eq!(square_wave_h1(-5.0), 2.0);
        for x in [0.3, 9.9, 10.0, 33.0, 59.9] {
            assert_eq!(IntensitySpec::h1().eval(x), square_wave_h1(x));
        }
    }

    #[test]
    fn table_interpolates_linearly() {
        let t = IntensitySpec::Table {
            x: vec![0.0, 1.0, 3.0],
            values: vec![1.0, 3.0, 0.0],
        };
        assert_eq!(t.eval(0.5), 2.0);
        assert_eq!(t.eval(2.0), 1.5);
        assert_eq!(t.eval(-1.0), 1.0);
        assert_eq!(t.eval(5.0), 0.0);
        assert_eq!(t.upper_bound(Interval { start: 0.2, end: 2.0 }), 3.0);
        assert_eq!(t.upper_bound(Interval { start: 1.5, end: 2.0 }), 2.25);
    }

    #[test]
    fn gp_intensity_draws() {
        let k = ArdKernel::new(1.0, 5.0).unwrap();
        let dom = Interval { start: 0.0, end: 60.0 };
        let a = draw_gp_intensity(&k, dom, 3001, 1).unwrap();
        let b = draw_gp_intensity(&k, dom, 3001, 1).unwrap();
        let c = draw_gp_intensity(&k, dom, 3001, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        match a {
            IntensitySpec::Table { x, values } => {
                assert_eq!(x.len(), 3001);
                assert_eq!(x[0], 0.0);
                assert_eq!(x[3000], 60.0);
                assert!(values.iter().all(|v| *v >= 0.0));
            }
            _ => panic!("expected a table"),
        }
        assert!(draw_gp_intensity(&k, dom, 1, 0).is_err());
    }

    #[test]
    fn ipp_constant_rate_mean() {
        let spec = IntensitySpec::Constant { value: 3.0 };
        let w = Interval { start: 0.0, end: 2.0 };
        let counts: Vec<f64> = (0..10_000).map(|s| sample_ipp(&spec, w, s).len() as f64).collect();
        let (m, se) = mean_and_se(&counts);
        assert!((m - 6.0).abs() < 3.0 * se, "{m} ± {se}");
        assert!(sample_ipp(&IntensitySpec::Constant { value: 0.0 }, w, 3).is_empty());
        let ts = sample_ipp(&spec, Interval { start: 0.0, end: 50.0 }, 9);
        assert!(ts.windows(2).all(|p| p[0] <= p[1]));
        assert_eq!(ts, sample_ipp(&spec, Interval { start: 0.0, end: 50.0 }, 9));
    }

    #[test]
    fn ipp_square_wave_mean() {
        let w = Interval { start: 0.0, end: 60.0 };
        let counts: Vec<f64> = (0..1000)
            .map(|s| sample_ipp(&IntensitySpec::h1(), w, s).len() as f64)
            .collect();
        let (m, se) = mean_and_se(&counts);
        assert!((m - 270.0).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn censoring_partitions_the_window() {
        let w = Interval { start: 0.0, end: 60.0 };
        let events = sample_ipp(&IntensitySpec::h1(), w, 4);
        let s = censor_to_panel("a", &events, w, &[1.0; 10], 5).unwrap();
        assert_eq!(s.records.len(), 10);
        assert_eq!(s.records[0].interval.start, 0.0);
        assert_eq!(s.records[9].interval.end, 60.0);
        for p in s.records.windows(2) {
            assert_eq!(p[0].interval.end, p[1].interval.start);
        }
        assert_eq!(s.total_count(), events.len() as u64);
        assert_eq!(s.window, w);

        let one = censor_to_panel("b", &events, w, &[1.0], 5).unwrap();
        assert_eq!(one.records.len(), 1);
        assert_eq!(one.records[0].interval, w);
        assert_eq!(one.records[0].count, events.len() as u64);

        let with_end = censor_to_panel("c", &[0.0, 60.0], w, &[2.0, 0.5], 1).unwrap();
        assert_eq!(with_end.total_count(), 2);
    }

    #[test]
    fn subject_validation() {
        assert!(PanelSubject::new("x", vec![rec(0.0, 2.0, 1), rec(1.0, 3.0, 0)]).is_err());
        assert!(PanelSubject::new("x", vec![rec(0.0, 1.0, 1), rec(1.5, 3.0, 0)]).is_err());
        let s = PanelSubject::new("x", vec![rec(1.0 + 1e-10, 3.0, 0), rec(0.0, 1.0, 2)]).unwrap();
        assert_eq!(s.records[1].interval.start, 1.0);
        assert_eq!(s.window, Interval { start: 0.0, end: 3.0 });
        assert!(PanelDataset::new(vec![s.clone(), s]).is_err());
    }

    fn three_subjects() -> PanelDataset {
        let w = Interval { start: 0.0, end: 60.0 };
        let subjects = (0..3)
            .map(|k| {
                let ev = sample_ipp(&IntensitySpec::h1(), w, k);
                censor_to_panel(format!("s{k}"), &ev, w, &[1.0; 4], 100 + k).unwrap()
            })
            .collect();
        PanelDataset::new(subjects).unwrap()
    }

    #[test]
    fn panel_csv_round_trip() {
        let data = three_subjects();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("panel.csv");
        write_panel_csv(&data, &p).unwrap();
        assert_eq!(read_panel_csv(&p).unwrap(), data);
    }

    #[test]
    fn panel_csv_edge_cases() {
        assert!(parse_panel_csv("subject_id,t_start,t_end,count\n").unwrap().is_empty());
        let bad = "subject_id,t_start,t_end,count\na,0,1,2\na,1,2,-1\n";
        match parse_panel_csv(bad) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "count");
            }
            other => panic!("unexpected {other:?}"),
        }
        let overlap = "subject_id,t_start,t_end,count\nq,0,2,1\nq,1,3,0\n";
        let err = parse_panel_csv(overlap).unwrap_err().to_string();
        assert!(err.contains("subject q"), "{err}");
        let ungrouped = "subject_id,t_start,t_end,count\nb,1,2,0\na,0,1,1\nb,0,1,3\n";
        let d = parse_panel_csv(ungrouped).unwrap();
        assert_eq!(d.subjects[0].id, "b");
        assert_eq!(d.subjects[0].records[0].count, 3);
        assert!(parse_panel_csv("id,a,b,c\n").is_err());
        assert!(parse_panel_csv("subject_id,t_start,t_end,count\na,x,1,0\n").is_err());
    }

    #[test]
    fn recurrent_csv_round_trip_and_errors() {
        let w = Interval { start: 0.0, end: 60.0 };
        let data = RecurrentDataset {
            subjects: vec![
                RecurrentSubject::new("a", w, sample_ipp(&IntensitySpec::h1(), w, 1)).unwrap(),
                RecurrentSubject::new("b", Interval { start: 5.0, end: 7.0 }, vec![]).unwrap(),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rec.csv");
        write_recurrent_csv(&data, &p).unwrap();
        assert_eq!(read_recurrent_csv(&p).unwrap(), data);

        let empty = parse_recurrent_csv("subject_id,t\n#windows\nsubject_id,window_start,window_end\n").unwrap();
        assert!(empty.is_empty());
        let outside = "subject_id,t\na,9\n#windows\nsubject_id,window_start,window_end\na,0,5\n";
        assert!(parse_recurrent_csv(outside).is_err());
        let orphan = "subject_id,t\nz,1\n#windows\nsubject_id,window_start,window_end\na,0,5\n";
        assert!(matches!(parse_recurrent_csv(orphan), Err(Error::Parse { row: 2, .. })));
        let garbled = "subject_id,t\na,one\n#windows\nsubject_id,window_start,window_end\na,0,5\n";
        assert!(matches!(parse_recurrent_csv(garbled), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn split_properties() {
        let subjects = (0..100)
            .map(|k| PanelSubject::new(format!("s{k}"), vec![rec(0.0, 1.0, k)]).unwrap())
            .collect();
        let data = PanelDataset::new(subjects).unwrap();
        let (tr, te) = train_test_split(&data, 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (50, 50));
        let (tr2, _) = train_test_split(&data, 0.5, 3).unwrap();
        assert_eq!(tr, tr2);
        let mut ids: Vec<String> = tr.subjects.iter().chain(&te.subjects).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn simulate_design() {
        let d = simulate(&IntensitySpec::h1(), &SyntheticDesign::standard(), 7).unwrap();
        assert_eq!(d.panel.len(), 100);
        for (p, r) in d.panel.subjects.iter().zip(&d.recurrent.subjects) {
            assert_eq!(p.id, r.id);
            assert_eq!(p.total_count() as usize, r.timestamps.len());
            assert_eq!(p.records.len(), 10);
        }
        let again = simulate(&IntensitySpec::h1(), &SyntheticDesign::standard(), 7).unwrap();
        assert_eq!(again.panel, d.panel);
    }
}
