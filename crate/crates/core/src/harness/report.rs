//! Per-seed records, median/s.d. aggregation and CSV/JSON emission.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::Method;
use crate::error::{Error, Result};
use crate::metrics::ReliabilityBin;

pub const RECORD_HEADER: [&str; 12] = [
    "dataset",
    "method",
    "r",
    "k",
    "seed",
    "subsample",
    "param_count",
    "accuracy",
    "ece",
    "nll",
    "brier",
    "wall_time_s",
];

/// One run of one seed. Failed runs carry NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub method: Method,
    pub r: usize,
    /// `None` for non-Bayesian methods.
    pub k: Option<usize>,
    pub seed: u64,
    pub subsample: f64,
    pub param_count: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub wall_time_s: f64,
    #[serde(default)]
    pub failed: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bins: Vec<ReliabilityBin>,
}

impl MetricsRecord {
    pub fn is_failed(&self) -> bool {
        self.failed.is_some()
    }

    fn csv_fields(&self) -> [String; 12] {
        [
            self.dataset.clone(),
            self.method.to_string(),
            self.r.to_string(),
            self.k.map(|k| k.to_string()).unwrap_or_default(),
            self.seed.to_string(),
            self.subsample.to_string(),
            self.param_count.to_string(),
            self.accuracy.to_string(),
            self.ece.to_string(),
            self.nll.to_string(),
            self.brier.to_string(),
            self.wall_time_s.to_string(),
        ]
    }
}

pub fn write_records_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn records_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_records_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn parse<T: std::str::FromStr>(field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{field}` in column {name}")))
}

/// Reads records written by [`write_records_csv`]. Reliability bins are not
/// part of the CSV and come back empty.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != RECORD_HEADER {
        return Err(Error::invalid("records file has an unexpected header"));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| &row[i];
        let accuracy: f64 = parse(f(7), "accuracy")?;
        out.push(MetricsRecord {
            dataset: f(0).to_owned(),
            method: f(1).parse()?,
            r: parse(f(2), "r")?,
            k: if f(3).is_empty() {
                None
            } else {
                Some(parse(f(3), "k")?)
            },
            seed: parse(f(4), "seed")?,
            subsample: parse(f(5), "subsample")?,
            param_count: parse(f(6), "param_count")?,
            accuracy,
            ece: parse(f(8), "ece")?,
            nll: parse(f(9), "nll")?,
            brier: parse(f(10), "brier")?,
            wall_time_s: parse(f(11), "wall_time_s")?,
            failed: accuracy.is_nan().then(|| "failed".to_owned()),
            bins: Vec::new(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub sd: f64,
}

/// Median (mean of the middle two for even n) and n−1 standard deviation
/// (0 for a single value). NaN for empty input.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            median: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    let sd = if n == 1 {
        0.0
    } else {
        let mean = v.iter().sum::<f64>() / n as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary { median, sd }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub r: usize,
    pub k: Option<usize>,
    pub subsample: f64,
    pub dataset: String,
    pub param_count: u64,
    /// Successful seeds.
    pub n_seeds: usize,
    pub n_failed: usize,
    pub accuracy: Summary,
    pub ece: Summary,
    pub nll: Summary,
    pub brier: Summary,
}

/// Ordering key; `subsample` goes through its bit pattern so the map is total.
type GroupKey = (Method, usize, Option<usize>, u64);

/// Groups by (method, r, k, subsample) in sorted order. Failed records only
/// count towards `n_failed`.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty record list"));
    }
    let mut groups: BTreeMap<GroupKey, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.method, r.r, r.k, r.subsample.to_bits());
        groups.entry(key).or_default().push(r);
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_values()
        .map(|group| {
            let ok: Vec<&MetricsRecord> =
                group.iter().copied().filter(|r| !r.is_failed()).collect();
            let col = |f: fn(&MetricsRecord) -> f64| {
                summarize(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let first = group[0];
            AggregateRow {
                method: first.method,
                r: first.r,
                k: first.k,
                subsample: first.subsample,
                dataset: first.dataset.clone(),
                param_count: first.param_count,
                n_seeds: ok.len(),
                n_failed: group.len() - ok.len(),
                accuracy: col(|r| r.accuracy),
                ece: col(|r| r.ece),
                nll: col(|r| r.nll),
                brier: col(|r| r.brier),
            }
        })
        .collect();
    // Bit patterns order positive floats correctly; keep the sort explicit.
    rows.sort_by(|a, b| {
        (a.method, a.r, a.k)
            .cmp(&(b.method, b.r, b.k))
            .then(b.subsample.total_cmp(&a.subsample))
    });
    Ok(rows)
}

pub const AGGREGATE_HEADER: [&str; 15] = [
    "dataset",
    "method",
    "r",
    "k",
    "subsample",
    "param_count",
    "n_seeds",
    "accuracy_median",
    "accuracy_sd",
    "ece_median",
    "ece_sd",
    "nll_median",
    "nll_sd",
    "brier_median",
    "brier_sd",
];

fn aggregate_fields(a: &AggregateRow) -> Vec<String> {
    vec![
        a.dataset.clone(),
        a.method.to_string(),
        a.r.to_string(),
        a.k.map(|k| k.to_string()).unwrap_or_default(),
        a.subsample.to_string(),
        a.param_count.to_string(),
        a.n_seeds.to_string(),
        a.accuracy.median.to_string(),
        a.accuracy.sd.to_string(),
        a.ece.median.to_string(),
        a.ece.sd.to_string(),
        a.nll.median.to_string(),
        a.nll.sd.to_string(),
        a.brier.median.to_string(),
        a.brier.sd.to_string(),
    ]
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER)?;
    for a in rows {
        w.write_record(aggregate_fields(a))?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep axis, also naming the per-figure CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Rank,
    CovRank,
    Subsample,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Rank => "rank",
            Axis::CovRank => "cov-rank",
            Axis::Subsample => "subsample",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Axis::Rank => vec![2.0, 8.0, 16.0, 25.0],
            Axis::CovRank => vec![0.0, 2.0, 5.0, 10.0, 20.0],
            Axis::Subsample => vec![1.0, 0.5, 0.25, 0.1],
        }
    }

    fn value_of(self, row: &AggregateRow) -> String {
        match self {
            Axis::Rank => row.r.to_string(),
            Axis::CovRank => row.k.map(|k| k.to_string()).unwrap_or_default(),
            Axis::Subsample => row.subsample.to_string(),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" | "r" => Ok(Axis::Rank),
            "cov-rank" | "k" => Ok(Axis::CovRank),
            "subsample" => Ok(Axis::Subsample),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis `{other}`"
            ))),
        }
    }
}

/// Plot data: one line per aggregate row, the swept value first.
pub fn write_figure_csv<W: Write>(axis: Axis, rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        axis.as_str(),
        "method",
        "param_count",
        "accuracy",
        "accuracy_sd",
        "ece",
        "ece_sd",
        "nll",
        "nll_sd",
    ])?;
    for a in rows {
        w.write_record([
            axis.value_of(a),
            a.method.to_string(),
            a.param_count.to_string(),
            a.accuracy.median.to_string(),
            a.accuracy.sd.to_string(),
            a.ece.median.to_string(),
            a.ece.sd.to_string(),
            a.nll.median.to_string(),
            a.nll.sd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reliability_csv<W: Write>(bins: &[ReliabilityBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "count", "mean_conf", "acc"])?;
    for b in bins {
        w.write_record([
            b.bin_lo.to_string(),
            b.bin_hi.to_string(),
            b.count.to_string(),
            b.mean_conf.to_string(),
            b.acc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `records.csv`, `records.json`, `aggregate.csv`, `aggregate.json`
/// and one reliability CSV per successful record under `dir`.
pub fn write_report(dir: &Path, records: &[MetricsRecord]) -> Result<Vec<AggregateRow>> {
    std::fs::create_dir_all(dir)?;
    let rows = aggregate(records)?;
    write_records_csv(records, std::fs::File::create(dir.join("records.csv"))?)?;
    std::fs::write(
        dir.join("records.json"),
        serde_json::to_string_pretty(records)?,
    )?;
    write_aggregate_csv(&rows, std::fs::File::create(dir.join("aggregate.csv"))?)?;
    std::fs::write(
        dir.join("aggregate.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    let with_bins: Vec<_> = records.iter().filter(|r| !r.bins.is_empty()).collect();
    if !with_bins.is_empty() {
        let rel = dir.join("reliability");
        std::fs::create_dir_all(&rel)?;
        for r in with_bins {
            let k = r.k.map(|k| format!("_k{k}")).unwrap_or_default();
            let name = format!(
                "{}_r{}{}_f{}_s{}.csv",
                r.method, r.r, k, r.subsample, r.seed
            );
            write_reliability_csv(&r.bins, std::fs::File::create(rel.join(name))?)?;
        }
    }
    Ok(rows)
}
