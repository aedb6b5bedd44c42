//! CSV ingestion and emission.
//!
//! Input files have a `date` column (ISO-8601) plus daily or cumulative
//! counts. Recognized columns: `confirmed_daily`/`confirmed_cum`,
//! `recovered_daily`/`recovered_cum`, `deaths_daily`/`deaths_cum`,
//! `active`, `susceptible`, `population`, `tests`, `positives`,
//! `excess_weekly`. Empty cells are missing values.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::Panel;
use crate::forecast::{EvalRow, ForecastRecord};
use crate::mixed::{TestingSeries, WeeklyDeaths};
use crate::model::CompartmentSeries;

/// Default cumulative-confirmed threshold defining the first sample day.
pub const DEFAULT_START_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Overrides any `population` column.
    pub population: Option<f64>,
    /// The sample starts on the first day with cumulative confirmed cases
    /// at or above this value.
    pub start_threshold: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            population: None,
            start_threshold: DEFAULT_START_THRESHOLD,
        }
    }
}

/// Per-file ingestion counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadDiagnostics {
    /// Rows whose negative daily count was floored to zero.
    pub floored_rows: Vec<String>,
    /// Rows dropped before the sample start.
    pub skipped_rows: usize,
    pub weekly_excess_floored: usize,
}

/// A loaded file.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub series: CompartmentSeries,
    pub testing: Option<TestingSeries>,
    pub weekly: Option<WeeklyDeaths>,
    /// Excess deaths by observed day, as read.
    pub excess: Option<Vec<Option<f64>>>,
    pub diagnostics: LoadDiagnostics,
}

fn parse_cell(s: &str, col: &str, row: usize) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| {
        Error::data(format!(
            "row {row}: column {col} has non-numeric value {s:?}"
        ))
    })
}

struct Table {
    dates: Vec<NaiveDate>,
    cols: HashMap<String, Vec<Option<f64>>>,
}

impl Table {
    fn col(&self, name: &str) -> Option<&Vec<Option<f64>>> {
        self.cols.get(name)
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let date_col = headers
        .iter()
        .position(|h| h == "date")
        .ok_or_else(|| Error::data(format!("{}: missing required column date", path.display())))?;
    let mut dates = Vec::new();
    let mut cols: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
            .map_err(|_| Error::data(format!("row {}: invalid date {raw:?}", row + 1)))?;
        dates.push(date);
        for (k, h) in headers.iter().enumerate() {
            if k == date_col {
                continue;
            }
            let v = parse_cell(rec.get(k).unwrap_or(""), h, row + 1)?;
            cols.entry(h.clone()).or_default().push(v);
        }
    }
    if dates.is_empty() {
        return Err(Error::data(format!("{}: no rows", path.display())));
    }
    for w in dates.windows(2) {
        let gap = (w[1] - w[0]).num_days();
        if gap <= 0 {
            return Err(Error::data(format!(
                "dates not increasing: {} followed by {}",
                w[0], w[1]
            )));
        }
        if gap > 1 {
            return Err(Error::data(format!(
                "date gap between {} and {}",
                w[0], w[1]
            )));
        }
    }
    Ok(Table { dates, cols })
}

/// Daily flows and cumulative totals of one count.
struct Counts {
    daily: Vec<Option<f64>>,
    cum: Option<Vec<f64>>,
}

fn counts(
    table: &Table,
    stem: &str,
    required: bool,
    diag: &mut LoadDiagnostics,
) -> Result<Option<Counts>> {
    let daily_name = format!("{stem}_daily");
    let cum_name = format!("{stem}_cum");
    let n = table.dates.len();
    let cum = table.col(&cum_name);
    let daily = match (table.col(&daily_name), cum) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => {
            let mut out = vec![None; n];
            for r in 1..n {
                if let (Some(a), Some(b)) = (c[r - 1], c[r]) {
                    out[r] = Some(b - a);
                }
            }
            out
        }
        (None, None) if required => {
            return Err(Error::data(format!(
                "missing required column {daily_name} (or {cum_name})"
            )))
        }
        (None, None) => return Ok(None),
    };
    let mut daily = daily;
    for (r, v) in daily.iter_mut().enumerate() {
        if let Some(x) = v {
            if *x < 0.0 {
                diag.floored_rows
                    .push(format!("{} {stem} {x}", table.dates[r]));
                *x = 0.0;
            }
        }
    }
    let cum = cum.map(|c| {
        let mut last = 0.0;
        c.iter()
            .map(|v| {
                if let Some(x) = v {
                    last = *x;
                }
                last
            })
            .collect()
    });
    Ok(Some(Counts { daily, cum }))
}

fn running_total(c: &Counts) -> Vec<f64> {
    match &c.cum {
        Some(v) => v.clone(),
        None => {
            let mut acc = 0.0;
            c.daily
                .iter()
                .map(|v| {
                    acc += v.unwrap_or(0.0);
                    acc
                })
                .collect()
        }
    }
}

/// Reads one country file and aligns it to the sample start.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<LoadedData> {
    let table = read_table(path)?;
    let mut diag = LoadDiagnostics::default();
    let confirmed = counts(&table, "confirmed", true, &mut diag)?.expect("required");
    let deaths = counts(&table, "deaths", true, &mut diag)?.expect("required");
    let recovered = counts(&table, "recovered", false, &mut diag)?;
    let n_rows = table.dates.len();

    let c_total = running_total(&confirmed);
    let r0 = c_total
        .iter()
        .position(|&c| c >= options.start_threshold)
        .ok_or_else(|| {
            Error::data(format!(
                "cumulative confirmed never reaches {}",
                options.start_threshold
            ))
        })?;
    if r0 + 1 >= n_rows {
        return Err(Error::data("no observations after the sample start"));
    }
    diag.skipped_rows = r0;

    let population = match options.population {
        Some(p) => p,
        None => table
            .col("population")
            .and_then(|c| c[r0])
            .ok_or_else(|| Error::config("population is neither configured nor in the data"))?,
    };
    let req = |v: Option<f64>, what: &str, r: usize| {
        v.ok_or_else(|| Error::data(format!("{}: missing {what}", table.dates[r])))
    };
    let mut dc = Vec::with_capacity(n_rows - r0 - 1);
    let mut dd = Vec::with_capacity(n_rows - r0 - 1);
    let mut drc = Vec::with_capacity(n_rows - r0 - 1);
    for r in r0 + 1..n_rows {
        dc.push(req(confirmed.daily[r], "confirmed", r)?);
        dd.push(req(deaths.daily[r], "deaths", r)?);
        drc.push(recovered.as_ref().and_then(|c| c.daily[r]));
    }
    let i0 = match table.col("active").and_then(|c| c[r0]) {
        Some(a) => a,
        None => {
            let rec = recovered
                .as_ref()
                .map(|c| running_total(c)[r0])
                .unwrap_or(0.0);
            c_total[r0] - rec - running_total(&deaths)[r0]
        }
    };
    let s0 = match table.col("susceptible").and_then(|c| c[r0]) {
        Some(s) => s,
        None => population - c_total[r0],
    };
    let series = CompartmentSeries::new(table.dates[r0..].to_vec(), dc, drc, dd, population, i0)?
        .with_initial_susceptible(s0)?;

    let testing = match (table.col("tests"), table.col("positives")) {
        (Some(t), Some(p)) => Some(TestingSeries::new(
            t[r0..].iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            p[r0..].iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        )?),
        _ => None,
    };
    let (weekly, excess) = match table.col("excess_weekly") {
        Some(e) => {
            let mut ex: Vec<Option<f64>> = e[r0 + 1..].to_vec();
            if let Some(v0) = e[r0] {
                // a value dated on the start day goes to the first week
                ex[0] = Some(ex[0].unwrap_or(0.0) + v0);
            }
            let w = WeeklyDeaths::from_daily(&series, &ex)?;
            diag.weekly_excess_floored = w.floored();
            (Some(w), Some(ex))
        }
        None => (None, None),
    };
    Ok(LoadedData {
        series,
        testing,
        weekly,
        excess,
        diagnostics: diag,
    })
}

/// Country files on the common date range.
pub fn load_panel(
    files: &[(String, PathBuf, Option<f64>)],
    threshold: f64,
) -> Result<(Panel, Vec<LoadDiagnostics>)> {
    let mut loaded = Vec::with_capacity(files.len());
    for (name, path, population) in files {
        let d = load_csv(
            path,
            &LoadOptions {
                population: *population,
                start_threshold: threshold,
            },
        )
        .map_err(|e| match e {
            Error::Data(m) => Error::data(format!("{name}: {m}")),
            other => other,
        })?;
        loaded.push(d);
    }
    let first = loaded
        .iter()
        .map(|d| d.series.dates()[0])
        .max()
        .expect("non-empty panel");
    let last = loaded
        .iter()
        .map(|d| *d.series.dates().last().unwrap())
        .min()
        .expect("non-empty panel");
    if last <= first {
        return Err(Error::data("countries share no common dates"));
    }
    let span = (last - first).num_days() as usize;
    let mut countries = Vec::with_capacity(loaded.len());
    for d in &loaded {
        let start = (first - d.series.dates()[0]).num_days() as usize;
        countries.push(d.series.window(start, start + span)?);
    }
    let names = files.iter().map(|f| f.0.clone()).collect();
    Ok((
        Panel::new(countries, names)?,
        loaded.into_iter().map(|d| d.diagnostics).collect(),
    ))
}

/// Snapshots named `YYYY-MM-DD.csv`, ordered by as-of date.
pub fn load_vintages(
    dir: &Path,
    options: &LoadOptions,
) -> Result<Vec<(NaiveDate, CompartmentSeries)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        if let Ok(d) = NaiveDate::parse_from_str(stem, "%Y-%m-%d") {
            found.push((d, path));
        }
    }
    if found.is_empty() {
        return Err(Error::data(format!(
            "no YYYY-MM-DD.csv snapshots in {}",
            dir.display()
        )));
    }
    found.sort();
    found
        .into_iter()
        .map(|(d, p)| Ok((d, load_csv(&p, options)?.series)))
        .collect()
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes a series so that [`load_csv`] with threshold 0 reads it back
/// exactly.
pub fn write_series_csv(
    path: &Path,
    series: &CompartmentSeries,
    testing: Option<&TestingSeries>,
    excess: Option<&[Option<f64>]>,
) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![
        "date",
        "confirmed_daily",
        "recovered_daily",
        "deaths_daily",
        "active",
        "susceptible",
        "population",
    ];
    if testing.is_some() {
        header.extend(["tests", "positives"]);
    }
    if excess.is_some() {
        header.push("excess_weekly");
    }
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row = vec![series.dates()[t].to_string()];
        if t == 0 {
            row.extend([String::new(), String::new(), String::new()]);
        } else {
            row.push(fmt(series.delta_c()[t - 1]));
            row.push(fmt_opt(series.rc_obs(t)));
            row.push(fmt(series.delta_d()[t - 1]));
        }
        row.push(fmt(series.i()[t]));
        row.push(fmt(series.s()[t]));
        row.push(fmt(series.population()));
        if let Some(ts) = testing {
            row.push(fmt(ts.tests()[t]));
            row.push(fmt(ts.positives()[t]));
        }
        if let Some(e) = excess {
            row.push(if t == 0 {
                String::new()
            } else {
                fmt_opt(e[t - 1])
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Generic table writer: a header and rows of already formatted cells.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub const EVAL_HEADER: [&str; 8] = [
    "model", "series", "horizon", "n", "rmsfe", "rrmsfe", "dm_stat", "dm_p",
];
pub const RECORD_HEADER: [&str; 6] = ["date", "horizon", "model", "series", "forecast", "actual"];

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.series.clone(),
                r.horizon.to_string(),
                r.n.to_string(),
                fmt(r.rmsfe),
                fmt_opt(r.rrmsfe),
                fmt_opt(r.dm_stat),
                fmt_opt(r.dm_p),
            ]
        })
        .collect();
    write_rows(path, &EVAL_HEADER, &cells)
}

pub fn write_records(path: &Path, records: &[ForecastRecord]) -> Result<()> {
    let cells: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.date.to_string(),
                r.horizon.to_string(),
                r.model.clone(),
                r.series.clone(),
                fmt(r.forecast),
                fmt(r.actual),
            ]
        })
        .collect();
    write_rows(path, &RECORD_HEADER, &cells)
}

/// Reads a forecast panel with columns `date, horizon, model, series,
/// forecast, actual`.
pub fn read_records(path: &Path) -> Result<Vec<ForecastRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    for need in RECORD_HEADER {
        if !headers.iter().any(|h| h == need) {
            return Err(Error::data(format!(
                "forecast panel is missing column {need}"
            )));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<ForecastRecord>() {
        out.push(rec.map_err(|e| Error::data(format!("forecast panel: {e}")))?);
    }
    Ok(out)
}
