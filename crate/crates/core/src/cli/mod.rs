//! The `alertscore` command line.

pub mod analysis;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::baserate::{build_rate_table, generate_baserate_alerts, history_window};
use crate::domain::{
    load_alerts, load_gsr, write_alerts, write_gsr, Alert, GsrEvent, Vocabulary, YearMonth,
};
use crate::pipeline::{
    build_stages, deduplicate, default_stage_configs, expected_quality, run_pipeline,
    train_expected_quality, Envelope, ExpectedQualityModel, HandlerContext, Payload, StageConfig,
};
use crate::scoring::{month_slice, recall_quality_curve, score_month, CurvePoint, ScoreReport};
use crate::surprise::{
    build_cube, detect_surprise, evaluate_truncated, ipf_fit, CubeAxes, SurpriseResult,
    DEFAULT_MAX_ITERATIONS, DEFAULT_SIGMA_THRESHOLD, DEFAULT_TOLERANCE,
};
use crate::synthetic::{generate, SyntheticProfile};
use analysis::{
    ablate, known_tags, narrate, similar_warning_counts, AblationReport, NarrativeContext,
    WeekInput,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(
    name = "alertscore",
    version,
    about = "Score, generate and analyse civil-unrest alerts against ground truth"
)]
pub struct Cli {
    /// TOML run configuration (vocabulary, pipeline stages, synthetic profile).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub month: Option<YearMonth>,
    /// Where the primary artifact is written; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match alerts to events for one month and report the metrics.
    Score {
        #[arg(long)]
        alerts: PathBuf,
        #[arg(long)]
        gsr: PathBuf,
    },
    /// Forecast the target month from the three months of GSR before it.
    Baserate {
        #[arg(long)]
        gsr: PathBuf,
    },
    /// Flag surprising cells and score alerts and the baserate on them only.
    Surprise {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        current: PathBuf,
        #[arg(long)]
        alerts: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA_THRESHOLD)]
        sigma: f64,
    },
    /// Rescore with only the alerts carrying the given source tags.
    Ablate {
        #[arg(long)]
        alerts: PathBuf,
        #[arg(long)]
        gsr: PathBuf,
        /// Comma-separated tag set; repeat for several configurations.
        #[arg(long = "sources", required = true)]
        sources: Vec<String>,
    },
    /// Recall and quality as the expected-quality threshold rises.
    Curve {
        #[arg(long)]
        alerts: PathBuf,
        #[arg(long)]
        gsr: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0])]
        thresholds: Vec<f64>,
        /// Expected-quality model as JSON.
        #[arg(long, conflicts_with_all = ["history_alerts", "history_gsr"])]
        quality_model: Option<PathBuf>,
        /// Past alerts to train the expected-quality model on.
        #[arg(long, requires = "history_gsr")]
        history_alerts: Option<PathBuf>,
        #[arg(long, requires = "history_alerts")]
        history_gsr: Option<PathBuf>,
    },
    /// Write the English summary of one alert.
    Narrate {
        #[arg(long)]
        alerts: PathBuf,
        #[arg(long)]
        alert_id: String,
        /// JSON narrative context.
        #[arg(long)]
        context: Option<PathBuf>,
        /// Fill the similar-warning counts from the alert file when the context lacks them.
        #[arg(long)]
        count_similar: bool,
    },
    /// Write a seeded synthetic GSR, alert corpus and manifest into the --out directory.
    Generate,
    /// Run alert records through the configured stage pipeline.
    PipelineRun {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dead_letters: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        quality_model: Option<PathBuf>,
        /// Skip duplicate-alert fusion after the pipeline.
        #[arg(long)]
        no_dedup: bool,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default)]
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub vocabulary: Option<Vocabulary>,
    pub pipeline: Option<PipelineSection>,
    pub synthetic: Option<SyntheticProfile>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.vocabulary.clone().unwrap_or_else(default_vocabulary)
    }
}

pub fn default_vocabulary() -> Vocabulary {
    let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    Vocabulary {
        countries: list(&[
            "Argentina",
            "Brazil",
            "Chile",
            "Colombia",
            "Ecuador",
            "El Salvador",
            "Mexico",
            "Paraguay",
            "Uruguay",
            "Venezuela",
        ]),
        event_classes: list(&[
            "employment",
            "housing",
            "energy",
            "government-policy",
            "economic",
            "other",
        ]),
        populations: list(&[
            "general-population",
            "business",
            "labor",
            "education",
            "agricultural",
            "ethnic",
            "legal",
            "media",
            "medical",
            "refugees",
            "religious",
        ]),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn read_alerts(path: &Path, vocab: &Vocabulary) -> Result<Vec<Alert>, CliError> {
    load_alerts(open(path)?, vocab).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn read_gsr(path: &Path, vocab: &Vocabulary) -> Result<Vec<GsrEvent>, CliError> {
    load_gsr(open(path)?, vocab).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_reader(open(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

struct Session<'a> {
    cli: &'a Cli,
    out: &'a mut dyn Write,
}

impl Session<'_> {
    fn print(&mut self, text: &str) -> Result<(), CliError> {
        self.out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(e.to_string()))
    }

    /// Writes `artifact` to --out when given; stdout gets the table or, without
    /// --out, the artifact itself in JSON mode.
    fn deliver(&mut self, artifact: &str, table: &str) -> Result<(), CliError> {
        if let Some(path) = &self.cli.out {
            write_file(path, artifact)?;
        }
        match self.cli.format {
            Format::Table => self.print(table),
            Format::Json if self.cli.out.is_none() => self.print(artifact),
            Format::Json => Ok(()),
        }
    }

    fn month(&self, command: &str) -> Result<YearMonth, CliError> {
        self.cli
            .month
            .ok_or_else(|| invalid(format!("`{command}` requires --month YYYY-MM")))
    }
}

pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.decimals$}"))
}

fn fmt_delta(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:+.2}%"))
}

pub fn score_table(report: &ScoreReport) -> String {
    let rows = vec![
        vec!["Mean Lead-Time".into(), fmt_opt(report.mean_lead_time, 2)],
        vec![
            "Mean Probability Score".into(),
            fmt_opt(report.mean_probability_score, 4),
        ],
        vec!["Mean Quality Score".into(), fmt_opt(report.mean_quality, 4)],
        vec!["Recall".into(), fmt_opt(report.recall, 4)],
        vec!["Precision".into(), fmt_opt(report.precision, 4)],
        vec!["Alerts".into(), report.alert_count.to_string()],
        vec!["Events".into(), report.event_count.to_string()],
        vec!["Matched pairs".into(), report.pairs.len().to_string()],
    ];
    format!(
        "Month {}\n{}",
        report.month,
        render_table(&["Metric", "Value"], &rows)
    )
}

fn cmd_score(
    s: &mut Session,
    vocab: &Vocabulary,
    alerts: &Path,
    gsr: &Path,
) -> Result<(), CliError> {
    let month = s.month("score")?;
    let alerts = read_alerts(alerts, vocab)?;
    let events = read_gsr(gsr, vocab)?;
    let report = score_month(month, &alerts, &events);
    s.deliver(&to_json(&report)?, &score_table(&report))
}

fn cmd_baserate(s: &mut Session, vocab: &Vocabulary, gsr: &Path) -> Result<(), CliError> {
    let month = s.month("baserate")?;
    let events = read_gsr(gsr, vocab)?;
    let (from, to) = history_window(month);
    let history: Vec<GsrEvent> = events
        .into_iter()
        .filter(|e| {
            let m = YearMonth::of(e.event_date);
            m >= from && m <= to
        })
        .collect();
    let table = build_rate_table(&history, month).map_err(invalid)?;
    let alerts = generate_baserate_alerts(&table, month);
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|c| {
            vec![
                c.country.clone(),
                c.state.clone(),
                c.city.clone(),
                c.population.to_string(),
                format!(
                    "{}{}",
                    c.event_type.class,
                    if c.event_type.violent {
                        " (violent)"
                    } else {
                        ""
                    }
                ),
                c.trailing_count.to_string(),
                format!("{:.3}", c.monthly_rate),
                c.alerts_to_emit().to_string(),
            ]
        })
        .collect();
    let summary = format!(
        "Baserate forecast for {month} from {from}..{to}: {} cells, {} alerts\n{}",
        table.len(),
        alerts.len(),
        render_table(
            &[
                "Country",
                "State",
                "City",
                "Population",
                "Event type",
                "Count",
                "Rate",
                "Alerts"
            ],
            &rows
        )
    );
    s.deliver(&write_alerts(&alerts), &summary)
}

#[derive(Debug, Serialize)]
pub struct SurpriseOutput {
    pub month: YearMonth,
    pub ipf_iterations: usize,
    pub ipf_converged: bool,
    pub surprise: SurpriseResult,
    pub forecaster: ScoreReport,
    pub baserate: ScoreReport,
}

fn single_month(events: &[GsrEvent]) -> Result<YearMonth, CliError> {
    let months: BTreeSet<YearMonth> = events.iter().map(|e| YearMonth::of(e.event_date)).collect();
    match months.len() {
        0 => Err(invalid("current GSR file is empty")),
        1 => Ok(*months.iter().next().expect("one month")),
        _ => Err(invalid(format!(
            "current GSR file spans {} months; expected one",
            months.len()
        ))),
    }
}

pub fn run_surprise(
    vocab: &Vocabulary,
    history: &[GsrEvent],
    current: &[GsrEvent],
    alerts: &[Alert],
    month: Option<YearMonth>,
    sigma: f64,
) -> Result<SurpriseOutput, CliError> {
    let month = match month {
        Some(m) => m,
        None => single_month(current)?,
    };
    if let Some(e) = current.iter().find(|e| !month.contains(e.event_date)) {
        return Err(invalid(format!(
            "current event `{}` is not in {month}",
            e.id
        )));
    }
    if history.is_empty() {
        return Err(invalid("history GSR is empty"));
    }
    let (from, to) = history_window(month);
    if let Some(e) = history.iter().find(|e| {
        let m = YearMonth::of(e.event_date);
        m < from || m > to
    }) {
        return Err(invalid(format!(
            "history event `{}` is outside the three months {from}..{to}",
            e.id
        )));
    }
    let axes = CubeAxes::from_vocabulary(vocab);
    let history_cube = build_cube(history, &axes).map_err(invalid)?;
    let current_cube = build_cube(current, &axes).map_err(invalid)?;
    let fit = ipf_fit(&history_cube, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERATIONS);
    let surprise = detect_surprise(&fit, &current_cube, sigma).map_err(invalid)?;
    let (month_alerts, _) = month_slice(month, alerts, &[]);
    let forecaster = evaluate_truncated(month, current, &surprise, &month_alerts);
    let table = build_rate_table(history, month).map_err(invalid)?;
    let baserate_alerts = generate_baserate_alerts(&table, month);
    let baserate = evaluate_truncated(month, current, &surprise, &baserate_alerts);
    Ok(SurpriseOutput {
        month,
        ipf_iterations: fit.iterations_used,
        ipf_converged: fit.converged,
        surprise,
        forecaster,
        baserate,
    })
}

fn surprise_table(o: &SurpriseOutput) -> String {
    let cells: Vec<Vec<String>> = o
        .surprise
        .surprising_cells
        .iter()
        .map(|c| {
            vec![
                c.event_class.clone(),
                c.population.clone(),
                c.country.clone(),
                c.observed.to_string(),
                format!("{:.2}", c.expected),
                format!("{:.2}", c.z_score),
            ]
        })
        .collect();
    let metric_rows = |name: &str, f: fn(&ScoreReport) -> String| {
        vec![name.to_string(), f(&o.forecaster), f(&o.baserate)]
    };
    let rows = vec![
        metric_rows("Events in surprising cells", |r| r.event_count.to_string()),
        metric_rows("Alerts", |r| r.alert_count.to_string()),
        metric_rows("Recall", |r| fmt_opt(r.recall, 4)),
        metric_rows("Precision", |r| fmt_opt(r.precision, 4)),
        metric_rows("Mean Quality Score", |r| fmt_opt(r.mean_quality, 4)),
        metric_rows("Mean Lead-Time", |r| fmt_opt(r.mean_lead_time, 2)),
    ];
    format!(
        "Surprise analysis for {} ({} sigma, IPF {} sweeps{})\n{}\n{}",
        o.month,
        o.surprise.sigma_threshold,
        o.ipf_iterations,
        if o.ipf_converged {
            ""
        } else {
            ", not converged"
        },
        render_table(
            &[
                "Class",
                "Population",
                "Country",
                "Observed",
                "Expected",
                "z"
            ],
            &cells
        ),
        render_table(&["Metric", "Forecaster", "Baserate"], &rows)
    )
}

fn cmd_surprise(
    s: &mut Session,
    vocab: &Vocabulary,
    history: &Path,
    current: &Path,
    alerts: &Path,
    sigma: f64,
) -> Result<(), CliError> {
    let history = read_gsr(history, vocab)?;
    let current = read_gsr(current, vocab)?;
    let alerts = read_alerts(alerts, vocab)?;
    let out = run_surprise(vocab, &history, &current, &alerts, s.cli.month, sigma)?;
    s.deliver(&to_json(&out)?, &surprise_table(&out))
}

pub fn parse_tag_sets(specs: &[String]) -> Vec<BTreeSet<String>> {
    specs
        .iter()
        .map(|spec| {
            spec.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect()
        })
        .collect()
}

fn ablation_table(full: &AblationReport, reports: &[AblationReport]) -> String {
    let rows: Vec<Vec<String>> = std::iter::once(full)
        .chain(reports)
        .map(|r| {
            let m = &r.metrics;
            let d = &r.deltas_vs_full;
            vec![
                r.configuration
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(","),
                r.retained_alerts.to_string(),
                format!(
                    "{} ({})",
                    fmt_opt(m.mean_quality, 4),
                    fmt_delta(d.mean_quality)
                ),
                format!(
                    "{} ({})",
                    fmt_opt(m.mean_lead_time, 2),
                    fmt_delta(d.mean_lead_time)
                ),
                format!("{} ({})", fmt_opt(m.precision, 4), fmt_delta(d.precision)),
                format!("{} ({})", fmt_opt(m.recall, 4), fmt_delta(d.recall)),
            ]
        })
        .collect();
    render_table(
        &[
            "Sources",
            "Alerts",
            "Quality Score",
            "Lead Time",
            "Precision",
            "Recall",
        ],
        &rows,
    )
}

fn cmd_ablate(
    s: &mut Session,
    vocab: &Vocabulary,
    alerts: &Path,
    gsr: &Path,
    sources: &[String],
) -> Result<(), CliError> {
    let month = s.month("ablate")?;
    let (alerts, events) = month_slice(month, &read_alerts(alerts, vocab)?, &read_gsr(gsr, vocab)?);
    let mut sets = vec![known_tags(&alerts)];
    sets.extend(parse_tag_sets(sources));
    let mut reports = ablate(month, &alerts, &events, &sets).map_err(invalid)?;
    let full = reports.remove(0);
    let doc = serde_json::json!({ "month": month, "full": full, "ablations": reports });
    s.deliver(&to_json(&doc)?, &ablation_table(&full, &reports))
}

/// Trains on every month that has GSR events in the history files.
pub fn train_from_history(
    history_alerts: &[Alert],
    history_gsr: &[GsrEvent],
) -> Result<ExpectedQualityModel, CliError> {
    let months: BTreeSet<YearMonth> = history_gsr
        .iter()
        .map(|e| YearMonth::of(e.event_date))
        .chain(
            history_alerts
                .iter()
                .map(|a| YearMonth::of(a.predicted_date)),
        )
        .collect();
    let reports: Vec<ScoreReport> = months
        .into_iter()
        .map(|m| score_month(m, history_alerts, history_gsr))
        .collect();
    train_expected_quality(&reports, history_alerts).map_err(|e| CliError::Internal(e.to_string()))
}

fn curve_table(month: YearMonth, points: &[CurvePoint]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                format!("{:.2}", p.threshold),
                p.retained_alerts.to_string(),
                fmt_opt(p.recall, 4),
                fmt_opt(p.precision, 4),
                fmt_opt(p.mean_quality, 4),
            ]
        })
        .collect();
    format!(
        "Recall-quality curve for {month}\n{}",
        render_table(
            &[
                "Threshold",
                "Alerts",
                "Recall",
                "Precision",
                "Mean Quality Score"
            ],
            &rows
        )
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_curve(
    s: &mut Session,
    vocab: &Vocabulary,
    alerts: &Path,
    gsr: &Path,
    thresholds: &[f64],
    quality_model: Option<&Path>,
    history_alerts: Option<&Path>,
    history_gsr: Option<&Path>,
) -> Result<(), CliError> {
    let month = s.month("curve")?;
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
        return Err(invalid(format!("threshold {t} is not finite")));
    }
    let model = match (quality_model, history_alerts, history_gsr) {
        (Some(p), _, _) => read_json(p)?,
        (None, Some(a), Some(g)) => {
            train_from_history(&read_alerts(a, vocab)?, &read_gsr(g, vocab)?)?
        }
        _ => ExpectedQualityModel::default(),
    };
    let (alerts, events) = month_slice(month, &read_alerts(alerts, vocab)?, &read_gsr(gsr, vocab)?);
    let expected: Vec<f64> = alerts.iter().map(|a| expected_quality(a, &model)).collect();
    let points = recall_quality_curve(month, &alerts, &expected, &events, thresholds)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    s.deliver(&to_json(&points)?, &curve_table(month, &points))
}

/// Narrative context accepted on the command line; `week` may carry raw history.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextFile {
    #[serde(default)]
    system_name: Option<String>,
    #[serde(default)]
    recent_alert_counts: Option<(u32, u32, u32)>,
    #[serde(default)]
    week: Option<WeekInput>,
    #[serde(default)]
    audit_articles: Vec<String>,
    #[serde(default)]
    players: Vec<String>,
    #[serde(default)]
    reasons: Vec<String>,
    #[serde(default)]
    characterizations: Vec<String>,
}

fn cmd_narrate(
    s: &mut Session,
    vocab: &Vocabulary,
    alerts: &Path,
    alert_id: &str,
    context: Option<&Path>,
    count_similar: bool,
) -> Result<(), CliError> {
    let corpus = read_alerts(alerts, vocab)?;
    let alert = corpus.iter().find(|a| a.id == alert_id).ok_or_else(|| {
        invalid(format!(
            "alert `{alert_id}` not found in {}",
            alerts.display()
        ))
    })?;
    let file: ContextFile = match context {
        Some(p) => read_json(p)?,
        None => ContextFile::default(),
    };
    let mut ctx = NarrativeContext {
        system_name: file.system_name,
        recent_alert_counts: file.recent_alert_counts,
        week_stats: file
            .week
            .map(|w| w.evaluate())
            .transpose()
            .map_err(invalid)?,
        audit_articles: file.audit_articles,
        players: file.players,
        reasons: file.reasons,
        characterizations: file.characterizations,
    };
    if count_similar && ctx.recent_alert_counts.is_none() {
        ctx.recent_alert_counts = Some(similar_warning_counts(alert, &corpus));
    }
    let text = narrate(alert, &ctx) + "\n";
    match s.cli.format {
        Format::Table => s.deliver(&text, &text),
        Format::Json => {
            let doc = serde_json::json!({ "alert_id": alert.id, "narrative": text.trim_end() });
            s.deliver(&to_json(&doc)?, "")
        }
    }
}

fn cmd_generate(s: &mut Session, config: &Config) -> Result<(), CliError> {
    let seed = s
        .cli
        .seed
        .ok_or_else(|| invalid("`generate` requires --seed"))?;
    let dir = s
        .cli
        .out
        .clone()
        .ok_or_else(|| invalid("`generate` requires --out <directory>"))?;
    let profile = config
        .synthetic
        .clone()
        .unwrap_or_else(SyntheticProfile::example);
    let corpus = generate(&profile, seed).map_err(invalid)?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("gsr.jsonl"), &write_gsr(&corpus.gsr))?;
    write_file(&dir.join("alerts.jsonl"), &write_alerts(&corpus.alerts))?;
    let manifest = to_json(&corpus.manifest)?;
    write_file(&dir.join("manifest.json"), &manifest)?;
    match s.cli.format {
        Format::Json => s.print(&manifest),
        Format::Table => {
            let m = &corpus.manifest;
            let rows = vec![
                vec!["Seed".into(), m.seed.to_string()],
                vec![
                    "Months".into(),
                    m.months
                        .iter()
                        .map(|m| m.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ],
                vec!["Events".into(), m.event_count.to_string()],
                vec!["Alerts".into(), m.alert_count.to_string()],
                vec!["False alarms".into(), m.false_alarm_count.to_string()],
                vec!["Upticks".into(), m.upticks.len().to_string()],
            ];
            s.print(&format!(
                "Wrote {}\n{}",
                dir.display(),
                render_table(&["Field", "Value"], &rows)
            ))
        }
    }
}

#[derive(Debug, Serialize)]
struct PipelineSummary {
    inputs: usize,
    outputs: usize,
    after_fusion: usize,
    dead_letters: usize,
    duplicates_dropped: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_pipeline_run(
    s: &mut Session,
    config: &Config,
    vocab: &Vocabulary,
    input: &Path,
    dead_letters: Option<&Path>,
    threshold: Option<f64>,
    quality_model: Option<&Path>,
    no_dedup: bool,
) -> Result<(), CliError> {
    let section = config.pipeline.clone().unwrap_or_default();
    let stage_configs = if section.stages.is_empty() {
        default_stage_configs()
    } else {
        section.stages
    };
    let model: ExpectedQualityModel = match quality_model {
        Some(p) => read_json(p)?,
        None => ExpectedQualityModel::default(),
    };
    let ctx = Arc::new(HandlerContext {
        vocabulary: vocab.clone(),
        quality_model: model.clone(),
        threshold: threshold.unwrap_or(section.threshold),
    });
    let stages = build_stages(&stage_configs, ctx).map_err(invalid)?;
    let text =
        std::fs::read_to_string(input).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let now = chrono::Utc::now();
    let inputs: Vec<Envelope> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            Envelope::new(
                format!("line-{}", n + 1),
                now,
                Payload::Raw(Value::String(l.to_string())),
            )
        })
        .collect();
    let input_count = inputs.len();
    let result = run_pipeline(&stages, inputs).map_err(invalid)?;
    let mut alerts = Vec::new();
    let mut non_alerts = 0usize;
    for env in &result.outputs {
        match &env.payload {
            Payload::Alert(a) => alerts.push(a.clone()),
            _ => non_alerts += 1,
        }
    }
    if non_alerts > 0 {
        return Err(invalid(format!(
            "{non_alerts} pipeline outputs are not alerts; the last stage must emit alerts"
        )));
    }
    let output_count = alerts.len();
    if !no_dedup {
        alerts = deduplicate(&alerts, &model);
    }
    if let Some(path) = dead_letters {
        let mut body = String::new();
        for d in &result.dead_letters {
            body.push_str(
                &serde_json::to_string(d).map_err(|e| CliError::Internal(e.to_string()))?,
            );
            body.push('\n');
        }
        write_file(path, &body)?;
    }
    let summary = PipelineSummary {
        inputs: input_count,
        outputs: output_count,
        after_fusion: alerts.len(),
        dead_letters: result.dead_letters.len(),
        duplicates_dropped: result.duplicates_dropped,
    };
    let _ = writeln!(
        io::stderr(),
        "pipeline: {} inputs, {} outputs, {} after fusion, {} dead letters, {} duplicates dropped",
        summary.inputs,
        summary.outputs,
        summary.after_fusion,
        summary.dead_letters,
        summary.duplicates_dropped
    );
    let artifact = write_alerts(&alerts);
    match (s.cli.format, &s.cli.out) {
        (_, None) => s.print(&artifact),
        (Format::Json, Some(p)) => {
            write_file(p, &artifact)?;
            s.print(&to_json(&summary)?)
        }
        (Format::Table, Some(p)) => {
            write_file(p, &artifact)?;
            let rows: Vec<Vec<String>> = [
                ("Inputs", summary.inputs),
                ("Outputs", summary.outputs),
                ("After fusion", summary.after_fusion),
                ("Dead letters", summary.dead_letters),
                ("Duplicates dropped", summary.duplicates_dropped),
            ]
            .into_iter()
            .map(|(k, v)| vec![k.to_string(), v.to_string()])
            .collect();
            s.print(&render_table(&["Field", "Value"], &rows))
        }
    }
}

/// Runs a parsed command, writing its stdout output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let vocab = config.vocabulary();
    let mut s = Session { cli, out };
    match &cli.command {
        Command::Score { alerts, gsr } => cmd_score(&mut s, &vocab, alerts, gsr),
        Command::Baserate { gsr } => cmd_baserate(&mut s, &vocab, gsr),
        Command::Surprise {
            history,
            current,
            alerts,
            sigma,
        } => cmd_surprise(&mut s, &vocab, history, current, alerts, *sigma),
        Command::Ablate {
            alerts,
            gsr,
            sources,
        } => cmd_ablate(&mut s, &vocab, alerts, gsr, sources),
        Command::Curve {
            alerts,
            gsr,
            thresholds,
            quality_model,
            history_alerts,
            history_gsr,
        } => cmd_curve(
            &mut s,
            &vocab,
            alerts,
            gsr,
            thresholds,
            quality_model.as_deref(),
            history_alerts.as_deref(),
            history_gsr.as_deref(),
        ),
        Command::Narrate {
            alerts,
            alert_id,
            context,
            count_similar,
        } => cmd_narrate(
            &mut s,
            &vocab,
            alerts,
            alert_id,
            context.as_deref(),
            *count_similar,
        ),
        Command::Generate => cmd_generate(&mut s, &config),
        Command::PipelineRun {
            input,
            dead_letters,
            threshold,
            quality_model,
            no_dedup,
        } => cmd_pipeline_run(
            &mut s,
            &config,
            &vocab,
            input,
            dead_letters.as_deref(),
            *threshold,
            quality_model.as_deref(),
            *no_dedup,
        ),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("alertscore: {e}");
            e.exit_code()
        }
    }
}
