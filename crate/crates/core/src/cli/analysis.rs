//! Source ablation, week significance and alert narratives.

use std::collections::BTreeSet;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::domain::{normalize_place_name, Alert, GsrEvent, YearMonth};
use crate::scoring::{match_month, ScoreReport};

/// p-values below this make the narrative call a week significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const DEFAULT_SYSTEM_NAME: &str = "EMBERS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("unknown source tag `{tag}`; known tags: {}", known.iter().cloned().collect::<Vec<_>>().join(", "))]
    UnknownTag {
        tag: String,
        known: BTreeSet<String>,
    },
    #[error("alert `{0}` carries no source tags")]
    MissingSources(String),
    #[error("week significance is undefined when the history standard deviation is {0}")]
    UndefinedSignificance(f64),
    #[error("week index {0} outside 1..=53")]
    WeekIndex(u32),
    #[error("week significance needs at least two history values, got {0}")]
    ShortHistory(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationMetrics {
    pub mean_quality: Option<f64>,
    pub mean_lead_time: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl AblationMetrics {
    pub fn of(report: &ScoreReport) -> Self {
        AblationMetrics {
            mean_quality: report.mean_quality,
            mean_lead_time: report.mean_lead_time,
            precision: report.precision,
            recall: report.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub configuration: BTreeSet<String>,
    pub retained_alerts: usize,
    pub metrics: AblationMetrics,
    /// Signed percentages relative to the full run.
    pub deltas_vs_full: AblationMetrics,
}

/// `(ablated - full) / full * 100`; 0 when both are 0, absent when only `full` is.
pub fn percent_delta(full: Option<f64>, ablated: Option<f64>) -> Option<f64> {
    let (f, a) = (full?, ablated?);
    if f == 0.0 {
        return (a == 0.0).then_some(0.0);
    }
    Some((a - f) / f * 100.0)
}

fn deltas(full: &AblationMetrics, ablated: &AblationMetrics) -> AblationMetrics {
    AblationMetrics {
        mean_quality: percent_delta(full.mean_quality, ablated.mean_quality),
        mean_lead_time: percent_delta(full.mean_lead_time, ablated.mean_lead_time),
        precision: percent_delta(full.precision, ablated.precision),
        recall: percent_delta(full.recall, ablated.recall),
    }
}

pub fn known_tags(alerts: &[Alert]) -> BTreeSet<String> {
    alerts
        .iter()
        .flat_map(|a| a.sources.iter().cloned())
        .collect()
}

/// Rescores `month` once per tag set, keeping alerts that carry a retained tag.
pub fn ablate(
    month: YearMonth,
    alerts: &[Alert],
    events: &[GsrEvent],
    source_sets: &[BTreeSet<String>],
) -> Result<Vec<AblationReport>, AnalysisError> {
    if let Some(a) = alerts.iter().find(|a| a.sources.is_empty()) {
        return Err(AnalysisError::MissingSources(a.id.clone()));
    }
    let known = known_tags(alerts);
    for tag in source_sets.iter().flatten() {
        if !known.contains(tag) {
            return Err(AnalysisError::UnknownTag {
                tag: tag.clone(),
                known: known.clone(),
            });
        }
    }
    let full = AblationMetrics::of(&match_month(month, alerts, events));
    Ok(source_sets
        .iter()
        .map(|set| {
            let kept: Vec<Alert> = alerts
                .iter()
                .filter(|a| !a.sources.is_disjoint(set))
                .cloned()
                .collect();
            let metrics = AblationMetrics::of(&match_month(month, &kept, events));
            AblationReport {
                configuration: set.clone(),
                retained_alerts: kept.len(),
                deltas_vs_full: deltas(&full, &metrics),
                metrics,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeekSignificance {
    pub week_index: u32,
    pub observed: f64,
    pub history_mean: f64,
    pub history_std: f64,
    pub z_score: f64,
    pub p_value: f64,
}

impl WeekSignificance {
    pub fn is_significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// Two-sided normal tail probability of `z`.
pub fn two_sided_p(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

pub fn week_significance_from_moments(
    history_mean: f64,
    history_std: f64,
    observed: f64,
    week_index: u32,
) -> Result<WeekSignificance, AnalysisError> {
    if !(1..=53).contains(&week_index) {
        return Err(AnalysisError::WeekIndex(week_index));
    }
    if !(history_std > 0.0 && history_std.is_finite()) {
        return Err(AnalysisError::UndefinedSignificance(history_std));
    }
    let z_score = (observed - history_mean) / history_std;
    Ok(WeekSignificance {
        week_index,
        observed,
        history_mean,
        history_std,
        z_score,
        p_value: two_sided_p(z_score),
    })
}

/// Uses the sample (n - 1) standard deviation of `weekly_history`.
pub fn week_significance(
    weekly_history: &[f64],
    observed: f64,
    week_index: u32,
) -> Result<WeekSignificance, AnalysisError> {
    let n = weekly_history.len();
    if n < 2 {
        return Err(AnalysisError::ShortHistory(n));
    }
    let mean = weekly_history.iter().sum::<f64>() / n as f64;
    let var = weekly_history
        .iter()
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64;
    week_significance_from_moments(mean, var.sqrt(), observed, week_index)
}

/// Week statistics as supplied in a narrative context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeekInput {
    Moments {
        history_mean: f64,
        history_std: f64,
        observed: f64,
        week_index: u32,
    },
    History {
        weekly_history: Vec<f64>,
        observed: f64,
        week_index: u32,
    },
}

impl WeekInput {
    pub fn evaluate(&self) -> Result<WeekSignificance, AnalysisError> {
        match self {
            WeekInput::Moments {
                history_mean,
                history_std,
                observed,
                week_index,
            } => {
                week_significance_from_moments(*history_mean, *history_std, *observed, *week_index)
            }
            WeekInput::History {
                weekly_history,
                observed,
                week_index,
            } => week_significance(weekly_history, *observed, *week_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarrativeContext {
    #[serde(default)]
    pub system_name: Option<String>,
    /// Similar warnings in the last 2, 7 and 30 days.
    #[serde(default)]
    pub recent_alert_counts: Option<(u32, u32, u32)>,
    #[serde(default)]
    pub week_stats: Option<WeekSignificance>,
    #[serde(default)]
    pub audit_articles: Vec<String>,
    #[serde(default)]
    pub players: Vec<String>,
    #[serde(default)]
    pub reasons: Vec<String>,
    #[serde(default)]
    pub characterizations: Vec<String>,
}

/// Counts other alerts with the same city and event class issued in the
/// 2, 7 and 30 days up to and including `alert.issued_at`.
pub fn similar_warning_counts(alert: &Alert, corpus: &[Alert]) -> (u32, u32, u32) {
    let city = normalize_place_name(&alert.location.city);
    let class = normalize_place_name(&alert.event_type.class);
    let similar: Vec<NaiveDate> = corpus
        .iter()
        .filter(|a| {
            a.id != alert.id
                && a.issued_at <= alert.issued_at
                && normalize_place_name(&a.location.city) == city
                && normalize_place_name(&a.event_type.class) == class
        })
        .map(|a| a.issued_at)
        .collect();
    let within = |days: u64| {
        let from = alert.issued_at - Days::new(days);
        similar.iter().filter(|d| **d > from).count() as u32
    };
    (within(2), within(7), within(30))
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{}, and {}", init.join(", "), last),
    }
}

pub fn forecast_sentence(alert: &Alert, system_name: &str) -> String {
    let manner = if alert.event_type.violent {
        "violent"
    } else {
        "non-violent"
    };
    let place: Vec<&str> = [
        alert.location.city.as_str(),
        alert.location.state.as_str(),
        alert.location.country.as_str(),
    ]
    .into_iter()
    .filter(|s| !s.trim().is_empty())
    .collect();
    let population = alert.population.as_str().replace('-', " ");
    let group = if population.ends_with("population") {
        population
    } else {
        format!("{population} sector")
    };
    format!(
        "{system_name} forecasts that there will be a {manner} protest on {} in {} involving the {group} over {} issues (probability {:.2}).",
        alert.predicted_date.format("%B %-d, %Y"),
        place.join(", "),
        alert.event_type.class.replace('-', " "),
        alert.probability,
    )
}

/// Renders the alert summary. Sections absent from `context` are left out.
pub fn narrate(alert: &Alert, context: &NarrativeContext) -> String {
    let system = context
        .system_name
        .as_deref()
        .unwrap_or(DEFAULT_SYSTEM_NAME);
    let mut out = vec![forecast_sentence(alert, system)];
    if let Some((d2, d7, d30)) = context.recent_alert_counts {
        out.push(format!(
            "There were {d2}, {d7}, and {d30} other similar warnings in last 2, 7 and 30 days, respectively."
        ));
    }
    if let Some(w) = &context.week_stats {
        let verdict = if w.is_significant() {
            "is found to be statistically significant"
        } else {
            "is not found to be statistically significant"
        };
        out.push(format!(
            "This week (week {}) {verdict} (pval={:.6}, zscore={:.3}).",
            w.week_index, w.p_value, w.z_score
        ));
    }
    if !context.audit_articles.is_empty() {
        let mut s = "Audit trail of the warning:".to_string();
        for a in &context.audit_articles {
            s.push_str("\n  - ");
            s.push_str(a);
        }
        out.push(s);
    }
    if !context.players.is_empty() {
        out.push(format!("Major players: {}.", join_list(&context.players)));
    }
    if !context.reasons.is_empty() {
        out.push(format!("Reasons: {}.", join_list(&context.reasons)));
    }
    if !context.characterizations.is_empty() {
        out.push(format!(
            "Protests are characterized by {}.",
            join_list(&context.characterizations)
        ));
    }
    out.join("\n")
}
