//! Alert-versus-event scoring: legality, component scores, optimal monthly
//! matching and the aggregate metrics derived from it.
//!
//! Every component score is a multiple of 1/42 (date in sevenths, location in
//! thirds, event type in halves), so the matcher works on exact integer
//! weights in units of 1/42 and ties are decided exactly.

pub mod assignment;

use std::collections::HashSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    normalize_place_name, Alert, EventType, GsrEvent, Location, Population, YearMonth,
};

/// Maximum |predicted - actual| in days for a legal pair; also the date-score denominator.
pub const DATE_WINDOW_DAYS: i64 = 7;

/// Quality is stored as an integer multiple of `1 / QUALITY_UNITS_PER_POINT` inside the matcher.
const QUALITY_UNITS_PER_POINT: i64 = 42;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("alert `{alert}` and event `{event}` are not a legal pair")]
    IllegalPair { alert: String, event: String },
    #[error("{alerts} alerts but {annotations} expected-quality annotations")]
    AnnotationMismatch { alerts: usize, annotations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub alert_id: String,
    pub event_id: String,
    pub date_score: f64,
    pub location_score: f64,
    pub event_type_score: f64,
    pub population_score: f64,
    pub quality: f64,
    pub lead_time_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub month: YearMonth,
    /// Set when the events were restricted to surprising cells.
    #[serde(default)]
    pub surprise_truncated: bool,
    pub alert_count: usize,
    pub event_count: usize,
    pub pairs: Vec<MatchPair>,
    pub unmatched_alert_ids: Vec<String>,
    pub unmatched_event_ids: Vec<String>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mean_quality: Option<f64>,
    pub mean_lead_time: Option<f64>,
    pub mean_probability_score: Option<f64>,
    pub perfect_count: usize,
}

impl ScoreReport {
    pub fn total_quality(&self) -> f64 {
        self.pairs.iter().map(|p| p.quality).sum()
    }
}

fn lower(s: &str) -> String {
    normalize_place_name(s)
}

/// Issued strictly before the event was reported, same country, dates within the window.
pub fn is_legal_pair(alert: &Alert, event: &GsrEvent) -> bool {
    alert.issued_at < event.report_date
        && lower(&alert.location.country) == lower(&event.location.country)
        && day_gap(alert.predicted_date, event.event_date) <= DATE_WINDOW_DAYS
}

fn day_gap(a: NaiveDate, b: NaiveDate) -> i64 {
    (a - b).num_days().abs()
}

pub fn date_score(predicted: NaiveDate, actual: NaiveDate) -> f64 {
    let gap = day_gap(predicted, actual).min(DATE_WINDOW_DAYS);
    1.0 - gap as f64 / DATE_WINDOW_DAYS as f64
}

/// Number of hierarchy levels credited: country, then state, then city (only under a state match).
fn location_levels(a: &Location, b: &Location) -> u32 {
    if lower(&a.country) != lower(&b.country) {
        return 0;
    }
    if lower(&a.state) != lower(&b.state) {
        return 1;
    }
    if lower(&a.city) != lower(&b.city) {
        return 2;
    }
    3
}

pub fn location_score(a: &Location, b: &Location) -> f64 {
    location_levels(a, b) as f64 / 3.0
}

fn event_type_halves(a: &EventType, b: &EventType) -> u32 {
    u32::from(lower(&a.class) == lower(&b.class)) + u32::from(a.violent == b.violent)
}

pub fn event_type_score(a: &EventType, b: &EventType) -> f64 {
    event_type_halves(a, b) as f64 / 2.0
}

pub fn population_score(a: &Population, b: &Population) -> f64 {
    if lower(a.as_str()) == lower(b.as_str()) {
        1.0
    } else {
        0.0
    }
}

fn require_legal(alert: &Alert, event: &GsrEvent) -> Result<(), ScoringError> {
    if is_legal_pair(alert, event) {
        Ok(())
    } else {
        Err(ScoringError::IllegalPair {
            alert: alert.id.clone(),
            event: event.id.clone(),
        })
    }
}

pub fn quality_score(alert: &Alert, event: &GsrEvent) -> Result<f64, ScoringError> {
    require_legal(alert, event)?;
    Ok(components(alert, event).quality)
}

/// Days from issuance to the event's report date.
pub fn lead_time(alert: &Alert, event: &GsrEvent) -> Result<i64, ScoringError> {
    require_legal(alert, event)?;
    Ok((event.report_date - alert.issued_at).num_days())
}

fn components(alert: &Alert, event: &GsrEvent) -> MatchPair {
    let date = date_score(alert.predicted_date, event.event_date);
    let location = location_score(&alert.location, &event.location);
    let event_type = event_type_score(&alert.event_type, &event.event_type);
    let population = population_score(&alert.population, &event.population);
    MatchPair {
        alert_id: alert.id.clone(),
        event_id: event.id.clone(),
        date_score: date,
        location_score: location,
        event_type_score: event_type,
        population_score: population,
        quality: date + location + event_type + population,
        lead_time_days: (event.report_date - alert.issued_at).num_days() as f64,
    }
}

/// Quality in 1/42 units; `None` for an illegal pair.
fn quality_units(alert: &Alert, event: &GsrEvent) -> Option<i64> {
    if !is_legal_pair(alert, event) {
        return None;
    }
    let gap = day_gap(alert.predicted_date, event.event_date);
    let per_day = QUALITY_UNITS_PER_POINT / DATE_WINDOW_DAYS;
    let date = per_day * (DATE_WINDOW_DAYS - gap);
    let location = 14 * location_levels(&alert.location, &event.location) as i64;
    let event_type = 21 * event_type_halves(&alert.event_type, &event.event_type) as i64;
    let population = QUALITY_UNITS_PER_POINT
        * (lower(alert.population.as_str()) == lower(event.population.as_str())) as i64;
    Some(date + location + event_type + population)
}

/// Mean over alerts of `1 - (p - o)^2`, where `o` is 1 for matched alerts.
pub fn probability_metric(alerts: &[Alert], matched_ids: &HashSet<&str>) -> Option<f64> {
    if alerts.is_empty() {
        return None;
    }
    let sum: f64 = alerts
        .iter()
        .map(|a| {
            let outcome = if matched_ids.contains(a.id.as_str()) {
                1.0
            } else {
                0.0
            };
            1.0 - (a.probability - outcome).powi(2)
        })
        .sum();
    Some(sum / alerts.len() as f64)
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    Some(values.sum::<f64>() / n as f64)
}

/// Optimal matching of one month's alerts and events, plus the aggregate metrics.
///
/// Alerts and events are ordered by id before matching, so the result does not
/// depend on input order.
pub fn match_month(month: YearMonth, alerts: &[Alert], events: &[GsrEvent]) -> ScoreReport {
    let mut alerts: Vec<&Alert> = alerts.iter().collect();
    let mut events: Vec<&GsrEvent> = events.iter().collect();
    alerts.sort_by(|a, b| a.id.cmp(&b.id));
    events.sort_by(|a, b| a.id.cmp(&b.id));

    let weights: Vec<Vec<Option<i64>>> = alerts
        .iter()
        .map(|a| events.iter().map(|e| quality_units(a, e)).collect())
        .collect();
    let matching = assignment::max_weight_matching(&weights);

    let mut pairs = Vec::new();
    let mut event_used = vec![false; events.len()];
    let mut unmatched_alert_ids = Vec::new();
    for (a, choice) in alerts.iter().zip(&matching) {
        match choice {
            Some(e) => {
                event_used[*e] = true;
                pairs.push(components(a, events[*e]));
            }
            None => unmatched_alert_ids.push(a.id.clone()),
        }
    }
    let unmatched_event_ids: Vec<String> = events
        .iter()
        .zip(&event_used)
        .filter(|(_, used)| !**used)
        .map(|(e, _)| e.id.clone())
        .collect();

    let matched: HashSet<&str> = pairs.iter().map(|p| p.alert_id.as_str()).collect();
    let owned: Vec<Alert> = alerts.iter().map(|a| (*a).clone()).collect();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);

    ScoreReport {
        month,
        surprise_truncated: false,
        alert_count: alerts.len(),
        event_count: events.len(),
        precision: ratio(pairs.len(), alerts.len()),
        recall: ratio(pairs.len(), events.len()),
        mean_quality: mean(pairs.iter().map(|p| p.quality)),
        mean_lead_time: mean(pairs.iter().map(|p| p.lead_time_days)),
        mean_probability_score: probability_metric(&owned, &matched),
        perfect_count: pairs.iter().filter(|p| p.quality == 4.0).count(),
        pairs,
        unmatched_alert_ids,
        unmatched_event_ids,
    }
}

/// Alerts scored in `month` (by predicted date) and events belonging to it (by event date).
pub fn month_slice(
    month: YearMonth,
    alerts: &[Alert],
    events: &[GsrEvent],
) -> (Vec<Alert>, Vec<GsrEvent>) {
    (
        alerts
            .iter()
            .filter(|a| month.contains(a.predicted_date))
            .cloned()
            .collect(),
        events
            .iter()
            .filter(|e| month.contains(e.event_date))
            .cloned()
            .collect(),
    )
}

/// Filters both corpora to `month` and scores it.
pub fn score_month(month: YearMonth, alerts: &[Alert], events: &[GsrEvent]) -> ScoreReport {
    let (a, e) = month_slice(month, alerts, events);
    match_month(month, &a, &e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub retained_alerts: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub mean_quality: Option<f64>,
}

/// Rescores the month once per threshold, keeping alerts whose expected quality
/// is at least the threshold. Thresholds are visited in ascending order.
pub fn suppression_sweep(
    month: YearMonth,
    alerts: &[Alert],
    expected_quality: &[f64],
    events: &[GsrEvent],
    thresholds: &[f64],
) -> Result<Vec<(f64, ScoreReport)>, ScoringError> {
    if alerts.len() != expected_quality.len() {
        return Err(ScoringError::AnnotationMismatch {
            alerts: alerts.len(),
            annotations: expected_quality.len(),
        });
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted
        .into_iter()
        .map(|theta| {
            let kept: Vec<Alert> = alerts
                .iter()
                .zip(expected_quality)
                .filter(|(_, q)| **q >= theta)
                .map(|(a, _)| a.clone())
                .collect();
            (theta, match_month(month, &kept, events))
        })
        .collect())
}

pub fn recall_quality_curve(
    month: YearMonth,
    alerts: &[Alert],
    expected_quality: &[f64],
    events: &[GsrEvent],
    thresholds: &[f64],
) -> Result<Vec<CurvePoint>, ScoringError> {
    Ok(
        suppression_sweep(month, alerts, expected_quality, events, thresholds)?
            .into_iter()
            .map(|(threshold, r)| CurvePoint {
                threshold,
                retained_alerts: r.alert_count,
                recall: r.recall,
                precision: r.precision,
                mean_quality: r.mean_quality,
            })
            .collect(),
    )
}

#[cfg(test)]
pub(crate) mod testkit {
    use super::*;
    use crate::domain::EventType;
    use std::collections::BTreeSet;

    pub fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    pub fn event(id: &str, event_date: &str, country: &str, state: &str, city: &str) -> GsrEvent {
        let d = date(event_date);
        GsrEvent {
            id: id.into(),
            event_date: d,
            report_date: d.succ_opt().unwrap(),
            location: Location::new(country, state, city),
            population: Population("labor".into()),
            event_type: EventType {
                class: "employment".into(),
                violent: false,
            },
        }
    }

    /// An alert copying the event's fields, issued three days before it.
    pub fn alert_for(id: &str, e: &GsrEvent) -> Alert {
        Alert {
            id: id.into(),
            issued_at: e.event_date - chrono::Days::new(3),
            predicted_date: e.event_date,
            location: e.location.clone(),
            population: e.population.clone(),
            event_type: e.event_type.clone(),
            probability: 0.5,
            model: "test".into(),
            sources: BTreeSet::from(["news".to_string()]),
        }
    }
}
