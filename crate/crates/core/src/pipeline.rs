//! A share-nothing stage pipeline (ingestion, enrichment, modeling, selection)
//! plus the selection-stage logic: fusion of duplicate alerts and suppression
//! by expected quality.
//!
//! Each stage runs on its own worker thread and talks to its neighbours only
//! through bounded FIFO queues. Handlers see one message at a time and return
//! payloads; the runner owns message ids and provenance. Delivery is
//! at-least-once, so every worker drops messages whose id it has already seen.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{normalize_place_name, parse_alert_record, Alert, Vocabulary};
use crate::scoring::ScoreReport;

pub const QUEUE_CAPACITY: usize = 64;
pub const PRIOR_QUALITY: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("duplicate stage name `{0}`")]
    DuplicateStage(String),
    #[error("stage `{stage}` ({kind:?}) is out of order after a {previous:?} stage")]
    OutOfOrder {
        stage: String,
        kind: StageKind,
        previous: StageKind,
    },
    #[error("unknown handler `{0}`")]
    UnknownHandler(String),
    #[error("report references alert `{0}` which is not in the alert history")]
    UnknownAlert(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Ingestion,
    Enrichment,
    Modeling,
    Selection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raw(Value),
    Enriched(Value),
    Alert(Alert),
}

impl Payload {
    fn kind_name(&self) -> &'static str {
        match self {
            Payload::Raw(_) => "raw",
            Payload::Enriched(_) => "enriched",
            Payload::Alert(_) => "alert",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub message_id: String,
    pub created_at: DateTime<Utc>,
    pub provenance: Vec<String>,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(message_id: impl Into<String>, created_at: DateTime<Utc>, payload: Payload) -> Self {
        Envelope {
            message_id: message_id.into(),
            created_at,
            provenance: Vec::new(),
            payload,
        }
    }
}

pub type HandlerResult = Result<Vec<Payload>, String>;
pub type Handler = Arc<dyn Fn(&Envelope) -> HandlerResult + Send + Sync>;

#[derive(Clone)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    pub handler: Handler,
}

impl StageSpec {
    pub fn new(
        name: impl Into<String>,
        kind: StageKind,
        handler: impl Fn(&Envelope) -> HandlerResult + Send + Sync + 'static,
    ) -> Self {
        StageSpec {
            name: name.into(),
            kind,
            handler: Arc::new(handler),
        }
    }
}

impl std::fmt::Debug for StageSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StageSpec")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub message_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    pub outputs: Vec<Envelope>,
    pub dead_letters: Vec<DeadLetter>,
    /// Redelivered messages dropped by receiver-side dedup, summed over stages.
    pub duplicates_dropped: usize,
}

pub fn validate_stages(stages: &[StageSpec]) -> Result<(), PipelineError> {
    let mut names = HashSet::new();
    let mut previous: Option<StageKind> = None;
    for s in stages {
        if !names.insert(s.name.as_str()) {
            return Err(PipelineError::DuplicateStage(s.name.clone()));
        }
        if let Some(p) = previous {
            if s.kind < p {
                return Err(PipelineError::OutOfOrder {
                    stage: s.name.clone(),
                    kind: s.kind,
                    previous: p,
                });
            }
        }
        previous = Some(s.kind);
    }
    Ok(())
}

/// Per-stage state: the handler and the ids already delivered to it.
struct Worker<'a> {
    spec: &'a StageSpec,
    seen: HashSet<String>,
    dead: Vec<DeadLetter>,
    duplicates: usize,
}

impl<'a> Worker<'a> {
    fn new(spec: &'a StageSpec) -> Self {
        Worker {
            spec,
            seen: HashSet::new(),
            dead: Vec::new(),
            duplicates: 0,
        }
    }

    /// Handles one delivery, returning the envelopes to pass downstream.
    fn process(&mut self, env: Envelope) -> Vec<Envelope> {
        if !self.seen.insert(env.message_id.clone()) {
            self.duplicates += 1;
            return Vec::new();
        }
        let handler = &self.spec.handler;
        let result = catch_unwind(AssertUnwindSafe(|| handler(&env)))
            .unwrap_or_else(|panic| Err(panic_message(panic.as_ref())));
        match result {
            Ok(payloads) => {
                let fan_out = payloads.len();
                payloads
                    .into_iter()
                    .enumerate()
                    .map(|(n, payload)| {
                        let mut provenance = env.provenance.clone();
                        provenance.push(self.spec.name.clone());
                        let message_id = if fan_out == 1 {
                            env.message_id.clone()
                        } else {
                            format!("{}/{}", env.message_id, n)
                        };
                        Envelope {
                            message_id,
                            created_at: env.created_at,
                            provenance,
                            payload,
                        }
                    })
                    .collect()
            }
            Err(error) => {
                self.dead.push(DeadLetter {
                    message_id: env.message_id,
                    stage: self.spec.name.clone(),
                    error,
                });
                Vec::new()
            }
        }
    }
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("handler panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("handler panicked: {s}")
    } else {
        "handler panicked".to_string()
    }
}

fn reject_non_raw(inputs: Vec<Envelope>, dead: &mut Vec<DeadLetter>) -> Vec<Envelope> {
    inputs
        .into_iter()
        .filter_map(|env| match env.payload {
            Payload::Raw(_) => Some(env),
            ref other => {
                dead.push(DeadLetter {
                    message_id: env.message_id.clone(),
                    stage: "input".into(),
                    error: format!("expected a raw payload, got {}", other.kind_name()),
                });
                None
            }
        })
        .collect()
}

/// Runs every stage on its own thread, connected by bounded queues.
pub fn run_pipeline(
    stages: &[StageSpec],
    inputs: Vec<Envelope>,
) -> Result<PipelineOutput, PipelineError> {
    validate_stages(stages)?;
    let mut input_dead = Vec::new();
    let inputs = reject_non_raw(inputs, &mut input_dead);
    if stages.is_empty() {
        return Ok(PipelineOutput {
            outputs: inputs,
            dead_letters: input_dead,
            duplicates_dropped: 0,
        });
    }

    let (results, outputs) = std::thread::scope(|scope| {
        let (first_tx, mut rx): (SyncSender<Envelope>, Receiver<Envelope>) =
            sync_channel(QUEUE_CAPACITY);
        let mut handles = Vec::new();
        for spec in stages {
            let (tx, next_rx) = sync_channel::<Envelope>(QUEUE_CAPACITY);
            let upstream = std::mem::replace(&mut rx, next_rx);
            handles.push(scope.spawn(move || {
                let mut worker = Worker::new(spec);
                for env in upstream {
                    for out in worker.process(env) {
                        tx.send(out).expect("downstream worker alive");
                    }
                }
                (worker.dead, worker.duplicates)
            }));
        }
        let feeder = scope.spawn(move || {
            for env in inputs {
                first_tx.send(env).expect("first worker alive");
            }
        });
        let outputs: Vec<Envelope> = rx.iter().collect();
        feeder.join().expect("feeder thread");
        let results: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("stage worker"))
            .collect();
        (results, outputs)
    });

    let mut out = PipelineOutput {
        outputs,
        dead_letters: input_dead,
        duplicates_dropped: 0,
    };
    for (dead, dups) in results {
        out.dead_letters.extend(dead);
        out.duplicates_dropped += dups;
    }
    Ok(out)
}

/// Single-threaded reference execution: each stage drains fully before the next.
pub fn run_pipeline_sequential(
    stages: &[StageSpec],
    inputs: Vec<Envelope>,
) -> Result<PipelineOutput, PipelineError> {
    validate_stages(stages)?;
    let mut out = PipelineOutput::default();
    let mut current = reject_non_raw(inputs, &mut out.dead_letters);
    for spec in stages {
        let mut worker = Worker::new(spec);
        current = current
            .into_iter()
            .flat_map(|e| worker.process(e))
            .collect();
        out.dead_letters.extend(worker.dead);
        out.duplicates_dropped += worker.duplicates;
    }
    out.outputs = current;
    Ok(out)
}

/// Mean matched quality per (model, country), with global and prior fallbacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedQualityModel {
    /// model name -> country -> mean quality
    pub per_key_means: BTreeMap<String, BTreeMap<String, f64>>,
    pub global_mean: Option<f64>,
    pub prior: f64,
}

impl Default for ExpectedQualityModel {
    fn default() -> Self {
        ExpectedQualityModel {
            per_key_means: BTreeMap::new(),
            global_mean: None,
            prior: PRIOR_QUALITY,
        }
    }
}

impl ExpectedQualityModel {
    pub fn key_count(&self) -> usize {
        self.per_key_means.values().map(BTreeMap::len).sum()
    }
}

pub fn expected_quality(alert: &Alert, model: &ExpectedQualityModel) -> f64 {
    let q = model
        .per_key_means
        .get(&alert.model)
        .and_then(|by_country| by_country.get(&alert.location.country))
        .copied()
        .or(model.global_mean)
        .unwrap_or(model.prior);
    q.clamp(0.0, 4.0)
}

/// Alerts with expected quality at least `threshold`, in input order.
pub fn suppress(alerts: &[Alert], model: &ExpectedQualityModel, threshold: f64) -> Vec<Alert> {
    alerts
        .iter()
        .filter(|a| expected_quality(a, model) >= threshold)
        .cloned()
        .collect()
}

/// Unmatched alerts count as quality 0.
pub fn train_expected_quality(
    past_reports: &[ScoreReport],
    past_alerts: &[Alert],
) -> Result<ExpectedQualityModel, PipelineError> {
    let by_id: HashMap<&str, &Alert> = past_alerts.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    let mut global = (0.0, 0usize);
    let observations = past_reports.iter().flat_map(|r| {
        r.pairs
            .iter()
            .map(|p| (p.alert_id.as_str(), p.quality))
            .chain(r.unmatched_alert_ids.iter().map(|id| (id.as_str(), 0.0)))
    });
    for (id, quality) in observations {
        let alert = by_id
            .get(id)
            .ok_or_else(|| PipelineError::UnknownAlert(id.to_string()))?;
        let entry = sums
            .entry((alert.model.clone(), alert.location.country.clone()))
            .or_default();
        entry.0 += quality;
        entry.1 += 1;
        global.0 += quality;
        global.1 += 1;
    }
    let mut model = ExpectedQualityModel::default();
    for ((name, country), (sum, n)) in sums {
        model
            .per_key_means
            .entry(name)
            .or_default()
            .insert(country, sum / n as f64);
    }
    if global.1 > 0 {
        model.global_mean = Some(global.0 / global.1 as f64);
    }
    Ok(model)
}

type DedupKey = (String, String, chrono::NaiveDate, String, String);

fn dedup_key(a: &Alert) -> DedupKey {
    (
        normalize_place_name(&a.location.country),
        normalize_place_name(&a.location.city),
        a.predicted_date,
        normalize_place_name(a.population.as_str()),
        normalize_place_name(&a.event_type.class),
    )
}

/// Fuses alerts sharing (country, city, predicted date, population, event class).
///
/// The survivor of each group is its highest-expected-quality alert (earliest on
/// ties), carrying the union of the group's sources; groups keep first-seen order.
pub fn deduplicate(alerts: &[Alert], model: &ExpectedQualityModel) -> Vec<Alert> {
    let mut order: Vec<DedupKey> = Vec::new();
    let mut groups: HashMap<DedupKey, (Alert, f64, BTreeSet<String>)> = HashMap::new();
    for a in alerts {
        let key = dedup_key(a);
        let q = expected_quality(a, model);
        match groups.get_mut(&key) {
            Some((best, best_q, sources)) => {
                sources.extend(a.sources.iter().cloned());
                if q > *best_q {
                    *best = a.clone();
                    *best_q = q;
                }
            }
            None => {
                order.push(key.clone());
                groups.insert(key, (a.clone(), q, a.sources.clone()));
            }
        }
    }
    order
        .into_iter()
        .map(|k| {
            let (mut best, _, sources) = groups.remove(&k).expect("group exists");
            best.sources = sources;
            best
        })
        .collect()
}

/// Shared read-only inputs for the built-in handlers.
#[derive(Debug, Clone)]
pub struct HandlerContext {
    pub vocabulary: Vocabulary,
    pub quality_model: ExpectedQualityModel,
    pub threshold: f64,
}

/// Stage declaration as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    pub handler: String,
}

pub const BUILTIN_HANDLERS: &[&str] = &[
    "identity",
    "parse-json",
    "canonicalize-location",
    "alert-from-record",
    "expected-quality-gate",
];

/// Resolves a built-in handler id.
///
/// - `identity`: passes the payload through.
/// - `parse-json`: raw text line to a raw JSON object.
/// - `canonicalize-location`: resolves the country against the vocabulary, trims place names.
/// - `alert-from-record`: enriched record to a validated alert.
/// - `expected-quality-gate`: drops alerts below the context threshold.
pub fn builtin_handler(id: &str, ctx: Arc<HandlerContext>) -> Result<Handler, PipelineError> {
    let handler: Handler = match id {
        "identity" => Arc::new(|env: &Envelope| Ok(vec![env.payload.clone()])),
        "parse-json" => Arc::new(|env: &Envelope| match &env.payload {
            Payload::Raw(Value::String(line)) => serde_json::from_str::<Value>(line)
                .map(|v| vec![Payload::Raw(v)])
                .map_err(|e| format!("invalid JSON: {e}")),
            Payload::Raw(v @ Value::Object(_)) => Ok(vec![Payload::Raw(v.clone())]),
            other => Err(format!("expected raw text, got {}", other.kind_name())),
        }),
        "canonicalize-location" => Arc::new(move |env: &Envelope| match &env.payload {
            Payload::Raw(Value::Object(map)) => {
                let mut map = map.clone();
                if let Some(Value::String(c)) = map.get("country") {
                    let canonical = ctx.vocabulary.country(c).map_err(|e| e.to_string())?;
                    map.insert("country".into(), Value::String(canonical));
                }
                for field in ["state", "city"] {
                    if let Some(Value::String(s)) = map.get(field) {
                        let trimmed = s.split_whitespace().collect::<Vec<_>>().join(" ");
                        map.insert(field.into(), Value::String(trimmed));
                    }
                }
                Ok(vec![Payload::Enriched(Value::Object(map))])
            }
            other => Err(format!("expected a raw record, got {}", other.kind_name())),
        }),
        "alert-from-record" => {
            let ctx = ctx.clone();
            Arc::new(move |env: &Envelope| match &env.payload {
                Payload::Enriched(v) => parse_alert_record(&v.to_string(), &ctx.vocabulary)
                    .map(|a| vec![Payload::Alert(a)])
                    .map_err(|e| e.to_string()),
                other => Err(format!(
                    "expected an enriched record, got {}",
                    other.kind_name()
                )),
            })
        }
        "expected-quality-gate" => Arc::new(move |env: &Envelope| match &env.payload {
            Payload::Alert(a) => {
                if expected_quality(a, &ctx.quality_model) >= ctx.threshold {
                    Ok(vec![env.payload.clone()])
                } else {
                    Ok(Vec::new())
                }
            }
            other => Err(format!("expected an alert, got {}", other.kind_name())),
        }),
        other => return Err(PipelineError::UnknownHandler(other.to_string())),
    };
    Ok(handler)
}

pub fn build_stages(
    configs: &[StageConfig],
    ctx: Arc<HandlerContext>,
) -> Result<Vec<StageSpec>, PipelineError> {
    let stages = configs
        .iter()
        .map(|c| {
            Ok(StageSpec {
                name: c.name.clone(),
                kind: c.kind,
                handler: builtin_handler(&c.handler, ctx.clone())?,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    validate_stages(&stages)?;
    Ok(stages)
}

/// The default four-stage topology for turning alert record lines into selected alerts.
pub fn default_stage_configs() -> Vec<StageConfig> {
    [
        ("ingest", StageKind::Ingestion, "parse-json"),
        ("enrich", StageKind::Enrichment, "canonicalize-location"),
        ("model", StageKind::Modeling, "alert-from-record"),
        ("select", StageKind::Selection, "expected-quality-gate"),
    ]
    .into_iter()
    .map(|(name, kind, handler)| StageConfig {
        name: name.into(),
        kind,
        handler: handler.into(),
    })
    .collect()
}
