use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use alertscore::pipeline::{
    run_pipeline, run_pipeline_sequential, Envelope, Payload, StageKind, StageSpec,
};
use chrono::DateTime;
use serde_json::{json, Value};

fn inputs(n: usize) -> Vec<Envelope> {
    let t = DateTime::from_timestamp(0, 0).unwrap();
    (0..n)
        .map(|i| Envelope::new(format!("msg-{i:05}"), t, Payload::Raw(json!({ "n": i }))))
        .collect()
}

/// Appends the stage name to a `trail` array and tags the payload kind for the stage.
fn tagging_stage(name: &'static str, kind: StageKind) -> StageSpec {
    StageSpec::new(name, kind, move |env: &Envelope| {
        let mut v = match &env.payload {
            Payload::Raw(v) | Payload::Enriched(v) => v.clone(),
            Payload::Alert(_) => return Err("unexpected alert".into()),
        };
        let trail = v
            .as_object_mut()
            .unwrap()
            .entry("trail")
            .or_insert_with(|| json!([]));
        trail.as_array_mut().unwrap().push(Value::from(name));
        Ok(vec![match kind {
            StageKind::Ingestion => Payload::Raw(v),
            _ => Payload::Enriched(v),
        }])
    })
}

fn four_stages() -> Vec<StageSpec> {
    vec![
        tagging_stage("ingest", StageKind::Ingestion),
        tagging_stage("enrich", StageKind::Enrichment),
        tagging_stage("model", StageKind::Modeling),
        tagging_stage("select", StageKind::Selection),
    ]
}

#[test]
fn thousand_messages_flow_in_order() {
    let out = run_pipeline(&four_stages(), inputs(1000)).unwrap();
    assert_eq!(out.outputs.len(), 1000);
    assert!(out.dead_letters.is_empty());
    for (i, env) in out.outputs.iter().enumerate() {
        assert_eq!(env.message_id, format!("msg-{i:05}"));
        assert_eq!(env.provenance, ["ingest", "enrich", "model", "select"]);
        match &env.payload {
            Payload::Enriched(v) => {
                assert_eq!(v["n"], i);
                assert_eq!(v["trail"], json!(["ingest", "enrich", "model", "select"]));
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn concurrent_equals_sequential() {
    let mut stages = four_stages();
    stages[2] = StageSpec::new("model", StageKind::Modeling, |env: &Envelope| {
        if env.message_id.ends_with('7') {
            Err("seven".into())
        } else {
            Ok(vec![env.payload.clone()])
        }
    });
    let mut batch = inputs(500);
    batch.extend(inputs(20));
    let a = run_pipeline(&stages, batch.clone()).unwrap();
    let b = run_pipeline_sequential(&stages, batch).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.duplicates_dropped, 20);
    assert_eq!(a.outputs.len() + a.dead_letters.len(), 500);
}

#[test]
fn handlers_run_once_per_unique_message() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let mut stages = four_stages();
    stages[0] = StageSpec::new("ingest", StageKind::Ingestion, move |env: &Envelope| {
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(vec![env.payload.clone()])
    });
    let mut batch = inputs(100);
    batch.extend(inputs(100));
    let out = run_pipeline(&stages, batch).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 100);
    assert_eq!(out.outputs.len(), 100);
}

#[test]
fn filtering_stage_may_drop_messages() {
    let mut stages = four_stages();
    stages[3] = StageSpec::new("select", StageKind::Selection, |env: &Envelope| {
        let keep = match &env.payload {
            Payload::Enriched(v) => v["n"].as_u64().unwrap() % 2 == 0,
            _ => false,
        };
        Ok(if keep {
            vec![env.payload.clone()]
        } else {
            vec![]
        })
    });
    let out = run_pipeline(&stages, inputs(100)).unwrap();
    assert_eq!(out.outputs.len(), 50);
    assert!(out.dead_letters.is_empty());
}
