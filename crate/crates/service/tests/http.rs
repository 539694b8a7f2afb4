use std::collections::BTreeSet;
use std::sync::Arc;

use eqtreat_core::data::{BinKind, BinningScheme, GroupAssignment};
use eqtreat_core::dp::{dp_parity_gap, randomize, DebiasOptions, NoiseChannel};
use eqtreat_core::parity::{calibration_curve, group_distribution, parity_gap};
use eqtreat_core::synth::{cohort_residual, group_label_bias, outcome_shift, SynthData, DEFAULT_SHIFT};
use eqtreat_service::*;
use serde_json::{json, Value};

struct Server {
    base: String,
    state: Arc<AppState>,
    http: reqwest::Client,
}

impl Server {
    async fn start(groups: Vec<GroupAssignment>, cfg: ServiceConfig) -> Self {
        let store = DemographicStore::from_assignments(groups, cfg.suppression_threshold).unwrap();
        let state = Arc::new(AppState::new(store, AuditLog::in_memory(), &cfg));
        let (addr, _) = start(state.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
        Self {
            base: format!("http://{addr}"),
            state,
            http: reqwest::Client::new(),
        }
    }

    async fn upload(&self, body: String) -> (u16, Value) {
        let r = self.http.post(format!("{}/v1/datasets", self.base)).body(body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn evaluate(&self, req: &Value) -> (u16, Value) {
        let r = self.http.post(format!("{}/v1/evaluate", self.base)).json(req).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }
}

fn cfg(threshold: usize) -> ServiceConfig {
    ServiceConfig {
        suppression_threshold: threshold,
        ..ServiceConfig::default()
    }
}

fn request(id: &str, dimension: &str, metric: &str) -> Value {
    json!({"dataset_id": id, "dimension": dimension, "metric": metric})
}

async fn served(data: &SynthData, threshold: usize) -> (Server, String) {
    let s = Server::start(vec![data.groups.clone()], cfg(threshold)).await;
    let (status, body) = s.upload(data.dataset.to_jsonl()).await;
    assert_eq!(status, 200, "{body}");
    let id = body["dataset_id"].as_str().unwrap().to_string();
    (s, id)
}

/// Walks every key and string value; none may be a member id or a
/// member-level field name.
fn assert_aggregate_only(v: &Value, members: &BTreeSet<String>) {
    const MEMBER_FIELDS: [&str; 6] = ["member_id", "session_id", "score", "outcome", "features", "label"];
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                assert!(!MEMBER_FIELDS.contains(&k.as_str()), "member field `{k}` in response");
                assert!(!members.contains(k), "member id used as key");
                assert_aggregate_only(child, members);
            }
        }
        Value::Array(items) => items.iter().for_each(|c| assert_aggregate_only(c, members)),
        Value::String(s) => assert!(!members.contains(s), "member id `{s}` in response"),
        _ => {}
    }
}

#[tokio::test]
async fn upload_reports_rows_and_unknowns() {
    let data = outcome_shift(100, 1, DEFAULT_SHIFT);
    let mut groups = data.groups.values().clone();
    let dropped: Vec<String> = groups.keys().take(7).cloned().collect();
    for m in &dropped {
        groups.remove(m);
    }
    let g = GroupAssignment::new("gender", data.groups.label_set().clone(), groups, None).unwrap();
    let s = Server::start(vec![g], cfg(20)).await;
    let (status, body) = s.upload(data.dataset.to_jsonl()).await;
    assert_eq!(status, 200);
    assert_eq!(body["rows"], 100);
    let unknown = data.dataset.examples().iter().filter(|e| dropped.contains(&e.member_id)).count();
    assert_eq!(body["unknown"]["gender"], unknown);
}

#[tokio::test]
async fn bad_row_is_named_and_reupload_gets_a_new_id() {
    let data = outcome_shift(100, 2, DEFAULT_SHIFT);
    let s = Server::start(vec![data.groups.clone()], cfg(20)).await;
    let mut lines: Vec<String> = data.dataset.to_jsonl().lines().map(String::from).collect();
    lines[41] = r#"{"member_id":"x","score":1.7}"#.into();
    let (status, body) = s.upload(lines.join("\n")).await;
    assert_eq!(status, 400);
    assert_eq!(body["error"], "SCORE_OUT_OF_RANGE");
    assert!(body["message"].as_str().unwrap().contains("row 42"), "{body}");

    let (_, a) = s.upload(data.dataset.to_jsonl()).await;
    let (_, b) = s.upload(data.dataset.to_jsonl()).await;
    assert_ne!(a["dataset_id"], b["dataset_id"]);
    assert_eq!(a["rows"], b["rows"]);
}

#[tokio::test]
async fn ten_members_are_fully_suppressed() {
    let data = outcome_shift(10, 3, DEFAULT_SHIFT);
    let (s, id) = served(&data, 20).await;
    for metric in ["parity_gap", "calibration_curve", "qos_report", "group_distribution"] {
        let mut req = request(&id, "gender", metric);
        req["binning"] = json!({"kind": "equal_width", "bins": 2});
        let (status, body) = s.evaluate(&req).await;
        if status != 200 {
            // too few examples to compare at all is also a release of nothing
            assert_eq!(status, 422, "{metric}: {body}");
            continue;
        }
        let text = body["result"].to_string();
        let numbers = collect_numbers(&body["result"]);
        assert!(numbers.is_empty(), "{metric} released {numbers:?} in {text}");
    }
}

/// Numeric leaves that are released aggregates (bin indices and the QoS
/// minimum are request echoes, not data).
fn collect_numbers(v: &Value) -> Vec<f64> {
    let mut out = Vec::new();
    fn walk(v: &Value, key: &str, out: &mut Vec<f64>) {
        match v {
            Value::Number(n) if !matches!(key, "bin_index" | "minimum") => out.push(n.as_f64().unwrap()),
            Value::Object(m) => m.iter().for_each(|(k, c)| walk(c, k, out)),
            Value::Array(a) => a.iter().for_each(|c| walk(c, key, out)),
            _ => {}
        }
    }
    walk(v, "", &mut out);
    out
}

#[tokio::test]
async fn responses_equal_library_calls() {
    let fixtures = [
        (outcome_shift(20_000, 4, DEFAULT_SHIFT), "F", "M"),
        (group_label_bias(20_000, 5), "F", "M"),
        (cohort_residual(20_000, 6), "F", "M"),
    ];
    for (data, a, a2) in &fixtures {
        let (s, id) = served(data, 20).await;
        let gd = data.grouped();
        let dim = gd.dimension().to_string();
        let b = BinningScheme::build(BinKind::EqualMass, 10, &gd.dataset().scores()).unwrap();

        let mut req = request(&id, &dim, "parity_gap");
        req["groups"] = json!([a, a2]);
        let (status, body) = s.evaluate(&req).await;
        assert_eq!(status, 200, "{body}");
        let lib = parity_gap(&gd, &b, a, a2).unwrap();
        let pair = &body["result"]["pairs"][0];
        assert_eq!(pair["gap"].as_f64().unwrap(), lib.gap, "{dim}");
        assert_eq!(pair["signed_gap"].as_f64().unwrap(), lib.signed_gap);
        assert_eq!(pair["gap"], serde_json::to_value(lib.gap).unwrap());
        for (bin, d) in pair["bins"].as_array().unwrap().iter().zip(&lib.per_bin_diffs) {
            assert_eq!(bin["diff"].as_f64(), d.diff);
        }

        let (_, body) = s.evaluate(&request(&id, &dim, "calibration_curve")).await;
        for curve in body["result"]["curves"].as_array().unwrap() {
            let lib = calibration_curve(&gd, &b, curve["group"].as_str().unwrap()).unwrap();
            for (p, q) in curve["points"].as_array().unwrap().iter().zip(&lib.points) {
                if q.bin_mass < 20.0 {
                    assert_eq!(p["bin_mass"], "SUPPRESSED");
                    continue;
                }
                assert_eq!(p["empirical_outcome_rate"].as_f64(), q.empirical_outcome_rate);
                assert_eq!(p["mean_score"].as_f64(), q.mean_score);
                assert_eq!(p["bin_mass"].as_f64(), Some(q.bin_mass));
            }
        }

        let (_, body) = s.evaluate(&request(&id, &dim, "group_distribution")).await;
        let lib = group_distribution(&gd, None);
        for (label, count) in &lib.counts {
            assert_eq!(body["result"]["counts"][label].as_f64(), Some(*count));
            assert_eq!(body["result"]["proportions"][label].as_f64(), Some(lib.proportions[label]));
        }
    }
}

#[tokio::test]
async fn dp_requests_match_the_debiased_library_call() {
    let data = outcome_shift(20_000, 7, DEFAULT_SHIFT);
    let ch = NoiseChannel::new(["F", "M"], 0.2).unwrap();
    let noised = randomize(&data.groups, &ch, 9).unwrap();
    let s = Server::start(vec![noised.clone()], cfg(20)).await;
    let (_, up) = s.upload(data.dataset.to_jsonl()).await;
    let id = up["dataset_id"].as_str().unwrap();

    let (status, body) = s.evaluate(&request(id, "gender", "parity_gap")).await;
    assert_eq!((status, body["error"].as_str()), (422, Some("DP_REQUIRED")));

    let mut req = request(id, "gender", "parity_gap");
    req["dp"] = json!({"enabled": true, "rho": 0.2});
    let (status, body) = s.evaluate(&req).await;
    assert_eq!(status, 200, "{body}");
    let gd = data.dataset.clone();
    let ngd = eqtreat_core::data::join_groups(&gd, &noised);
    let b = BinningScheme::equal_mass(&gd.scores(), 10).unwrap();
    let lib = dp_parity_gap(&ngd, &ch, &b, "F", "M", &DebiasOptions::default()).unwrap();
    assert_eq!(body["result"]["pairs"][0]["gap"].as_f64(), Some(lib.gap));
    assert_eq!(body["dp"]["rho"], 0.2);

    req["dp"]["rho"] = json!(0.3);
    let (status, body) = s.evaluate(&req).await;
    assert_eq!((status, body["error"].as_str()), (422, Some("RHO_MISMATCH")));
}

#[tokio::test]
async fn no_endpoint_returns_member_level_fields() {
    let data = cohort_residual(3000, 8);
    let (s, id) = served(&data, 20).await;
    let members: BTreeSet<String> = data.dataset.examples().iter().map(|e| e.member_id.clone()).collect();

    let (_, up) = s.upload(data.dataset.to_jsonl()).await;
    assert_aggregate_only(&up, &members);
    for metric in ["parity_gap", "calibration_curve", "qos_report", "group_distribution"] {
        let (status, body) = s.evaluate(&request(&id, "destination_gender", metric)).await;
        assert_eq!(status, 200, "{metric}: {body}");
        assert_aggregate_only(&body, &members);
    }
    let (_, audit) = s.get("/v1/audit").await;
    assert_aggregate_only(&audit, &members);
    let (_, health) = s.get("/v1/health").await;
    assert_aggregate_only(&health, &members);
    let (_, err) = s.evaluate(&request(&id, "age", "parity_gap")).await;
    assert_aggregate_only(&err, &members);
}

#[tokio::test]
async fn error_statuses() {
    let data = outcome_shift(200, 9, DEFAULT_SHIFT);
    let (s, id) = served(&data, 20).await;
    let (status, body) = s.evaluate(&request("nope", "gender", "parity_gap")).await;
    assert_eq!((status, body["error"].as_str()), (404, Some("UNKNOWN_DATASET")));
    let (status, body) = s.evaluate(&request(&id, "age", "parity_gap")).await;
    assert_eq!((status, body["error"].as_str()), (400, Some("UNKNOWN_DIMENSION")));
    let (status, body) = s.evaluate(&request(&id, "gender", "accuracy")).await;
    assert_eq!((status, body["error"].as_str()), (400, Some("INVALID_REQUEST")));
    let mut req = request(&id, "gender", "parity_gap");
    req["groups"] = json!(["F", "X"]);
    let (status, body) = s.evaluate(&req).await;
    assert_eq!((status, body["error"].as_str()), (422, Some("UNKNOWN_GROUP")));
}

#[tokio::test]
async fn token_is_enforced() {
    let data = outcome_shift(50, 1, DEFAULT_SHIFT);
    let s = Server::start(
        vec![data.groups.clone()],
        ServiceConfig {
            caller_token: Some("s3cret".into()),
            ..cfg(20)
        },
    )
    .await;
    let (status, body) = s.upload(data.dataset.to_jsonl()).await;
    assert_eq!((status, body["error"].as_str()), (401, Some("UNAUTHORIZED")));
    let r = s
        .http
        .post(format!("{}/v1/datasets", s.base))
        .header("authorization", "Bearer s3cret")
        .header("x-caller", "team-feed")
        .body(data.dataset.to_jsonl())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(s.state.audit().query(None, None)[0].caller, "team-feed");
    assert!(s.state.audit().query(None, None).iter().all(|r| r.action == AuditAction::Upload));
}

#[tokio::test]
async fn one_evaluate_one_record() {
    let data = outcome_shift(500, 10, DEFAULT_SHIFT);
    let (s, id) = served(&data, 20).await;
    let before = s.state.audit().len();
    s.evaluate(&request(&id, "gender", "group_distribution")).await;
    let records = s.state.audit().query(None, None);
    assert_eq!(records.len(), before + 1);
    let last = records.last().unwrap();
    assert_eq!(last.action, AuditAction::Evaluate);
    assert_eq!(last.dataset_id, id);
    assert_eq!(last.dimension.as_deref(), Some("gender"));
    assert_eq!(last.metric.as_deref(), Some("group_distribution"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_calls_lose_no_records() {
    let data = outcome_shift(2000, 11, DEFAULT_SHIFT);
    let (s, id) = served(&data, 20).await;
    let s = Arc::new(s);
    let n = 48;
    let tasks: Vec<_> = (0..n)
        .map(|i| {
            let s = s.clone();
            let metric = ["parity_gap", "group_distribution", "calibration_curve"][i % 3];
            let req = request(&id, "gender", metric);
            tokio::spawn(async move { s.evaluate(&req).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), 200);
    }
    let (_, body) = s.get("/v1/audit").await;
    let records: Vec<AuditRecord> = serde_json::from_value(body["records"].clone()).unwrap();
    assert_eq!(records.len(), n + 1);
    assert_eq!(records.iter().filter(|r| r.action == AuditAction::Evaluate).count(), n);
    let seqs: Vec<u64> = records.iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (0..=n as u64).collect::<Vec<_>>());
    assert!(records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
}

#[tokio::test]
async fn empty_range_is_empty() {
    let data = outcome_shift(100, 12, DEFAULT_SHIFT);
    let (s, _) = served(&data, 20).await;
    let (status, body) = s.get("/v1/audit?from=2100-01-01T00:00:00Z").await;
    assert_eq!(status, 200);
    assert_eq!(body["records"], json!([]));
    let (_, body) = s.get("/v1/audit?from=2000-01-01T00:00:00Z&to=2000-01-01T00:00:00Z").await;
    assert_eq!(body["records"], json!([]));
    let (_, body) = s.get("/v1/audit?from=2000-01-01T00:00:00Z").await;
    assert_eq!(body["records"].as_array().unwrap().len(), 1);
    let (status, body) = s.get("/v1/audit?from=yesterday").await;
    assert_eq!((status, body["error"].as_str()), (400, Some("INVALID_REQUEST")));
}

#[tokio::test]
async fn oversize_payload_names_the_limit() {
    let data = outcome_shift(200, 13, DEFAULT_SHIFT);
    let s = Server::start(
        vec![data.groups.clone()],
        ServiceConfig {
            max_payload_bytes: 1024,
            ..cfg(20)
        },
    )
    .await;
    let (status, body) = s.upload(data.dataset.to_jsonl()).await;
    assert_eq!(status, 413);
    assert_eq!(body["error"], "PAYLOAD_TOO_LARGE");
    assert!(body["message"].as_str().unwrap().contains("1024"));
    assert!(s.state.audit().is_empty());
}

#[tokio::test]
async fn datasets_persist_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let data = outcome_shift(300, 14, DEFAULT_SHIFT);
    let store_path = dir.path().join("groups.jsonl");
    std::fs::write(&store_path, data.groups.to_jsonl()).unwrap();
    let cfg = ServiceConfig {
        store_path: Some(store_path),
        audit_path: Some(dir.path().join("audit.jsonl")),
        dataset_dir: Some(dir.path().join("datasets")),
        ..cfg(20)
    };
    let id = {
        let state = Arc::new(AppState::from_config(&cfg).unwrap());
        let (addr, handle) = start(state, "127.0.0.1:0".parse().unwrap()).await.unwrap();
        let r: Value = reqwest::Client::new()
            .post(format!("http://{addr}/v1/datasets"))
            .body(data.dataset.to_jsonl())
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        handle.abort();
        r["dataset_id"].as_str().unwrap().to_string()
    };
    let state = Arc::new(AppState::from_config(&cfg).unwrap());
    assert_eq!(state.audit().len(), 1);
    let (addr, _) = start(state.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let r = reqwest::Client::new()
        .post(format!("http://{addr}/v1/evaluate"))
        .json(&request(&id, "gender", "group_distribution"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(state.audit().len(), 2);
}

