use std::sync::Arc;
use std::time::Duration;

use griffonforge_core::service::{router, ManualClock, Store};
use reqwest::StatusCode;
use serde_json::{json, Value};

async fn spawn() -> (String, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(0));
    let store = Arc::new(Store::in_memory(clock.clone(), Duration::from_secs(60)));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(store)).await.unwrap();
    });
    (format!("http://{addr}"), clock)
}

fn sample(id: &str) -> Value {
    json!({
        "id": id,
        "image": {"id": format!("img-{id}"), "width": 200, "height": 200, "uri": "synthetic://x.png"},
        "question": "How many cups are there?",
        "answer": "2",
        "state": "AiAnnotated",
        "analysis": {
            "key_entities": ["cups"],
            "plan": [{"capability": "Visual Grounding", "targets": ["cups"]}],
            "raw_i1_response": "cups", "raw_i2_response": "Visual Grounding: cups", "warnings": []
        },
        "pending": [{"capability": "Visual Grounding", "targets": ["cups"]}]
    })
}

#[tokio::test]
async fn review_flow_over_http() {
    let (base, clock) = spawn().await;
    let http = reqwest::Client::new();

    assert_eq!(
        http.get(format!("{base}/healthz"))
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap(),
        "ok"
    );
    let r = http
        .get(format!("{base}/api/queue/next?reviewer=a"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);

    let r = http
        .post(format!("{base}/api/samples"))
        .json(&json!([sample("1"), sample("2"), sample("1")]))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let report: Value = r.json().await.unwrap();
    assert_eq!(report["inserted"], 2);
    assert_eq!(report["rejected"][0]["id"], "1");

    let got: Value = http
        .get(format!("{base}/api/queue/next?reviewer=a"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(got["id"], "1");
    assert_eq!(got["state"], "HumanReview");
    assert_eq!(got["lease"]["reviewer_id"], "a");

    let annotate = |reviewer: &str, boxes: Value| json!({"reviewer_id": reviewer, "cues": [{"label": "cups", "payload": {"type": "boxes", "boxes": boxes}}]});
    let r = http
        .post(format!("{base}/api/samples/1/annotation"))
        .json(&annotate("b", json!([[0, 0, 10, 10]])))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "LeaseViolation");

    let r = http
        .post(format!("{base}/api/samples/1/annotation"))
        .json(&annotate("a", json!([[0, 0, 300, 10]])))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"], "InvalidCue");
    assert_eq!(body["violations"][0]["code"], "BBOX_OUT_OF_RANGE");

    let r = http
        .post(format!("{base}/api/samples/1/decision"))
        .json(&json!({"reviewer_id": "a", "decision": "accept"}))
        .send()
        .await
        .unwrap();
    assert_eq!(
        r.status(),
        StatusCode::UNPROCESSABLE_ENTITY,
        "no human cue yet"
    );

    let r = http
        .post(format!("{base}/api/samples/1/annotation"))
        .json(&annotate("a", json!([[0, 0, 20, 20], [50, 50, 90, 90]])))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let r = http
        .post(format!("{base}/api/samples/1/decision"))
        .json(&json!({"reviewer_id": "a", "decision": "accept"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let accepted: Value = r.json().await.unwrap();
    assert_eq!(accepted["state"], "Accepted");
    assert_eq!(accepted["trace"]["answer"], "2");

    let r = http
        .post(format!("{base}/api/samples/1/decision"))
        .json(&json!({"reviewer_id": "a", "decision": "reject"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    // lease expiry hands sample 2 to another reviewer
    let got: Value = http
        .get(format!("{base}/api/queue/next?reviewer=a"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(got["id"], "2");
    clock.advance(Duration::from_secs(61));
    let got: Value = http
        .get(format!("{base}/api/queue/next?reviewer=b"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(
        (got["id"].as_str(), got["lease"]["reviewer_id"].as_str()),
        (Some("2"), Some("b"))
    );

    assert_eq!(
        http.get(format!("{base}/api/samples/nope"))
            .send()
            .await
            .unwrap()
            .status(),
        StatusCode::NOT_FOUND
    );
    let r = http
        .post(format!("{base}/api/samples/2/annotation"))
        .header("content-type", "application/json")
        .body("{\"reviewer_id\": 5}")
        .send()
        .await
        .unwrap();
    assert!(r.status().is_client_error());

    let stats: Value = http
        .get(format!("{base}/api/stats"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(
        (
            stats["accepted"].as_u64(),
            stats["human_review"].as_u64(),
            stats["active_leases"].as_u64()
        ),
        (Some(1), Some(1), Some(1))
    );
}
