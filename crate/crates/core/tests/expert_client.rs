use std::sync::Arc;
use std::time::Duration;

use griffonforge_core::expert::fake::{FakeScript, FakeServer};
use griffonforge_core::expert::{ExpertClient, ExpertConfig, ExpertError, PlanEntry};
use griffonforge_core::{BoundingBox, Capability, CuePayload, GrammarConfig, ImageRef};

fn config(server: &FakeServer, cache: &std::path::Path) -> ExpertConfig {
    ExpertConfig {
        base_url: server.base_url(),
        cache_dir: cache.to_path_buf(),
        retry_base: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
        ..ExpertConfig::default()
    }
}

fn image() -> ImageRef {
    ImageRef::new("img-1", 300, 300, "synthetic://img-1.png")
}

#[tokio::test]
async fn analysis_matches_hand_parsed_fixture_and_caches() {
    let server = FakeServer::spawn(FakeScript::default()).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let client = ExpertClient::new(config(&server, dir.path()), GrammarConfig::default()).unwrap();
    let q = "Is the red balloon below the white balloon?";

    let a = client.analyze(&image(), q).await.unwrap();
    assert!(!a.cached);
    assert_eq!(a.key_entities, ["red balloon", "white balloon"]);
    assert_eq!(a.raw_i1_response, "red balloon\nwhite balloon");
    assert_eq!(
        a.plan,
        [
            PlanEntry {
                capability: Capability::GroundedCaption,
                targets: vec!["red balloon".into()]
            },
            PlanEntry {
                capability: Capability::VisualGrounding,
                targets: vec!["red balloon".into(), "white balloon".into()]
            },
        ]
    );
    assert_eq!(server.stats.requests(), 2);

    let again = client.analyze(&image(), q).await.unwrap();
    assert!(again.cached);
    assert_eq!(server.stats.requests(), 2);
    assert_eq!(
        serde_json::to_vec(&a).unwrap(),
        serde_json::to_vec(&again).unwrap()
    );

    let easy = client.annotate_easy_tasks(&image(), q, &a).await.unwrap();
    assert_eq!(server.stats.requests(), 3);
    assert_eq!(easy.pending, a.plan[1..]);
    assert_eq!(easy.cues.len(), 1);
    assert_eq!(easy.cues[0].label, "red balloon");
    assert!(matches!(easy.cues[0].payload, CuePayload::Boxes { .. }));
    let again = client.annotate_easy_tasks(&image(), q, &a).await.unwrap();
    assert_eq!(again, easy);
    assert_eq!(server.stats.requests(), 3);
}

#[tokio::test]
async fn global_understanding_and_caption_routes() {
    let script = FakeScript {
        rules: vec![
            ("identify and focus".into(), "".into()),
            ("identify the task".into(), "Global Understanding".into()),
        ],
        ..FakeScript::default()
    };
    let server = FakeServer::spawn(script).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let client = ExpertClient::new(config(&server, dir.path()), GrammarConfig::default()).unwrap();
    let a = client
        .analyze(&image(), "Is this place safe?")
        .await
        .unwrap();
    assert_eq!(
        a.plan,
        [PlanEntry {
            capability: Capability::GlobalUnderstanding,
            targets: vec![]
        }]
    );
    let easy = client
        .annotate_easy_tasks(&image(), "Is this place safe?", &a)
        .await
        .unwrap();
    assert_eq!(easy.cues.len(), 1);
    assert!(easy.pending.is_empty());
    assert!(matches!(&easy.cues[0].payload, CuePayload::Caption { text } if !text.is_empty()));
}

#[tokio::test]
async fn grounded_caption_reply_becomes_box_cue() {
    let script = FakeScript {
        rules: vec![
            ("identify and focus".into(), "dog".into()),
            ("identify the task".into(), "Grounded Caption".into()),
            (
                "give its bounding box".into(),
                "a dog [4, 4, 40, 40] sits".into(),
            ),
        ],
        ..FakeScript::default()
    };
    let server = FakeServer::spawn(script).await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let client = ExpertClient::new(config(&server, dir.path()), GrammarConfig::default()).unwrap();
    let a = client
        .analyze(&image(), "What is the dog doing?")
        .await
        .unwrap();
    let easy = client
        .annotate_easy_tasks(&image(), "What is the dog doing?", &a)
        .await
        .unwrap();
    assert_eq!(easy.cues[0].label, "dog");
    assert_eq!(
        easy.cues[0].payload,
        CuePayload::Boxes {
            boxes: vec![BoundingBox::new(4, 4, 40, 40)]
        }
    );
}

#[tokio::test]
async fn retries_transient_errors_only() {
    let server = FakeServer::spawn(FakeScript {
        fail_first: 2,
        ..FakeScript::default()
    })
    .await
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let client = ExpertClient::new(config(&server, dir.path()), GrammarConfig::default()).unwrap();
    client
        .analyze(&image(), "How many cups are there?")
        .await
        .unwrap();
    assert_eq!(server.stats.requests(), 4);
    assert_eq!(client.network_calls(), 4);

    let server = FakeServer::spawn(FakeScript {
        fail_first: 100,
        ..FakeScript::default()
    })
    .await
    .unwrap();
    let mut cfg = config(&server, dir.path());
    cfg.retry_limit = 2;
    let client = ExpertClient::new(cfg, GrammarConfig::default()).unwrap();
    let err = client
        .analyze(&image(), "Another question?")
        .await
        .unwrap_err();
    assert!(
        matches!(err, ExpertError::Transport { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(server.stats.requests(), 3);

    let server = FakeServer::spawn(FakeScript {
        rules: vec![("identify the task".into(), "no idea at all".into())],
        ..FakeScript::default()
    })
    .await
    .unwrap();
    let client = ExpertClient::new(config(&server, dir.path()), GrammarConfig::default()).unwrap();
    let err = client
        .analyze(&image(), "Is the cat on the mat?")
        .await
        .unwrap_err();
    assert!(
        matches!(err, ExpertError::ParseFailure { stage: "plan", .. }),
        "{err:?}"
    );
    assert_eq!(server.stats.requests(), 2);
    // the failure is reproduced from cache
    let err = client
        .analyze(&image(), "Is the cat on the mat?")
        .await
        .unwrap_err();
    assert!(matches!(err, ExpertError::ParseFailure { .. }));
    assert_eq!(server.stats.requests(), 2);
}

#[tokio::test]
async fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExpertConfig {
        base_url: format!("http://{addr}/v1"),
        cache_dir: dir.path().to_path_buf(),
        retry_limit: 1,
        retry_base: Duration::from_millis(1),
        ..ExpertConfig::default()
    };
    let client = ExpertClient::new(cfg, GrammarConfig::default()).unwrap();
    let err = client.analyze(&image(), "Is it red?").await.unwrap_err();
    assert!(err.is_transport());
}

#[tokio::test]
async fn inflight_window_is_respected() {
    let server = FakeServer::spawn(FakeScript {
        delay: Duration::from_millis(20),
        ..FakeScript::default()
    })
    .await
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&server, dir.path());
    cfg.max_inflight = 2;
    let client = Arc::new(ExpertClient::new(cfg, GrammarConfig::default()).unwrap());
    let tasks: Vec<_> = (0..12)
        .map(|i| {
            let c = client.clone();
            tokio::spawn(async move { c.analyze(&image(), &format!("Is the cup {i} red?")).await })
        })
        .collect();
    for t in tasks {
        t.await.unwrap().unwrap();
    }
    assert_eq!(server.stats.requests(), 24);
    assert_eq!(server.stats.max_in_flight(), 2);
}
