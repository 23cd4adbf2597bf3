use std::time::Duration;

use futures::StreamExt;
use vecap_core::llmclient::{
    BatchRequest, LlmClient, LlmError, PromptItem, RetryPolicy, ScheduleOptions,
};
use vecap_core::mockllm::{max_overlap, MockRule, MockScript, MockServer, Respond};

fn fast_policy() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 4,
        base_backoff: Duration::from_millis(5),
        max_backoff: Duration::from_millis(20),
        timeout: Duration::from_secs(5),
    }
}

fn prompts(n: usize) -> Vec<PromptItem> {
    (0..n)
        .map(|i| PromptItem::from(format!("p-{i:04}")))
        .collect()
}

fn opts(batch_size: usize, workers: usize) -> ScheduleOptions {
    ScheduleOptions {
        batch_size,
        workers,
        ..ScheduleOptions::default()
    }
}

#[tokio::test]
async fn echo_batch_round_trip() {
    let server = MockServer::serve(MockScript::echo(), 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let req = BatchRequest::new("r-1", (0..64).map(|i| format!("q{i}")).collect());
    let resp = client.complete_batch(&server.url(), &req).await.unwrap();
    assert_eq!(resp.request_id, "r-1");
    assert_eq!(resp.completions, req.prompts);
    assert_eq!(server.request_count(), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn request_count_is_ceil_n_over_batch() {
    let server = MockServer::serve(MockScript::echo(), 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let out = client
        .schedule(&server.url(), prompts(130), &opts(64, 4))
        .await
        .unwrap();
    assert_eq!(out.len(), 130);
    assert_eq!(out[129], "p-0129");
    let mut sizes: Vec<usize> = server.log().iter().map(|r| r.batch_size()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, [2, 64, 64]);
    assert_eq!(client.stats().retries, 0);
    server.shutdown().await;
}

#[tokio::test]
async fn double_503_takes_three_attempts() {
    let script =
        MockScript::echo().with_rule(MockRule::new("p-0070", Respond::Status(503)).times(2));
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let out = client
        .schedule(&server.url(), prompts(130), &opts(64, 4))
        .await
        .unwrap();
    assert_eq!(out.len(), 130);
    assert_eq!(server.attempts_for("batch-000001"), 3);
    assert_eq!(server.attempts_for("batch-000000"), 1);
    assert_eq!(server.attempts_for("batch-000002"), 1);
    let statuses: Vec<u16> = server
        .log()
        .iter()
        .filter(|r| r.request_id == "batch-000001")
        .map(|r| r.status)
        .collect();
    assert_eq!(statuses, [503, 503, 200]);
    assert_eq!(client.stats().retries, 2);
    server.shutdown().await;
}

#[tokio::test]
async fn persistent_5xx_exhausts_attempts() {
    let script = MockScript::echo().with_rule(MockRule::new("", Respond::Status(500)));
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let err = client
        .complete_batch(&server.url(), &BatchRequest::new("r", vec!["x".into()]))
        .await
        .unwrap_err();
    assert_eq!(
        err,
        LlmError::Transport {
            attempts: 4,
            last_status: Some(500),
            message: "HTTP 500".into()
        }
    );
    assert_eq!(server.request_count(), 4);
    server.shutdown().await;
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let script = MockScript::echo().with_rule(MockRule::new("", Respond::Status(400)));
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let err = client
        .complete_batch(&server.url(), &BatchRequest::new("r", vec!["x".into()]))
        .await
        .unwrap_err();
    assert!(
        matches!(err, LlmError::Status { status: 400, .. }),
        "{err:?}"
    );
    assert_eq!(server.request_count(), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn short_response_is_protocol_error() {
    let script = MockScript::echo().with_rule(MockRule::new("q17", Respond::Omit).times(1));
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let req = BatchRequest::new("r", (0..64).map(|i| format!("q{i:02}")).collect());
    let err = client
        .complete_batch(&server.url(), &req)
        .await
        .unwrap_err();
    match err {
        LlmError::Protocol(msg) => assert!(msg.contains("63 completions for 64"), "{msg}"),
        other => panic!("expected protocol error, got {other:?}"),
    }
    assert_eq!(server.request_count(), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn garbage_body_is_protocol_error() {
    let script = MockScript::echo().with_rule(MockRule::new("", Respond::Garbage));
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let err = client
        .complete_batch(&server.url(), &BatchRequest::new("r", vec!["x".into()]))
        .await
        .unwrap_err();
    assert!(matches!(err, LlmError::Protocol(_)), "{err:?}");
    server.shutdown().await;
}

#[tokio::test]
async fn connect_refused_is_transport_error() {
    let server = MockServer::serve(MockScript::echo(), 0).await.unwrap();
    let url = server.url();
    server.shutdown().await;
    let client = LlmClient::new(fast_policy()).unwrap();
    let err = client
        .complete_batch(&url, &BatchRequest::new("r", vec!["x".into()]))
        .await
        .unwrap_err();
    assert!(
        matches!(
            err,
            LlmError::Transport {
                attempts: 4,
                last_status: None,
                ..
            }
        ),
        "{err:?}"
    );
}

#[tokio::test]
async fn timeout_is_retried() {
    let script =
        MockScript::echo().with_rule(MockRule::new("slow", Respond::Echo).delay_ms(400).times(1));
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(RetryPolicy {
        timeout: Duration::from_millis(100),
        ..fast_policy()
    })
    .unwrap();
    let resp = client
        .complete_batch(&server.url(), &BatchRequest::new("r", vec!["slow".into()]))
        .await
        .unwrap();
    assert_eq!(resp.completions, ["slow"]);
    assert_eq!(client.stats().attempts, 2);
    server.shutdown().await;
}

#[tokio::test]
async fn outcomes_keep_input_order_under_jitter() {
    let script = MockScript::echo().with_jitter(25, 9);
    let server = MockServer::serve(script, 0).await.unwrap();
    let client = LlmClient::new(fast_policy()).unwrap();
    let url = server.url();
    let outcomes: Vec<_> = client
        .schedule_batches(&url, prompts(200), &opts(8, 6))
        .unwrap()
        .collect()
        .await;
    assert_eq!(outcomes.len(), 25);
    for (i, o) in outcomes.iter().enumerate() {
        assert_eq!(o.index, i);
        assert_eq!(o.range, i * 8..(i + 1) * 8);
        let got = o.result.as_ref().unwrap();
        assert_eq!(got[0], format!("p-{:04}", i * 8));
    }
    let log = server.log();
    let arrival: Vec<&str> = log.iter().map(|r| r.request_id.as_str()).collect();
    let completion_order = {
        let mut l = log.clone();
        l.sort_by_key(|r| r.finished);
        l.into_iter().map(|r| r.request_id).collect::<Vec<_>>()
    };
    assert_eq!(arrival.len(), 25);
    // the jitter must actually have reordered completions for this to mean anything
    assert_ne!(
        arrival,
        completion_order
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
    );
    server.shutdown().await;
}

#[tokio::test]
async fn in_flight_never_exceeds_workers() {
    for workers in [1, 3] {
        let script = MockScript::echo().with_rule(MockRule::new("", Respond::Echo).delay_ms(15));
        let server = MockServer::serve(script, 0).await.unwrap();
        let client = LlmClient::new(fast_policy()).unwrap();
        client
            .schedule(&server.url(), prompts(160), &opts(8, workers))
            .await
            .unwrap();
        let log = server.log();
        assert_eq!(log.len(), 20);
        assert!(
            max_overlap(&log) <= workers,
            "overlap {}",
            max_overlap(&log)
        );
        assert!(server.max_in_flight() <= workers);
        if workers > 1 {
            assert!(server.max_in_flight() > 1, "requests never overlapped");
        }
        server.shutdown().await;
    }
}

#[tokio::test]
async fn bad_schedule_options_rejected() {
    let client = LlmClient::new(fast_policy()).unwrap();
    let url = url::Url::parse("http://127.0.0.1:9").unwrap();
    assert!(client
        .schedule_batches(&url, prompts(3), &opts(0, 1))
        .is_err());
    assert!(client
        .schedule_batches(&url, prompts(3), &opts(4, 0))
        .is_err());
    let small = client.clone().with_max_batch(4);
    assert!(small
        .schedule_batches(&url, prompts(3), &opts(8, 1))
        .is_err());
}
