mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{fast_retry, start, MockConfig, Mode};
use rewrite_forge::client::{ChatClient, ClientConfig, ClientError, RateLimit};
use rewrite_forge_core::rewrite::{ChatMessage, ChatRequest, Role};

fn request(text: &str) -> ChatRequest {
    ChatRequest {
        model: "mock".into(),
        messages: vec![ChatMessage {
            role: Role::User,
            content: text.into(),
        }],
        temperature: 0.7,
        top_p: 0.9,
        max_output_tokens: 64,
    }
}

fn client(url: &str, in_flight: usize, rps: f64) -> Arc<ChatClient> {
    let mut config = ClientConfig::new(url);
    config.timeout = Duration::from_secs(10);
    config.rate = RateLimit {
        max_in_flight: in_flight,
        requests_per_second: rps,
    };
    ChatClient::new(config).unwrap()
}

#[tokio::test]
async fn returns_first_choice_content() {
    let mock = start(MockConfig::new(Mode::Fixed("OK".into())));
    let c = client(&mock.url, 2, 100.0);
    let out = c.send_chat(&request("hello"), &fast_retry()).await.unwrap();
    assert_eq!(out.content, "OK");
    assert_eq!(out.attempts, 1);
    let body = mock.state.last_body.lock().unwrap().clone().unwrap();
    assert_eq!(body["model"], "mock");
    assert_eq!(body["max_tokens"], 64);
}

#[tokio::test]
async fn retries_a_429_then_succeeds() {
    let mock = start(MockConfig::new(Mode::Script(vec![429])));
    let c = client(&mock.url, 2, 100.0);
    let out = c.send_chat(&request("hello"), &fast_retry()).await.unwrap();
    assert_eq!(out.attempts, 2);
    assert_eq!(mock.requests(), 2);
}

#[tokio::test]
async fn client_error_is_not_retried() {
    let mock = start(MockConfig::new(Mode::Status(400)));
    let c = client(&mock.url, 2, 100.0);
    let err = c.send_chat(&request("hello"), &fast_retry()).await.unwrap_err();
    assert!(
        matches!(
            err,
            ClientError::Permanent {
                status: 400,
                attempts: 1,
                ..
            }
        ),
        "{err:?}"
    );
    assert_eq!(mock.requests(), 1);
}

#[tokio::test]
async fn persistent_503_exhausts_attempts() {
    let mock = start(MockConfig::new(Mode::Status(503)));
    let c = client(&mock.url, 2, 100.0);
    let policy = fast_retry();
    let err = c.send_chat(&request("hello"), &policy).await.unwrap_err();
    match err {
        ClientError::Transient {
            last_status, attempts, ..
        } => {
            assert_eq!(last_status, Some(503));
            assert_eq!(attempts, policy.max_attempts);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(mock.requests(), policy.max_attempts as usize);
}

#[tokio::test]
async fn missing_content_is_malformed() {
    let mock = start(MockConfig::new(Mode::Malformed));
    let c = client(&mock.url, 2, 100.0);
    let err = c.send_chat(&request("hello"), &fast_retry()).await.unwrap_err();
    assert!(matches!(err, ClientError::Malformed { .. }), "{err:?}");
}

#[tokio::test]
async fn unreachable_endpoint_is_transient() {
    let c = client("http://127.0.0.1:9", 1, 100.0);
    let err = c.send_chat(&request("hello"), &fast_retry()).await.unwrap_err();
    assert!(
        matches!(err, ClientError::Transient { last_status: None, .. }),
        "{err:?}"
    );
}

#[tokio::test]
async fn in_flight_cap_holds_across_tasks() {
    let mut config = MockConfig::new(Mode::Fixed("OK".into()));
    config.delay = Duration::from_millis(40);
    let mock = start(config);
    let c = client(&mock.url, 3, 1000.0);
    let mut set = tokio::task::JoinSet::new();
    for i in 0..20 {
        let c = Arc::clone(&c);
        set.spawn(async move { c.send_chat(&request(&format!("r{i}")), &fast_retry()).await });
    }
    while let Some(r) = set.join_next().await {
        r.unwrap().unwrap();
    }
    assert_eq!(mock.requests(), 20);
    assert!(mock.max_in_flight() <= 3, "saw {}", mock.max_in_flight());
    assert_eq!(mock.max_in_flight(), 3);
}

#[tokio::test]
async fn request_rate_is_paced() {
    let mock = start(MockConfig::new(Mode::Fixed("OK".into())));
    let c = client(&mock.url, 8, 50.0);
    let started = Instant::now();
    let mut set = tokio::task::JoinSet::new();
    for i in 0..11 {
        let c = Arc::clone(&c);
        set.spawn(async move { c.send_chat(&request(&format!("r{i}")), &fast_retry()).await });
    }
    while let Some(r) = set.join_next().await {
        r.unwrap().unwrap();
    }
    // 11 requests at 50/s need at least ten 20 ms intervals
    assert!(
        started.elapsed() >= Duration::from_millis(195),
        "{:?}",
        started.elapsed()
    );
}

#[tokio::test]
async fn bearer_credential_is_sent() {
    let mock = start(MockConfig::new(Mode::Fixed("OK".into())));
    let mut config = ClientConfig::new(&mock.url);
    config.api_key = Some("secret-key".into());
    let c = ChatClient::new(config).unwrap();
    c.send_chat(&request("hello"), &fast_retry()).await.unwrap();
    assert_eq!(
        mock.state.last_auth.lock().unwrap().as_deref(),
        Some("Bearer secret-key")
    );
}

#[test]
fn invalid_rate_limits_are_rejected() {
    let mut config = ClientConfig::new("http://127.0.0.1:1");
    config.rate.max_in_flight = 0;
    assert!(matches!(ChatClient::new(config), Err(ClientError::Config(_))));
    let mut config = ClientConfig::new("http://127.0.0.1:1");
    config.rate.requests_per_second = 0.0;
    assert!(matches!(ChatClient::new(config), Err(ClientError::Config(_))));
}
