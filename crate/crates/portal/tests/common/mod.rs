#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Duration, Utc};
use forge_core::clock::ManualClock;
use forge_core::eval::{EvaluationRecord, SandboxPolicy, Visibility};
use forge_core::fixtures::{model_bundle, FixtureModel};
use forge_portal::config::PlatformConfig;
use forge_portal::http::{router, BUNDLE_FIELD};
use forge_portal::{DatasetSource, Platform, Role};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub mod matrix;

pub const COMPETITION: &str = "toy";
pub const HIDDEN: &str = "toy-hidden";

pub fn t0() -> DateTime<Utc> {
    DateTime::from_timestamp(1_767_225_600, 0).unwrap() // 2026-01-01T00:00:00Z
}

pub fn toy_spec() -> Value {
    json!({
        "competition_id": COMPETITION,
        "title": "Toy parity",
        "description": "Predict the parity of an integer.",
        "primary_metric": "accuracy",
        "direction": "maximize",
        "secondary_metrics": ["macro_f1"],
        "phases": [{"phase_id": "main", "opens_at": "2026-01-01T00:00:00Z", "closes_at": "2026-01-31T00:00:00Z"}],
        "daily_quota": 5,
        "hidden_dataset": HIDDEN,
        "reward_text": "Bragging rights"
    })
}

pub fn fast_config() -> PlatformConfig {
    PlatformConfig {
        sandbox: SandboxPolicy {
            startup_timeout_s: 5.0,
            per_record_timeout_s: 2.0,
            total_timeout_s: 20.0,
            exit_timeout_s: 3.0,
            ..SandboxPolicy::default()
        },
        ..PlatformConfig::default()
    }
}

pub struct Response {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Response {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }

    pub fn code(&self) -> String {
        self.json()["code"].as_str().unwrap_or_default().to_owned()
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

pub struct Env {
    pub dir: tempfile::TempDir,
    pub platform: Arc<Platform>,
    pub clock: Arc<ManualClock>,
    pub app: Router,
    pub organizer: String,
    pub product: String,
    /// Participant tokens, not yet in any team.
    pub alice: String,
    pub bob: String,
    pub carol: String,
}

/// Inputs 1,2,3,5 with parity labels 1,0,1,1, as one combined file.
pub fn toy_rows() -> Vec<(&'static str, Value, Value)> {
    vec![("r1", json!(1), json!(1)), ("r2", json!(2), json!(0)), ("r3", json!(3), json!(1)), ("r4", json!(5), json!(1))]
}

impl Env {
    /// A fresh data directory with principals minted and the hidden
    /// dataset registered, but no competition.
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(t0() + Duration::hours(1)));
        let platform = Arc::new(Platform::open_with(&dir.path().join("data"), fast_config(), clock.clone()).unwrap());
        let mint = |name: &str, role| platform.mint_token(name, role).unwrap().1;
        let organizer = mint("olga", Role::Organizer);
        let product = mint("pat", Role::ProductTeam);
        let alice = mint("alice", Role::Participant);
        let bob = mint("bob", Role::Participant);
        let carol = mint("carol", Role::Participant);
        let app = router(platform.clone());
        let env = Env { dir, platform, clock, app, organizer, product, alice, bob, carol };
        env.add_dataset(HIDDEN, &toy_rows(), Visibility::HiddenEval);
        env
    }

    /// Also creates the toy competition and puts alice, bob and carol in
    /// teams alpha, beta and gamma.
    pub fn with_competition() -> Self {
        let env = Self::new();
        let r = env.post_json("/competitions", Some(&env.organizer), &toy_spec());
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
        for (token, team) in [(&env.alice, "alpha"), (&env.bob, "beta"), (&env.carol, "gamma")] {
            let r = env.post_json(&format!("/competitions/{COMPETITION}/teams"), Some(token), &json!({"team_id": team}));
            assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        }
        env
    }

    pub fn add_dataset(&self, id: &str, rows: &[(&str, Value, Value)], visibility: Visibility) {
        let path = self.dir.path().join(format!("{id}.ndjson"));
        let body: String = rows.iter().map(|(rid, i, l)| format!("{}\n", json!({"id": rid, "input": i, "label": l}))).collect();
        std::fs::write(&path, body).unwrap();
        self.platform.register_dataset(id, DatasetSource::Combined(&path), visibility).unwrap();
    }

    pub fn request(&self, method: Method, path: &str, token: Option<&str>, content_type: &str, body: Vec<u8>) -> Response {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(send(self.app.clone(), method, path, token, content_type, body))
    }

    pub fn get(&self, path: &str, token: Option<&str>) -> Response {
        self.request(Method::GET, path, token, "application/json", Vec::new())
    }

    pub fn post_json(&self, path: &str, token: Option<&str>, body: &Value) -> Response {
        self.request(Method::POST, path, token, "application/json", serde_json::to_vec(body).unwrap())
    }

    pub fn post_empty(&self, path: &str, token: Option<&str>) -> Response {
        self.request(Method::POST, path, token, "application/json", Vec::new())
    }

    pub fn upload(&self, token: Option<&str>, blob: &[u8]) -> Response {
        let (ct, body) = multipart(blob);
        self.request(Method::POST, &format!("/competitions/{COMPETITION}/submissions"), token, &ct, body)
    }

    pub fn submit_fixture(&self, token: &str, team: &str, model: FixtureModel) -> Response {
        self.upload(Some(token), &model_bundle(model, COMPETITION, team))
    }

    /// Runs every queued evaluation, a second of manual time apart.
    pub fn drain(&self) -> Vec<EvaluationRecord> {
        let worker = self.platform.worker("test-worker");
        let mut out = Vec::new();
        loop {
            self.clock.advance(Duration::seconds(1));
            match worker.run_once().unwrap() {
                forge_core::eval::Tick::Idle => return out,
                forge_core::eval::Tick::Completed { record, .. } => out.push(record),
            }
        }
    }
}

pub async fn send(app: Router, method: Method, path: &str, token: Option<&str>, content_type: &str, body: Vec<u8>) -> Response {
    let mut req = Request::builder().method(method).uri(format!("/api/v1{path}")).header(header::CONTENT_TYPE, content_type);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let resp = app.oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Response { status, bytes }
}

/// A multipart/form-data body with the bundle under the expected field.
pub fn multipart(blob: &[u8]) -> (String, Vec<u8>) {
    let boundary = "forge-test-boundary-7d1f";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"{BUNDLE_FIELD}\"; filename=\"bundle.zip\"\r\nContent-Type: application/zip\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(blob);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

/// Fires `n` submissions for one team at once and returns the status codes.
pub fn burst(env: &Env, token: &str, team: &str, n: usize) -> Vec<StatusCode> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(8).enable_all().build().unwrap();
    let (ct, body) = multipart(&model_bundle(FixtureModel::Identity, COMPETITION, team));
    rt.block_on(async {
        let tasks: Vec<_> = (0..n)
            .map(|_| {
                let (app, token, ct, body) = (env.app.clone(), token.to_owned(), ct.clone(), body.clone());
                tokio::spawn(async move {
                    send(app, Method::POST, &format!("/competitions/{COMPETITION}/submissions"), Some(&token), &ct, body).await
                })
            })
            .collect();
        let mut out = Vec::new();
        for t in tasks {
            out.push(t.await.unwrap().status);
        }
        out
    })
}

pub fn count(codes: &[StatusCode], want: StatusCode) -> usize {
    codes.iter().filter(|c| **c == want).count()
}


/// A bundle with a finished evaluation, written straight to the store
/// without running the model. Returns the bundle id.
pub fn fabricate_finished(env: &Env, team: &str, blob: &[u8], accuracy: f64) -> String {
    use forge_core::bundle::{check_bundle, BundleLimits, SubmissionBundle};
    use forge_core::catalog::{insert_bundle, next_bundle_id};
    use forge_core::clock::Clock;
    use forge_core::eval::queue::{claim, complete, enqueue_in};
    use forge_core::eval::EvalStatus;
    use forge_core::store::StoreError;

    let contents = check_bundle(blob, COMPETITION, &BundleLimits::default()).unwrap();
    let digest = env.platform.blobs().put(blob).unwrap();
    let now = env.clock.now();
    let store = env.platform.store();
    let bundle_id = store
        .write(|tx| {
            let b = SubmissionBundle {
                bundle_id: next_bundle_id(tx)?,
                blob_digest: digest.clone(),
                manifest: contents.manifest.clone(),
                byte_size: contents.byte_size,
                submitted_at: now,
                team_id: team.into(),
            };
            insert_bundle(tx, &b)?;
            enqueue_in(tx, &b, HIDDEN, None, now).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            Ok::<_, StoreError>(b.bundle_id)
        })
        .unwrap();
    let (mut rec, lease) = claim(store, "fabricator", now, Duration::seconds(60)).unwrap().unwrap();
    assert_eq!(rec.bundle_id, bundle_id);
    rec.status = EvalStatus::Succeeded;
    rec.metrics.insert("accuracy".into(), accuracy);
    rec.finished_at = Some(now);
    assert!(complete(store, &lease, &rec).unwrap());
    bundle_id
}
