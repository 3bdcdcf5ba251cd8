//! The role matrix over every authenticated endpoint.

use axum::http::{Method, StatusCode};
use forge_core::eval::Visibility;
use forge_core::fixtures::{model_bundle, FixtureModel};
use forge_portal::Role;
use serde_json::{json, Value};

use super::*;

#[derive(Clone, Copy, Debug)]
pub enum Actor {
    Anonymous,
    BadToken,
    As(Role),
}

pub const ACTORS: [Actor; 5] =
    [Actor::Anonymous, Actor::BadToken, Actor::As(Role::Organizer), Actor::As(Role::ProductTeam), Actor::As(Role::Participant)];

pub fn label(actor: Actor) -> &'static str {
    match actor {
        Actor::Anonymous => "anonymous",
        Actor::BadToken => "bad-token",
        Actor::As(r) => r.as_str(),
    }
}

pub struct Case {
    method: Method,
    path: String,
    /// Body builder, given the actor label, so each allowed actor can use its own resource.
    body: Box<dyn Fn(&str) -> Option<Value>>,
    allowed: &'static [Role],
    success: StatusCode,
}

fn case(method: Method, path: impl Into<String>, allowed: &'static [Role], success: StatusCode) -> Case {
    Case { method, path: path.into(), body: Box::new(|_| None), allowed, success }
}

fn with_body(mut c: Case, body: impl Fn(&str) -> Option<Value> + 'static) -> Case {
    c.body = Box::new(body);
    c
}

const MANAGERS: &[Role] = &[Role::Organizer, Role::ProductTeam];
const ANYONE: &[Role] = &[Role::Organizer, Role::ProductTeam, Role::Participant];

/// A competition with one serving model (toy/alpha v1, add-one) and a
/// pipeline over it.
pub fn setup() -> (Env, String, String, String) {
    let env = Env::with_competition();
    let sub = env.submit_fixture(&env.alice, "alpha", FixtureModel::AddOne).json();
    env.drain();
    let bundle = sub["bundle_id"].as_str().unwrap().to_owned();
    let eval = sub["eval_id"].as_str().unwrap().to_owned();
    env.post_empty(&format!("/harvest/{bundle}"), Some(&env.organizer));
    for stage in ["validated", "serving"] {
        let r = env.post_json("/models/toy/alpha/1/promote", Some(&env.organizer), &json!({"to_stage": stage}));
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    }
    assert_eq!(env.post_empty("/models/toy/alpha/1/serve", Some(&env.organizer)).status, StatusCode::OK);
    let r = env.post_json("/pipelines", Some(&env.organizer), &json!({"stages": [{"model_name": "toy/alpha", "version": 1}]}));
    let pipeline = r.json()["pipeline_id"].as_str().unwrap().to_owned();
    for a in ACTORS {
        env.add_dataset(&format!("prop-{}", label(a)), &toy_rows(), Visibility::Proprietary);
    }
    (env, bundle, eval, pipeline)
}

pub fn run_matrix(env: &Env, cases: &[Case]) -> Vec<String> {
    let mut failures = Vec::new();
    for c in cases {
        for actor in ACTORS {
            let token = match actor {
                Actor::Anonymous => None,
                Actor::BadToken => Some("fgt_0000".to_owned()),
                Actor::As(Role::Organizer) => Some(env.organizer.clone()),
                Actor::As(Role::ProductTeam) => Some(env.product.clone()),
                Actor::As(Role::Participant) => Some(env.alice.clone()),
            };
            let body = (c.body)(label(actor)).map(|v| serde_json::to_vec(&v).unwrap()).unwrap_or_default();
            let r = if c.path.ends_with("/submissions") {
                env.upload(token.as_deref(), &model_bundle(FixtureModel::Identity, COMPETITION, "alpha"))
            } else {
                env.request(c.method.clone(), &c.path, token.as_deref(), "application/json", body)
            };
            let (want_status, want_code) = match actor {
                Actor::Anonymous | Actor::BadToken => (StatusCode::UNAUTHORIZED, Some("UNAUTHENTICATED")),
                Actor::As(role) if c.allowed.contains(&role) => (c.success, None),
                Actor::As(_) => (StatusCode::FORBIDDEN, Some("FORBIDDEN")),
            };
            let code_ok = want_code.is_none_or(|code| r.code() == code);
            if r.status != want_status || !code_ok {
                failures.push(format!("{} {} as {}: got {} {}", c.method, c.path, label(actor), r.status, r.text()));
            }
        }
    }
    failures
}

pub fn cases(bundle: &str, eval: &str, pipeline: &str) -> Vec<Case> {
    let model = "/models/toy/alpha/1";
    vec![
        with_body(case(Method::POST, "/competitions", &[Role::Organizer], StatusCode::CREATED), |who| {
            let mut spec = toy_spec();
            spec["competition_id"] = json!(format!("c-{who}"));
            Some(spec)
        }),
        with_body(case(Method::POST, format!("/competitions/{COMPETITION}/teams"), &[Role::Participant], StatusCode::OK), |_| {
            Some(json!({"team_id": "alpha"}))
        }),
        case(Method::POST, format!("/competitions/{COMPETITION}/submissions"), &[Role::Participant], StatusCode::ACCEPTED),
        case(Method::POST, format!("/harvest/{bundle}"), MANAGERS, StatusCode::OK),
        with_body(case(Method::POST, format!("{model}/promote"), MANAGERS, StatusCode::OK), |_| Some(json!({"to_stage": "serving"}))),
        case(Method::POST, format!("{model}/serve"), MANAGERS, StatusCode::OK),
        with_body(case(Method::POST, format!("{model}/evaluate"), MANAGERS, StatusCode::ACCEPTED), |who| {
            Some(json!({"dataset_id": format!("prop-{who}")}))
        }),
        with_body(case(Method::POST, format!("{model}/predict"), ANYONE, StatusCode::OK), |_| Some(json!({"input": 1}))),
        with_body(case(Method::POST, "/pipelines", MANAGERS, StatusCode::CREATED), |_| {
            Some(json!({"stages": [{"model_name": "toy/alpha", "version": 1}]}))
        }),
        with_body(case(Method::POST, format!("/pipelines/{pipeline}/predict"), ANYONE, StatusCode::OK), |_| Some(json!({"input": 1}))),
        case(Method::GET, format!("/competitions/{COMPETITION}/teams"), ANYONE, StatusCode::OK),
        case(Method::GET, format!("/submissions/{eval}"), ANYONE, StatusCode::OK),
        case(Method::GET, "/models", MANAGERS, StatusCode::OK),
        case(Method::GET, model, MANAGERS, StatusCode::OK),
        case(Method::GET, format!("{model}/openapi.json"), ANYONE, StatusCode::OK),
        case(Method::GET, format!("{model}/health"), ANYONE, StatusCode::OK),
        case(Method::GET, "/services", ANYONE, StatusCode::OK),
        case(Method::GET, "/pipelines", ANYONE, StatusCode::OK),
        case(Method::GET, format!("/pipelines/{pipeline}"), ANYONE, StatusCode::OK),
        // Last, since it takes the service down.
        case(Method::POST, format!("{model}/stop"), MANAGERS, StatusCode::OK),
    ]
}

