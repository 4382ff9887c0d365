use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use unitprobe_core::dissect::{DissectConfig, SeedRange};
use unitprobe_core::export::decode_png;
use unitprobe_core::optimize::AlphaConfig;
use unitprobe_core::segment::segment;
use unitprobe_core::world::{World, UNIT_LAYER};
use unitprobe_studio::{router, Studio, StudioConfig};

fn studio() -> Arc<Studio> {
    let cfg = StudioConfig {
        dissect: DissectConfig {
            train: SeedRange::new(0, 20),
            eval: SeedRange::new(1000, 20),
            ..DissectConfig::with_seed(0)
        },
        alpha: AlphaConfig {
            steps: 5,
            ..AlphaConfig::default()
        },
    };
    Arc::new(Studio::new(vec![("default".into(), World::default_world())], cfg).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn session(app: &Router, seed: u64) -> String {
    let (s, v) = call(app, "POST", "/sessions", Some(json!({ "seed": seed }))).await;
    assert_eq!(s, StatusCode::CREATED);
    v["sessionId"].as_str().unwrap().to_string()
}

async fn image(app: &Router, id: &str) -> String {
    let (s, v) = call(app, "GET", &format!("/sessions/{id}/image"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["image"].as_str().unwrap().to_string()
}

fn tree_units(world: &World) -> Vec<usize> {
    let s = world.spec();
    s.concepts[s.concept_index("tree").unwrap()].causal_units()
}

fn all_cells() -> Vec<(usize, usize)> {
    (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).collect()
}

fn seed_with_tree(world: &World) -> u64 {
    (0..100)
        .find(|&s| {
            let img = world.forward(&world.z_for_seed(s), &[]).unwrap().image;
            segment(&img, world.spec()).unwrap().mask("tree").unwrap().count() > 20
        })
        .unwrap()
}

#[tokio::test]
async fn image_matches_direct_render() {
    let app = router(studio());
    let world = World::default_world();
    let id = session(&app, 5).await;
    let png = STANDARD.decode(image(&app, &id).await).unwrap();
    let direct = world.forward(&world.z_for_seed(5), &[]).unwrap().image;
    let decoded = decode_png(&png).unwrap();
    assert_eq!(decoded.shape(), direct.shape());
    assert!(decoded.max_abs_diff(&direct) <= 0.5 / 255.0 + 1e-12);

    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/image"), None).await;
    let masks = v["masks"].as_array().unwrap();
    assert_eq!(masks.len(), world.num_concepts());
    let segs = segment(&direct, world.spec()).unwrap();
    for m in masks {
        let name = m["concept"].as_str().unwrap();
        assert_eq!(m["pixels"].as_u64().unwrap() as usize, segs.mask(name).unwrap().count());
    }
}

#[tokio::test]
async fn zero_strength_leaves_image_bytes_unchanged() {
    let app = router(studio());
    let world = World::default_world();
    let id = session(&app, 3).await;
    let before = image(&app, &id).await;
    let body = json!({ "layer": 4, "units": tree_units(&world), "locations": all_cells(), "mode": "ablate", "strength": 0.0 });
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/intervene"), Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["image"].as_str().unwrap(), before);
    assert!(v["areaDeltas"].as_object().unwrap().values().all(|d| d.as_f64() == Some(0.0)));
}

#[tokio::test]
async fn ablating_tree_units_everywhere_clears_tree() {
    let app = router(studio());
    let world = World::default_world();
    let seed = seed_with_tree(&world);
    let id = session(&app, seed).await;
    let body = json!({ "layer": UNIT_LAYER, "units": tree_units(&world), "locations": all_cells(), "mode": "ablate", "strength": 1.0 });
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/intervene"), Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let tree = v["masks"].as_array().unwrap().iter().find(|m| m["concept"] == "tree").unwrap();
    assert_eq!(tree["pixels"], 0);
    assert!(v["areaDeltas"]["tree"].as_f64().unwrap() < 0.0);
    assert!(v["ace"]["tree"].as_f64().unwrap() > 0.0);
    assert_eq!(v["stackDepth"], 1);
}

#[tokio::test]
async fn undo_restores_prior_bytes() {
    let app = router(studio());
    let world = World::default_world();
    let id = session(&app, 9).await;
    let before = image(&app, &id).await;
    let body = json!({ "layer": 4, "units": tree_units(&world), "locations": [[4, 4], [4, 5]], "mode": "insert", "strength": 1.0 });
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/intervene"), Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(v["image"].as_str().unwrap(), before);
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["image"].as_str().unwrap(), before);
    assert_eq!(v["stackDepth"], 0);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn replaying_a_stack_on_a_fresh_service_gives_identical_bytes() {
    let world = World::default_world();
    let requests = [
        json!({ "layer": 4, "units": tree_units(&world), "locations": [[5, 2], [5, 3]], "mode": "insert", "strength": 1.0 }),
        json!({ "layer": 4, "units": [0, 1, 2, 3], "locations": [[0, 0], [0, 1], [1, 1]], "mode": "ablate", "strength": 0.6 }),
        json!({ "layer": 5, "units": [1, 2], "locations": [[2, 2]], "mode": "insert", "strength": 0.3 }),
    ];
    let mut finals = Vec::new();
    let mut states = Vec::new();
    for _ in 0..2 {
        let app = router(studio());
        let id = session(&app, 21).await;
        for r in &requests {
            let (s, v) = call(&app, "POST", &format!("/sessions/{id}/intervene"), Some(r.clone())).await;
            assert_eq!(s, StatusCode::OK, "{v}");
        }
        finals.push(image(&app, &id).await);
        states.push(call(&app, "GET", &format!("/sessions/{id}"), None).await.1);
    }
    assert_eq!(finals[0], finals[1]);
    assert_eq!(states[0], states[1]);
    assert_eq!(states[0]["stack"].as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sessions_are_isolated_under_interleaving() {
    let app = router(studio());
    let world = World::default_world();
    let a = session(&app, 1).await;
    let b = session(&app, 1).await;
    let b_before = image(&app, &b).await;
    let units = tree_units(&world);
    let tasks: Vec<_> = (0..6)
        .map(|k| {
            let (app, a, units) = (app.clone(), a.clone(), units.clone());
            tokio::spawn(async move {
                let body = json!({ "layer": 4, "units": units, "locations": [[k, k]], "mode": "insert", "strength": 1.0 });
                call(&app, "POST", &format!("/sessions/{a}/intervene"), Some(body)).await.0
            })
        })
        .collect();
    let reads: Vec<_> = (0..6)
        .map(|_| {
            let (app, b) = (app.clone(), b.clone());
            tokio::spawn(async move { image(&app, &b).await })
        })
        .collect();
    let mut ok = 0;
    for t in tasks {
        let s = t.await.unwrap();
        assert!(s == StatusCode::OK || s == StatusCode::CONFLICT, "{s}");
        ok += (s == StatusCode::OK) as usize;
    }
    for r in reads {
        assert_eq!(r.await.unwrap(), b_before);
    }
    let (_, state) = call(&app, "GET", &format!("/sessions/{a}"), None).await;
    assert_eq!(state["stack"].as_array().unwrap().len(), ok);
    let (_, state) = call(&app, "GET", &format!("/sessions/{b}"), None).await;
    assert_eq!(state["stack"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn error_statuses() {
    let s = studio();
    let app = router(s.clone());
    let (st, v) = call(&app, "GET", "/sessions/nope/image", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    assert_eq!(call(&app, "POST", "/sessions/nope/undo", None).await.0, StatusCode::NOT_FOUND);

    let (st, _) = call(&app, "POST", "/sessions", Some(json!({ "seed": "x" }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&app, "POST", "/sessions", Some(json!({ "seed": 1, "worldRef": "missing" }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let id = session(&app, 2).await;
    let uri = format!("/sessions/{id}/intervene");
    for bad in [
        json!({ "layer": 4, "units": [64], "locations": [[0, 0]], "mode": "ablate", "strength": 1.0 }),
        json!({ "layer": 4, "units": [1], "locations": [[8, 0]], "mode": "ablate", "strength": 1.0 }),
        json!({ "layer": 4, "units": [], "locations": [[0, 0]], "mode": "ablate", "strength": 1.0 }),
        json!({ "layer": 4, "units": [1], "locations": [[0, 0]], "mode": "ablate", "strength": 1.5 }),
        json!({ "layer": 4, "units": [1], "locations": [[0, 0]], "mode": "paint", "strength": 1.0 }),
        json!({ "layer": 9, "units": [1], "locations": [[0, 0]], "mode": "ablate", "strength": 1.0 }),
        json!({ "units": [1] }),
    ] {
        let (st, v) = call(&app, "POST", &uri, Some(bad.clone())).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{bad} -> {v}");
    }

    let guard = s.hold(&id).await.unwrap();
    let ok = json!({ "layer": 4, "units": [1], "locations": [[0, 0]], "mode": "ablate", "strength": 1.0 });
    assert_eq!(call(&app, "POST", &uri, Some(ok.clone())).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", &format!("/sessions/{id}/undo"), None).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "DELETE", &format!("/sessions/{id}"), None).await.0, StatusCode::CONFLICT);
    // reads are not mutations
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}/image"), None).await.0, StatusCode::OK);
    drop(guard);
    assert_eq!(call(&app, "POST", &uri, Some(ok)).await.0, StatusCode::OK);

    assert_eq!(call(&app, "DELETE", &format!("/sessions/{id}"), None).await.0, StatusCode::NO_CONTENT);
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn units_endpoint_reports_labels_and_rankings() {
    let app = router(studio());
    let id = session(&app, 0).await;
    let (st, v) = call(&app, "GET", &format!("/sessions/{id}/units?layer=4"), None).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["layer"], 4);
    let units = v["units"].as_array().unwrap();
    assert_eq!(units.len(), 64);
    assert_eq!(units[40]["concept"], "tree");
    let ranking = v["rankings"]["tree"].as_array().unwrap();
    assert_eq!(ranking.len(), 64);
    assert_eq!(v["alpha"]["tree"].as_array().unwrap().len(), 64);
    let (st, again) = call(&app, "GET", &format!("/sessions/{id}/units"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(again, v);
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}/units?layer=0"), None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cors_allows_any_origin() {
    let app = router(studio());
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert_eq!(res.headers()["access-control-allow-origin"], "*");
}
