mod common;

use common::StubServer;
use multimatch::coordination::passthrough;
use multimatch::embed::{embed_dataset, EmbedderConfig, EmbedderKind};
use multimatch::synth::{generate, SynthSpec};
use multimatch::{EntityRef, Error};
use serde_json::{json, Value};

const DIM: usize = 8;

/// Deterministic toy vectors: text length and byte sum in the first two slots.
fn vectors_for(body: &Value, dim: usize) -> String {
    let texts = body["texts"].as_array().cloned().unwrap_or_default();
    let vectors: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| {
            let s = t.as_str().unwrap_or_default();
            let mut v = vec![0.0; dim];
            v[0] = s.len() as f64;
            v[1] = s.bytes().map(f64::from).sum::<f64>() / 100.0;
            v[dim - 1] = 1.0;
            v
        })
        .collect();
    json!({ "vectors": vectors }).to_string()
}

fn config(url: &str) -> EmbedderConfig {
    EmbedderConfig {
        kind: EmbedderKind::ExternalService,
        dimension: DIM,
        batch_size: 7,
        endpoint: Some(url.to_string()),
        timeout_secs: 5.0,
        retry_limit: 1,
        ..EmbedderConfig::default()
    }
}

fn dataset() -> multimatch::Dataset {
    generate(&SynthSpec {
        n_tables: 2,
        n_entities: 12,
        presence_prob: 1.0,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap()
}

#[test]
fn external_vectors_are_normalized_and_batched() {
    let server = StubServer::start(|_, body| (200, vectors_for(body, DIM)));
    let coordinated = passthrough(&dataset()).unwrap();
    let embeddings = embed_dataset(&coordinated, &config(&server.url)).unwrap();
    assert_eq!(embeddings.dim(), DIM);
    assert_eq!(embeddings.len(), 24);
    assert_eq!(server.hits(), 2 * 12usize.div_ceil(7));
    for (e, v) in embeddings.iter() {
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "{e} has norm {norm}");
        let text = coordinated.text(e).unwrap();
        assert!(v[0] > 0.0 && (v[0] / v[DIM - 1] - text.len() as f32).abs() < 1e-2);
    }
}

#[test]
fn failed_first_attempt_is_retried() {
    let server = StubServer::start(|n, body| if n == 0 { (502, "{}".into()) } else { (200, vectors_for(body, DIM)) });
    let coordinated = passthrough(&dataset()).unwrap();
    embed_dataset(&coordinated, &config(&server.url)).unwrap();
    assert_eq!(server.hits(), 1 + 2 * 12usize.div_ceil(7));
}

#[test]
fn dimension_mismatch_names_the_batch() {
    let server = StubServer::start(|_, body| (200, vectors_for(body, DIM + 1)));
    let coordinated = passthrough(&dataset()).unwrap();
    match embed_dataset(&coordinated, &config(&server.url)) {
        Err(Error::Embedding { attempts, entity, message }) => {
            assert_eq!(attempts, 2);
            assert!(message.contains("dimension"), "{message}");
            let e = entity.expect("failing batch identified");
            assert_eq!(e.row_index % 7, 0);
            assert!(e < EntityRef::new(2, 0));
        }
        other => panic!("expected embedding error, got {other:?}"),
    }
}

#[test]
fn missing_endpoint_is_a_config_error() {
    let cfg = EmbedderConfig {
        kind: EmbedderKind::ExternalService,
        endpoint: None,
        ..EmbedderConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
