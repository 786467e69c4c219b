#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;
use std::sync::Arc;

use convkg::index::{build_index, read_corpus};
use convkg::linking::{load_kb, Gazetteer};
use convkg::pipeline::{Pipeline, PipelineBuilder, PipelineConfig};
use convkg::InvertedIndex;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_index() -> Arc<InvertedIndex> {
    Arc::new(build_index(read_corpus(&fixture("corpus.jsonl")).unwrap()).unwrap())
}

/// The stub pipeline over the fixture corpus, gazetteer and KB.
pub fn fixture_pipeline(config: PipelineConfig) -> Pipeline {
    PipelineBuilder::new(fixture_index())
        .kb(Arc::new(load_kb(&fixture("kb.jsonl")).unwrap()))
        .linker(Box::new(Gazetteer::load(&fixture("gazetteer.jsonl")).unwrap()))
        .config(config)
        .build()
        .unwrap()
}

/// The fixture config with its relative paths resolved and `index` pointed at `index_dir`.
pub fn fixture_config(index_dir: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixture("config.json")).unwrap();
    cfg.index = index_dir.to_path_buf();
    cfg
}

/// Runs a blocking HTTP server for `router` on an ephemeral port in a
/// background thread and returns its base URL.
pub fn spawn_server(router: axum::Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}
