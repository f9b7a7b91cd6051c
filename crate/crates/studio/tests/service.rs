use std::net::SocketAddr;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use lots_core::checkpoint::save_checkpoint;
use lots_core::diffusion::{LotsModel, ModelConfig};
use lots_core::pair_codec::SketchMap;
use lots_studio::api::encode_sketch;
use lots_studio::{CheckpointList, ErrorBody, Health, LoadResult, RunStatus, RunView, Studio, StudioConfig, Submitted};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

const CANVAS: usize = 64;

struct Server {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Server {
    fn start(cfg: StudioConfig) -> Result<Server, String> {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let studio = match Studio::new(cfg).await {
                    Ok(s) => s,
                    Err(e) => {
                        addr_tx.send(Err(e.to_string())).unwrap();
                        return;
                    }
                };
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(Ok(listener.local_addr().unwrap())).unwrap();
                lots_studio::serve_on(listener, studio, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
            rt.shutdown_timeout(Duration::from_secs(30));
        });
        let addr = addr_rx.recv().unwrap()?;
        Ok(Server {
            addr,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn write_checkpoint(dir: &Path, id: &str, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    save_checkpoint(&LotsModel::new(&cfg).unwrap(), &dir.join(format!("{id}.safetensors"))).unwrap();
}

fn config(root: &Path, checkpoint: Option<&str>) -> StudioConfig {
    StudioConfig {
        data_dir: root.join("data"),
        checkpoint_dir: root.join("checkpoints"),
        checkpoint: checkpoint.map(String::from),
        canvas: CANVAS,
        default_steps: 4,
        ..Default::default()
    }
}

fn sketch(seed: usize) -> String {
    encode_sketch(&SketchMap::from_fn(CANVAS, CANVAS, |y, x| (x * 3 + y * 7 + seed) % 11 == 0).unwrap())
}

fn two_pair_request(seed: u64) -> Value {
    json!({
        "global_text": "A full body photo of a model",
        "pairs": [
            {"sketch": sketch(0), "text": "A red and white striped shirt"},
            {"sketch": sketch(5), "text": "Pleated blue shorts"}
        ],
        "alpha": 0.8,
        "steps": 4,
        "seed": seed
    })
}

fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(60)).build().unwrap()
}

fn submit(c: &Client, s: &Server, body: &Value) -> Submitted {
    let resp = c.post(s.url("/generate")).json(body).send().unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    resp.json().unwrap()
}

fn run(c: &Client, s: &Server, id: &str) -> RunView {
    c.get(s.url(&format!("/runs/{id}"))).send().unwrap().json().unwrap()
}

fn wait_until(c: &Client, s: &Server, id: &str, done: impl Fn(RunStatus) -> bool) -> RunView {
    let start = Instant::now();
    loop {
        let r = run(c, s, id);
        if done(r.record.status) {
            return r;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "run {id} stuck in {:?}", r.record.status);
        thread::sleep(Duration::from_millis(20));
    }
}

fn wait_done(c: &Client, s: &Server, id: &str) -> RunView {
    wait_until(c, s, id, RunStatus::is_terminal)
}

fn image(c: &Client, s: &Server, id: &str) -> Vec<u8> {
    let resp = c.get(s.url(&format!("/runs/{id}/image"))).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    resp.bytes().unwrap().to_vec()
}

fn error(resp: reqwest::blocking::Response, status: StatusCode) -> ErrorBody {
    assert_eq!(resp.status(), status);
    resp.json().unwrap()
}

#[test]
fn round_trip_two_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&dir.path().join("checkpoints"), "tiny", 1);
    let s = Server::start(config(dir.path(), Some("tiny"))).unwrap();
    let c = client();
    let h: Health = c.get(s.url("/health")).send().unwrap().json().unwrap();
    assert_eq!(h.checkpoint.as_deref(), Some("tiny"));
    assert_eq!((h.canvas, h.image_size), (CANVAS, Some(16)));

    let start = Instant::now();
    let sub = submit(&c, &s, &two_pair_request(7));
    assert_eq!(sub.status, RunStatus::Pending);
    assert_eq!(sub.seed, 7);
    let done = wait_done(&c, &s, &sub.run_id);
    assert!(start.elapsed() < Duration::from_secs(30));
    assert_eq!(done.record.status, RunStatus::Done, "{:?}", done.record.error);
    assert_eq!(done.record.checkpoint_id.as_deref(), Some("tiny"));
    assert_eq!(done.record.request_digest, sub.request_digest);
    assert_eq!(done.record.request.pairs.len(), 2);
    assert_eq!(done.image_url.as_deref(), Some(format!("/runs/{}/image", sub.run_id).as_str()));
    let prov = done.record.provenance.unwrap();
    assert_eq!((prov.seed, prov.steps, prov.alpha), (7, 4, 0.8));
    assert_eq!(prov.run_id.as_deref(), Some(sub.run_id.as_str()));

    let png = image(&c, &s, &sub.run_id);
    let decoded = image::load_from_memory(&png).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (16, 16));
    let sha = done.record.image_sha256.unwrap();
    let by_hash = c.get(s.url(&format!("/images/{sha}.png"))).send().unwrap();
    assert_eq!(by_hash.bytes().unwrap().to_vec(), png);

    let runs: Vec<RunView> = c.get(s.url("/runs")).send().unwrap().json().unwrap();
    assert_eq!(runs.len(), 1);
}

#[test]
fn identical_requests_give_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&dir.path().join("checkpoints"), "tiny", 1);
    let mut cfg = config(dir.path(), Some("tiny"));
    cfg.workers = 2;
    let s = Server::start(cfg).unwrap();
    let c = client();
    let a = submit(&c, &s, &two_pair_request(11));
    let b = submit(&c, &s, &two_pair_request(11));
    let other = submit(&c, &s, &two_pair_request(12));
    assert_ne!(a.run_id, b.run_id);
    assert_eq!(a.request_digest, b.request_digest);
    assert_ne!(a.request_digest, other.request_digest);
    for id in [&a.run_id, &b.run_id, &other.run_id] {
        assert_eq!(wait_done(&c, &s, id).record.status, RunStatus::Done);
    }
    assert_eq!(image(&c, &s, &a.run_id), image(&c, &s, &b.run_id));
    assert_ne!(image(&c, &s, &a.run_id), image(&c, &s, &other.run_id));
    // same content, one stored file
    let files = std::fs::read_dir(dir.path().join("data/images")).unwrap().count();
    assert_eq!(files, 2);
}

#[test]
fn validation_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&dir.path().join("checkpoints"), "tiny", 1);
    let s = Server::start(config(dir.path(), Some("tiny"))).unwrap();
    let c = client();
    let field = |body: Value| {
        let e = error(c.post(s.url("/generate")).json(&body).send().unwrap(), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(e.error.code, "validation");
        e.error.field.unwrap()
    };
    let mut r = two_pair_request(1);
    r["alpha"] = json!(1.5);
    assert_eq!(field(r), "alpha");
    let mut r = two_pair_request(1);
    r["steps"] = json!(0);
    assert_eq!(field(r), "steps");
    let mut r = two_pair_request(1);
    r["pairs"] = json!((0..7).map(|i| json!({"sketch": sketch(i), "text": "A hat"})).collect::<Vec<_>>());
    assert_eq!(field(r), "pairs");
    let mut r = two_pair_request(1);
    r["pairs"][1]["sketch"] = json!("not base64!");
    assert_eq!(field(r), "pairs[1].sketch");
    let mut r = two_pair_request(1);
    r["pairs"][0]["sketch"] = json!(encode_sketch(&SketchMap::zeros(32, 32).unwrap()));
    assert_eq!(field(r), "pairs[0].sketch");
    let mut r = two_pair_request(1);
    r["pairs"][1]["text"] = json!("   ");
    assert_eq!(field(r), "pairs[1].text");
    assert_eq!(field(json!({"alhpa": 0.5})), "body");
    let runs: Vec<RunView> = c.get(s.url("/runs")).send().unwrap().json().unwrap();
    assert!(runs.is_empty());

    let empty = submit(&c, &s, &json!({"seed": 3}));
    let done = wait_done(&c, &s, &empty.run_id);
    assert_eq!(done.record.status, RunStatus::Done);
    assert_eq!(done.record.request.steps, 4);
    assert_eq!(done.record.request.alpha, 1.0);
}

#[test]
fn fresh_install_has_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path(), None)).unwrap();
    let c = client();
    let h: Health = c.get(s.url("/health")).send().unwrap().json().unwrap();
    assert_eq!(h.checkpoint, None);
    let list: CheckpointList = c.get(s.url("/checkpoints")).send().unwrap().json().unwrap();
    assert_eq!(list, CheckpointList { active: None, checkpoints: vec![] });
    let e = error(c.post(s.url("/generate")).json(&two_pair_request(1)).send().unwrap(), StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(e.error.code, "unavailable");
    let e = error(c.get(s.url("/runs/nope")).send().unwrap(), StatusCode::NOT_FOUND);
    assert_eq!(e.error.code, "not_found");
    error(c.get(s.url("/runs/nope/image")).send().unwrap(), StatusCode::NOT_FOUND);
    error(c.get(s.url("/dataset/records")).send().unwrap(), StatusCode::NOT_FOUND);
    assert!(Server::start(config(dir.path(), Some("missing"))).is_err());
}

#[test]
fn checkpoint_swap_keeps_in_flight_jobs_on_old_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpts = dir.path().join("checkpoints");
    write_checkpoint(&ckpts, "a", 1);
    write_checkpoint(&ckpts, "b", 2);
    std::fs::write(ckpts.join("broken.safetensors"), b"definitely not a checkpoint").unwrap();
    let mut cfg = config(dir.path(), Some("a"));
    cfg.queue_capacity = 1;
    let s = Server::start(cfg).unwrap();
    let c = client();
    let list: CheckpointList = c.get(s.url("/checkpoints")).send().unwrap().json().unwrap();
    let ids: Vec<&str> = list.checkpoints.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "broken"]);
    assert_eq!(list.active.as_deref(), Some("a"));

    let mut long = two_pair_request(5);
    long["steps"] = json!(1000);
    let slow = submit(&c, &s, &long);
    wait_until(&c, &s, &slow.run_id, |st| st != RunStatus::Pending);
    let queued = submit(&c, &s, &two_pair_request(5));
    let pending = run(&c, &s, &queued.run_id);
    assert_eq!(pending.record.status, RunStatus::Pending);
    assert_eq!(pending.image_url, None);
    let e = error(c.get(s.url(&format!("/runs/{}/image", queued.run_id))).send().unwrap(), StatusCode::CONFLICT);
    assert_eq!(e.error.code, "not_ready");
    let e = error(c.post(s.url("/generate")).json(&two_pair_request(6)).send().unwrap(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(e.error.message.contains("queue"));

    let loaded: LoadResult = c.post(s.url("/checkpoints/b/load")).send().unwrap().json().unwrap();
    assert_eq!(loaded, LoadResult { active: "b".into(), previous: Some("a".into()) });
    let e = error(c.post(s.url("/checkpoints/broken/load")).send().unwrap(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e.error.code, "checkpoint_rejected");
    error(c.post(s.url("/checkpoints/gone/load")).send().unwrap(), StatusCode::NOT_FOUND);
    error(c.post(s.url("/checkpoints/..%2Fx/load")).send().unwrap(), StatusCode::UNPROCESSABLE_ENTITY);
    let h: Health = c.get(s.url("/health")).send().unwrap().json().unwrap();
    assert_eq!(h.checkpoint.as_deref(), Some("b"));

    assert_eq!(wait_done(&c, &s, &slow.run_id).record.checkpoint_id.as_deref(), Some("a"));
    let on_b = wait_done(&c, &s, &queued.run_id);
    assert_eq!(on_b.record.checkpoint_id.as_deref(), Some("b"));

    c.post(s.url("/checkpoints/a/load")).send().unwrap();
    let on_a = submit(&c, &s, &two_pair_request(5));
    assert_eq!(wait_done(&c, &s, &on_a.run_id).record.checkpoint_id.as_deref(), Some("a"));
    assert_ne!(image(&c, &s, &on_a.run_id), image(&c, &s, &queued.run_id));
}

#[test]
fn completed_runs_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&dir.path().join("checkpoints"), "tiny", 1);
    let (id, png) = {
        let s = Server::start(config(dir.path(), Some("tiny"))).unwrap();
        let c = client();
        let sub = submit(&c, &s, &two_pair_request(9));
        wait_done(&c, &s, &sub.run_id);
        (sub.run_id.clone(), image(&c, &s, &sub.run_id))
    };
    let s = Server::start(config(dir.path(), None)).unwrap();
    let c = client();
    let r = run(&c, &s, &id);
    assert_eq!(r.record.status, RunStatus::Done);
    assert_eq!(image(&c, &s, &id), png);
}

#[test]
fn dataset_records_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    std::fs::create_dir_all(ds.join("images")).unwrap();
    SketchMap::zeros(8, 8).unwrap().save_png(&ds.join("images/1.png")).unwrap();
    std::fs::write(
        ds.join("manifest.json"),
        json!({"schema_version": 1, "records": []}).to_string(),
    )
    .unwrap();
    let mut cfg = config(dir.path(), None);
    cfg.dataset_dir = Some(ds);
    let s = Server::start(cfg).unwrap();
    let c = client();
    let records: Vec<Value> = c.get(s.url("/dataset/records")).send().unwrap().json().unwrap();
    assert!(records.is_empty());
    error(c.get(s.url("/dataset/records/1")).send().unwrap(), StatusCode::NOT_FOUND);
    let ok = c.get(s.url("/dataset/files/images/1.png")).send().unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    error(c.get(s.url("/dataset/files/manifest.json")).send().unwrap(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_ne!(c.get(s.url("/dataset/files/images/..%2F..%2Fsecret.png")).send().unwrap().status(), StatusCode::OK);
}
