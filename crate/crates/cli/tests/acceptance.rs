//! Acceptance run: one PASS or FAIL line per primary criterion. Exits with
//! status 1 when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

#[path = "../../core/tests/checks/oracles.rs"]
mod oracles;
#[path = "../../core/tests/checks/gradients.rs"]
mod gradients;

use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use resmonet_core::analyzer::{count_params, PUBLISHED};
use resmonet_core::expert::{evaluate, read_responses, Band};
use resmonet_core::graph::{assemble_resmonet, format_graph, save_weights, ResMoNetConfig};
use resmonet_core::profiler::{measure_mmu, measure_rte, ProfileConfig};
use resmonet_core::rng::Rng;
use resmonet_core::synthetic::{desk_split, desk_train_config, generate, DESK_PER_CLASS, DESK_SIDE};
use resmonet_core::trainer::{train_with, Prepared, Progress, TrainHistory};
use resmonet_core::vision::{augment, crop, flip_horizontal, resize_bilinear, FaceBox, Image, INPUT_SIDE};
use resmonet_core::WeightStore;
use resmonet_session::auth::credential_line;
use resmonet_session::store::Store;
use resmonet_session::wire::{canonical_session, decode_session, encode_session, SessionSlice};
use resmonet_session::{ActivityNote, EmotionFrame, PatientCard};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

const CHILD_ENV: &str = "RESMONET_ACCEPTANCE_WRITER";

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_panicking(f: impl FnOnce()) -> Result<(), String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

fn expert_cohort() -> Outcome {
    const SUS: [f64; 5] = [75.0, 70.0, 82.5, 75.0, 65.0];
    const W_USABILITY: [f64; 5] = [29.79, 16.09, 6.28, 17.57, 4.07];
    const W_UTILITY: [f64; 5] = [1.39, 1.09, 0.21, 1.00, 0.25];
    let responses = read_responses(&common::fixture("experts.csv")).map_err(|e| e.to_string())?;
    let report = evaluate(&responses).map_err(|e| e.to_string())?;
    ensure(report.experts.len() == 5, || format!("{} experts", report.experts.len()))?;
    for (i, e) in report.experts.iter().enumerate() {
        ensure(e.sus_score == SUS[i], || format!("{} SUS {} != {}", e.id, e.sus_score, SUS[i]))?;
        ensure((e.weighted_usability - W_USABILITY[i]).abs() <= 0.02, || {
            format!("{} weighted usability {}", e.id, e.weighted_usability)
        })?;
        ensure((e.weighted_utility - W_UTILITY[i]).abs() <= 0.02, || {
            format!("{} weighted utility {}", e.id, e.weighted_utility)
        })?;
    }
    ensure((report.total_usability - 73.8).abs() <= 0.1, || format!("usability {}", report.total_usability))?;
    ensure((report.total_utility - 3.94).abs() <= 0.01, || format!("utility {}", report.total_utility))?;
    ensure(report.band == Band::Good, || format!("band {}", report.band))?;
    Ok(format!(
        "SUS {:?}, usability {:.2}, utility {:.3}, band {}",
        report.experts.iter().map(|e| e.sus_score).collect::<Vec<_>>(),
        report.total_usability,
        report.total_utility,
        report.band
    ))
}

fn multadd_convention() -> Outcome {
    let mut worst = (0.0f64, "");
    for row in PUBLISHED {
        let r = row.per_weight_residual();
        ensure(r < 0.005, || format!("{}: |2NP - MA|/MA = {r:.5}", row.model))?;
        if r > worst.0 {
            worst = (r, row.model);
        }
    }
    Ok(format!("6 pairs, largest residual {:.5} ({})", worst.0, worst.1))
}

fn parameter_oracle() -> Outcome {
    let corpus = common::corpus();
    ensure(corpus.len() >= 20, || format!("corpus has {} graphs", corpus.len()))?;
    for (name, graph) in &corpus {
        let counted = count_params(graph).total as usize;
        let enumerated = WeightStore::<f32>::init(graph, 5).scalar_count();
        ensure(counted == enumerated, || format!("{name}: counted {counted}, enumerated {enumerated}"))?;
    }
    let graph = assemble_resmonet(&ResMoNetConfig::default()).map_err(|e| e.to_string())?;
    let np = count_params(&graph).total as i64;
    Ok(format!(
        "{} graphs exact; default ResMoNet NP {np} vs published 1721614 (delta {}, informational)",
        corpus.len(),
        np - 1_721_614
    ))
}

fn numerical_correctness() -> Outcome {
    use {gradients as g, oracles as o};
    let forward: [(&str, fn()); 7] = [
        ("conv2d", o::conv2d_matches_loops),
        ("depthwise", o::depthwise_matches_loops),
        ("pointwise", o::pointwise_matches_loops),
        ("dense", o::dense_matches_loops),
        ("pools", o::pools_match_loops),
        ("batchnorm", o::batchnorm_matches_loops),
        ("elementwise", o::elementwise_ops_match_loops),
    ];
    let backward: [(&str, fn()); 8] = [
        ("conv2d", g::conv2d_backward_matches),
        ("depthwise", g::depthwise_backward_matches),
        ("dense", g::dense_backward_matches),
        ("batchnorm", g::batchnorm_backward_matches),
        ("pool", g::pool_backward_matches),
        ("activations", g::activation_backwards_match),
        ("whole model", g::whole_model_backward_matches),
        ("resmonet", g::resmonet_backward_matches_sampled),
    ];
    for (name, f) in forward {
        run_panicking(f).map_err(|e| format!("forward {name}: {e}"))?;
    }
    for (name, f) in backward {
        run_panicking(f).map_err(|e| format!("backward {name}: {e}"))?;
    }
    Ok("7 forward oracle groups on 100 shapes each within 1e-5; 8 backward groups within rel. err 1e-4".into())
}

fn augmentation() -> Outcome {
    let mut rng = Rng::new(42);
    let mut images: Vec<Image> = generate(1, 9).into_iter().map(|e| e.image).collect();
    for _ in 0..3 {
        images.push(Image::from_fn(INPUT_SIDE, INPUT_SIDE, |_, _| {
            [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8]
        }));
    }
    let crop_at = |img: &Image, x, y, side| {
        resize_bilinear(&crop(img, FaceBox { x, y, w: side, h: side }).expect("in bounds"), INPUT_SIDE)
    };
    for (n, img) in images.iter().enumerate() {
        let v = augment(img).map_err(|e| e.to_string())?;
        ensure(v.len() == 12, || format!("image {n}: {} outputs", v.len()))?;
        let mut base = vec![img.clone()];
        for (x, y) in [(0, 0), (38, 0), (0, 38), (38, 38)] {
            base.push(crop_at(img, x, y, 186));
        }
        base.push(crop_at(img, 38, 38, 148));
        for i in 0..6 {
            ensure(v[i] == base[i], || format!("image {n}: variant {i} differs"))?;
            ensure(v[i + 6] == flip_horizontal(&base[i]), || format!("image {n}: variant {} differs", i + 6))?;
        }
        ensure(flip_horizontal(&flip_horizontal(img)) == *img, || format!("image {n}: flip is not an involution"))?;
    }
    let odd = Image::filled(200, 224, [0, 0, 0]);
    ensure(augment(&odd).is_err(), || "a 200x224 input was accepted".into())?;
    Ok(format!("{} inputs x 12 outputs, crops at 0/38, flip involution bit-exact", images.len()))
}

struct Trained {
    dir: PathBuf,
}

fn desk_training(seed: u64, keep: &Path) -> Result<(String, Trained), String> {
    let graph = assemble_resmonet(&ResMoNetConfig::desk(DESK_SIDE)).map_err(|e| e.to_string())?;
    let run = || -> Result<(WeightStore, TrainHistory, f64), String> {
        let start = Instant::now();
        let split = desk_split(DESK_PER_CLASS, seed).map_err(|e| e.to_string())?;
        let tr = Prepared::new(&split.train, DESK_SIDE);
        let te = Prepared::new(&split.test, DESK_SIDE);
        let (w, h) = train_with(&graph, &tr, &te, &desk_train_config(seed), |r| {
            if r.train_acc >= 0.9 && r.test_acc >= 0.8 {
                Progress::Stop
            } else {
                Progress::Continue
            }
        })
        .map_err(|e| e.to_string())?;
        Ok((w, h, start.elapsed().as_secs_f64()))
    };
    let (w1, h1, secs) = run()?;
    let last = *h1.last().ok_or("no epochs")?;
    ensure(last.epoch <= 50 && last.train_acc >= 0.9 && last.test_acc >= 0.8, || {
        format!("stopped at epoch {} with train {:.3} test {:.3}", last.epoch, last.train_acc, last.test_acc)
    })?;
    let (w2, h2, _) = run()?;
    ensure(w1 == w2 && h1 == h2, || "a rerun with the same seed differs".into())?;
    std::fs::create_dir_all(keep).map_err(|e| e.to_string())?;
    std::fs::write(keep.join("model.graph"), format_graph(&graph)).map_err(|e| e.to_string())?;
    save_weights(&w1, &keep.join("model.weights")).map_err(|e| e.to_string())?;
    Ok((
        format!(
            "seed {seed}: epoch {} train_acc {:.3} test_acc {:.3} in {secs:.1} s; rerun bit-exact",
            last.epoch, last.train_acc, last.test_acc
        ),
        Trained { dir: keep.to_path_buf() },
    ))
}

fn profiler_protocol() -> Outcome {
    let cfg = ProfileConfig {
        runs: 5,
        run_duration: Duration::from_secs(10),
        ..ProfileConfig::default()
    };
    let r = measure_rte(&cfg, || {
        thread::sleep(Duration::from_millis(50));
        Ok::<(), std::convert::Infallible>(())
    })
    .map_err(|e| e.to_string())?;
    let rte = r.rte_seconds();
    ensure((0.050..=0.060).contains(&rte), || format!("RTE {rte:.4} s"))?;
    ensure(r.runs.len() == 5, || format!("{} runs", r.runs.len()))?;
    let total: usize = r.runs.iter().map(|s| s.samples).sum();
    ensure(total == r.samples(), || "sample totals disagree".into())?;
    for (i, s) in r.runs.iter().enumerate() {
        ensure((167..=201).contains(&s.samples), || format!("run {i}: {} samples", s.samples))?;
        ensure(s.total_seconds >= 10.0, || format!("run {i}: {} s", s.total_seconds))?;
    }
    let seconds: f64 = r.runs.iter().map(|s| s.total_seconds).sum();
    ensure((rte - seconds / total as f64).abs() < 1e-12, || "RTE is not total time over samples".into())?;
    let (mem, _) = measure_mmu(Duration::from_millis(5), || {
        let buf = vec![1u8; 50_000_000];
        thread::sleep(Duration::from_millis(100));
        std::hint::black_box(buf.len())
    })
    .map_err(|e| e.to_string())?;
    ensure(mem.growth_mb() >= 50.0, || format!("MMU growth {:.2} MB", mem.growth_mb()))?;
    Ok(format!(
        "RTE {rte:.4} s over {total} samples ({:?} per run); MMU peak - baseline {:.1} MB",
        r.runs.iter().map(|s| s.samples).collect::<Vec<_>>(),
        mem.growth_mb()
    ))
}

fn random_text(rng: &mut Rng, max: u64) -> String {
    const ALPHABET: [&str; 12] = ["a", "Z", "7", " ", "|", "\\", "\n", "\r", "ñ", "é", "😀", ","];
    (0..rng.below(max + 1)).map(|_| ALPHABET[rng.below(ALPHABET.len() as u64) as usize]).collect()
}

fn random_session(rng: &mut Rng) -> (PatientCard, SessionSlice) {
    let card = PatientCard {
        patient_id: format!("P-{}", rng.below(1_000_000)),
        display_name: random_text(rng, 20),
        age: rng.below(110) as u32,
        notes: random_text(rng, 40),
    };
    let mut t = 0;
    let frames = (0..rng.below(80))
        .map(|_| {
            t += rng.below(2000);
            let mut p = [0u8; 7];
            let mut left = 100;
            for v in p.iter_mut().take(6) {
                *v = rng.below(left as u64 + 1) as u8;
                left -= *v;
            }
            p[6] = left;
            EmotionFrame::new(t, p).expect("sums to 100")
        })
        .collect();
    let mut t = 0;
    let activities = (0..rng.below(6))
        .map(|_| {
            t += rng.below(20_000);
            ActivityNote::new(t, format!("x{}", random_text(rng, 15))).expect("non-empty")
        })
        .collect();
    let whole = SessionSlice {
        session_id: format!("S{}", rng.below(1 << 40)),
        t0: rng.next_u64(),
        range: None,
        frames,
        activities,
    };
    let slice = if rng.below(2) == 0 {
        let (a, b) = (rng.below(80_000), rng.below(80_000));
        whole.filtered(a.min(b), a.max(b))
    } else {
        whole
    };
    (card, slice)
}

/// Writer side of the crash test: acknowledges each batch on stdout until
/// it is killed.
fn writer_child(dir: &str) -> ! {
    let store = Store::open(Path::new(dir)).expect("store");
    let (card, _) = canonical_session();
    if store.patient(&card.patient_id).is_none() {
        store.add_patient(card.clone()).expect("patient");
        store.open_session(&card.patient_id, 0).expect("session");
    }
    let mut next = store.record("s000001").expect("session").1.frames.len() as u64;
    let mut out = std::io::stdout().lock();
    loop {
        let batch: Vec<_> = (next..next + 4).map(|i| EmotionFrame::new(i * 250, [100, 0, 0, 0, 0, 0, 0]).unwrap()).collect();
        let ack = store.ingest_frames("s000001", &batch).expect("ingest");
        next += 4;
        let _ = writeln!(out, "ACK {}", ack.stored);
        let _ = out.flush();
    }
}

fn durability() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let mut acked = 0usize;
    for round in 0..3 {
        let mut child = Command::new(&exe)
            .env(CHILD_ENV, dir.path())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let lines = BufReader::new(child.stdout.take().ok_or("no stdout")?).lines();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            acked = line.strip_prefix("ACK ").and_then(|v| v.parse().ok()).ok_or(format!("bad line {line}"))?;
            if n + 1 == 25 + 10 * round {
                break;
            }
        }
        child.kill().map_err(|e| e.to_string())?;
        child.wait().map_err(|e| e.to_string())?;
        let store = Store::open(dir.path()).map_err(|e| e.to_string())?;
        let frames = store.record("s000001").map_err(|e| e.to_string())?.1.frames;
        ensure(frames.len() >= acked, || format!("round {round}: {} stored < {acked} acked", frames.len()))?;
        ensure(frames.iter().enumerate().all(|(i, f)| f.dt_ms == i as u64 * 250), || {
            format!("round {round}: stored frames are not the written prefix")
        })?;
    }
    Ok(format!("3 SIGKILL rounds, {acked} acked frames all recovered"))
}

fn wire() -> Outcome {
    let (card, slice) = canonical_session();
    let text = encode_session(&card, &slice).map_err(|e| e.to_string())?;
    ensure(text.len() <= 2048, || format!("canonical session is {} bytes", text.len()))?;
    let mut rng = Rng::new(2020);
    for i in 0..1000 {
        let (c, s) = random_session(&mut rng);
        let t = encode_session(&c, &s).map_err(|e| format!("session {i}: {e}"))?;
        let back = decode_session(&t).map_err(|e| format!("session {i}: {e}"))?;
        ensure(back == (c, s), || format!("session {i} did not round-trip"))?;
    }
    let d = durability()?;
    Ok(format!("canonical session {} bytes; 1000 random sessions round-trip; {d}", text.len()))
}

struct ServerProcess(Child);

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn end_to_end(model: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_resmonet");
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;

    let face = work.path().join("face.ppm");
    resmonet_core::vision::write_ppm(&generate(1, 77)[3].image, &face).map_err(|e| e.to_string())?;
    let o = Command::new(bin)
        .args(["infer", model.join("model.weights").to_str().unwrap(), face.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    let line = String::from_utf8_lossy(&o.stdout).into_owned();
    let probs: Vec<f64> = line
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').and_then(|(_, v)| v.parse().ok()))
        .collect();
    ensure(probs.len() == 7, || format!("infer printed `{}`", line.trim()))?;
    let sum: f64 = probs.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-6, || format!("probabilities sum to {sum}"))?;

    std::fs::write(
        work.path().join("credentials.txt"),
        format!("{}\n", credential_line("clinician", "pw").map_err(|e| e.to_string())?),
    )
    .map_err(|e| e.to_string())?;
    let conf = work.path().join("resmonet.conf");
    std::fs::write(&conf, "listen = 127.0.0.1:0\ncredentials = credentials.txt\ndata_dir = data\n").map_err(|e| e.to_string())?;
    let mut server = ServerProcess(
        Command::new(bin)
            .args(["serve", "--config", conf.to_str().unwrap()])
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?,
    );
    let mut first = String::new();
    BufReader::new(server.0.stdout.take().ok_or("no stdout")?)
        .read_line(&mut first)
        .map_err(|e| e.to_string())?;
    let addr = first.trim().strip_prefix("listening on ").ok_or(format!("server said `{}`", first.trim()))?;
    let base = format!("http://{addr}");

    let client = reqwest::blocking::Client::new();
    let err = |e: reqwest::Error| e.to_string();
    let token = client
        .post(format!("{base}/api/login"))
        .json(&json!({"user": "clinician", "secret": "pw"}))
        .send()
        .map_err(err)?
        .json::<Value>()
        .map_err(err)?["token"]
        .as_str()
        .ok_or("no token")?
        .to_string();
    let (card, slice) = canonical_session();
    let r = client.post(format!("{base}/api/patients")).bearer_auth(&token).json(&card).send().map_err(err)?;
    ensure(r.status().is_success(), || format!("add patient: {}", r.status()))?;
    let opened: Value = client
        .post(format!("{base}/api/sessions"))
        .bearer_auth(&token)
        .json(&json!({"patient_id": card.patient_id, "t0": slice.t0}))
        .send()
        .map_err(err)?
        .json()
        .map_err(err)?;
    let id = opened["session_id"].as_str().ok_or("no session id")?.to_string();

    // Replay at the recorded pace, compressed: frames in batches of 5,
    // each activity once its time has passed.
    let mut acts = slice.activities.iter().peekable();
    for chunk in slice.frames.chunks(5) {
        let body: String = chunk.iter().map(|f| f.to_line() + "\n").collect();
        let r = client.post(format!("{base}/api/sessions/{id}/frames")).bearer_auth(&token).body(body).send().map_err(err)?;
        ensure(r.status().is_success(), || format!("frames: {}", r.status()))?;
        let end = chunk.last().expect("non-empty").dt_ms;
        while let Some(a) = acts.next_if(|a| a.dt_ms <= end) {
            let r = client.post(format!("{base}/api/sessions/{id}/activities")).bearer_auth(&token).json(a).send().map_err(err)?;
            ensure(r.status().is_success(), || format!("activity: {}", r.status()))?;
        }
    }
    let stored = SessionSlice {
        session_id: id.clone(),
        ..slice.clone()
    };
    let ranges = [None, Some((0, 59_000)), Some((10_000, 31_000)), Some((31_000, 31_000)), Some((61_000, 90_000))];
    for range in ranges {
        let url = match range {
            Some((a, b)) => format!("{base}/api/sessions/{id}/export?from={a}&to={b}"),
            None => format!("{base}/api/sessions/{id}/export"),
        };
        let text = client.get(url).bearer_auth(&token).send().map_err(err)?.text().map_err(err)?;
        let expected = match range {
            Some((a, b)) => stored.filtered(a, b),
            None => stored.clone(),
        };
        let (_, got) = decode_session(&text).map_err(|e| format!("{range:?}: {e}"))?;
        ensure(got == expected, || format!("export {range:?} differs from the ingested data"))?;
        ensure(text == encode_session(&card, &expected).map_err(|e| e.to_string())?, || {
            format!("export {range:?} is not the canonical encoding")
        })?;
    }
    Ok(format!(
        "infer: 7 probabilities summing to {sum:.9}; serve: 60 frames + 3 activities replayed, {} exports match range filtering",
        ranges.len()
    ))
}

fn main() {
    if let Ok(dir) = std::env::var(CHILD_ENV) {
        writer_child(&dir);
    }
    // Panics inside checks are reported on the FAIL line instead.
    std::panic::set_hook(Box::new(|_| {}));
    let scratch = tempfile::tempdir().expect("temp dir");
    let model_dir = scratch.path().join("desk");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(d) => format!("PASS {name}: {d}"),
            Err(e) => format!("FAIL {name}: {}", e.replace('\n', " ")),
        };
        println!("{line}");
        results.push((name, outcome));
    };

    record("expert-cohort-scores", expert_cohort());
    record("multadd-per-weight-convention", multadd_convention());
    record("parameter-count-oracle", parameter_oracle());
    record("numerical-correctness", numerical_correctness());
    record("augmentation", augmentation());
    let trained = desk_training(1, &model_dir);
    let model = trained.as_ref().ok().map(|(_, t)| t.dir.clone());
    record("desk-scale-training", trained.map(|(d, _)| d));
    record("profiler-protocol", profiler_protocol());
    record("wire-budget-roundtrip-durability", wire());
    record(
        "end-to-end-infer-serve-export",
        match model {
            Some(dir) => end_to_end(&dir),
            None => Err("no trained desk model (training criterion failed)".into()),
        },
    );

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("{} of {} primary criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
