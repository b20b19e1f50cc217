use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;

use resmonet_session::store::{Store, StoreError};
use resmonet_session::wire::{decode_session, ActivityNote, EmotionFrame, PatientCard};

const CHILD_DIR: &str = "RESMONET_DURABILITY_DIR";

fn card(id: &str) -> PatientCard {
    PatientCard {
        patient_id: id.into(),
        display_name: "Test | Patient".into(),
        age: 40,
        notes: "line one\nline two".into(),
    }
}

fn frame(i: u64) -> EmotionFrame {
    let k = (i % 50) as u8;
    EmotionFrame::new(i * 100, [k, 50 - k, 10, 10, 10, 10, 10]).unwrap()
}

fn note(i: u64) -> ActivityNote {
    ActivityNote::new(i * 100, format!("note {i}")).unwrap()
}

#[test]
fn writes_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let store = Store::open(dir.path()).unwrap();
        store.add_patient(card("P1")).unwrap();
        let id = store.open_session("P1", 1_600_000_000_000).unwrap();
        let frames: Vec<_> = (0..10).map(frame).collect();
        assert_eq!(store.ingest_frames(&id, &frames[..4]).unwrap().stored, 4);
        assert_eq!(store.ingest_frames(&id, &frames[4..]).unwrap().stored, 10);
        store.register_activity(&id, note(3)).unwrap();
        id
    };
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.patient("P1").unwrap(), card("P1"));
    let (c, slice) = store.record(&id).unwrap();
    assert_eq!(c, card("P1"));
    assert_eq!(slice.frames, (0..10).map(frame).collect::<Vec<_>>());
    assert_eq!(slice.activities, vec![note(3)]);
    let text = store.export(&id, None).unwrap();
    assert_eq!(decode_session(&text).unwrap().1, slice);
    let part = decode_session(&store.export(&id, Some((200, 500))).unwrap()).unwrap().1;
    assert_eq!(part.frames, (2..=5).map(frame).collect::<Vec<_>>());
    assert_eq!(part.activities, vec![note(3)]);
    assert_eq!(store.sessions_of("P1").len(), 1);
    let next = store.open_session("P1", 0).unwrap();
    assert_ne!(next, id);
}

#[test]
fn rejects_bad_writes() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    store.add_patient(card("P1")).unwrap();
    assert!(matches!(store.add_patient(card("P1")), Err(StoreError::Conflict(_))));
    assert!(matches!(store.add_patient(card("bad id")), Err(StoreError::Invalid(_))));
    assert!(matches!(store.open_session("nobody", 0), Err(StoreError::NotFound(_))));
    let id = store.open_session("P1", 0).unwrap();
    store.ingest_frames(&id, &[frame(5)]).unwrap();
    let e = store.ingest_frames(&id, &[frame(6), frame(4)]).unwrap_err();
    assert!(matches!(e, StoreError::OutOfOrder { index: 1, .. }), "{e}");
    let e = store.ingest_frames(&id, &[frame(4)]).unwrap_err();
    assert!(matches!(e, StoreError::OutOfOrder { index: 0, .. }), "{e}");
    // Equal times are allowed.
    store.ingest_frames(&id, &[frame(5)]).unwrap();
    store.register_activity(&id, note(9)).unwrap();
    assert!(matches!(store.register_activity(&id, note(8)), Err(StoreError::OutOfOrder { .. })));
    assert!(matches!(store.export(&id, Some((9, 1))), Err(StoreError::Invalid(_))));
    store.close_session(&id).unwrap();
    assert!(matches!(store.ingest_frames(&id, &[frame(9)]), Err(StoreError::Closed(_))));
    assert!(matches!(store.register_activity(&id, note(10)), Err(StoreError::Closed(_))));
    drop(store);
    let store = Store::open(dir.path()).unwrap();
    assert!(store.summary(&id).unwrap().closed);
    assert_eq!(store.record(&id).unwrap().1.frames.len(), 2);
}

#[test]
fn uncommitted_and_torn_tails_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let store = Store::open(dir.path()).unwrap();
        store.add_patient(card("P1")).unwrap();
        let id = store.open_session("P1", 0).unwrap();
        store.ingest_frames(&id, &[frame(0), frame(1)]).unwrap();
        id
    };
    let log = dir.path().join("sessions").join(format!("{id}.log"));
    let good_len = std::fs::metadata(&log).unwrap().len();
    let mut f = OpenOptions::new().append(true).open(&log).unwrap();
    write!(f, "{}\n{}\nF|3", frame(2).to_line(), frame(3).to_line()).unwrap();
    drop(f);

    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.record(&id).unwrap().1.frames, vec![frame(0), frame(1)]);
    assert_eq!(std::fs::metadata(&log).unwrap().len(), good_len);
    store.ingest_frames(&id, &[frame(2)]).unwrap();
    drop(store);
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.record(&id).unwrap().1.frames, vec![frame(0), frame(1), frame(2)]);
}

#[test]
fn concurrent_writers_keep_every_entry() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    store.add_patient(card("P1")).unwrap();
    let ids: Vec<String> = (0..4).map(|_| store.open_session("P1", 0).unwrap()).collect();
    let handles: Vec<_> = ids
        .iter()
        .cloned()
        .map(|id| {
            let store = store.clone();
            std::thread::spawn(move || {
                for i in 0..25 {
                    store.ingest_frames(&id, &[frame(i)]).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    drop(store);
    let store = Store::open(dir.path()).unwrap();
    for id in &ids {
        assert_eq!(store.record(id).unwrap().1.frames, (0..25).map(frame).collect::<Vec<_>>());
    }
}

#[test]
fn live_subscription_has_no_gap() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    store.add_patient(card("P1")).unwrap();
    let id = store.open_session("P1", 0).unwrap();
    store.ingest_frames(&id, &[frame(0), frame(1)]).unwrap();
    let (backlog, mut rx, closed) = store.subscribe(&id, Some(0)).unwrap();
    assert!(!closed);
    assert_eq!(backlog, vec![(1, frame(1).to_line())]);
    store.register_activity(&id, note(1)).unwrap();
    assert_eq!(rx.try_recv().unwrap(), (2, note(1).to_line()));
}

/// Writer half of the crash test. Does nothing unless started by
/// `acknowledged_writes_survive_sigkill` with the data directory in the
/// environment.
#[test]
fn durability_child() {
    let Ok(dir) = std::env::var(CHILD_DIR) else {
        return;
    };
    let store = Store::open(Path::new(&dir)).unwrap();
    if store.patient("P1").is_none() {
        store.add_patient(card("P1")).unwrap();
        store.open_session("P1", 0).unwrap();
    }
    let id = "s000001";
    let mut next = store.record(id).unwrap().1.frames.len() as u64;
    let out = std::io::stdout();
    loop {
        let batch: Vec<_> = (next..next + 5).map(frame).collect();
        let ack = store.ingest_frames(id, &batch).unwrap();
        next += 5;
        store.register_activity(id, note(next - 1)).unwrap();
        let mut out = out.lock();
        writeln!(out, "ACK {}", ack.stored).unwrap();
        out.flush().unwrap();
    }
}

#[test]
fn acknowledged_writes_survive_sigkill() {
    let dir = tempfile::tempdir().unwrap();
    let exe = std::env::current_exe().unwrap();
    let mut acked = 0;
    for round in 0..3 {
        let mut child = Command::new(&exe)
            .args(["--exact", "durability_child", "--nocapture", "--test-threads=1"])
            .env(CHILD_DIR, dir.path())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let reader = BufReader::new(child.stdout.take().unwrap());
        let mut seen = 0;
        for line in reader.lines() {
            let line = line.unwrap();
            if let Some(n) = line.strip_prefix("ACK ") {
                acked = n.parse().unwrap();
                seen += 1;
                if seen == 20 + 7 * round {
                    child.kill().unwrap();
                    break;
                }
            }
        }
        child.wait().unwrap();

        let store = Store::open(dir.path()).unwrap();
        let slice = store.record("s000001").unwrap().1;
        assert!(slice.frames.len() >= acked, "round {round}: {} frames stored, {acked} acknowledged", slice.frames.len());
        assert_eq!(slice.frames.len() % 5, 0, "a batch was partly applied");
        let expected: Vec<_> = (0..slice.frames.len() as u64).map(frame).collect();
        assert_eq!(slice.frames, expected);
        for (j, a) in slice.activities.iter().enumerate() {
            assert_eq!(*a, note(5 * j as u64 + 4));
        }
    }
    assert!(acked >= 20 * 5);
}
