//! Remote workers over loopback.

use std::sync::Arc;
use std::time::Duration;

use skelflow::codec::{as_int, int};
use skelflow::runtime::{RuntimeError, WorkerServer};
use skelflow::{compile, OpcodeRegistry, Runtime, Skeleton, TaskPool, WorkerSpec};

fn registry() -> Arc<OpcodeRegistry> {
    let mut r = OpcodeRegistry::new();
    r.register_unary("inc", |p| Ok(int(as_int(p).ok_or("int")? + 1))).unwrap();
    r.register_unary("dbl", |p| Ok(int(as_int(p).ok_or("int")? * 2))).unwrap();
    Arc::new(r)
}

#[test]
fn stream_through_two_daemons() {
    let a = WorkerServer::serve("127.0.0.1:0", registry()).unwrap();
    let b = WorkerServer::serve("127.0.0.1:0", registry()).unwrap();
    assert_ne!(a.local_addr().port(), b.local_addr().port());

    let (pool, rx) = TaskPool::with_channel();
    let rt = Runtime::new(pool.clone(), registry());
    rt.set_required_opcodes(vec!["inc".into(), "dbl".into()]);
    for s in [&a, &b] {
        rt.recruit(&WorkerSpec::Remote(s.local_addr().to_string())).unwrap();
    }
    let t = compile(&Skeleton::parse("farm(pipe(seq:inc,seq:dbl))").unwrap()).unwrap();
    for i in 0..300 {
        pool.submit_task(&t, int(i)).unwrap();
    }
    assert!(pool.wait_idle(Duration::from_secs(20)));
    let mut got: Vec<(u64, i64)> = rx.try_iter().map(|r| (r.seq, as_int(&r.value.unwrap()).unwrap())).collect();
    got.sort();
    assert_eq!(got, (0..300).map(|i| (i as u64, (i + 1) * 2)).collect::<Vec<_>>());
    assert!(rt.descriptors().iter().all(|d| d.completed > 0));
    rt.shutdown();
    a.shutdown();
    b.shutdown();
}

#[test]
fn missing_opcode_rejected_at_recruit() {
    let mut partial = OpcodeRegistry::new();
    partial.register_unary("inc", |p| Ok(p.clone())).unwrap();
    let server = WorkerServer::serve("127.0.0.1:0", Arc::new(partial)).unwrap();
    let (pool, _rx) = TaskPool::with_channel();
    let rt = Runtime::new(pool, registry());
    rt.set_required_opcodes(vec!["inc".into(), "dbl".into()]);
    match rt.recruit(&WorkerSpec::Remote(server.local_addr().to_string())) {
        Err(RuntimeError::OpcodeManifestMismatch(ops)) => assert_eq!(ops, vec!["dbl".to_string()]),
        other => panic!("expected a manifest mismatch, got {other:?}"),
    }
    assert_eq!(rt.active_count(), 0);
}

#[test]
fn killed_daemon_work_is_rescheduled() {
    let mut slow = OpcodeRegistry::new();
    slow.register_unary("inc", |p| {
        std::thread::sleep(Duration::from_millis(5));
        Ok(int(as_int(p).ok_or("int")? + 1))
    })
    .unwrap();
    let slow = Arc::new(slow);
    let remote = WorkerServer::serve("127.0.0.1:0", slow.clone()).unwrap();
    let (pool, rx) = TaskPool::with_channel();
    let rt = Runtime::new(pool.clone(), slow);
    rt.recruit(&WorkerSpec::Remote(remote.local_addr().to_string())).unwrap();
    rt.recruit(&WorkerSpec::Local).unwrap();
    let t = compile(&Skeleton::parse("farm(seq:inc)").unwrap()).unwrap();
    for i in 0..200 {
        pool.submit_task(&t, int(i)).unwrap();
    }
    std::thread::sleep(Duration::from_millis(100));
    remote.kill();
    assert!(pool.wait_idle(Duration::from_secs(20)));
    let mut seqs: Vec<u64> = rx.try_iter().map(|r| r.seq).collect();
    seqs.sort();
    assert_eq!(seqs, (0..200).collect::<Vec<_>>());
    assert_eq!(rt.take_failures().len(), 1);
}
