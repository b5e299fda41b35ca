//! Self-scheduling spreads work evenly and survives worker removal.

use std::sync::Arc;
use std::time::Duration;

use skelflow::codec::{as_int, int};
use skelflow::manager::ManagerConfig;
use skelflow::{compile, EventLog, Manager, OpcodeRegistry, Runtime, Skeleton, TaskPool, WorkerSpec};

fn registry() -> Arc<OpcodeRegistry> {
    let mut r = OpcodeRegistry::new();
    r.register_unary("slow", |p| {
        std::thread::sleep(Duration::from_millis(1));
        Ok(int(as_int(p).ok_or("int")? * 3))
    })
    .unwrap();
    Arc::new(r)
}

#[test]
fn four_workers_share_a_thousand_tasks() {
    let (pool, rx) = TaskPool::with_channel();
    let rt = Runtime::new(pool.clone(), registry());
    for _ in 0..4 {
        rt.recruit(&WorkerSpec::Local).unwrap();
    }
    let t = compile(&Skeleton::parse("farm(seq:slow)").unwrap()).unwrap();
    for i in 0..1000 {
        pool.submit_task(&t, int(i)).unwrap();
    }
    assert!(pool.wait_idle(Duration::from_secs(60)));
    assert_eq!(rx.try_iter().count(), 1000);
    let counts: Vec<u64> = rt.descriptors().iter().map(|d| d.completed).collect();
    assert_eq!(counts.iter().sum::<u64>(), 1000);
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    assert!(hi <= 2 * lo, "uneven split {counts:?}");
}

#[test]
fn removing_workers_mid_stream_loses_nothing() {
    let (pool, rx) = TaskPool::with_channel();
    let rt = Arc::new(Runtime::new(pool.clone(), registry()));
    let m = Manager::new(rt.clone(), EventLog::new(), ManagerConfig::default());
    m.add_recruitable(vec![WorkerSpec::Local; 4]);
    m.add_worker(4).unwrap();
    let t = compile(&Skeleton::parse("farm(seq:slow)").unwrap()).unwrap();
    for i in 0..600 {
        pool.submit_task(&t, int(i)).unwrap();
    }
    std::thread::sleep(Duration::from_millis(50));
    m.remove_worker(2).unwrap();
    assert_eq!(rt.active_count(), 2);
    assert_eq!(m.recruitable(), 2);
    assert!(pool.wait_idle(Duration::from_secs(60)));
    let mut got: Vec<(u64, i64)> = rx.try_iter().map(|r| (r.seq, as_int(&r.value.unwrap()).unwrap())).collect();
    got.sort();
    assert_eq!(got, (0..600).map(|i| (i as u64, i * 3)).collect::<Vec<_>>());
}
