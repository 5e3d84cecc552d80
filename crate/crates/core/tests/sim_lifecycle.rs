use std::sync::Arc;

use pilot_data::pilots::{PilotComputeDescription, PilotDataDescription, StorageFault};
use pilot_data::units::FileRef;
use pilot_data::*;

fn l(s: &str) -> AffinityLabel {
    AffinityLabel::parse(s).unwrap()
}

fn topology() -> TopologyTree {
    TopologyTree::from_labels(["us/tx/lonestar", "us/tx/stampede", "us/il/kraken"]).unwrap()
}

fn service(cfg: ServiceConfig) -> Arc<ComputeDataService> {
    ComputeDataService::builder(topology())
        .bandwidth(BandwidthMatrix::with_default(1000.0).unwrap())
        .config(cfg)
        .simulated()
        .build()
        .unwrap()
}

fn dud(files: &[(&str, u64)]) -> DataUnitDescription {
    DataUnitDescription {
        file_refs: files.iter().map(|(n, s)| FileRef::synthetic(n, *s)).collect(),
        ..Default::default()
    }
}

#[test]
fn colocated_input_runs_without_staging() {
    let svc = service(ServiceConfig::default());
    let pd = svc
        .create_pilot_data(PilotDataDescription::new("sim://us/tx/lonestar"))
        .unwrap();
    let p = svc
        .create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 2))
        .unwrap();
    let (du, report) = svc.put_du(&pd.id, &dud(&[("a.dat", 5000)])).unwrap();
    assert_eq!(du.state, DuState::Available);
    assert_eq!(report.t_x, 5.0);
    assert_eq!(report.t_s, 5.0 + 0.01);

    let mut cud = ComputeUnitDescription::synthetic(3.0);
    cud.input_data = vec![du.id.clone()];
    let cu = svc.submit(cud).unwrap();
    assert_eq!(cu.state, CuState::Queued);
    let d = &svc.decisions()[0];
    assert_eq!(d.pilot.as_ref(), Some(&p.id));
    assert_eq!(d.reason, Reason::InputDataLocality);

    let mut eng = SimEngine::new(svc.clone()).unwrap().check_invariants(true);
    let end = eng.run().unwrap();
    let cu = svc.cu(&cu.id).unwrap();
    assert_eq!(cu.state, CuState::Done);
    assert_eq!(cu.staging_seconds, 0.0);
    assert_eq!(cu.run_seconds, 3.0);
    assert_eq!(end, 3.0);
}

#[test]
fn remote_input_pays_transfer_and_outputs_are_sealed() {
    let svc = service(ServiceConfig::default());
    let src = svc
        .create_pilot_data(PilotDataDescription::new("sim://us/il/kraken"))
        .unwrap();
    let home = svc
        .create_pilot_data(PilotDataDescription::new("sim://us/tx/lonestar"))
        .unwrap();
    svc.create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 1))
        .unwrap();
    let (input, _) = svc.put_du(&src.id, &dud(&[("in.dat", 2000)])).unwrap();
    let out = svc.create_output_du(&home.id, Some("results")).unwrap();
    assert_eq!(out.state, DuState::Pending);

    let mut cud = ComputeUnitDescription::synthetic(1.5);
    cud.input_data = vec![input.id.clone()];
    cud.output_data = vec![out.id.clone()];
    cud.arguments = vec!["{cu}.out=500".into()];
    let cu = svc.submit(cud).unwrap();

    // a consumer of the output waits until it is sealed
    let mut next = ComputeUnitDescription::synthetic(1.0);
    next.input_data = vec![out.id.clone()];
    let consumer = svc.submit(next).unwrap();
    assert_eq!(consumer.state, CuState::New);

    let end = SimEngine::new(svc.clone()).unwrap().check_invariants(true).run().unwrap();
    let cu = svc.cu(&cu.id).unwrap();
    assert_eq!(cu.state, CuState::Done);
    // 2000 bytes in, 500 bytes out (both to/from the same site: free), at 1000 B/s
    assert_eq!(cu.staging_seconds, 2.0);
    let out = svc.du(&out.id).unwrap();
    assert_eq!(out.state, DuState::Available);
    assert_eq!(out.manifest.len(), 1);
    assert!(out.manifest.contains_key("cu-1.out"));
    assert!(out.replicas.contains(&home.id));
    let consumer = svc.cu(&consumer.id).unwrap();
    assert_eq!(consumer.state, CuState::Done);
    assert_eq!(end, 2.0 + 1.5 + 1.0);
}

#[test]
fn failing_producer_fails_output_and_consumer() {
    let svc = service(ServiceConfig::default());
    let home = svc
        .create_pilot_data(PilotDataDescription::new("sim://us/tx/lonestar"))
        .unwrap();
    svc.create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 1))
        .unwrap();
    let out = svc.create_output_du(&home.id, None).unwrap();
    let mut bad = ComputeUnitDescription::new("/bin/true");
    bad.output_data = vec![out.id.clone()];
    bad.affinity = Some(l("us/tx"));
    let bad = svc.submit(bad).unwrap();
    let mut c = ComputeUnitDescription::synthetic(1.0);
    c.input_data = vec![out.id.clone()];
    let c = svc.submit(c).unwrap();
    SimEngine::new(svc.clone()).unwrap().run().unwrap();
    let bad = svc.cu(&bad.id).unwrap();
    assert_eq!(bad.state, CuState::Failed);
    assert!(bad.diagnostics.unwrap().contains("synthetic"));
    assert_eq!(svc.du(&out.id).unwrap().state, DuState::Failed);
    assert_eq!(svc.cu(&c.id).unwrap().state, CuState::Failed);
}

#[test]
fn queue_delay_and_walltime() {
    let svc = service(ServiceConfig::default());
    let p = svc
        .create_pilot_compute(
            PilotComputeDescription::new("sim://us/tx/stampede", 1)
                .with_queue_model(QueueModel::Fixed(10.0))
                .with_walltime(5.0),
        )
        .unwrap();
    assert_eq!(p.state, PilotState::QueuedAtResource);
    let mut long = ComputeUnitDescription::synthetic(100.0);
    long.affinity = Some(l("us/tx/stampede"));
    let long = svc.submit(long).unwrap();
    SimEngine::new(svc.clone()).unwrap().run().unwrap();
    let cu = svc.cu(&long.id).unwrap();
    assert_eq!(cu.state, CuState::Failed);
    assert_eq!(cu.diagnostics.as_deref(), Some("WALLTIME"));
    assert_eq!(cu.entered(CuState::Failed), Some(15.0));
    let p = svc.pilot(&p.id).unwrap();
    assert_eq!(p.state, PilotState::Done);
    assert_eq!(p.queue_seconds, 10.0);
}

#[test]
fn cancel_semantics() {
    let svc = service(ServiceConfig::default());
    svc.create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 1))
        .unwrap();
    let a = svc.submit(ComputeUnitDescription::synthetic(10.0)).unwrap();
    let b = svc.submit(ComputeUnitDescription::synthetic(10.0)).unwrap();
    let mut eng = SimEngine::new(svc.clone()).unwrap().check_invariants(true);
    eng.cancel_at(4.0, a.id.clone());
    eng.run_until(1.0).unwrap();
    assert_eq!(svc.cu(&a.id).unwrap().state, CuState::Running);
    assert_eq!(svc.cancel(&b.id).unwrap(), CancelOutcome::Canceled);
    eng.run().unwrap();
    assert_eq!(svc.cu(&a.id).unwrap().state, CuState::Canceled);
    assert_eq!(svc.cu(&a.id).unwrap().entered(CuState::Canceled), Some(4.0));
    assert_eq!(
        svc.cancel(&a.id).unwrap(),
        CancelOutcome::AlreadyTerminal(CuState::Canceled)
    );
    assert_eq!(svc.pilots()[0].free_slots, 1);
}

#[test]
fn affinity_is_a_hard_constraint() {
    let svc = service(ServiceConfig::default());
    let tx = svc
        .create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 4))
        .unwrap();
    let mut cud = ComputeUnitDescription::synthetic(1.0);
    cud.affinity = Some(l("us/il"));
    let cu = svc.submit(cud).unwrap();
    SimEngine::new(svc.clone()).unwrap().run().unwrap();
    // no matching pilot: the CU waits instead of running on the wrong site
    assert_eq!(svc.cu(&cu.id).unwrap().state, CuState::Queued);
    let il = svc
        .create_pilot_compute(PilotComputeDescription::new("sim://us/il/kraken", 1))
        .unwrap();
    SimEngine::new(svc.clone()).unwrap().run().unwrap();
    let cu = svc.cu(&cu.id).unwrap();
    assert_eq!(cu.state, CuState::Done);
    assert_eq!(cu.assigned_pilot, Some(il.id));
    assert_ne!(cu.assigned_pilot, Some(tx.id));
}

#[test]
fn delayed_scheduling_waits_for_the_local_pilot() {
    let mut cfg = ServiceConfig::default();
    cfg.scheduler.delayed_scheduling = true;
    cfg.scheduler.delay_seconds = 5.0;
    let svc = service(cfg);
    let pd = svc
        .create_pilot_data(PilotDataDescription::new("sim://us/tx/lonestar"))
        .unwrap();
    let near = svc
        .create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 1))
        .unwrap();
    let far = svc
        .create_pilot_compute(PilotComputeDescription::new("sim://us/il/kraken", 1))
        .unwrap();
    let (du, _) = svc.put_du(&pd.id, &dud(&[("x", 100_000)])).unwrap();
    let mut ids = Vec::new();
    for _ in 0..3 {
        let mut c = ComputeUnitDescription::synthetic(10.0);
        c.input_data = vec![du.id.clone()];
        ids.push(svc.submit(c).unwrap().id);
    }
    SimEngine::new(svc.clone()).unwrap().check_invariants(true).run().unwrap();
    let cus: Vec<_> = ids.iter().map(|i| svc.cu(i).unwrap()).collect();
    // cu1 runs 0..10 on the near pilot; cu2 and cu3 wait for it, give up at
    // t=5 and go global. The far pilot takes cu2 at once (100 s transfer),
    // the near pilot takes cu3 when it frees up at t=10.
    assert_eq!(cus[0].assigned_pilot.as_ref(), Some(&near.id));
    assert_eq!(cus[1].assigned_pilot.as_ref(), Some(&far.id));
    assert_eq!(cus[1].entered(CuState::StagingIn), Some(5.0));
    assert_eq!(cus[1].entered(CuState::Running), Some(105.0));
    assert_eq!(cus[2].assigned_pilot.as_ref(), Some(&near.id));
    assert_eq!(cus[2].entered(CuState::Running), Some(10.0));
    let reasons: Vec<_> = svc.decisions().iter().map(|d| d.reason).collect();
    assert_eq!(
        reasons,
        vec![
            Reason::InputDataLocality,
            Reason::DelayedRetryExpired,
            Reason::DelayedRetryExpired
        ]
    );
}

#[test]
fn delayed_scheduling_takes_a_slot_freed_before_the_deadline() {
    let mut cfg = ServiceConfig::default();
    cfg.scheduler.delayed_scheduling = true;
    let svc = service(cfg);
    let pd = svc
        .create_pilot_data(PilotDataDescription::new("sim://us/tx/lonestar"))
        .unwrap();
    let near = svc
        .create_pilot_compute(PilotComputeDescription::new("sim://us/tx/lonestar", 1))
        .unwrap();
    svc.create_pilot_compute(PilotComputeDescription::new("sim://us/il/kraken", 1))
        .unwrap();
    let (du, _) = svc.put_du(&pd.id, &dud(&[("x", 100_000)])).unwrap();
    let mut ids = Vec::new();
    for _ in 0..2 {
        let mut c = ComputeUnitDescription::synthetic(2.0);
        c.input_data = vec![du.id.clone()];
        ids.push(svc.submit(c).unwrap().id);
    }
    SimEngine::new(svc.clone()).unwrap().run().unwrap();
    let second = svc.cu(&ids[1]).unwrap();
    assert_eq!(second.assigned_pilot.as_ref(), Some(&near.id));
    assert_eq!(second.entered(CuState::Running), Some(2.0));
    assert_eq!(second.staging_seconds, 0.0);
}

#[test]
fn replication_modes() {
    let svc = service(ServiceConfig::default());
    let a = svc.create_pilot_data(PilotDataDescription::new("sim://us/tx/lonestar")).unwrap();
    let b = svc.create_pilot_data(PilotDataDescription::new("sim://us/tx/stampede")).unwrap();
    let c = svc.create_pilot_data(PilotDataDescription::new("sim://us/il/kraken")).unwrap();
    let (du, _) = svc.put_du(&a.id, &dud(&[("f", 3000)])).unwrap();
    let r = svc
        .replicate(&du.id, &[b.id.clone(), c.id.clone(), a.id.clone()], ReplicationMode::Group)
        .unwrap();
    assert_eq!(r.total_seconds, 3.0);
    assert!(r.transfers[2].skipped);
    svc.verify_replicas(&du.id).unwrap();
    assert_eq!(svc.du(&du.id).unwrap().replicas.len(), 3);
    svc.remove_replica(&du.id, &a.id).unwrap();
    svc.remove_replica(&du.id, &b.id).unwrap();
    assert!(svc.remove_replica(&du.id, &c.id).is_err());

    svc.inject_storage_fault(&a.id, Some(StorageFault::CorruptWrites)).unwrap();
    let r = svc.replicate(&du.id, std::slice::from_ref(&a.id), ReplicationMode::Sequential).unwrap();
    assert!(!r.transfers[0].ok);
    assert_eq!(svc.du(&du.id).unwrap().replicas.len(), 1);
}
