//! The coordination store: per-pilot queues drain before the global queue,
//! pulled ids stay in flight until acked, and snapshots restore everything.

use pilot_data::coordination::CoordinationStore;
use pilot_data::{MemoryStore, Result, GLOBAL_QUEUE};

fn main() -> Result<()> {
    let store = MemoryStore::new("demo");
    store.create_queue("pilot-a")?;
    store.create_queue("pilot-b")?;
    for i in 1..=3 {
        store.enqueue(GLOBAL_QUEUE, &format!("ps://demo/cu/{i}"))?;
    }
    store.enqueue("pilot-a", "ps://demo/cu/4")?;

    let first = store.pull("pilot-a")?.expect("queued");
    println!("pilot-a pulled {} from {:?}", first.id, first.source);
    let second = store.pull("pilot-b")?.expect("queued");
    println!("pilot-b pulled {} from {:?}", second.id, second.source);
    store.ack(&first.id)?;

    // second is still in flight when the store goes down
    let bytes = store.snapshot_bytes()?;
    let back = MemoryStore::restore_bytes(&bytes)?;
    let requeued = back.requeue_in_flight()?;
    println!("requeued after restore: {requeued:?}");
    println!("global now: {:?}", back.queue_items(GLOBAL_QUEUE)?);
    Ok(())
}
