//! One genuine instance of every protocol message, produced by a fixed
//! script. Used for golden-file checks of the wire encoding.

use mtm_core::crypto::SuiteId;
use mtm_core::protocols::{MessageType, ProtocolMessage};

use crate::device::{manufacturer, SimDevice, DEFAULT_MANUFACTURER};
use crate::owner::OwnerSpec;
use crate::runner::{run_migration, run_take_ownership, MigrationRun, TraceEntry};

/// Messages in `MessageType::ALL` order.
pub fn representative_messages() -> Vec<ProtocolMessage> {
    let suite = SuiteId::Standard;
    let dm = manufacturer(DEFAULT_MANUFACTURER, suite);
    let mut owner = OwnerSpec::new("operator", 7, &["telephony"]);
    owner.services.push(crate::owner::ServiceSpec {
        id: "ts-sim".into(),
        image: "sim service v1".into(),
        exports: vec!["sim.v1".into()],
    });
    let mut agent = owner.agent(suite);

    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut devices: Vec<SimDevice> = (1..=4)
        .map(|i| SimDevice::create(&format!("h{i}"), i, &dm))
        .collect();
    for d in &mut devices {
        d.boot().expect("stock boot chain");
    }
    let [a, b, c, e] = &mut devices[..] else {
        unreachable!()
    };
    trace.extend(run_take_ownership(a, &mut agent, "telephony").trace);
    trace.extend(run_take_ownership(b, &mut agent, "telephony").trace);
    trace.extend(run_take_ownership(c, &mut agent, "payments").trace);
    trace.extend(run_take_ownership(e, &mut agent, "telephony").trace);
    e.platform_mut().owner_approves_migration = false;
    trace.extend(run_migration(a, e, "operator", &MigrationRun::default()).trace);
    trace.extend(run_migration(a, b, "operator", &MigrationRun::default()).trace);

    MessageType::ALL
        .iter()
        .map(|t| {
            let entry = trace
                .iter()
                .find(|e| e.kind == *t)
                .expect("script covers every message type");
            ProtocolMessage::decode(&entry.bytes).expect("own encoding")
        })
        .collect()
}
