//! Randomised cross-instance probing of one physical MTM.
//!
//! Two owned MRTM instances receive interleaved random commands, some of
//! which deliberately name the other instance's keys, blobs or EK. Every
//! byte an instance returns is scanned for 32-byte values that originated in
//! the other instance: key ids, public keys, PCR values, sealed payloads,
//! owner secrets and wrapped private keys.

use std::collections::HashSet;

use mtm_core::codec::Canonical;
use mtm_core::crypto::{
    hash_parts, DeterministicRng, Digest, KeyUsage, Nonce, PcrBinding, PublicKey, SealedBlob,
    SuiteId,
};
use mtm_core::mtm::{InstanceHandle, MtmCommand, MtmDevice, MtmResponse, Profile, PCR_COUNT};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IsolationReport {
    pub sequences: usize,
    pub commands: usize,
    pub cross_attempts: usize,
    pub violations: Vec<String>,
}

#[derive(Default)]
struct Known {
    keys: Vec<PublicKey>,
    aiks: Vec<Digest>,
    blobs: Vec<SealedBlob>,
    ek: Option<PublicKey>,
    origin: HashSet<[u8; 32]>,
    label: &'static str,
}

impl Known {
    fn remember_key(&mut self, key: &PublicKey) {
        self.origin.insert(*key.key_id().as_bytes());
        self.origin.insert(key.bytes);
    }

    fn remember(&mut self, value: &[u8; 32]) {
        if *value != [0u8; 32] {
            self.origin.insert(*value);
        }
    }
}

fn contains_any(bytes: &[u8], secrets: &HashSet<[u8; 32]>) -> Option<[u8; 32]> {
    bytes.windows(32).find_map(|w| {
        let w: [u8; 32] = w.try_into().expect("32-byte window");
        secrets.contains(&w).then_some(w)
    })
}

fn setup(
    mtm: &mut MtmDevice,
    name: &str,
    known: &mut Known,
    rng: &mut DeterministicRng,
) -> InstanceHandle {
    let h = mtm
        .create_instance(name, Profile::Mrtm)
        .expect("two instances fit");
    let ek = mtm
        .route_command(
            h,
            MtmCommand::InstallEk {
                certificate: Vec::new(),
            },
        )
        .and_then(|r| r.public_key())
        .expect("fresh");
    let aik = mtm
        .route_command(h, MtmCommand::CreateAik)
        .and_then(|r| r.public_key())
        .expect("ek present");
    let owner_auth = rng.array32();
    let srk = mtm
        .route_command(h, MtmCommand::TakeOwnership { owner_auth })
        .and_then(|r| r.public_key())
        .expect("clean");
    known.remember_key(&ek);
    known.remember_key(&aik);
    known.remember_key(&srk);
    known.remember(&owner_auth);
    known.ek = Some(ek);
    known.aiks.push(aik.key_id());
    known.keys.push(srk);
    h
}

/// Runs `sequences` random sequences of `length` commands each.
pub fn run_isolation(seed: u64, sequences: usize, length: usize) -> IsolationReport {
    let mut report = IsolationReport {
        sequences,
        ..Default::default()
    };
    let mut rng = DeterministicRng::from_seed(seed);
    for seq in 0..sequences {
        let mut mtm = MtmDevice::new(rng.next_u64(), SuiteId::Toy);
        let mut known = [
            Known {
                label: "A",
                ..Default::default()
            },
            Known {
                label: "B",
                ..Default::default()
            },
        ];
        let handles = [
            setup(&mut mtm, "alpha", &mut known[0], &mut rng),
            setup(&mut mtm, "beta", &mut known[1], &mut rng),
        ];
        for step in 0..length {
            let me = (rng.next_u64() % 2) as usize;
            let other = 1 - me;
            let cross = rng.next_u64() % 4 == 0;
            let pick_from = if cross { other } else { me };
            let (command, secret) = random_command(&mut rng, &known, me, pick_from, step);
            if let Some((owner, s)) = secret {
                known[owner].remember(&s);
            }
            if cross {
                report.cross_attempts += 1;
            }
            report.commands += 1;
            let response: MtmResponse = mtm.route_command(handles[me], command).into();
            let bytes = response.to_canonical();
            if let Some(hit) = contains_any(&bytes, &known[other].origin) {
                report.violations.push(format!(
                    "sequence {seq} step {step}: {} response carries {} value {}",
                    known[me].label,
                    known[other].label,
                    Digest::from_bytes(hit).short()
                ));
            }
            learn(&mut known[me], &response);
            // Wrapped private keys are never returned, but scan for them too.
            let wrapped: Vec<[u8; 32]> = mtm
                .instance(handles[me])
                .map(|i| {
                    i.hierarchy()
                        .nodes()
                        .filter_map(|n| {
                            n.wrapped_private()
                                .get(..32)
                                .map(|w| w.try_into().expect("32"))
                        })
                        .collect()
                })
                .unwrap_or_default();
            for w in wrapped {
                known[me].remember(&w);
            }
        }
    }
    report
}

fn learn(known: &mut Known, response: &MtmResponse) {
    match response {
        MtmResponse::Pcr(d) => known.remember(d.as_bytes()),
        MtmResponse::PublicKey(k) => {
            known.remember_key(k);
            if known.ek.as_ref() != Some(k) && !known.keys.contains(k) {
                known.keys.push(k.clone());
            }
        }
        MtmResponse::Blob(b) => known.blobs.push(b.clone()),
        MtmResponse::Quote(q) => {
            for (_, d) in q.pcrs.entries() {
                known.remember(d.as_bytes());
            }
        }
        _ => {}
    }
}

fn random_command(
    rng: &mut DeterministicRng,
    known: &[Known; 2],
    me: usize,
    pick_from: usize,
    step: usize,
) -> (MtmCommand, Option<(usize, [u8; 32])>) {
    let src = &known[pick_from];
    let key_id = |rng: &mut DeterministicRng| {
        let k = &src.keys[(rng.next_u64() as usize) % src.keys.len()];
        k.key_id()
    };
    let label = known[me].label.as_bytes();
    match rng.next_u64() % 12 {
        0 | 1 => {
            let index = (rng.next_u64() % PCR_COUNT as u64) as u8;
            let digest = hash_parts(&[
                b"isolation-extend",
                label,
                &(step as u64).to_be_bytes(),
                &rng.array32(),
            ]);
            (MtmCommand::Extend { index, digest }, None)
        }
        2 => (
            MtmCommand::PcrRead {
                index: (rng.next_u64() % PCR_COUNT as u64) as u8,
            },
            None,
        ),
        3 => {
            let usage = [KeyUsage::Signing, KeyUsage::Binding, KeyUsage::Decryption]
                [(rng.next_u64() % 3) as usize];
            (
                MtmCommand::CreateWrapKey {
                    parent: key_id(rng),
                    usage,
                    pcr_binding: None,
                },
                None,
            )
        }
        4 => (
            MtmCommand::LoadKey {
                key_id: key_id(rng),
            },
            None,
        ),
        5 => (
            MtmCommand::Sign {
                key_id: key_id(rng),
                data: rng.array32().to_vec(),
            },
            None,
        ),
        6 => {
            let payload = rng.array32();
            let binding = PcrBinding::new(Vec::new());
            (
                MtmCommand::Seal {
                    key_id: key_id(rng),
                    payload: payload.to_vec(),
                    pcr_binding: binding,
                },
                Some((me, payload)),
            )
        }
        7 => match src.blobs.last() {
            Some(blob) => (
                MtmCommand::Unseal {
                    key_id: blob.recipient,
                    blob: blob.clone(),
                },
                None,
            ),
            None => (MtmCommand::ReadEk, None),
        },
        8 => {
            let aik = src.aiks[0];
            (
                MtmCommand::Quote {
                    aik,
                    nonce: Nonce([step as u8; 16]),
                    selection: (0..PCR_COUNT as u8).collect(),
                },
                None,
            )
        }
        9 => {
            let ek = src.ek.clone().expect("set up with EK");
            let secret = rng.array32();
            let ciphertext = ek.encrypt(&secret, b"probe", rng).expect("decryption key");
            // The plaintext belongs to whichever instance holds that EK.
            (
                MtmCommand::EkDecrypt {
                    ciphertext,
                    aad: b"probe".to_vec(),
                },
                Some((pick_from, secret)),
            )
        }
        10 => (MtmCommand::ReadEk, None),
        _ => (MtmCommand::ReadLifecycle, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_is_clean_and_exercises_cross_access() {
        let r = run_isolation(1, 20, 40);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert!(r.cross_attempts > 100);
    }
}
