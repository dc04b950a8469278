//! A trusted mobile platform: one MTM device, its subsystems, its RIM store
//! and the manufacturer-supplied catalogue used to instantiate blank engines.

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{Canonical, CodecResult, Reader, Writer};
use crate::crypto::{DeterministicRng, Digest, KeyPair, KeyUsage, Nonce, SuiteId};
use crate::engine::{
    check_removal, rte_boot, Domain, EngineError, EngineState, LoadEntry, Role, ServiceKind,
    Stakeholder, SubsystemConfiguration, TrustedEngine, TrustedService, TrustedSubsystem,
};
use crate::mtm::{InstanceHandle, MtmDevice, MtmError, Profile, PCR_BOOT, PCR_ENGINE};
use crate::protocols::DeviceReference;
use crate::rim::{issue_rim_cert, RimStore};

pub const DM_ENGINE_ID: &str = "te-dm";
pub const PRISTINE_ENGINE_ID: &str = "te-pristine";

/// The device manufacturer: signs the boot chain and the pristine engine
/// reference, and ships the catalogue of blank-engine components.
#[derive(Debug, Clone)]
pub struct Manufacturer {
    pub id: String,
    key: KeyPair,
    pub boot_components: Vec<(String, Vec<u8>)>,
    pub pristine_engine: Vec<u8>,
    pub generic_services: Vec<TrustedService>,
}

impl Manufacturer {
    pub fn new(id: &str, seed: u64, suite: SuiteId) -> Self {
        let mut rng = DeterministicRng::from_seed(seed);
        let key = rng.keypair(KeyUsage::Signing, suite);
        Self {
            id: id.to_owned(),
            key,
            boot_components: vec![
                (
                    DM_ENGINE_ID.to_owned(),
                    format!("{id} trusted engine").into_bytes(),
                ),
                (
                    "ts-dm-loader".to_owned(),
                    format!("{id} loader service").into_bytes(),
                ),
            ],
            pristine_engine: format!("{id} pristine engine v1").into_bytes(),
            generic_services: vec![
                TrustedService::new(
                    "ts-generic-comm",
                    ServiceKind::Trusted,
                    b"generic comm service",
                    &["comm.v1"],
                ),
                TrustedService::new(
                    "ts-generic-store",
                    ServiceKind::Measured,
                    b"generic storage service",
                    &["store.v1"],
                ),
            ],
        }
    }

    pub fn with_boot_components(mut self, components: Vec<(String, Vec<u8>)>) -> Self {
        self.boot_components = components;
        self
    }

    pub fn stakeholder(&self) -> Stakeholder {
        Stakeholder {
            id: self.id.clone(),
            role: Role::Dm,
            root_public_key: self.key.public.clone(),
        }
    }

    pub fn signing_key(&self) -> &KeyPair {
        &self.key
    }

    /// Digests a remote owner needs to recognise this manufacturer's blank engine.
    pub fn reference(&self) -> DeviceReference {
        DeviceReference {
            pristine_engine: crate::engine::measure(&self.pristine_engine),
            generic_services: self
                .generic_services
                .iter()
                .map(|s| (s.id.clone(), crate::engine::measure(&s.image)))
                .collect(),
        }
    }

    /// Builds an unbooted platform carrying this manufacturer's boot chain.
    pub fn provision(&self, seed: u64, suite: SuiteId) -> Platform {
        let mut mtm = MtmDevice::new(seed, suite);
        let dm = self.stakeholder();
        mtm.add_root_verification_key(&dm.id, dm.root_public_key.clone());
        let mut rims = RimStore::new();
        rims.add_trust_root(&dm.id, dm.root_public_key.clone());

        let mut config = SubsystemConfiguration {
            owner: dm.id.clone(),
            ..Default::default()
        };
        let mut services = Vec::new();
        for (component, image) in &self.boot_components {
            let expected = crate::engine::measure(image);
            let cert = issue_rim_cert(&dm.id, &self.key, component, expected, PCR_BOOT, 0, None)
                .expect("signing key");
            rims.insert(cert).expect("own trust root");
            config.load_order.push(LoadEntry {
                component_id: component.clone(),
                expected,
                pcr: PCR_BOOT,
            });
            if component != DM_ENGINE_ID {
                services.push(TrustedService::new(
                    component,
                    ServiceKind::Measured,
                    image,
                    &[],
                ));
            }
        }
        config.sign(&self.key).expect("signing key");
        let pristine = crate::engine::measure(&self.pristine_engine);
        let cert = issue_rim_cert(
            &dm.id,
            &self.key,
            PRISTINE_ENGINE_ID,
            pristine,
            PCR_ENGINE,
            0,
            None,
        )
        .expect("signing key");
        rims.insert(cert).expect("own trust root");

        let handle = mtm
            .create_instance(&dm.id, Profile::Mrtm)
            .expect("fresh device");
        let dm_image = self
            .boot_components
            .iter()
            .find(|(c, _)| c == DM_ENGINE_ID)
            .map(|(_, image)| image.clone())
            .unwrap_or_default();
        let engine = TrustedEngine {
            stakeholder: dm.id.clone(),
            component_id: DM_ENGINE_ID.to_owned(),
            domain: Domain::Mandatory,
            lifecycle: EngineState::Pristine,
            image: dm_image,
            measurement_log: Vec::new(),
            purpose: "device".to_owned(),
        };
        let mut tss = TrustedSubsystem::new(engine, handle);
        tss.services_own = services;
        tss.config = Some(config);

        let mut rng = DeterministicRng::from_seed(seed ^ 0x444f);
        let device_owner = Stakeholder {
            id: "DO".to_owned(),
            role: Role::Do,
            root_public_key: rng.keypair(KeyUsage::Signing, suite).public,
        };
        let mut subsystems = BTreeMap::new();
        subsystems.insert(dm.id.clone(), tss);
        Platform {
            mtm,
            dm,
            device_owner,
            subsystems,
            rim_store: rims,
            booted: false,
            owner_approves_migration: true,
            seen_offer_nonces: BTreeSet::new(),
            pristine_engine: self.pristine_engine.clone(),
            generic_services: self.generic_services.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Platform {
    mtm: MtmDevice,
    dm: Stakeholder,
    device_owner: Stakeholder,
    subsystems: BTreeMap<String, TrustedSubsystem>,
    rim_store: RimStore,
    booted: bool,
    /// Local owner's standing answer to migration confirmation requests.
    pub owner_approves_migration: bool,
    seen_offer_nonces: BTreeSet<Nonce>,
    /// Blank-engine catalogue. Public so tests and fault scenarios can
    /// tamper with the image before a take-ownership.
    pub pristine_engine: Vec<u8>,
    pub generic_services: Vec<TrustedService>,
}

impl Platform {
    pub fn device_id(&self) -> Digest {
        self.mtm.device_id()
    }

    pub fn mtm(&self) -> &MtmDevice {
        &self.mtm
    }

    pub fn mtm_mut(&mut self) -> &mut MtmDevice {
        &mut self.mtm
    }

    pub fn dm(&self) -> &Stakeholder {
        &self.dm
    }

    pub fn device_owner(&self) -> &Stakeholder {
        &self.device_owner
    }

    pub fn rim_store(&self) -> &RimStore {
        &self.rim_store
    }

    pub fn rim_store_mut(&mut self) -> &mut RimStore {
        &mut self.rim_store
    }

    pub fn is_booted(&self) -> bool {
        self.booted
    }

    pub fn subsystems(&self) -> impl Iterator<Item = &TrustedSubsystem> {
        self.subsystems.values()
    }

    pub fn subsystem(&self, stakeholder: &str) -> Option<&TrustedSubsystem> {
        self.subsystems.get(stakeholder)
    }

    pub fn subsystem_mut(&mut self, stakeholder: &str) -> Option<&mut TrustedSubsystem> {
        self.subsystems.get_mut(stakeholder)
    }

    /// Disjoint borrows of the MTM, RIM store and one subsystem.
    pub fn parts_mut(
        &mut self,
        stakeholder: &str,
    ) -> Result<(&mut MtmDevice, &mut RimStore, &mut TrustedSubsystem), EngineError> {
        let tss = self
            .subsystems
            .get_mut(stakeholder)
            .ok_or_else(|| EngineError::NoSubsystem(stakeholder.to_owned()))?;
        Ok((&mut self.mtm, &mut self.rim_store, tss))
    }

    /// Public key a stakeholder's certificates and documents verify under.
    pub fn root_key(&self, stakeholder: &str) -> Option<&crate::crypto::PublicKey> {
        self.mtm.root_verification_keys().get(stakeholder)
    }

    pub fn rng(&mut self) -> &mut DeterministicRng {
        self.mtm.rng()
    }

    /// RTE of the device manufacturer: boots the DM subsystem into PCR 0.
    pub fn boot(&mut self) -> Result<EngineState, EngineError> {
        let dm = self.dm.id.clone();
        let (mtm, rims, tss) = self.parts_mut(&dm)?;
        let state = rte_boot(mtm, rims, tss)?;
        self.booted = state == EngineState::Running;
        Ok(state)
    }

    /// Installs a pristine mandatory engine with the generic services and a
    /// clean MRTM instance for `ro`.
    pub fn install_blank_engine(
        &mut self,
        ro: &Stakeholder,
        purpose: &str,
    ) -> Result<InstanceHandle, EngineError> {
        let dm_running = self
            .subsystems
            .get(&self.dm.id)
            .is_some_and(TrustedSubsystem::is_running);
        if !self.booted || !dm_running {
            return Err(EngineError::DeviceNotBooted);
        }
        if self.subsystems.contains_key(&ro.id) {
            return Err(EngineError::DuplicateSubsystem(ro.id.clone()));
        }
        let handle = self
            .mtm
            .create_instance(&ro.id, Profile::Mrtm)
            .map_err(|e| match e {
                MtmError::DuplicateStakeholder => EngineError::DuplicateSubsystem(ro.id.clone()),
                other => other.into(),
            })?;
        self.mtm
            .add_root_verification_key(&ro.id, ro.root_public_key.clone());
        self.rim_store
            .add_trust_root(&ro.id, ro.root_public_key.clone());
        let engine = TrustedEngine {
            stakeholder: ro.id.clone(),
            component_id: PRISTINE_ENGINE_ID.to_owned(),
            domain: Domain::Mandatory,
            lifecycle: EngineState::Pristine,
            image: self.pristine_engine.clone(),
            measurement_log: Vec::new(),
            purpose: purpose.to_owned(),
        };
        let mut tss = TrustedSubsystem::new(engine, handle);
        tss.services_own = self.generic_services.clone();
        self.subsystems.insert(ro.id.clone(), tss);
        Ok(handle)
    }

    /// Drops a subsystem and destroys its vMTM, without permission checks.
    pub fn discard_subsystem(&mut self, stakeholder: &str) -> Option<TrustedSubsystem> {
        let tss = self.subsystems.remove(stakeholder)?;
        let _ = self.mtm.destroy_instance(tss.vmtm);
        Some(tss)
    }

    pub fn remove_engine(
        &mut self,
        requestor: &Stakeholder,
        stakeholder: &str,
    ) -> Result<(), EngineError> {
        let tss = self
            .subsystem(stakeholder)
            .ok_or_else(|| EngineError::NoSubsystem(stakeholder.to_owned()))?;
        check_removal(requestor, &tss.engine)?;
        self.discard_subsystem(stakeholder);
        Ok(())
    }

    /// Records an offer nonce; false if it was seen before.
    pub fn note_offer_nonce(&mut self, nonce: Nonce) -> bool {
        self.seen_offer_nonces.insert(nonce)
    }
}

impl Canonical for Platform {
    fn write(&self, w: &mut Writer) {
        let subsystems: Vec<_> = self.subsystems.values().cloned().collect();
        let nonces: Vec<_> = self.seen_offer_nonces.iter().copied().collect();
        w.nested(&self.mtm)
            .nested(&self.dm)
            .nested(&self.device_owner)
            .list(&subsystems)
            .nested(&self.rim_store);
        w.bool(self.booted)
            .bool(self.owner_approves_migration)
            .list(&nonces);
        w.bytes(&self.pristine_engine).list(&self.generic_services);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            mtm: r.nested()?,
            dm: r.nested()?,
            device_owner: r.nested()?,
            subsystems: r
                .list::<TrustedSubsystem>()?
                .into_iter()
                .map(|s| (s.owner().to_owned(), s))
                .collect(),
            rim_store: r.nested()?,
            booted: r.bool()?,
            owner_approves_migration: r.bool()?,
            seen_offer_nonces: r.list()?.into_iter().collect(),
            pristine_engine: r.vec()?,
            generic_services: r.list()?,
        })
    }
}
