//! Reference integrity metric certificates and their counter-window
//! revocation.
//!
//! A certificate binds a component digest to a target PCR and is signed by
//! its issuer's root key. Validity is a window over the device monotonic
//! counter: `[valid_from_counter, revoked_at_counter)`. The revocation mark
//! is holder-side metadata and sits outside the signed body, so revoking a
//! stored certificate does not change its `cert_id`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{Canonical, CodecResult, Reader, Writer};
use crate::crypto::{hash, CryptoError, Digest, KeyPair, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RimCertificate {
    pub cert_id: Digest,
    pub component_id: String,
    pub expected_digest: Digest,
    pub target_pcr: u8,
    pub issuer: String,
    pub valid_from_counter: u64,
    pub revoked_at_counter: Option<u64>,
    pub signature: Signature,
}

impl RimCertificate {
    fn body(
        component_id: &str,
        expected: &Digest,
        target_pcr: u8,
        issuer: &str,
        valid_from: u64,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.str("mtm-rim-v1")
            .str(component_id)
            .bytes(expected.as_bytes())
            .u8(target_pcr)
            .str(issuer)
            .u64(valid_from);
        w.finish()
    }

    pub fn signed_body(&self) -> Vec<u8> {
        Self::body(
            &self.component_id,
            &self.expected_digest,
            self.target_pcr,
            &self.issuer,
            self.valid_from_counter,
        )
    }

    /// Signature check alone, ignoring counters.
    pub fn verify_signature(&self, issuer_key: &PublicKey) -> bool {
        let body = self.signed_body();
        hash(&body) == self.cert_id && issuer_key.verify(&body, &self.signature)
    }
}

impl Canonical for RimCertificate {
    fn write(&self, w: &mut Writer) {
        w.bytes(self.cert_id.as_bytes())
            .str(&self.component_id)
            .bytes(self.expected_digest.as_bytes());
        w.u8(self.target_pcr)
            .str(&self.issuer)
            .u64(self.valid_from_counter);
        w.option(self.revoked_at_counter.map(Counter).as_ref())
            .nested(&self.signature);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Self {
            cert_id: Digest::from_bytes(r.array32()?),
            component_id: r.string()?,
            expected_digest: Digest::from_bytes(r.array32()?),
            target_pcr: r.u8()?,
            issuer: r.string()?,
            valid_from_counter: r.u64()?,
            revoked_at_counter: r.option::<Counter>()?.map(|c| c.0),
            signature: r.nested()?,
        })
    }
}

struct Counter(u64);

impl Canonical for Counter {
    fn write(&self, w: &mut Writer) {
        w.u64(self.0);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        Ok(Counter(r.u64()?))
    }
}

pub fn issue_rim_cert(
    issuer_id: &str,
    issuer_key: &KeyPair,
    component_id: &str,
    expected_digest: Digest,
    target_pcr: u8,
    valid_from_counter: u64,
    revoked_at_counter: Option<u64>,
) -> Result<RimCertificate, CryptoError> {
    let body = RimCertificate::body(
        component_id,
        &expected_digest,
        target_pcr,
        issuer_id,
        valid_from_counter,
    );
    let signature = issuer_key.sign(&body)?;
    Ok(RimCertificate {
        cert_id: hash(&body),
        component_id: component_id.to_owned(),
        expected_digest,
        target_pcr,
        issuer: issuer_id.to_owned(),
        valid_from_counter,
        revoked_at_counter: revoked_at_counter.map(|c| c.max(valid_from_counter)),
        signature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertVerdict {
    Valid,
    BadSignature,
    Revoked,
    NotYetValid,
}

/// Only the issuer's own root is consulted.
pub fn check_cert(
    cert: &RimCertificate,
    trust_roots: &BTreeMap<String, PublicKey>,
    device_counter: u64,
) -> CertVerdict {
    match trust_roots.get(&cert.issuer) {
        Some(root) if cert.verify_signature(root) => {}
        _ => return CertVerdict::BadSignature,
    }
    if device_counter < cert.valid_from_counter {
        return CertVerdict::NotYetValid;
    }
    match cert.revoked_at_counter {
        Some(mark) if device_counter >= mark => CertVerdict::Revoked,
        _ => CertVerdict::Valid,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RimError {
    #[error("unknown certificate {0}")]
    UnknownCert(Digest),
    #[error("revocation counter {at} precedes validity start {valid_from}")]
    BadCounter { at: u64, valid_from: u64 },
    #[error("certificate {0} does not verify under its issuer's root")]
    BadSignature(Digest),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RimStore {
    certs: BTreeMap<Digest, RimCertificate>,
    trust_roots: BTreeMap<String, PublicKey>,
    /// Revocation marks for subsystem certificates, keyed by certificate id.
    subject_revocations: BTreeMap<Digest, u64>,
}

impl RimStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_trust_root(&mut self, stakeholder: &str, key: PublicKey) {
        self.trust_roots.insert(stakeholder.to_owned(), key);
    }

    pub fn trust_roots(&self) -> &BTreeMap<String, PublicKey> {
        &self.trust_roots
    }

    /// Adds a certificate after checking its signature. Re-inserting the same
    /// body keeps the stricter revocation mark.
    pub fn insert(&mut self, cert: RimCertificate) -> Result<Digest, RimError> {
        let valid = self
            .trust_roots
            .get(&cert.issuer)
            .is_some_and(|root| cert.verify_signature(root));
        if !valid {
            return Err(RimError::BadSignature(cert.cert_id));
        }
        let id = cert.cert_id;
        match self.certs.get_mut(&id) {
            Some(existing) => {
                existing.revoked_at_counter =
                    match (existing.revoked_at_counter, cert.revoked_at_counter) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
            }
            None => {
                self.certs.insert(id, cert);
            }
        }
        Ok(id)
    }

    pub fn get(&self, cert_id: &Digest) -> Option<&RimCertificate> {
        self.certs.get(cert_id)
    }

    pub fn len(&self) -> usize {
        self.certs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.certs.is_empty()
    }

    pub fn certs(&self) -> impl Iterator<Item = &RimCertificate> {
        self.certs.values()
    }

    /// Latest `valid_from_counter` wins; ties go to the larger cert id.
    pub fn lookup(&self, component_id: &str, issuer: &str) -> Option<&RimCertificate> {
        self.certs
            .values()
            .filter(|c| c.component_id == component_id && c.issuer == issuer)
            .max_by_key(|c| (c.valid_from_counter, c.cert_id))
    }

    pub fn revoke(&mut self, cert_id: &Digest, at_counter: u64) -> Result<(), RimError> {
        let cert = self
            .certs
            .get_mut(cert_id)
            .ok_or(RimError::UnknownCert(*cert_id))?;
        if at_counter < cert.valid_from_counter {
            return Err(RimError::BadCounter {
                at: at_counter,
                valid_from: cert.valid_from_counter,
            });
        }
        cert.revoked_at_counter = Some(
            cert.revoked_at_counter
                .map_or(at_counter, |c| c.min(at_counter)),
        );
        Ok(())
    }

    pub fn check(&self, cert_id: &Digest, device_counter: u64) -> Result<CertVerdict, RimError> {
        let cert = self
            .certs
            .get(cert_id)
            .ok_or(RimError::UnknownCert(*cert_id))?;
        Ok(check_cert(cert, &self.trust_roots, device_counter))
    }

    pub fn revoke_subject(&mut self, subject_cert_id: Digest, at_counter: u64) {
        let mark = self
            .subject_revocations
            .entry(subject_cert_id)
            .or_insert(at_counter);
        *mark = (*mark).min(at_counter);
    }

    pub fn is_subject_revoked(&self, subject_cert_id: &Digest, device_counter: u64) -> bool {
        self.subject_revocations
            .get(subject_cert_id)
            .is_some_and(|mark| device_counter >= *mark)
    }
}

impl Canonical for RimStore {
    fn write(&self, w: &mut Writer) {
        let certs: Vec<_> = self.certs.values().cloned().collect();
        w.list(&certs);
        let roots: Vec<_> = self.trust_roots.iter().collect();
        w.list_with(&roots, |w, (id, key)| {
            w.str(id).nested(*key);
        });
        let revs: Vec<_> = self.subject_revocations.iter().collect();
        w.list_with(&revs, |w, (id, at)| {
            w.bytes(id.as_bytes()).u64(**at);
        });
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let certs = r
            .list::<RimCertificate>()?
            .into_iter()
            .map(|c| (c.cert_id, c))
            .collect();
        let trust_roots = r
            .list_with(|r| Ok((r.string()?, r.nested::<PublicKey>()?)))?
            .into_iter()
            .collect();
        let subject_revocations = r
            .list_with(|r| Ok((Digest::from_bytes(r.array32()?), r.u64()?)))?
            .into_iter()
            .collect();
        Ok(Self {
            certs,
            trust_roots,
            subject_revocations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{DeterministicRng, KeyUsage, SuiteId};

    struct Fixture {
        key: KeyPair,
        other: KeyPair,
        roots: BTreeMap<String, PublicKey>,
    }

    fn fixture() -> Fixture {
        let mut rng = DeterministicRng::from_seed(11);
        let key = rng.keypair(KeyUsage::Signing, SuiteId::Standard);
        let other = rng.keypair(KeyUsage::Signing, SuiteId::Standard);
        let mut roots = BTreeMap::new();
        roots.insert("RO1".to_owned(), key.public.clone());
        roots.insert("RO2".to_owned(), other.public.clone());
        Fixture { key, other, roots }
    }

    fn cert(f: &Fixture, valid_from: u64, revoked_at: Option<u64>) -> RimCertificate {
        issue_rim_cert(
            "RO1",
            &f.key,
            "svc",
            hash(b"svc image"),
            1,
            valid_from,
            revoked_at,
        )
        .unwrap()
    }

    #[test]
    fn issued_cert_verifies() {
        let f = fixture();
        assert_eq!(
            check_cert(&cert(&f, 0, None), &f.roots, 0),
            CertVerdict::Valid
        );
    }

    #[test]
    fn altered_body_fails() {
        let f = fixture();
        let mut c = cert(&f, 0, None);
        c.expected_digest = hash(b"evil");
        assert_eq!(check_cert(&c, &f.roots, 0), CertVerdict::BadSignature);
        let mut c = cert(&f, 0, None);
        c.target_pcr = 2;
        assert_eq!(check_cert(&c, &f.roots, 0), CertVerdict::BadSignature);
    }

    #[test]
    fn other_root_rejects() {
        let f = fixture();
        let mut c = cert(&f, 0, None);
        c.issuer = "RO2".into();
        assert_eq!(check_cert(&c, &f.roots, 0), CertVerdict::BadSignature);
        let forged =
            issue_rim_cert("RO1", &f.other, "svc", hash(b"svc image"), 1, 0, None).unwrap();
        assert_eq!(check_cert(&forged, &f.roots, 0), CertVerdict::BadSignature);
    }

    #[test]
    fn counter_window() {
        let f = fixture();
        let c = cert(&f, 3, Some(7));
        assert_eq!(check_cert(&c, &f.roots, 2), CertVerdict::NotYetValid);
        assert_eq!(check_cert(&c, &f.roots, 3), CertVerdict::Valid);
        assert_eq!(check_cert(&c, &f.roots, 6), CertVerdict::Valid);
        assert_eq!(check_cert(&c, &f.roots, 7), CertVerdict::Revoked);
        assert_eq!(check_cert(&c, &f.roots, 100), CertVerdict::Revoked);
    }

    #[test]
    fn revoke_boundary() {
        let f = fixture();
        let mut store = RimStore::new();
        store.add_trust_root("RO1", f.key.public.clone());
        let id = store.insert(cert(&f, 0, None)).unwrap();
        store.revoke(&id, 5).unwrap();
        assert_eq!(store.check(&id, 5).unwrap(), CertVerdict::Revoked);
        assert_eq!(store.check(&id, 4).unwrap(), CertVerdict::Valid);
        // revoking does not change the content address
        assert_eq!(store.get(&id).unwrap().cert_id, id);
    }

    #[test]
    fn revoke_errors() {
        let f = fixture();
        let mut store = RimStore::new();
        store.add_trust_root("RO1", f.key.public.clone());
        assert_eq!(
            store.revoke(&Digest::ZERO, 1),
            Err(RimError::UnknownCert(Digest::ZERO))
        );
        let id = store.insert(cert(&f, 4, None)).unwrap();
        assert_eq!(
            store.revoke(&id, 3),
            Err(RimError::BadCounter {
                at: 3,
                valid_from: 4
            })
        );
    }

    #[test]
    fn lookup_prefers_latest_window() {
        let f = fixture();
        let mut store = RimStore::new();
        store.add_trust_root("RO1", f.key.public.clone());
        store.insert(cert(&f, 0, None)).unwrap();
        let newer = store.insert(cert(&f, 2, None)).unwrap();
        assert_eq!(store.lookup("svc", "RO1").unwrap().cert_id, newer);
        assert!(store.lookup("svc", "RO2").is_none());
    }

    #[test]
    fn insert_rejects_unsigned() {
        let f = fixture();
        let mut store = RimStore::new();
        assert!(matches!(
            store.insert(cert(&f, 0, None)),
            Err(RimError::BadSignature(_))
        ));
    }

    #[test]
    fn store_round_trips() {
        let f = fixture();
        let mut store = RimStore::new();
        store.add_trust_root("RO1", f.key.public.clone());
        let id = store.insert(cert(&f, 0, Some(9))).unwrap();
        store.revoke_subject(id, 4);
        assert_eq!(
            RimStore::from_canonical(&store.to_canonical()).unwrap(),
            store
        );
    }
}
