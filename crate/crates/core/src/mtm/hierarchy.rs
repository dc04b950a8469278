//! SRK-rooted key tree.
//!
//! The root's private part is sealed under the device storage key with
//! ChaCha20-Poly1305; every other node's private part is encrypted to its
//! parent's public key. Using a key unwraps the chain from the root down.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, CodecResult, Reader, Writer};
use crate::crypto::{
    aead_open_raw, aead_seal_raw, DeterministicRng, Digest, KeyPair, KeyUsage, PcrBinding,
    PublicKey,
};

pub const DEFAULT_MAX_DEPTH: u8 = 8;

const ROOT_AAD: &[u8] = b"mtm-srk-wrap";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HierarchyError {
    #[error("no storage root key")]
    NoRoot,
    #[error("unknown parent key {0}")]
    UnknownParent(Digest),
    #[error("unknown key {0}")]
    UnknownKey(Digest),
    #[error("parent {0} is not a storage key")]
    ParentNotStorage(Digest),
    #[error("hierarchy depth limit {0} reached")]
    DepthLimit(u8),
    #[error("wrapped key material failed to authenticate")]
    Integrity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyNode {
    pub key_id: Digest,
    pub public: PublicKey,
    pub parent: Option<Digest>,
    /// The root has depth 1.
    pub depth: u8,
    pub pcr_binding: Option<PcrBinding>,
    wrapped_private: Vec<u8>,
}

impl KeyNode {
    pub fn wrapped_private(&self) -> &[u8] {
        &self.wrapped_private
    }
}

impl Canonical for KeyNode {
    fn write(&self, w: &mut Writer) {
        w.bytes(self.key_id.as_bytes())
            .nested(&self.public)
            .option(self.parent.as_ref());
        w.u8(self.depth)
            .option(self.pcr_binding.as_ref())
            .bytes(&self.wrapped_private);
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let node = Self {
            key_id: Digest::from_bytes(r.array32()?),
            public: r.nested()?,
            parent: r.option()?,
            depth: r.u8()?,
            pcr_binding: r.option()?,
            wrapped_private: r.vec()?,
        };
        if node.public.key_id() != node.key_id {
            return Err(CodecError::Malformed {
                tag: 1,
                reason: "key id does not match public key",
            });
        }
        Ok(node)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyHierarchy {
    nodes: BTreeMap<Digest, KeyNode>,
    root: Option<Digest>,
}

impl KeyHierarchy {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_root(srk: &KeyPair, storage_key: &[u8; 32], rng: &mut DeterministicRng) -> Self {
        let key_id = srk.key_id();
        let node = KeyNode {
            key_id,
            public: srk.public.clone(),
            parent: None,
            depth: 1,
            pcr_binding: None,
            wrapped_private: aead_seal_raw(
                storage_key,
                &root_aad(&key_id),
                srk.secret().expose(),
                rng,
            ),
        };
        Self {
            nodes: BTreeMap::from([(key_id, node)]),
            root: Some(key_id),
        }
    }

    pub fn root(&self) -> Option<Digest> {
        self.root
    }

    pub fn get(&self, key_id: &Digest) -> Option<&KeyNode> {
        self.nodes.get(key_id)
    }

    pub fn contains(&self, key_id: &Digest) -> bool {
        self.nodes.contains_key(key_id)
    }

    pub fn key_ids(&self) -> impl Iterator<Item = &Digest> {
        self.nodes.keys()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KeyNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn insert_child(
        &mut self,
        parent_id: Digest,
        child: &KeyPair,
        pcr_binding: Option<PcrBinding>,
        max_depth: u8,
        rng: &mut DeterministicRng,
    ) -> Result<Digest, HierarchyError> {
        let parent = self
            .nodes
            .get(&parent_id)
            .ok_or(HierarchyError::UnknownParent(parent_id))?;
        if parent.public.usage != KeyUsage::Binding {
            return Err(HierarchyError::ParentNotStorage(parent_id));
        }
        if parent.depth >= max_depth {
            return Err(HierarchyError::DepthLimit(max_depth));
        }
        let key_id = child.key_id();
        let wrapped_private = parent
            .public
            .encrypt(child.secret().expose(), key_id.as_bytes(), rng)
            .expect("binding keys always encrypt");
        let node = KeyNode {
            key_id,
            public: child.public.clone(),
            parent: Some(parent_id),
            depth: parent.depth + 1,
            pcr_binding,
            wrapped_private,
        };
        self.nodes.insert(key_id, node);
        Ok(key_id)
    }

    /// Node ids from the root down to `key_id`, inclusive.
    pub fn path(&self, key_id: &Digest) -> Result<Vec<Digest>, HierarchyError> {
        let mut path = Vec::new();
        let mut cursor = Some(*key_id);
        while let Some(id) = cursor {
            let node = self.nodes.get(&id).ok_or(HierarchyError::UnknownKey(id))?;
            path.push(id);
            cursor = node.parent;
            if path.len() > self.nodes.len() {
                return Err(HierarchyError::Integrity);
            }
        }
        path.reverse();
        Ok(path)
    }

    pub(crate) fn root_secret(&self, storage_key: &[u8; 32]) -> Result<KeyPair, HierarchyError> {
        let root_id = self.root.ok_or(HierarchyError::NoRoot)?;
        let node = &self.nodes[&root_id];
        let secret = aead_open_raw(storage_key, &root_aad(&root_id), &node.wrapped_private)
            .map_err(|_| HierarchyError::Integrity)?;
        let secret: [u8; 32] = secret.try_into().map_err(|_| HierarchyError::Integrity)?;
        Ok(KeyPair::from_secret(
            node.public.suite,
            node.public.usage,
            secret,
        ))
    }

    pub(crate) fn unwrap_key(
        &self,
        key_id: &Digest,
        storage_key: &[u8; 32],
    ) -> Result<KeyPair, HierarchyError> {
        if !self.nodes.contains_key(key_id) {
            return Err(HierarchyError::UnknownKey(*key_id));
        }
        let path = self.path(key_id)?;
        if Some(path[0]) != self.root {
            return Err(HierarchyError::Integrity);
        }
        let mut current = self.root_secret(storage_key)?;
        for id in &path[1..] {
            let node = &self.nodes[id];
            let secret = current
                .decrypt(&node.wrapped_private, id.as_bytes())
                .map_err(|_| HierarchyError::Integrity)?;
            let secret: [u8; 32] = secret.try_into().map_err(|_| HierarchyError::Integrity)?;
            current = KeyPair::from_secret(node.public.suite, node.public.usage, secret);
        }
        Ok(current)
    }

    /// Re-seals the root under a different storage key; children are untouched.
    pub(crate) fn rewrap_root(
        &mut self,
        root: &KeyPair,
        storage_key: &[u8; 32],
        rng: &mut DeterministicRng,
    ) {
        let root_id = root.key_id();
        if let Some(node) = self.nodes.get_mut(&root_id) {
            node.wrapped_private = aead_seal_raw(
                storage_key,
                &root_aad(&root_id),
                root.secret().expose(),
                rng,
            );
        }
    }

    /// Structural checks: one root, parents exist, depths consistent, acyclic.
    pub fn validate(&self) -> Result<(), HierarchyError> {
        if self.nodes.is_empty() {
            return if self.root.is_none() {
                Ok(())
            } else {
                Err(HierarchyError::Integrity)
            };
        }
        let root = self.root.ok_or(HierarchyError::NoRoot)?;
        let mut roots = 0;
        for node in self.nodes.values() {
            match node.parent {
                None => {
                    roots += 1;
                    if node.key_id != root || node.depth != 1 {
                        return Err(HierarchyError::Integrity);
                    }
                }
                Some(p) => {
                    let parent = self.nodes.get(&p).ok_or(HierarchyError::UnknownParent(p))?;
                    if parent.depth + 1 != node.depth || parent.public.usage != KeyUsage::Binding {
                        return Err(HierarchyError::Integrity);
                    }
                }
            }
            self.path(&node.key_id)?;
        }
        if roots == 1 {
            Ok(())
        } else {
            Err(HierarchyError::Integrity)
        }
    }

    pub(crate) fn wipe(&mut self) {
        self.nodes.clear();
        self.root = None;
    }
}

fn root_aad(key_id: &Digest) -> Vec<u8> {
    [ROOT_AAD, key_id.as_bytes()].concat()
}

impl Canonical for KeyHierarchy {
    fn write(&self, w: &mut Writer) {
        let nodes: Vec<_> = self.nodes.values().cloned().collect();
        w.list(&nodes).option(self.root.as_ref());
    }

    fn read(r: &mut Reader<'_>) -> CodecResult<Self> {
        let nodes = r
            .list::<KeyNode>()?
            .into_iter()
            .map(|n| (n.key_id, n))
            .collect();
        let h = Self {
            nodes,
            root: r.option()?,
        };
        h.validate().map_err(|_| CodecError::Malformed {
            tag: 1,
            reason: "inconsistent key hierarchy",
        })?;
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SuiteId;

    fn setup() -> (KeyHierarchy, [u8; 32], DeterministicRng) {
        let mut rng = DeterministicRng::from_seed(5);
        let storage = rng.array32();
        let srk = rng.keypair(KeyUsage::Binding, SuiteId::Standard);
        (
            KeyHierarchy::with_root(&srk, &storage, &mut rng),
            storage,
            rng,
        )
    }

    #[test]
    fn child_unwraps_through_chain() {
        let (mut h, storage, mut rng) = setup();
        let root = h.root().unwrap();
        let mid = rng.keypair(KeyUsage::Binding, SuiteId::Standard);
        let mid_id = h
            .insert_child(root, &mid, None, DEFAULT_MAX_DEPTH, &mut rng)
            .unwrap();
        let leaf = rng.keypair(KeyUsage::Signing, SuiteId::Standard);
        let leaf_id = h
            .insert_child(mid_id, &leaf, None, DEFAULT_MAX_DEPTH, &mut rng)
            .unwrap();
        assert_eq!(h.unwrap_key(&leaf_id, &storage).unwrap(), leaf);
        assert_eq!(h.path(&leaf_id).unwrap(), vec![root, mid_id, leaf_id]);
        h.validate().unwrap();
    }

    #[test]
    fn wrong_storage_key_fails() {
        let (h, _, _) = setup();
        assert_eq!(h.root_secret(&[9; 32]), Err(HierarchyError::Integrity));
    }

    #[test]
    fn parent_must_exist_and_be_storage() {
        let (mut h, _, mut rng) = setup();
        let k = rng.keypair(KeyUsage::Signing, SuiteId::Standard);
        assert_eq!(
            h.insert_child(Digest::ZERO, &k, None, DEFAULT_MAX_DEPTH, &mut rng),
            Err(HierarchyError::UnknownParent(Digest::ZERO))
        );
        let signer = h
            .insert_child(h.root().unwrap(), &k, None, DEFAULT_MAX_DEPTH, &mut rng)
            .unwrap();
        let k2 = rng.keypair(KeyUsage::Signing, SuiteId::Standard);
        assert_eq!(
            h.insert_child(signer, &k2, None, DEFAULT_MAX_DEPTH, &mut rng),
            Err(HierarchyError::ParentNotStorage(signer))
        );
    }

    #[test]
    fn depth_limit() {
        let (mut h, _, mut rng) = setup();
        let mut parent = h.root().unwrap();
        for _ in 1..DEFAULT_MAX_DEPTH {
            let k = rng.keypair(KeyUsage::Binding, SuiteId::Standard);
            parent = h
                .insert_child(parent, &k, None, DEFAULT_MAX_DEPTH, &mut rng)
                .unwrap();
        }
        assert_eq!(h.get(&parent).unwrap().depth, DEFAULT_MAX_DEPTH);
        let k = rng.keypair(KeyUsage::Binding, SuiteId::Standard);
        assert_eq!(
            h.insert_child(parent, &k, None, DEFAULT_MAX_DEPTH, &mut rng),
            Err(HierarchyError::DepthLimit(DEFAULT_MAX_DEPTH))
        );
    }

    #[test]
    fn encoding_round_trip_and_validation() {
        let (mut h, _, mut rng) = setup();
        let k = rng.keypair(KeyUsage::Decryption, SuiteId::Standard);
        h.insert_child(h.root().unwrap(), &k, None, DEFAULT_MAX_DEPTH, &mut rng)
            .unwrap();
        let bytes = h.to_canonical();
        assert_eq!(KeyHierarchy::from_canonical(&bytes).unwrap(), h);
    }
}
