//! Digests and message authentication.
//!
//! Two authentication modes are supported. An authenticator is a vector of
//! HMAC-SHA-256 tags, one per receiver, each truncated to 8 bytes. A
//! signature is a single Ed25519 signature that any third party can check.
//! Both MAC and signature cover the SHA-256 digest of the message bytes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ids::{Endpoint, QuorumConfig, ReplicaId};

pub const DIGEST_LEN: usize = 32;
pub const MAC_LEN: usize = 8;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First eight bytes, for compact logging.
    pub fn short(&self) -> String {
        self.0[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_hex_digest(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

fn parse_hex_digest(s: &str) -> Option<Digest> {
    if s.len() != 2 * DIGEST_LEN || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; DIGEST_LEN];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16)?;
        let lo = (chunk[1] as char).to_digit(16)?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Some(Digest(out))
}

/// SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// SHA-256 over the concatenation of several parts.
pub fn digest_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMode {
    Signature,
    Authenticator,
}

#[derive(Clone, PartialEq, Eq)]
pub enum AuthTag {
    Signature([u8; SIGNATURE_LEN]),
    /// One truncated MAC per receiver, in receiver order.
    Authenticator(Vec<[u8; MAC_LEN]>),
}

impl AuthTag {
    pub fn mode(&self) -> AuthMode {
        match self {
            AuthTag::Signature(_) => AuthMode::Signature,
            AuthTag::Authenticator(_) => AuthMode::Authenticator,
        }
    }
}

impl fmt::Debug for AuthTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuthTag::Signature(s) => write!(f, "Signature({:02x}{:02x}..)", s[0], s[1]),
            AuthTag::Authenticator(v) => write!(f, "Authenticator[{}]", v.len()),
        }
    }
}

/// Who an authenticator is addressed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Receivers {
    /// Every replica of the group; entry `i` belongs to replica `i`.
    Group,
    /// A single endpoint; the authenticator has exactly one entry.
    Single(Endpoint),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("no key material for principal {0}")]
    MissingKey(Endpoint),
    #[error("no signing key for {0}")]
    MissingSigningKey(Endpoint),
}

/// Key material for a replica group and its clients.
///
/// Pairwise MAC keys and replica signing keys are derived from a master
/// secret so that a whole simulated deployment is reproducible from one
/// seed. Clients never sign.
pub struct KeyStore {
    master: [u8; 32],
    quorum: QuorumConfig,
    clients: u64,
    signing: Vec<SigningKey>,
    verifying: Vec<VerifyingKey>,
}

impl fmt::Debug for KeyStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyStore")
            .field("n", &self.quorum.n())
            .field("clients", &self.clients)
            .finish()
    }
}

type HmacSha256 = Hmac<Sha256>;

impl KeyStore {
    pub fn new(master_seed: u64, quorum: QuorumConfig, clients: u64) -> Self {
        let master = digest_parts([b"ndbft-master".as_slice(), &master_seed.to_le_bytes()]).0;
        let signing: Vec<SigningKey> = quorum
            .replicas()
            .map(|r| {
                let seed = digest_parts([b"sign".as_slice(), &master, &r.0.to_le_bytes()]);
                SigningKey::from_bytes(&seed.0)
            })
            .collect();
        let verifying = signing.iter().map(|k| k.verifying_key()).collect();
        KeyStore { master, quorum, clients, signing, verifying }
    }

    pub fn quorum(&self) -> QuorumConfig {
        self.quorum
    }

    fn known(&self, e: Endpoint) -> bool {
        match e {
            Endpoint::Replica(r) => self.quorum.contains(r),
            Endpoint::Client(c) => c.0 < self.clients,
        }
    }

    fn pair_key(&self, a: Endpoint, b: Endpoint) -> Result<[u8; 32], ConfigError> {
        for e in [a, b] {
            if !self.known(e) {
                return Err(ConfigError::MissingKey(e));
            }
        }
        let (lo, hi) = if a.principal() <= b.principal() {
            (a.principal(), b.principal())
        } else {
            (b.principal(), a.principal())
        };
        Ok(digest_parts([
            b"pair".as_slice(),
            &self.master,
            &lo.to_le_bytes(),
            &hi.to_le_bytes(),
        ])
        .0)
    }

    fn mac(&self, sender: Endpoint, receiver: Endpoint, d: &Digest) -> Result<[u8; MAC_LEN], ConfigError> {
        let key = self.pair_key(sender, receiver)?;
        let mut m = HmacSha256::new_from_slice(&key).expect("hmac accepts any key length");
        m.update(&d.0);
        let full = m.finalize().into_bytes();
        let mut out = [0u8; MAC_LEN];
        out.copy_from_slice(&full[..MAC_LEN]);
        Ok(out)
    }

    fn signing_key(&self, e: Endpoint) -> Result<&SigningKey, ConfigError> {
        match e {
            Endpoint::Replica(r) if self.quorum.contains(r) => Ok(&self.signing[r.0 as usize]),
            _ => Err(ConfigError::MissingSigningKey(e)),
        }
    }

    pub fn verifying_key(&self, r: ReplicaId) -> Option<&VerifyingKey> {
        self.verifying.get(r.0 as usize)
    }

    /// Produce an [`AuthTag`] for `bytes` from `sender`.
    pub fn authenticate(
        &self,
        sender: Endpoint,
        bytes: &[u8],
        mode: AuthMode,
        receivers: Receivers,
    ) -> Result<AuthTag, ConfigError> {
        let d = digest(bytes);
        match mode {
            AuthMode::Signature => {
                let key = self.signing_key(sender)?;
                Ok(AuthTag::Signature(key.sign(&d.0).to_bytes()))
            }
            AuthMode::Authenticator => {
                let tags = match receivers {
                    Receivers::Group => self
                        .quorum
                        .replicas()
                        .map(|r| self.mac(sender, Endpoint::Replica(r), &d))
                        .collect::<Result<Vec<_>, _>>()?,
                    Receivers::Single(to) => vec![self.mac(sender, to, &d)?],
                };
                Ok(AuthTag::Authenticator(tags))
            }
        }
    }

    /// Check `tag` as seen by `receiver`. An authenticator is checked only
    /// at the receiver's own entry.
    pub fn verify(&self, tag: &AuthTag, sender: Endpoint, bytes: &[u8], receiver: Endpoint) -> bool {
        let d = digest(bytes);
        self.verify_digest(tag, sender, &d, receiver)
    }

    pub fn verify_digest(&self, tag: &AuthTag, sender: Endpoint, d: &Digest, receiver: Endpoint) -> bool {
        match tag {
            AuthTag::Signature(sig) => {
                let Endpoint::Replica(r) = sender else { return false };
                let Some(vk) = self.verifying_key(r) else { return false };
                verify_signature_cached(vk, d, sig)
            }
            AuthTag::Authenticator(tags) => {
                let entry = match (tags.len(), receiver) {
                    (1, _) => 0,
                    (len, Endpoint::Replica(i)) if len == self.quorum.n() as usize => i.0 as usize,
                    _ => return false,
                };
                match self.mac(sender, receiver, d) {
                    Ok(expected) => tags[entry] == expected,
                    Err(_) => false,
                }
            }
        }
    }
}

/// (public key, message digest, signature) to verification outcome.
type SigCache = HashMap<([u8; 32], [u8; DIGEST_LEN], [u8; SIGNATURE_LEN]), bool>;

thread_local! {
    static SIG_CACHE: RefCell<SigCache> =
        RefCell::new(HashMap::new());
}

const SIG_CACHE_CAP: usize = 1 << 16;

// Verification is a pure function of (key, digest, signature); replicas
// sharing a process reuse earlier outcomes.
fn verify_signature_cached(vk: &VerifyingKey, d: &Digest, sig: &[u8; SIGNATURE_LEN]) -> bool {
    let key = (vk.to_bytes(), d.0, *sig);
    if let Some(hit) = SIG_CACHE.with(|c| c.borrow().get(&key).copied()) {
        return hit;
    }
    let ok = vk
        .verify(&d.0, &ed25519_dalek::Signature::from_bytes(sig))
        .is_ok();
    SIG_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= SIG_CACHE_CAP {
            c.clear();
        }
        c.insert(key, ok);
    });
    ok
}
