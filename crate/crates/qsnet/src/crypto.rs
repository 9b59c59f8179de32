//! Pluggable KEM, signature, KDF, hybridization and one-time-pad
//! primitives — the cryptographic steps of the border methods without
//! fixing any concrete algorithm.
//!
//! The built-in `kem-a`/`kem-b`/`sig-a`/`sig-b` suites are deterministic
//! test-grade constructions over a SHA-256 PRF: correct as KEMs and
//! signatures at the interface (round-trip, tamper detection, declared
//! lengths) but with no public-key security whatsoever. They exist so a
//! whole deployment runs reproducibly with zero external dependencies;
//! real post-quantum bindings can be registered behind the same
//! interfaces.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::core::{KeyMaterial, ValidationError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unknown {kind} suite '{name}'")]
    UnknownSuite { kind: &'static str, name: String },
    #[error("key belongs to suite '{actual}', expected '{expected}'")]
    WrongSuite { expected: String, actual: String },
    #[error("{what}: expected {expected} bytes, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("hybridization needs at least two keys")]
    TooFewKeys,
    #[error("pre-shared key longer than {max} bytes", max = MAX_PSK_LEN)]
    PskTooLong,
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

pub const MAX_PSK_LEN: usize = 64;

/// Optional pre-shared key string mixed into the multipath KDF.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Psk(Vec<u8>);

impl Psk {
    pub fn new(bytes: Vec<u8>) -> Result<Self, CryptoError> {
        if bytes.len() > MAX_PSK_LEN {
            return Err(CryptoError::PskTooLong);
        }
        Ok(Self(bytes))
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// SHA-256 in counter mode over domain-separated, length-prefixed parts.
/// The single primitive behind the test suites and payload masking.
fn prf_stream(domain: &str, parts: &[&[u8]], out_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_len);
    let mut counter: u32 = 0;
    while out.len() < out_len {
        let mut h = Sha256::new();
        h.update((domain.len() as u32).to_be_bytes());
        h.update(domain.as_bytes());
        for p in parts {
            h.update((p.len() as u32).to_be_bytes());
            h.update(p);
        }
        h.update(counter.to_be_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(out_len);
    out
}

/// 128-bit truncated hash, used for derived identifiers.
pub fn hash128(domain: &str, parts: &[&[u8]]) -> [u8; 16] {
    prf_stream(domain, parts, 16).try_into().unwrap()
}

/// 8-byte key-confirmation tag. Log-only by design: it never goes on
/// the wire.
pub fn confirm_tag(shared_secret: &[u8]) -> String {
    hex::encode(prf_stream("qsnet.confirm", &[shared_secret], 8))
}

fn xor_into(dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

// --- suites ---

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KemSuite {
    pub suite_id: String,
    pub public_key_len: usize,
    pub secret_key_len: usize,
    pub ciphertext_len: usize,
    pub shared_secret_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SigSuite {
    pub suite_id: String,
    pub public_key_len: usize,
    pub secret_key_len: usize,
    pub signature_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KemPublicKey {
    pub suite_id: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KemSecretKey {
    pub suite_id: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigPublicKey {
    pub suite_id: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigSecretKey {
    pub suite_id: String,
    pub bytes: Vec<u8>,
}

/// Named suites enabled for a deployment; written once at startup,
/// read-only afterwards.
#[derive(Debug, Clone, Default)]
pub struct SuiteRegistry {
    kems: std::collections::BTreeMap<String, KemSuite>,
    sigs: std::collections::BTreeMap<String, SigSuite>,
}

impl SuiteRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The deterministic test suite pairs the whole system runs on.
    pub fn with_test_suites() -> Self {
        let mut reg = Self::new();
        reg.register_kem(KemSuite {
            suite_id: "kem-a".into(),
            public_key_len: 32,
            secret_key_len: 32,
            ciphertext_len: 32,
            shared_secret_len: 32,
        });
        reg.register_kem(KemSuite {
            suite_id: "kem-b".into(),
            public_key_len: 48,
            secret_key_len: 48,
            ciphertext_len: 48,
            shared_secret_len: 32,
        });
        reg.register_sig(SigSuite {
            suite_id: "sig-a".into(),
            public_key_len: 32,
            secret_key_len: 32,
            signature_len: 64,
        });
        reg.register_sig(SigSuite {
            suite_id: "sig-b".into(),
            public_key_len: 48,
            secret_key_len: 48,
            signature_len: 96,
        });
        reg
    }

    pub fn register_kem(&mut self, suite: KemSuite) {
        assert!(
            suite.shared_secret_len >= 32,
            "shared secret below 32 bytes"
        );
        self.kems.insert(suite.suite_id.clone(), suite);
    }

    pub fn register_sig(&mut self, suite: SigSuite) {
        self.sigs.insert(suite.suite_id.clone(), suite);
    }

    pub fn kem(&self, name: &str) -> Result<&KemSuite, CryptoError> {
        self.kems.get(name).ok_or_else(|| CryptoError::UnknownSuite {
            kind: "KEM",
            name: name.to_string(),
        })
    }

    pub fn sig(&self, name: &str) -> Result<&SigSuite, CryptoError> {
        self.sigs.get(name).ok_or_else(|| CryptoError::UnknownSuite {
            kind: "SIG",
            name: name.to_string(),
        })
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), CryptoError> {
    if expected != actual {
        return Err(CryptoError::LengthMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_suite(expected: &str, actual: &str) -> Result<(), CryptoError> {
    if expected != actual {
        return Err(CryptoError::WrongSuite {
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

// --- KEM ---

pub fn kem_keygen(suite: &KemSuite, rng: &mut impl rand::RngCore) -> (KemPublicKey, KemSecretKey) {
    let mut sk = vec![0u8; suite.secret_key_len];
    rng.fill_bytes(&mut sk);
    let pk = prf_stream("qsnet.kem.pk", &[suite.suite_id.as_bytes(), &sk], suite.public_key_len);
    (
        KemPublicKey {
            suite_id: suite.suite_id.clone(),
            bytes: pk,
        },
        KemSecretKey {
            suite_id: suite.suite_id.clone(),
            bytes: sk,
        },
    )
}

pub fn kem_encap(
    suite: &KemSuite,
    pk: &KemPublicKey,
    rng: &mut impl rand::RngCore,
) -> Result<(Vec<u8>, Vec<u8>), CryptoError> {
    check_suite(&suite.suite_id, &pk.suite_id)?;
    check_len("public key", suite.public_key_len, pk.bytes.len())?;
    let mut seed = vec![0u8; suite.ciphertext_len];
    rng.fill_bytes(&mut seed);
    let mut ct = seed.clone();
    xor_into(
        &mut ct,
        &prf_stream(
            "qsnet.kem.mask",
            &[suite.suite_id.as_bytes(), &pk.bytes],
            suite.ciphertext_len,
        ),
    );
    let ss = prf_stream(
        "qsnet.kem.ss",
        &[suite.suite_id.as_bytes(), &pk.bytes, &seed],
        suite.shared_secret_len,
    );
    Ok((ct, ss))
}

pub fn kem_decap(
    suite: &KemSuite,
    sk: &KemSecretKey,
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    check_suite(&suite.suite_id, &sk.suite_id)?;
    check_len("secret key", suite.secret_key_len, sk.bytes.len())?;
    check_len("ciphertext", suite.ciphertext_len, ciphertext.len())?;
    let pk = prf_stream(
        "qsnet.kem.pk",
        &[suite.suite_id.as_bytes(), &sk.bytes],
        suite.public_key_len,
    );
    let mut seed = ciphertext.to_vec();
    xor_into(
        &mut seed,
        &prf_stream(
            "qsnet.kem.mask",
            &[suite.suite_id.as_bytes(), &pk],
            suite.ciphertext_len,
        ),
    );
    Ok(prf_stream(
        "qsnet.kem.ss",
        &[suite.suite_id.as_bytes(), &pk, &seed],
        suite.shared_secret_len,
    ))
}

// --- signatures ---

pub fn sig_keygen(suite: &SigSuite, rng: &mut impl rand::RngCore) -> (SigPublicKey, SigSecretKey) {
    let mut sk = vec![0u8; suite.secret_key_len];
    rng.fill_bytes(&mut sk);
    let pk = prf_stream("qsnet.sig.pk", &[suite.suite_id.as_bytes(), &sk], suite.public_key_len);
    (
        SigPublicKey {
            suite_id: suite.suite_id.clone(),
            bytes: pk,
        },
        SigSecretKey {
            suite_id: suite.suite_id.clone(),
            bytes: sk,
        },
    )
}

pub fn sign(suite: &SigSuite, sk: &SigSecretKey, message: &[u8]) -> Result<Vec<u8>, CryptoError> {
    check_suite(&suite.suite_id, &sk.suite_id)?;
    check_len("secret key", suite.secret_key_len, sk.bytes.len())?;
    let pk = prf_stream(
        "qsnet.sig.pk",
        &[suite.suite_id.as_bytes(), &sk.bytes],
        suite.public_key_len,
    );
    Ok(prf_stream(
        "qsnet.sig.tag",
        &[suite.suite_id.as_bytes(), &pk, message],
        suite.signature_len,
    ))
}

/// A wrong-length signature can never verify and reports as `false`;
/// a wrong-length public key is a caller error.
pub fn verify(
    suite: &SigSuite,
    pk: &SigPublicKey,
    message: &[u8],
    signature: &[u8],
) -> Result<bool, CryptoError> {
    check_suite(&suite.suite_id, &pk.suite_id)?;
    check_len("public key", suite.public_key_len, pk.bytes.len())?;
    if signature.len() != suite.signature_len {
        return Ok(false);
    }
    let expected = prf_stream(
        "qsnet.sig.tag",
        &[suite.suite_id.as_bytes(), &pk.bytes, message],
        suite.signature_len,
    );
    Ok(expected == signature)
}

// --- combiners ---

/// Bytewise XOR of two or more equal-length keys.
pub fn hybridize(keys: &[&KeyMaterial]) -> Result<KeyMaterial, CryptoError> {
    let (first, rest) = keys.split_first().ok_or(CryptoError::TooFewKeys)?;
    if rest.is_empty() {
        return Err(CryptoError::TooFewKeys);
    }
    let mut out = first.as_bytes().to_vec();
    for k in rest {
        check_len("hybridize input", out.len(), k.len())?;
        xor_into(&mut out, k.as_bytes());
    }
    Ok(KeyMaterial::new(out)?)
}

/// Key derivation behind the multipath combiner. Both variants are
/// robust combinations: fixing one input and all public transcripts
/// leaves the output uniform over the other input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kdf {
    /// `rnd1 ⊕ rnd2 ⊕ pad(psk)`, with the PSK truncated or
    /// zero-extended to the key length.
    #[default]
    Xor,
    /// PRF over both inputs and the PSK.
    HashMix,
}

pub fn kdf_combine(
    kdf: Kdf,
    rnd1: &KeyMaterial,
    rnd2: &KeyMaterial,
    psk: &Psk,
) -> Result<KeyMaterial, CryptoError> {
    check_len("kdf input", rnd1.len(), rnd2.len())?;
    let len = rnd1.len();
    let out = match kdf {
        Kdf::Xor => {
            let mut out = rnd1.as_bytes().to_vec();
            xor_into(&mut out, rnd2.as_bytes());
            let mut pad = psk.as_bytes().to_vec();
            pad.resize(len, 0);
            xor_into(&mut out, &pad);
            out
        }
        Kdf::HashMix => prf_stream(
            "qsnet.kdf.mix",
            &[rnd1.as_bytes(), rnd2.as_bytes(), psk.as_bytes()],
            len,
        ),
    };
    Ok(KeyMaterial::new(out)?)
}

// --- one-time pad ---

pub fn otp_wrap(payload: &KeyMaterial, pad: &KeyMaterial) -> Result<Vec<u8>, CryptoError> {
    check_len("pad", payload.len(), pad.len())?;
    let mut ct = payload.as_bytes().to_vec();
    xor_into(&mut ct, pad.as_bytes());
    Ok(ct)
}

pub fn otp_unwrap(ciphertext: &[u8], pad: &KeyMaterial) -> Result<KeyMaterial, CryptoError> {
    check_len("pad", ciphertext.len(), pad.len())?;
    let mut out = ciphertext.to_vec();
    xor_into(&mut out, pad.as_bytes());
    Ok(KeyMaterial::new(out)?)
}

/// Keystream for masking a package payload with an encapsulated secret.
pub fn expand_secret(shared_secret: &[u8], len: usize) -> Vec<u8> {
    prf_stream("qsnet.pkg.mask", &[shared_secret], len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(1234)
    }

    #[test]
    fn keygen_is_randomized() {
        let reg = SuiteRegistry::with_test_suites();
        let suite = reg.kem("kem-a").unwrap();
        let mut r = rng();
        let (pk1, _) = kem_keygen(suite, &mut r);
        let (pk2, _) = kem_keygen(suite, &mut r);
        assert_ne!(pk1, pk2);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        let reg = SuiteRegistry::with_test_suites();
        assert!(matches!(
            reg.kem("missing"),
            Err(CryptoError::UnknownSuite { .. })
        ));
        assert!(matches!(
            reg.sig("missing"),
            Err(CryptoError::UnknownSuite { .. })
        ));
    }

    #[test]
    fn kem_roundtrip_1000_trials_per_suite() {
        let reg = SuiteRegistry::with_test_suites();
        let mut r = rng();
        for name in ["kem-a", "kem-b"] {
            let suite = reg.kem(name).unwrap();
            for _ in 0..1000 {
                let (pk, sk) = kem_keygen(suite, &mut r);
                let (ct, ss) = kem_encap(suite, &pk, &mut r).unwrap();
                assert_eq!(kem_decap(suite, &sk, &ct).unwrap(), ss);
            }
        }
    }

    #[test]
    fn flipped_ciphertext_never_silently_agrees() {
        let reg = SuiteRegistry::with_test_suites();
        let mut r = rng();
        for name in ["kem-a", "kem-b"] {
            let suite = reg.kem(name).unwrap();
            let (pk, sk) = kem_keygen(suite, &mut r);
            let (ct, ss) = kem_encap(suite, &pk, &mut r).unwrap();
            for i in 0..ct.len() {
                let mut bad = ct.clone();
                bad[i] ^= 0x01;
                assert_ne!(kem_decap(suite, &sk, &bad).unwrap(), ss, "byte {i}");
            }
        }
    }

    #[test]
    fn wrong_length_ciphertext_is_an_error() {
        let reg = SuiteRegistry::with_test_suites();
        let suite = reg.kem("kem-a").unwrap();
        let mut r = rng();
        let (_, sk) = kem_keygen(suite, &mut r);
        assert!(matches!(
            kem_decap(suite, &sk, &[0u8; 31]),
            Err(CryptoError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn signature_verifies_and_rejects_tampering() {
        let reg = SuiteRegistry::with_test_suites();
        let mut r = rng();
        for name in ["sig-a", "sig-b"] {
            let suite = reg.sig(name).unwrap();
            let (pk, sk) = sig_keygen(suite, &mut r);
            let msg = b"canonical package body";
            let sig = sign(suite, &sk, msg).unwrap();
            assert!(verify(suite, &pk, msg, &sig).unwrap());
            let mut bad_msg = msg.to_vec();
            bad_msg[0] ^= 0x80;
            assert!(!verify(suite, &pk, &bad_msg, &sig).unwrap());
            let mut bad_sig = sig.clone();
            bad_sig[3] ^= 0x01;
            assert!(!verify(suite, &pk, msg, &bad_sig).unwrap());
        }
    }

    #[test]
    fn cross_suite_keys_never_verify() {
        // Keys from one path must not validate packages of the other,
        // over every ordered suite pair.
        let reg = SuiteRegistry::with_test_suites();
        let mut r = rng();
        let names = ["sig-a", "sig-b"];
        for a in names {
            for b in names {
                if a == b {
                    continue;
                }
                let sa = reg.sig(a).unwrap();
                let sb = reg.sig(b).unwrap();
                let (_, sk) = sig_keygen(sa, &mut r);
                let (pk_other, _) = sig_keygen(sb, &mut r);
                let sig = sign(sa, &sk, b"m").unwrap();
                // Same-suite length mismatch is a suite confusion error.
                assert!(verify(sa, &pk_other, b"m", &sig).is_err());
                // Forcing the other's verification path fails too.
                assert!(!verify(sb, &pk_other, b"m", &sig).unwrap());
            }
        }
    }

    #[test]
    fn unforgeability_proxy_1000_perturbations() {
        let reg = SuiteRegistry::with_test_suites();
        let suite = reg.sig("sig-a").unwrap();
        let mut r = rng();
        let (pk, sk) = sig_keygen(suite, &mut r);
        let msg = b"message under test".to_vec();
        let sig = sign(suite, &sk, &msg).unwrap();
        for i in 0..1000 {
            let mut m = msg.clone();
            let mut s = sig.clone();
            if i % 2 == 0 {
                let at = i % m.len();
                m[at] ^= 1 + (i % 255) as u8;
            } else {
                let at = i % s.len();
                s[at] ^= 1 + (i % 255) as u8;
            }
            assert!(!verify(suite, &pk, &m, &s).unwrap());
        }
    }

    #[test]
    fn hybridize_identity_and_self_inverse() {
        let k = KeyMaterial::new(vec![0xAB; 32]).unwrap();
        let z = KeyMaterial::zeros(32);
        assert_eq!(hybridize(&[&k, &z]).unwrap(), k);
        assert_eq!(hybridize(&[&k, &k]).unwrap(), z);
        assert!(matches!(hybridize(&[&k]), Err(CryptoError::TooFewKeys)));
        let short = KeyMaterial::zeros(16);
        assert!(matches!(
            hybridize(&[&k, &short]),
            Err(CryptoError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn kdf_identity_and_bit_linearity() {
        let mut r = rng();
        let mut a = vec![0u8; 32];
        rand::RngCore::fill_bytes(&mut r, &mut a);
        let k = KeyMaterial::new(a).unwrap();
        let z = KeyMaterial::zeros(32);
        assert_eq!(kdf_combine(Kdf::Xor, &k, &z, &Psk::empty()).unwrap(), k);

        let mut flipped = k.as_bytes().to_vec();
        flipped[7] ^= 0x10;
        let k2 = KeyMaterial::new(flipped).unwrap();
        let out1 = kdf_combine(Kdf::Xor, &z, &k, &Psk::empty()).unwrap();
        let out2 = kdf_combine(Kdf::Xor, &z, &k2, &Psk::empty()).unwrap();
        let diff: Vec<u8> = out1
            .as_bytes()
            .iter()
            .zip(out2.as_bytes())
            .map(|(x, y)| x ^ y)
            .collect();
        let mut expected = vec![0u8; 32];
        expected[7] = 0x10;
        assert_eq!(diff, expected);
    }

    #[test]
    fn empty_psk_degenerates_to_hybridize() {
        let mut r = rng();
        for _ in 0..32 {
            let mut a = vec![0u8; 32];
            let mut b = vec![0u8; 32];
            rand::RngCore::fill_bytes(&mut r, &mut a);
            rand::RngCore::fill_bytes(&mut r, &mut b);
            let ka = KeyMaterial::new(a).unwrap();
            let kb = KeyMaterial::new(b).unwrap();
            assert_eq!(
                kdf_combine(Kdf::Xor, &ka, &kb, &Psk::empty()).unwrap(),
                hybridize(&[&ka, &kb]).unwrap()
            );
        }
    }

    #[test]
    fn psk_length_capped() {
        assert!(Psk::new(vec![0; 64]).is_ok());
        assert!(matches!(
            Psk::new(vec![0; 65]),
            Err(CryptoError::PskTooLong)
        ));
    }

    #[test]
    fn otp_roundtrip_and_zero_pad() {
        let mut r = rng();
        let mut p = vec![0u8; 32];
        rand::RngCore::fill_bytes(&mut r, &mut p);
        let payload = KeyMaterial::new(p).unwrap();
        let mut padb = vec![0u8; 32];
        rand::RngCore::fill_bytes(&mut r, &mut padb);
        let pad = KeyMaterial::new(padb).unwrap();
        let ct = otp_wrap(&payload, &pad).unwrap();
        assert_eq!(otp_unwrap(&ct, &pad).unwrap(), payload);
        let zeros = KeyMaterial::zeros(32);
        assert_eq!(otp_wrap(&payload, &zeros).unwrap(), payload.as_bytes());
    }

    proptest! {
        #[test]
        fn hybridize_is_commutative_and_associative(
            a in proptest::collection::vec(any::<u8>(), 32),
            b in proptest::collection::vec(any::<u8>(), 32),
            c in proptest::collection::vec(any::<u8>(), 32),
        ) {
            let ka = KeyMaterial::new(a).unwrap();
            let kb = KeyMaterial::new(b).unwrap();
            let kc = KeyMaterial::new(c).unwrap();
            prop_assert_eq!(
                hybridize(&[&ka, &kb]).unwrap(),
                hybridize(&[&kb, &ka]).unwrap()
            );
            let ab = hybridize(&[&ka, &kb]).unwrap();
            let bc = hybridize(&[&kb, &kc]).unwrap();
            prop_assert_eq!(
                hybridize(&[&ab, &kc]).unwrap(),
                hybridize(&[&ka, &bc]).unwrap()
            );
            prop_assert_eq!(
                hybridize(&[&ka, &kb, &kc]).unwrap(),
                hybridize(&[&kc, &ab]).unwrap()
            );
        }
    }

    #[test]
    fn kdf_output_uniform_under_fixed_first_input() {
        // Monte-carlo oracle: fix rnd1, draw rnd2 at random, and check
        // the output byte distribution against chi-square at p > 0.01.
        let mut r = rng();
        let fixed = KeyMaterial::new(vec![0x5A; 32]).unwrap();
        let psk = Psk::new(b"shared".to_vec()).unwrap();
        let mut counts = [0u64; 256];
        let mut samples = 0u64;
        while samples < 100_000 {
            let mut b = vec![0u8; 32];
            rand::RngCore::fill_bytes(&mut r, &mut b);
            let rnd2 = KeyMaterial::new(b).unwrap();
            let out = kdf_combine(Kdf::Xor, &fixed, &rnd2, &psk).unwrap();
            for &byte in out.as_bytes() {
                counts[byte as usize] += 1;
                samples += 1;
            }
        }
        let stat = crate::testutil::chi_square_256(&counts);
        assert!(
            stat < crate::testutil::CHI2_DF255_P01,
            "chi-square {stat} exceeds the p=0.01 critical value"
        );
    }
}
