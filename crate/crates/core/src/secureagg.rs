//! Additively homomorphic aggregation of per-class statistics.
//!
//! Multiplying two ciphertexts decrypts to the sum of their plaintexts, so
//! a server holding only the public key can fold per-client statistics into
//! encrypted totals without learning any individual contribution. The
//! scheme is the classic n+1-generator construction over Z_{n^2}; key sizes
//! here are desk-scale for test speed, not production security.
//!
//! Real-valued loss totals ride on a fixed-point encoding with a public
//! additive offset, so negative values stay representable; counts are
//! encoded exactly.

use crate::error::{CoreError, Result};
use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand_chacha::ChaCha12Rng;
use serde_json::{json, Value};

/// Encryption key: modulus and its square.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_squared: BigUint,
}

impl PaillierPublicKey {
    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn key_bits(&self) -> u64 {
        self.n.bits()
    }
}

/// Decryption key. Holding this type is what distinguishes the key holder
/// from the aggregating server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierPrivateKey {
    lambda: BigUint,
    mu: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public: PaillierPublicKey,
    private: PaillierPrivateKey,
    pub key_bits: u64,
}

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

fn miller_rabin_probable_prime(candidate: &BigUint, rng: &mut ChaCha12Rng, rounds: usize) -> bool {
    let one = BigUint::one();
    let two = &one + &one;
    if candidate < &two {
        return false;
    }
    for p in SMALL_PRIMES {
        let p = BigUint::from(p);
        if candidate == &p {
            return true;
        }
        if (candidate % &p).is_zero() {
            return false;
        }
    }
    let minus_one = candidate - &one;
    let trailing = minus_one.trailing_zeros().unwrap_or(0);
    let odd_part = &minus_one >> trailing;
    'witness: for _ in 0..rounds {
        let base = rng.gen_biguint_range(&two, &minus_one);
        let mut x = base.modpow(&odd_part, candidate);
        if x == one || x == minus_one {
            continue;
        }
        for _ in 0..trailing.saturating_sub(1) {
            x = (&x * &x) % candidate;
            if x == minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn generate_prime(bits: u64, rng: &mut ChaCha12Rng) -> Result<BigUint> {
    // Top two bits set so the product of two primes reaches full width.
    let one = BigUint::one();
    let top = (&one << (bits - 1)) | (&one << (bits - 2));
    for _ in 0..40_000 {
        let candidate = rng.gen_biguint(bits) | &top | &one;
        if miller_rabin_probable_prime(&candidate, rng, 32) {
            return Ok(candidate);
        }
    }
    Err(CoreError::Crypto(format!("no {}-bit prime found within retry budget", bits)))
}

fn modinv(a: &BigUint, modulus: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let a = BigInt::from(a.clone());
    let m = BigInt::from(modulus.clone());
    let ext = a.extended_gcd(&m);
    if !ext.gcd.is_one() {
        return None;
    }
    let mut x = ext.x % &m;
    if x < BigInt::zero() {
        x += &m;
    }
    x.to_biguint()
}

/// Generate a key pair. Deterministic per seed so tests and simulated runs
/// reproduce exactly.
pub fn keygen(key_bits: u64, seed: u64) -> Result<KeyPair> {
    if key_bits < 256 {
        return Err(CoreError::config("key size below 256 bits"));
    }
    let mut rng = crate::rng::rng_for(seed, &[crate::rng::stream::KEYGEN]);
    let one = BigUint::one();
    for _ in 0..32 {
        let p = generate_prime(key_bits / 2, &mut rng)?;
        let q = generate_prime(key_bits - key_bits / 2, &mut rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        if n.bits() != key_bits {
            continue;
        }
        let lambda = (&p - &one).lcm(&(&q - &one));
        // With generator n+1, decrypting g^lambda gives lambda itself, so
        // mu is just its inverse mod n.
        let Some(mu) = modinv(&(&lambda % &n), &n) else { continue };
        let n_squared = &n * &n;
        return Ok(KeyPair {
            public: PaillierPublicKey { n, n_squared },
            private: PaillierPrivateKey { lambda, mu },
            key_bits,
        });
    }
    Err(CoreError::Crypto("key generation failed after bounded retries".into()))
}

/// A value in the ciphertext space, tagged with its modulus so mixed-key
/// operations are caught.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    n: BigUint,
}

/// Encrypt `m` under `pk` with fresh randomness from `rng`.
pub fn encrypt(pk: &PaillierPublicKey, m: &BigUint, rng: &mut ChaCha12Rng) -> Result<Ciphertext> {
    if m >= &pk.n {
        return Err(CoreError::contract(format!(
            "plaintext has {} bits, modulus only {}",
            m.bits(),
            pk.n.bits()
        )));
    }
    let one = BigUint::one();
    let r = loop {
        let r = rng.gen_biguint_range(&one, &pk.n);
        if r.gcd(&pk.n).is_one() {
            break r;
        }
    };
    // (1 + m*n) * r^n mod n^2; (1 + n)^m expands to 1 + m*n mod n^2.
    let gm = (BigUint::one() + m * &pk.n) % &pk.n_squared;
    let rn = r.modpow(&pk.n, &pk.n_squared);
    Ok(Ciphertext { value: (gm * rn) % &pk.n_squared, n: pk.n.clone() })
}

/// Decrypt a ciphertext produced under this key pair.
pub fn decrypt(keys: &KeyPair, c: &Ciphertext) -> Result<BigUint> {
    if c.n != keys.public.n {
        return Err(CoreError::contract("ciphertext was produced under a different key"));
    }
    let u = c.value.modpow(&keys.private.lambda, &keys.public.n_squared);
    let l = (u - BigUint::one()) / &keys.public.n;
    Ok((l * &keys.private.mu) % &keys.public.n)
}

/// Homomorphic addition: the product of ciphertexts decrypts to the sum of
/// plaintexts (mod n).
pub fn add_ciphertexts(
    pk: &PaillierPublicKey,
    a: &Ciphertext,
    b: &Ciphertext,
) -> Result<Ciphertext> {
    if a.n != pk.n || b.n != pk.n {
        return Err(CoreError::contract("ciphertexts under different keys cannot be combined"));
    }
    Ok(Ciphertext { value: (&a.value * &b.value) % &pk.n_squared, n: pk.n.clone() })
}

/// Fixed-point encoding of reals into the plaintext space. Values are
/// scaled by `2^scale_bits`, rounded, and shifted by a public offset of
/// `2^offset_bits` so negatives encode as non-negative integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    pub offset_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec { scale_bits: 16, offset_bits: 40 }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32) -> Self {
        FixedPointCodec { scale_bits, offset_bits: scale_bits + 24 }
    }

    fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    fn offset(&self) -> i128 {
        1i128 << self.offset_bits
    }

    /// Largest encodable magnitude.
    pub fn max_value(&self) -> f64 {
        (self.offset() as f64) / self.scale()
    }

    pub fn encode(&self, value: f64) -> Result<BigUint> {
        if !value.is_finite() {
            return Err(CoreError::Numeric(format!("cannot encode {}", value)));
        }
        let scaled = (value * self.scale()).round();
        if scaled.abs() >= self.offset() as f64 {
            return Err(CoreError::contract(format!(
                "value {} outside fixed-point range +/-{}",
                value,
                self.max_value()
            )));
        }
        let shifted = scaled as i128 + self.offset();
        Ok(BigUint::from(shifted as u128))
    }

    /// Decode a sum of `count` encoded values.
    pub fn decode_sum(&self, total: &BigUint, count: u64) -> Result<f64> {
        let digits = total.to_u64_digits();
        if digits.len() > 2 {
            return Err(CoreError::Numeric("decoded total exceeds 128 bits".into()));
        }
        let mut raw: u128 = 0;
        for (i, d) in digits.iter().enumerate() {
            raw |= (*d as u128) << (64 * i);
        }
        let signed = raw as i128 - (count as i128) * self.offset();
        Ok(signed as f64 / self.scale())
    }
}

/// One client's per-class contributions in encrypted form.
#[derive(Debug, Clone)]
pub struct EncryptedStats {
    pub counts: Vec<Ciphertext>,
    pub loss_totals: Vec<Ciphertext>,
    pub scale_bits: u32,
}

/// Encrypt per-class counts and loss totals entrywise.
pub fn encrypt_stats(
    pk: &PaillierPublicKey,
    counts: &[u64],
    loss_totals: &[f64],
    codec: &FixedPointCodec,
    rng: &mut ChaCha12Rng,
) -> Result<EncryptedStats> {
    if counts.len() != loss_totals.len() {
        return Err(CoreError::contract(format!(
            "{} counts vs {} loss totals",
            counts.len(),
            loss_totals.len()
        )));
    }
    let counts = counts
        .iter()
        .map(|&c| encrypt(pk, &BigUint::from(c), rng))
        .collect::<Result<Vec<_>>>()?;
    let loss_totals = loss_totals
        .iter()
        .map(|&l| encrypt(pk, &codec.encode(l)?, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncryptedStats { counts, loss_totals, scale_bits: codec.scale_bits })
}

/// Server-side fold: multiplies client ciphertexts entrywise. The signature
/// admits only the public key, so this path cannot decrypt anything.
pub fn aggregate_encrypted(
    pk: &PaillierPublicKey,
    batches: &[EncryptedStats],
) -> Result<EncryptedStats> {
    let first = batches
        .first()
        .ok_or_else(|| CoreError::Protocol("aggregation over zero clients".into()))?;
    let classes = first.counts.len();
    let mut counts = first.counts.clone();
    let mut loss_totals = first.loss_totals.clone();
    for batch in &batches[1..] {
        if batch.scale_bits != first.scale_bits {
            return Err(CoreError::Protocol(format!(
                "fixed-point scale mismatch: {} vs {}",
                batch.scale_bits, first.scale_bits
            )));
        }
        if batch.counts.len() != classes || batch.loss_totals.len() != classes {
            return Err(CoreError::Protocol("class count mismatch between clients".into()));
        }
        for (acc, c) in counts.iter_mut().zip(&batch.counts) {
            *acc = add_ciphertexts(pk, acc, c)?;
        }
        for (acc, c) in loss_totals.iter_mut().zip(&batch.loss_totals) {
            *acc = add_ciphertexts(pk, acc, c)?;
        }
    }
    Ok(EncryptedStats { counts, loss_totals, scale_bits: first.scale_bits })
}

/// Key-holder decryption of aggregated totals. `num_clients` removes the
/// per-summand offset baked into the fixed-point encoding.
pub fn decrypt_stats(
    keys: &KeyPair,
    aggregated: &EncryptedStats,
    codec: &FixedPointCodec,
    num_clients: u64,
) -> Result<(Vec<u64>, Vec<f64>)> {
    if aggregated.scale_bits != codec.scale_bits {
        return Err(CoreError::Protocol(format!(
            "fixed-point scale mismatch: {} vs {}",
            aggregated.scale_bits, codec.scale_bits
        )));
    }
    let mut counts = Vec::with_capacity(aggregated.counts.len());
    for c in &aggregated.counts {
        let m = decrypt(keys, c)?;
        let digits = m.to_u64_digits();
        if digits.len() > 1 {
            return Err(CoreError::Numeric("aggregated count exceeds 64 bits".into()));
        }
        counts.push(digits.first().copied().unwrap_or(0));
    }
    let mut loss_totals = Vec::with_capacity(aggregated.loss_totals.len());
    for c in &aggregated.loss_totals {
        let m = decrypt(keys, c)?;
        loss_totals.push(codec.decode_sum(&m, num_clients)?);
    }
    Ok((counts, loss_totals))
}

/// End-to-end secure sum over per-client (counts, loss totals) vectors.
/// Each decoded loss total is within one fixed-point quantum per summand of
/// the plaintext sum; counts are exact.
pub fn secure_sum(
    keys: &KeyPair,
    per_client: &[(Vec<u64>, Vec<f64>)],
    codec: &FixedPointCodec,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<u64>, Vec<f64>)> {
    let encrypted: Vec<EncryptedStats> = per_client
        .iter()
        .map(|(counts, totals)| encrypt_stats(&keys.public, counts, totals, codec, rng))
        .collect::<Result<_>>()?;
    let aggregated = aggregate_encrypted(&keys.public, &encrypted)?;
    decrypt_stats(keys, &aggregated, codec, per_client.len() as u64)
}

fn hex(v: &BigUint) -> String {
    format!("{:x}", v)
}

fn from_hex(s: &str) -> Result<BigUint> {
    BigUint::parse_bytes(s.as_bytes(), 16)
        .ok_or_else(|| CoreError::data(format!("invalid hex value {:?}", s)))
}

impl Ciphertext {
    /// JSON envelope carrying the ciphertext, its modulus, and the
    /// fixed-point scale its plaintext was encoded with.
    pub fn to_json(&self, scale_bits: u32) -> Value {
        json!({ "n": hex(&self.n), "c": hex(&self.value), "scale": scale_bits })
    }

    pub fn from_json(v: &Value) -> Result<(Ciphertext, u32)> {
        let n = from_hex(
            v.get("n").and_then(Value::as_str).ok_or_else(|| CoreError::data("missing n"))?,
        )?;
        let c = from_hex(
            v.get("c").and_then(Value::as_str).ok_or_else(|| CoreError::data("missing c"))?,
        )?;
        let scale = v
            .get("scale")
            .and_then(Value::as_u64)
            .ok_or_else(|| CoreError::data("missing scale"))? as u32;
        Ok((Ciphertext { value: c, n }, scale))
    }
}

impl KeyPair {
    pub fn to_json(&self) -> Value {
        json!({
            "n": hex(&self.public.n),
            "lambda": hex(&self.private.lambda),
            "mu": hex(&self.private.mu),
            "key_bits": self.key_bits,
        })
    }

    pub fn from_json(v: &Value) -> Result<KeyPair> {
        let get = |key: &str| -> Result<BigUint> {
            from_hex(
                v.get(key)
                    .and_then(Value::as_str)
                    .ok_or_else(|| CoreError::data(format!("missing {key}")))?,
            )
        };
        let n = get("n")?;
        let lambda = get("lambda")?;
        let mu = get("mu")?;
        let key_bits = v
            .get("key_bits")
            .and_then(Value::as_u64)
            .ok_or_else(|| CoreError::data("missing key_bits"))?;
        let n_squared = &n * &n;
        Ok(KeyPair {
            public: PaillierPublicKey { n, n_squared },
            private: PaillierPrivateKey { lambda, mu },
            key_bits,
        })
    }
}
