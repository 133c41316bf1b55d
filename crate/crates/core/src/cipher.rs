//! Blowfish counter-mode encryption of transport payloads.
//!
//! The keystream for byte `i` of the packet with wire sequence `seq` comes
//! from block `i / 8` of counter `dir << 63 | seq << 8 | i / 8`, so a
//! retransmitted packet always encrypts to the same bytes. The 64-bit IV is
//! the XOR of the two halves of the 16-byte handshake nonce.

use std::fmt;
use std::sync::Arc;

use blowfish::cipher::generic_array::GenericArray;
use blowfish::cipher::{BlockEncrypt, KeyInit};
use blowfish::Blowfish;
use thiserror::Error;

use crate::transport::packet::MAX_PAYLOAD;
use crate::transport::seq::SeqNo;

pub const MIN_KEY_LEN: usize = 4;
pub const MAX_KEY_LEN: usize = 56;
pub const BLOCK_LEN: usize = 8;
/// Environment variable holding a hex key when no key file is given.
pub const KEY_ENV_VAR: &str = "UDRSYNC_KEY";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CipherError {
    #[error("key length {0} outside {MIN_KEY_LEN}..={MAX_KEY_LEN} bytes")]
    KeyLength(usize),
    #[error("invalid hex key: {0}")]
    Hex(String),
    #[error("no key: pass a key file or set {KEY_ENV_VAR}")]
    Missing,
    #[error("reading key file: {0}")]
    Io(String),
}

/// A keyed Blowfish context. Immutable once built, shareable across threads.
#[derive(Clone)]
pub struct BlockCipher {
    inner: Blowfish,
}

impl fmt::Debug for BlockCipher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BlockCipher(..)")
    }
}

/// Runs the Blowfish key schedule over `key`.
pub fn derive_subkeys(key: &[u8]) -> Result<BlockCipher, CipherError> {
    if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&key.len()) {
        return Err(CipherError::KeyLength(key.len()));
    }
    let inner = Blowfish::new_from_slice(key).map_err(|_| CipherError::KeyLength(key.len()))?;
    Ok(BlockCipher { inner })
}

impl BlockCipher {
    pub fn encrypt_block(&self, block: [u8; BLOCK_LEN]) -> [u8; BLOCK_LEN] {
        let mut b = GenericArray::from(block);
        self.inner.encrypt_block(&mut b);
        b.into()
    }
}

/// Pre-shared key bytes plus the per-connection nonce.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    key: Vec<u8>,
    pub nonce: [u8; 16],
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyMaterial({} byte key)", self.key.len())
    }
}

impl KeyMaterial {
    pub fn new(key: Vec<u8>, nonce: [u8; 16]) -> Result<Self, CipherError> {
        if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&key.len()) {
            return Err(CipherError::KeyLength(key.len()));
        }
        Ok(KeyMaterial { key, nonce })
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }
}

/// Which half of a connection a keystream serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone)]
pub struct StreamCipher {
    block: Arc<BlockCipher>,
    iv: u64,
    direction: Direction,
}

impl StreamCipher {
    pub fn new(block: Arc<BlockCipher>, nonce: &[u8; 16], direction: Direction) -> Self {
        let hi = u64::from_be_bytes(nonce[..8].try_into().unwrap());
        let lo = u64::from_be_bytes(nonce[8..].try_into().unwrap());
        StreamCipher { block, iv: hi ^ lo, direction }
    }

    pub fn from_material(material: &KeyMaterial, direction: Direction) -> Result<Self, CipherError> {
        Ok(Self::new(Arc::new(derive_subkeys(material.key())?), &material.nonce, direction))
    }

    pub fn keystream_block(&self, counter: u64) -> [u8; BLOCK_LEN] {
        self.block.encrypt_block((self.iv ^ counter).to_be_bytes())
    }

    fn counter(&self, seq: SeqNo, block_index: usize) -> u64 {
        debug_assert!(block_index < 256);
        let dir = match self.direction {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1u64 << 63,
        };
        dir | (seq.get() as u64) << 8 | block_index as u64
    }

    /// XORs `data` in place with the keystream for packet `seq`.
    pub fn apply(&self, seq: SeqNo, data: &mut [u8]) {
        debug_assert!(data.len() <= MAX_PAYLOAD);
        for (i, chunk) in data.chunks_mut(BLOCK_LEN).enumerate() {
            let ks = self.keystream_block(self.counter(seq, i));
            for (b, k) in chunk.iter_mut().zip(ks) {
                *b ^= k;
            }
        }
    }

    pub fn seal(&self, seq: SeqNo, plaintext: &[u8]) -> Vec<u8> {
        let mut out = plaintext.to_vec();
        self.apply(seq, &mut out);
        out
    }

    pub fn open(&self, seq: SeqNo, ciphertext: &[u8]) -> Vec<u8> {
        self.seal(seq, ciphertext)
    }
}

/// Parses key file contents: raw bytes, or hex digits after a `hex:` prefix.
pub fn parse_key(contents: &[u8]) -> Result<Vec<u8>, CipherError> {
    let key = match contents.strip_prefix(b"hex:") {
        Some(hex) => decode_hex(std::str::from_utf8(hex).map_err(|e| CipherError::Hex(e.to_string()))?)?,
        None => contents.to_vec(),
    };
    if !(MIN_KEY_LEN..=MAX_KEY_LEN).contains(&key.len()) {
        return Err(CipherError::KeyLength(key.len()));
    }
    Ok(key)
}

/// Loads a key from `path`, falling back to the hex value in `UDRSYNC_KEY`.
pub fn load_key(path: Option<&std::path::Path>) -> Result<Vec<u8>, CipherError> {
    match path {
        Some(p) => parse_key(&std::fs::read(p).map_err(|e| CipherError::Io(e.to_string()))?),
        None => match std::env::var(KEY_ENV_VAR) {
            Ok(hex) => {
                let key = decode_hex(&hex)?;
                parse_key(&key)
            }
            Err(_) => Err(CipherError::Missing),
        },
    }
}

fn decode_hex(s: &str) -> Result<Vec<u8>, CipherError> {
    let s = s.trim();
    if !s.len().is_multiple_of(2) {
        return Err(CipherError::Hex("odd number of digits".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| CipherError::Hex(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(key: &[u8]) -> StreamCipher {
        StreamCipher::new(Arc::new(derive_subkeys(key).unwrap()), &[3; 16], Direction::ClientToServer)
    }

    #[test]
    fn key_length_bounds() {
        assert_eq!(derive_subkeys(&[0; 3]).unwrap_err(), CipherError::KeyLength(3));
        assert_eq!(derive_subkeys(&[0; 57]).unwrap_err(), CipherError::KeyLength(57));
        assert!(derive_subkeys(&[0; 4]).is_ok());
        assert!(derive_subkeys(&[0; 56]).is_ok());
    }

    #[test]
    fn all_zero_vector() {
        let c = derive_subkeys(&[0; 8]).unwrap();
        assert_eq!(u64::from_be_bytes(c.encrypt_block([0; 8])), 0x4EF9_9745_6198_DD78);
    }

    #[test]
    fn deterministic_contexts() {
        let a = derive_subkeys(b"secret key").unwrap();
        let b = derive_subkeys(b"secret key").unwrap();
        assert_eq!(a.encrypt_block(*b"abcdefgh"), b.encrypt_block(*b"abcdefgh"));
    }

    #[test]
    fn keystream_blocks() {
        let s = ctx(b"0123456789");
        assert_eq!(s.keystream_block(77), s.keystream_block(77));
        assert_ne!(s.keystream_block(77), s.keystream_block(78));
    }

    #[test]
    fn seal_properties() {
        let s = ctx(b"0123456789");
        assert!(s.seal(SeqNo::new(1), &[]).is_empty());
        let payload: Vec<u8> = (0..MAX_PAYLOAD).map(|i| (i * 31 % 251) as u8).collect();
        let sealed = s.seal(SeqNo::new(5), &payload);
        assert_eq!(sealed.len(), payload.len());
        assert_ne!(sealed, payload);
        assert_eq!(s.open(SeqNo::new(5), &sealed), payload);
        assert_eq!(s.seal(SeqNo::new(5), &payload), sealed);
        assert_ne!(s.seal(SeqNo::new(6), &payload), sealed);
    }

    #[test]
    fn directions_use_distinct_keystreams() {
        let block = Arc::new(derive_subkeys(b"0123456789").unwrap());
        let a = StreamCipher::new(block.clone(), &[9; 16], Direction::ClientToServer);
        let b = StreamCipher::new(block, &[9; 16], Direction::ServerToClient);
        assert_ne!(a.seal(SeqNo::new(1), &[0; 16]), b.seal(SeqNo::new(1), &[0; 16]));
    }

    #[test]
    fn key_parsing() {
        assert_eq!(parse_key(b"hex:00112233").unwrap(), vec![0, 0x11, 0x22, 0x33]);
        assert_eq!(parse_key(b"hex:0011223344\n").unwrap(), vec![0, 0x11, 0x22, 0x33, 0x44]);
        assert_eq!(parse_key(b"rawkey!").unwrap(), b"rawkey!".to_vec());
        assert!(matches!(parse_key(b"hex:0g11"), Err(CipherError::Hex(_))));
        assert_eq!(parse_key(b"abc"), Err(CipherError::KeyLength(3)));
    }
}
