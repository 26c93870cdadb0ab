//! AES-CCM link-layer encryption with per-direction packet counters.

use aes::Aes128;
use ccm::aead::{Aead, KeyInit};
use ccm::consts::{U13, U4};
use ccm::Ccm;
use serde::{Deserialize, Serialize};

use super::{Key128, PairingError};

type LinkCcm = Ccm<Aes128, U4, U13>;

/// Packet counters are 39 bits wide.
const COUNTER_MASK: u64 = (1 << 39) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDirection {
    CentralToPeripheral,
    PeripheralToCentral,
}

impl LinkDirection {
    fn index(self) -> usize {
        match self {
            LinkDirection::CentralToPeripheral => 0,
            LinkDirection::PeripheralToCentral => 1,
        }
    }
}

/// 39-bit counter and direction bit in the first five bytes, zero IV after.
fn nonce(counter: u64, direction: LinkDirection) -> [u8; 13] {
    let c = (counter & COUNTER_MASK).to_le_bytes();
    let mut n = [0u8; 13];
    n[..5].copy_from_slice(&c[..5]);
    if direction == LinkDirection::PeripheralToCentral {
        n[4] |= 0x80;
    }
    n
}

fn cipher(key: Key128) -> LinkCcm {
    LinkCcm::new(&key.to_bytes().into())
}

/// Ciphertext with a 4-byte MIC appended.
pub fn encrypt_link(
    key: Key128,
    counter: u64,
    direction: LinkDirection,
    plaintext: &[u8],
) -> Vec<u8> {
    cipher(key)
        .encrypt(&nonce(counter, direction).into(), plaintext)
        .expect("payload fits CCM length field")
}

pub fn decrypt_link(
    key: Key128,
    counter: u64,
    direction: LinkDirection,
    ciphertext: &[u8],
) -> Result<Vec<u8>, PairingError> {
    cipher(key)
        .decrypt(&nonce(counter, direction).into(), ciphertext)
        .map_err(|_| PairingError::AuthFailure)
}

/// One endpoint's view of an encrypted link. Sending increments the local
/// counter; receiving accepts only counters above the last one accepted.
#[derive(Debug, Clone)]
pub struct LinkCipher {
    key: Key128,
    next_tx: [u64; 2],
    last_rx: [Option<u64>; 2],
}

impl LinkCipher {
    pub fn new(key: Key128) -> Self {
        LinkCipher {
            key,
            next_tx: [0; 2],
            last_rx: [None; 2],
        }
    }

    pub fn key(&self) -> Key128 {
        self.key
    }

    /// Encrypts the next packet in `direction`, returning its counter.
    pub fn seal(&mut self, direction: LinkDirection, plaintext: &[u8]) -> (u64, Vec<u8>) {
        let counter = self.next_tx[direction.index()];
        self.next_tx[direction.index()] += 1;
        (counter, encrypt_link(self.key, counter, direction, plaintext))
    }

    pub fn open(
        &mut self,
        direction: LinkDirection,
        counter: u64,
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, PairingError> {
        let last = self.last_rx[direction.index()];
        if last.is_some_and(|l| counter <= l) {
            return Err(PairingError::CounterReplay { got: counter, last });
        }
        let plain = decrypt_link(self.key, counter, direction, ciphertext)?;
        self.last_rx[direction.index()] = Some(counter);
        Ok(plain)
    }

    /// Opens the next packet in `direction` using the implicit counter.
    pub fn open_next(
        &mut self,
        direction: LinkDirection,
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, PairingError> {
        let counter = self.last_rx[direction.index()].map_or(0, |l| l + 1);
        self.open(direction, counter, ciphertext)
    }
}
