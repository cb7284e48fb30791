//! Excitation bank and its binary file format.
//!
//! File layout, little-endian: three `u32` (count, window length, number of
//! principal components) followed by `count * window_len` `f32` samples, one
//! excitation after another.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("excitation {index} has length {len}, expected {window_len}")]
    Length {
        index: usize,
        len: usize,
        window_len: usize,
    },
    #[error("bank window length must be positive")]
    ZeroWindow,
    #[error("bank I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed bank file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationBank {
    excitations: Vec<Vec<f64>>,
    window_len: usize,
    n_components: usize,
}

impl ExcitationBank {
    pub fn new(
        excitations: Vec<Vec<f64>>,
        window_len: usize,
        n_components: usize,
    ) -> Result<Self, BankError> {
        if window_len == 0 {
            return Err(BankError::ZeroWindow);
        }
        for (index, e) in excitations.iter().enumerate() {
            if e.len() != window_len {
                return Err(BankError::Length {
                    index,
                    len: e.len(),
                    window_len,
                });
            }
        }
        Ok(Self {
            excitations,
            window_len,
            n_components,
        })
    }

    /// A bank of hand-made excitations, all the length of the first.
    pub fn from_excitations(excitations: Vec<Vec<f64>>) -> Result<Self, BankError> {
        let window_len = excitations.first().map_or(0, Vec::len);
        let n = excitations.len();
        Self::new(excitations, window_len, n)
    }

    pub fn empty(window_len: usize) -> Self {
        Self {
            excitations: Vec::new(),
            window_len,
            n_components: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.excitations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excitations.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn excitation(&self, i: usize) -> &[f64] {
        &self.excitations[i]
    }

    pub fn excitations(&self) -> &[Vec<f64>] {
        &self.excitations
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.len() * self.window_len);
        for h in [self.len(), self.window_len, self.n_components] {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        for e in &self.excitations {
            for &v in e {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BankError> {
        if bytes.len() < 12 {
            return Err(BankError::Format("header truncated".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (count, window_len, n_components) = (word(0), word(1), word(2));
        let expected = count
            .checked_mul(window_len)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| BankError::Format("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(BankError::Format(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let samples: Vec<f64> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let excitations = if window_len == 0 {
            Vec::new()
        } else {
            samples.chunks(window_len).map(<[f64]>::to_vec).collect()
        };
        Self::new(excitations, window_len, n_components)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
