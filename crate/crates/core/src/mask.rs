//! Nondeterminism classes and the per-request type mask.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One class of replica nondeterminism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NdClass {
    /// Verifiable, determinable before execution.
    Vpre,
    /// Non-verifiable, determinable before execution.
    Npre,
    /// Verifiable, known only after execution.
    Vpost,
    /// Non-verifiable, known only after execution.
    Npost,
}

impl NdClass {
    pub const ALL: [NdClass; 4] = [NdClass::Vpre, NdClass::Npre, NdClass::Vpost, NdClass::Npost];

    pub fn bit(self) -> u8 {
        match self {
            NdClass::Vpre => NdTypeMask::VPRE,
            NdClass::Npre => NdTypeMask::NPRE,
            NdClass::Vpost => NdTypeMask::VPOST,
            NdClass::Npost => NdTypeMask::NPOST,
        }
    }

    pub fn from_bit(bit: u8) -> Option<NdClass> {
        NdClass::ALL.into_iter().find(|c| c.bit() == bit)
    }

    pub fn is_post(self) -> bool {
        matches!(self, NdClass::Vpost | NdClass::Npost)
    }

    pub fn name(self) -> &'static str {
        match self {
            NdClass::Vpre => "VPRE",
            NdClass::Npre => "NPRE",
            NdClass::Vpost => "VPOST",
            NdClass::Npost => "NPOST",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid nondeterminism mask {0:#04x}: reserved bits set")]
pub struct InvalidMask(pub u8);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown nondeterminism mask name `{0}`")]
pub struct UnknownMaskName(pub String);

/// Bitmask of nondeterminism classes. Zero means deterministic.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NdTypeMask(u8);

impl NdTypeMask {
    pub const VPRE: u8 = 0b0001;
    pub const NPRE: u8 = 0b0010;
    pub const VPOST: u8 = 0b0100;
    pub const NPOST: u8 = 0b1000;
    const VALID: u8 = 0b1111;

    pub const DETERMINISTIC: NdTypeMask = NdTypeMask(0);

    pub fn new(bits: u8) -> Result<Self, InvalidMask> {
        if bits & !Self::VALID != 0 {
            Err(InvalidMask(bits))
        } else {
            Ok(NdTypeMask(bits))
        }
    }

    pub fn of(classes: &[NdClass]) -> Self {
        NdTypeMask(classes.iter().fold(0, |m, c| m | c.bit()))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn has(self, c: NdClass) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn is_deterministic(self) -> bool {
        self.0 == 0
    }

    pub fn has_post(self) -> bool {
        self.has(NdClass::Vpost) || self.has(NdClass::Npost)
    }

    pub fn has_pre(self) -> bool {
        self.has(NdClass::Vpre) || self.has(NdClass::Npre)
    }

    pub fn classes(self) -> impl Iterator<Item = NdClass> {
        NdClass::ALL.into_iter().filter(move |c| self.has(*c))
    }

    pub fn union(self, other: NdTypeMask) -> NdTypeMask {
        NdTypeMask(self.0 | other.0)
    }

    /// Number of classes present.
    pub fn class_count(self) -> u32 {
        self.0.count_ones()
    }

    /// Parses `0`, `VPRE`, `npre|npost`, or a decimal/hex bit value.
    pub fn parse(s: &str) -> Result<Self, UnknownMaskName> {
        let s = s.trim();
        let err = || UnknownMaskName(s.to_string());
        if let Some(hex) = s.strip_prefix("0x") {
            let v = u8::from_str_radix(hex, 16).map_err(|_| err())?;
            return NdTypeMask::new(v).map_err(|_| err());
        }
        if let Ok(v) = s.parse::<u8>() {
            return NdTypeMask::new(v).map_err(|_| err());
        }
        let mut bits = 0;
        for part in s.split(['|', '+']) {
            let part = part.trim().to_ascii_uppercase();
            let c = match part.as_str() {
                "VPRE" => NdClass::Vpre,
                "NPRE" => NdClass::Npre,
                "VPOST" => NdClass::Vpost,
                "NPOST" => NdClass::Npost,
                "DET" | "NONE" => continue,
                _ => return Err(err()),
            };
            bits |= c.bit();
        }
        Ok(NdTypeMask(bits))
    }
}

impl fmt::Display for NdTypeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return f.write_str("0");
        }
        let names: Vec<&str> = self.classes().map(NdClass::name).collect();
        f.write_str(&names.join("|"))
    }
}

impl fmt::Debug for NdTypeMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NdTypeMask({self})")
    }
}

impl Serialize for NdTypeMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NdTypeMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        NdTypeMask::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_bits_rejected() {
        for b in 16..=255u8 {
            assert_eq!(NdTypeMask::new(b), Err(InvalidMask(b)));
        }
        for b in 0..16u8 {
            assert_eq!(NdTypeMask::new(b).unwrap().bits(), b);
        }
    }

    #[test]
    fn parse_and_display() {
        let m = NdTypeMask::parse("vpre|npost").unwrap();
        assert_eq!(m.bits(), 0b1001);
        assert_eq!(m.to_string(), "VPRE|NPOST");
        assert_eq!(NdTypeMask::parse(&m.to_string()).unwrap(), m);
        assert_eq!(NdTypeMask::parse("0").unwrap(), NdTypeMask::DETERMINISTIC);
        assert_eq!(NdTypeMask::parse("0x0c").unwrap().bits(), 12);
        assert!(NdTypeMask::parse("17").is_err());
        assert!(NdTypeMask::parse("FOO").is_err());
    }
}
