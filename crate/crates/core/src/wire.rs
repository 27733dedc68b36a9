// SPDX-License-Identifier: Apache-2.0

//! Serde helpers for the human-written scenario format: addresses may be
//! written as numbers or `"0x..."` strings, syscalls by name or number, and
//! byte payloads as text or explicit byte arrays.

use std::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::filters::MAX_ARGS;
use crate::syscalls;

/// Parses `"0x1f"`, `"31"` or a JSON number.
pub fn parse_u64(text: &str) -> Result<u64, String> {
    let t = text.trim().replace('_', "");
    let parsed = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        t.parse::<u64>()
    };
    parsed.map_err(|_| format!("invalid integer {text:?}"))
}

struct U64Visitor;

impl<'de> Visitor<'de> for U64Visitor {
    type Value = u64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an unsigned integer or a hex string")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
        u64::try_from(v).map_err(|_| E::custom(format!("negative value {v}")))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
        parse_u64(v).map_err(E::custom)
    }
}

/// `#[serde(with = "wire::hex_u64")]`
pub mod hex_u64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        d.deserialize_any(U64Visitor)
    }
}

/// Newtype form of [`hex_u64`] for use inside collections.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Addr(pub u64);

impl Serialize for Addr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.0)
    }
}

impl<'de> Deserialize<'de> for Addr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(U64Visitor).map(Addr)
    }
}

/// Maps keyed by syscall number. JSON object keys are strings, and inside
/// tagged enums serde no longer converts them back, so keys are parsed here.
pub mod num_keys {
    use std::collections::BTreeMap;

    use serde::de::{self, Deserializer};
    use serde::ser::Serializer;
    use serde::{Deserialize, Serialize};

    pub fn serialize<V: Serialize, S: Serializer>(map: &BTreeMap<u32, V>, s: S) -> Result<S::Ok, S::Error> {
        map.serialize(s)
    }

    pub fn deserialize<'de, V, D>(d: D) -> Result<BTreeMap<u32, V>, D::Error>
    where
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        BTreeMap::<String, V>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| de::Error::custom(format!("bad syscall number {k:?}"))))
            .collect()
    }
}

/// Six syscall argument registers; shorter lists are zero-padded.
pub mod args {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[u64; MAX_ARGS], s: S) -> Result<S::Ok, S::Error> {
        let used = v.iter().rposition(|&x| x != 0).map_or(0, |i| i + 1);
        let mut seq = s.serialize_seq(Some(used))?;
        for x in &v[..used] {
            seq.serialize_element(x)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u64; MAX_ARGS], D::Error> {
        struct ArgsVisitor;
        impl<'de> Visitor<'de> for ArgsVisitor {
            type Value = [u64; MAX_ARGS];

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a list of at most six integers")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Self::Value, A::Error> {
                let mut out = [0u64; MAX_ARGS];
                let mut i = 0;
                while let Some(Addr(v)) = seq.next_element::<Addr>()? {
                    if i == MAX_ARGS {
                        return Err(de::Error::custom("more than six syscall arguments"));
                    }
                    out[i] = v;
                    i += 1;
                }
                Ok(out)
            }
        }
        d.deserialize_seq(ArgsVisitor)
    }
}

/// A syscall given by name (`"openat"`) or number.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sys(pub u32);

impl Serialize for Sys {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match syscalls::name(self.0) {
            Some(name) => s.serialize_str(name),
            None => s.serialize_u32(self.0),
        }
    }
}

impl<'de> Deserialize<'de> for Sys {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SysVisitor;
        impl<'de> Visitor<'de> for SysVisitor {
            type Value = Sys;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a syscall name or number")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Sys, E> {
                u32::try_from(v).map(Sys).map_err(|_| E::custom("syscall number out of range"))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Sys, E> {
                u32::try_from(v).map(Sys).map_err(|_| E::custom("syscall number out of range"))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Sys, E> {
                syscalls::number(v)
                    .map(Sys)
                    .ok_or_else(|| E::custom(format!("unknown syscall name {v:?}")))
            }
        }
        d.deserialize_any(SysVisitor)
    }
}

/// Byte payload: a JSON string (UTF-8 bytes, no implicit NUL) or an array
/// of byte values. Serializes as a string when the bytes are printable.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Bytes(pub Vec<u8>);

impl Bytes {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Bytes {
    fn from(s: &str) -> Self {
        Bytes(s.as_bytes().to_vec())
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(text) if !text.chars().any(char::is_control) => s.serialize_str(text),
            _ => self.0.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<u8>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Text(t) => Bytes(t.into_bytes()),
            Raw::List(v) => Bytes(v),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_and_decimal() {
        assert_eq!(parse_u64("0x10").unwrap(), 16);
        assert_eq!(parse_u64("1_000").unwrap(), 1000);
        assert!(parse_u64("zz").is_err());
        let a: Addr = serde_json::from_str("\"0x7000\"").unwrap();
        assert_eq!(a, Addr(0x7000));
    }

    #[test]
    fn bytes_round_trip() {
        for raw in [b"file1".to_vec(), vec![0x66, 0, 0xff]] {
            let b = Bytes(raw);
            let json = serde_json::to_string(&b).unwrap();
            assert_eq!(serde_json::from_str::<Bytes>(&json).unwrap(), b);
        }
    }

    #[test]
    fn syscall_by_name() {
        let s: Sys = serde_json::from_str("\"openat\"").unwrap();
        assert_eq!(s, Sys(257));
        assert_eq!(serde_json::to_string(&Sys(300)).unwrap(), "300");
    }
}
