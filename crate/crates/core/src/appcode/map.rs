//! Per-program-instance key/value scratch map.

use std::collections::{BTreeMap, BTreeSet};

pub const MAP_CAPACITY: usize = 1024;
pub const MAP_VALUE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot {
    key: u64,
    value: [u8; MAP_VALUE_SIZE],
    len: usize,
}

/// Fixed-capacity map from 8-byte keys to values of at most 64 bytes.
///
/// Values live in stable slots so that appcode can hold a pointer to one
/// between a `map_lookup` and the next map mutation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScratchMap {
    slots: Vec<Option<Slot>>,
    index: BTreeMap<u64, usize>,
    free: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapFull;

impl ScratchMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, key: u64) -> Option<&[u8]> {
        let slot = self.slots[*self.index.get(&key)?].as_ref()?;
        Some(&slot.value[..slot.len])
    }

    pub(crate) fn slot_of(&self, key: u64) -> Option<usize> {
        self.index.get(&key).copied()
    }

    pub fn update(&mut self, key: u64, value: &[u8]) -> Result<(), MapFull> {
        assert!(value.len() <= MAP_VALUE_SIZE, "map values are capped at {MAP_VALUE_SIZE} bytes");
        let mut buf = [0u8; MAP_VALUE_SIZE];
        buf[..value.len()].copy_from_slice(value);
        let slot = Slot { key, value: buf, len: value.len() };
        if let Some(&i) = self.index.get(&key) {
            self.slots[i] = Some(slot);
            return Ok(());
        }
        if self.index.len() >= MAP_CAPACITY {
            return Err(MapFull);
        }
        let i = match self.free.pop_first() {
            Some(i) => i,
            None => {
                self.slots.push(None);
                self.slots.len() - 1
            }
        };
        self.slots[i] = Some(slot);
        self.index.insert(key, i);
        Ok(())
    }

    pub fn delete(&mut self, key: u64) -> bool {
        match self.index.remove(&key) {
            Some(i) => {
                self.slots[i] = None;
                self.free.insert(i);
                true
            }
            None => false,
        }
    }

    pub(crate) fn slot_bytes(&self, slot: usize) -> Option<&[u8; MAP_VALUE_SIZE]> {
        self.slots.get(slot)?.as_ref().map(|s| &s.value)
    }

    /// Writes into a slot's 64-byte window, growing its logical length.
    pub(crate) fn write_slot(&mut self, slot: usize, off: usize, bytes: &[u8]) -> bool {
        match self.slots.get_mut(slot).and_then(Option::as_mut) {
            Some(s) if off + bytes.len() <= MAP_VALUE_SIZE => {
                s.value[off..off + bytes.len()].copy_from_slice(bytes);
                s.len = s.len.max(off + bytes.len());
                true
            }
            _ => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.index.iter().filter_map(move |(k, &i)| self.slots[i].as_ref().map(|s| (*k, &s.value[..s.len])))
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_lookup_delete() {
        let mut m = ScratchMap::new();
        m.update(7, b"abc").unwrap();
        assert_eq!(m.get(7), Some(&b"abc"[..]));
        m.update(7, b"z").unwrap();
        assert_eq!(m.get(7), Some(&b"z"[..]));
        assert!(m.delete(7));
        assert!(!m.delete(7));
        assert_eq!(m.get(7), None);
    }

    #[test]
    fn capacity_is_enforced_and_slots_reused() {
        let mut m = ScratchMap::new();
        for k in 0..MAP_CAPACITY as u64 {
            m.update(k, &[1]).unwrap();
        }
        assert_eq!(m.update(9999, &[1]), Err(MapFull));
        m.update(3, &[2]).unwrap();
        assert!(m.delete(5));
        m.update(9999, &[3]).unwrap();
        assert_eq!(m.slot_of(9999), Some(5));
        assert_eq!(m.len(), MAP_CAPACITY);
    }
}
