use std::fmt;

use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Device address: allocation reference in the high 32 bits, byte offset in
/// the low 32 bits. Reference 0 is null.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct VirtualPtr(u64);

impl VirtualPtr {
    pub const NULL: VirtualPtr = VirtualPtr(0);

    pub const fn from_parts(reference: u32, offset: u32) -> Self {
        VirtualPtr(((reference as u64) << 32) | offset as u64)
    }

    pub const fn from_raw(raw: u64) -> Self {
        VirtualPtr(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn reference(self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub const fn offset(self) -> u32 {
        self.0 as u32
    }

    pub const fn is_null(self) -> bool {
        self.reference() == 0
    }

    /// `self + delta` bytes; the offset never carries into the reference.
    pub fn checked_add(self, delta: u64) -> Result<VirtualPtr, RuntimeError> {
        let off = (self.offset() as u64)
            .checked_add(delta)
            .filter(|&o| o <= u32::MAX as u64)
            .ok_or(RuntimeError::ArithmeticOverflow {
                ptr: self.0,
                delta,
            })?;
        Ok(VirtualPtr::from_parts(self.reference(), off as u32))
    }
}

impl fmt::Debug for VirtualPtr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualPtr({}+{})", self.reference(), self.offset())
    }
}

impl fmt::Display for VirtualPtr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_allocation_encoding() {
        let p = VirtualPtr::from_parts(1, 0);
        assert_eq!(p.raw(), 0x0000_0001_0000_0000);
        let q = p.checked_add(12).unwrap();
        assert_eq!((q.reference(), q.offset()), (1, 12));
        assert!(matches!(
            p.checked_add(1 << 32),
            Err(RuntimeError::ArithmeticOverflow { .. })
        ));
        assert!(VirtualPtr::NULL.is_null());
    }

    proptest! {
        #[test]
        fn pack_round_trip(r in any::<u32>(), o in any::<u32>(), d in any::<u32>()) {
            let p = VirtualPtr::from_parts(r, o);
            prop_assert_eq!(VirtualPtr::from_raw(p.raw()), p);
            prop_assert_eq!((p.reference(), p.offset()), (r, o));
            match p.checked_add(d as u64) {
                Ok(q) => {
                    prop_assert!(o as u64 + d as u64 <= u32::MAX as u64);
                    prop_assert_eq!(q.reference(), r);
                    prop_assert_eq!(q.offset() as u64, o as u64 + d as u64);
                }
                Err(_) => prop_assert!(o as u64 + d as u64 > u32::MAX as u64),
            }
        }
    }
}
