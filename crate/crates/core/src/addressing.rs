//! Octet-granular hierarchical addresses.
//!
//! An address is four octets. The leading `p` octets are the network prefix;
//! the remaining `4 - p` octets form the suffix. A node's level is the number
//! of trailing zero octets in its suffix, so with a two-octet prefix `10.1`
//! the address `10.1.0.0` sits at level 2, `10.1.1.0` at level 1 and
//! `10.1.1.1` at level 0.
//!
//! A level-`k` node (`k >= 1`) heads a pool of 255 level-`k-1` addresses,
//! obtained by writing `1..=255` into its leftmost zero octet. Octet value 0 at
//! that position denotes the head itself and is never allocated.

use core::fmt;
use core::ops::RangeInclusive;
use core::str::FromStr;

use thiserror::Error;

/// Number of allocatable children in one pool.
pub const POOL_SIZE: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("address does not start with the network prefix")]
    PrefixMismatch,
    #[error("address is the supreme address and has no cluster head")]
    IsSupreme,
    #[error("level-0 address owns no pool")]
    LevelZero,
    #[error("octet overflow: result exceeds 255")]
    OctetOverflow,
    #[error("prefixes differ in length")]
    LengthMismatch,
    #[error("prefix length must be 1..=3 octets")]
    BadPrefixLength,
    #[error("suffix has a zero octet left of a nonzero octet")]
    Malformed,
    #[error("address has no member octet at the merge level")]
    NotInCluster,
    #[error("level out of range")]
    BadLevel,
}

/// A four-octet dotted-decimal address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 4]);

impl Address {
    pub const fn new(a: u8, b: u8, c: u8, d: u8) -> Self {
        Address([a, b, c, d])
    }

    pub const fn octets(&self) -> [u8; 4] {
        self.0
    }

    pub fn octet(&self, idx: usize) -> u8 {
        self.0[idx]
    }

    fn with_octet(mut self, idx: usize, value: u8) -> Self {
        self.0[idx] = value;
        self
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a}.{b}.{c}.{d}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid dotted-decimal address")]
pub struct ParseAddressError;

impl FromStr for Address {
    type Err = ParseAddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 4];
        let mut parts = s.split('.');
        for slot in out.iter_mut() {
            let part = parts.next().ok_or(ParseAddressError)?;
            if part.is_empty() || part.len() > 3 || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(ParseAddressError);
            }
            let v: u16 = part.parse().map_err(|_| ParseAddressError)?;
            *slot = u8::try_from(v).map_err(|_| ParseAddressError)?;
        }
        if parts.next().is_some() {
            return Err(ParseAddressError);
        }
        Ok(Address(out))
    }
}

/// Opaque network identifier. Chosen when a network is initialised and
/// replaced only by partition healing or merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetId(pub u64);

impl fmt::Display for NetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// The fixed leading octets of every address of one network, plus its NetID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetworkPrefix {
    octets: [u8; 3],
    len: u8,
    pub netid: NetId,
}

impl NetworkPrefix {
    pub fn new(octets: &[u8], netid: NetId) -> Result<Self, AddressError> {
        if !(1..=3).contains(&octets.len()) {
            return Err(AddressError::BadPrefixLength);
        }
        let mut buf = [0u8; 3];
        buf[..octets.len()].copy_from_slice(octets);
        Ok(NetworkPrefix { octets: buf, len: octets.len() as u8, netid })
    }

    pub fn octets(&self) -> &[u8] {
        &self.octets[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_level(&self) -> Level {
        Level(4 - self.len)
    }

    /// Same octets, different NetID.
    pub fn with_netid(mut self, netid: NetId) -> Self {
        self.netid = netid;
        self
    }

    pub fn contains(&self, addr: Address) -> bool {
        addr.0[..self.len()] == *self.octets()
    }

    /// The all-zero-suffix address: the supreme node of this network.
    pub fn supreme_address(&self) -> Address {
        let mut o = [0u8; 4];
        o[..self.len()].copy_from_slice(self.octets());
        Address(o)
    }

    /// Cardinality of the suffix space (`256^(4-p)`).
    pub fn suffix_space(&self) -> u64 {
        1u64 << (8 * (4 - self.len as u32))
    }

    /// Same-length prefixes are comparable by octets alone.
    pub fn same_octets(&self, other: &NetworkPrefix) -> bool {
        self.octets() == other.octets()
    }
}

impl fmt::Display for NetworkPrefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, o) in self.octets().iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

/// Count of trailing zero suffix octets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(pub u8);

impl Level {
    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn check_prefix(addr: Address, prefix: &NetworkPrefix) -> Result<(), AddressError> {
    if prefix.contains(addr) {
        Ok(())
    } else {
        Err(AddressError::PrefixMismatch)
    }
}

/// Level of `addr` under `prefix`: trailing zero octets, never counting
/// prefix octets.
pub fn level_of(addr: Address, prefix: &NetworkPrefix) -> Result<Level, AddressError> {
    check_prefix(addr, prefix)?;
    let zeros = addr.0[prefix.len()..].iter().rev().take_while(|&&o| o == 0).count();
    Ok(Level(zeros as u8))
}

/// Level, additionally rejecting suffixes such as `10.1.0.5` that no pool can
/// produce.
pub fn checked_level(addr: Address, prefix: &NetworkPrefix) -> Result<Level, AddressError> {
    let level = level_of(addr, prefix)?;
    let member_octets = &addr.0[prefix.len()..4 - level.0 as usize];
    if member_octets.iter().any(|&o| o == 0) {
        return Err(AddressError::Malformed);
    }
    Ok(level)
}

/// The level-`k+1` address whose pool contains `addr`.
pub fn cluster_head_of(addr: Address, prefix: &NetworkPrefix) -> Result<Address, AddressError> {
    let level = checked_level(addr, prefix)?;
    if level >= prefix.max_level() {
        return Err(AddressError::IsSupreme);
    }
    Ok(addr.with_octet(3 - level.0 as usize, 0))
}

/// Index of the octet a head at `level` writes its children's suffix into.
fn pool_octet(level: Level) -> usize {
    4 - level.0 as usize
}

/// The pool a head owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    head: Address,
    octet: usize,
}

impl Pool {
    pub fn head(&self) -> Address {
        self.head
    }

    /// Address of the child at `suffix` (1..=255).
    pub fn child(&self, suffix: u8) -> Address {
        debug_assert!(suffix != 0);
        self.head.with_octet(self.octet, suffix)
    }

    /// Suffix of `addr` within this pool, if it is a direct child.
    pub fn suffix_of(&self, addr: Address) -> Option<u8> {
        let s = addr.0[self.octet];
        (s != 0 && self.child(s) == addr).then_some(s)
    }

    pub fn suffixes(&self) -> RangeInclusive<u8> {
        1..=255
    }

    pub fn iter(&self) -> impl Iterator<Item = Address> + '_ {
        self.suffixes().map(move |s| self.child(s))
    }

    pub fn first(&self) -> Address {
        self.child(1)
    }

    pub fn last(&self) -> Address {
        self.child(255)
    }
}

/// The 255 child addresses owned by `head`.
pub fn pool_of(head: Address, prefix: &NetworkPrefix) -> Result<Pool, AddressError> {
    let level = checked_level(head, prefix)?;
    if level.0 == 0 {
        return Err(AddressError::LevelZero);
    }
    Ok(Pool { head, octet: pool_octet(level) })
}

/// Shift the single octet that encodes membership at `merge_level` by
/// `offset`. Zero offset is the identity.
pub fn offset_address(addr: Address, offset: u8, merge_level: Level) -> Result<Address, AddressError> {
    if offset == 0 {
        return Ok(addr);
    }
    if merge_level.0 > 3 {
        return Err(AddressError::BadLevel);
    }
    let idx = 3 - merge_level.0 as usize;
    let cur = addr.0[idx];
    if cur == 0 {
        return Err(AddressError::NotInCluster);
    }
    let next = cur.checked_add(offset).ok_or(AddressError::OctetOverflow)?;
    Ok(addr.with_octet(idx, next))
}

/// Replace `old`'s prefix octets with `new`'s, keeping the suffix.
pub fn reprefix(addr: Address, old: &NetworkPrefix, new: &NetworkPrefix) -> Result<Address, AddressError> {
    if old.len() != new.len() {
        return Err(AddressError::LengthMismatch);
    }
    check_prefix(addr, old)?;
    let mut o = addr.0;
    o[..new.len()].copy_from_slice(new.octets());
    Ok(Address(o))
}

/// Rewrite an address of a network being folded under a one-octet-shorter
/// prefix: the freed prefix octet becomes `index`.
pub fn deepen_address(addr: Address, old: &NetworkPrefix, index: u8) -> Result<Address, AddressError> {
    check_prefix(addr, old)?;
    if old.len() < 2 {
        return Err(AddressError::BadPrefixLength);
    }
    Ok(addr.with_octet(old.len() - 1, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(a: u8, b: u8) -> NetworkPrefix {
        NetworkPrefix::new(&[a, b], NetId(1)).unwrap()
    }

    fn addr(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn levels_of_running_example() {
        let pre = p(10, 1);
        assert_eq!(level_of(addr("10.1.0.0"), &pre), Ok(Level(2)));
        assert_eq!(level_of(addr("10.1.1.0"), &pre), Ok(Level(1)));
        assert_eq!(level_of(addr("10.1.1.1"), &pre), Ok(Level(0)));
        assert_eq!(level_of(addr("10.1.23.4"), &pre), Ok(Level(0)));
    }

    #[test]
    fn level_requires_prefix() {
        assert_eq!(level_of(addr("10.2.0.0"), &p(10, 1)), Err(AddressError::PrefixMismatch));
    }

    #[test]
    fn heads() {
        let pre = p(10, 1);
        assert_eq!(cluster_head_of(addr("10.1.23.4"), &pre), Ok(addr("10.1.23.0")));
        assert_eq!(cluster_head_of(addr("10.1.1.0"), &pre), Ok(addr("10.1.0.0")));
        assert_eq!(cluster_head_of(addr("10.1.0.0"), &pre), Err(AddressError::IsSupreme));
        assert_eq!(cluster_head_of(addr("10.1.0.5"), &pre), Err(AddressError::Malformed));
    }

    #[test]
    fn pools() {
        let pre = p(10, 1);
        let top = pool_of(addr("10.1.0.0"), &pre).unwrap();
        assert_eq!(top.first(), addr("10.1.1.0"));
        assert_eq!(top.last(), addr("10.1.255.0"));
        assert_eq!(top.iter().count(), POOL_SIZE);
        let one = pool_of(addr("10.1.1.0"), &pre).unwrap();
        assert_eq!(one.first(), addr("10.1.1.1"));
        assert_eq!(one.last(), addr("10.1.1.255"));
        assert_eq!(one.suffix_of(addr("10.1.1.77")), Some(77));
        assert_eq!(one.suffix_of(addr("10.1.2.77")), None);
        assert_eq!(pool_of(addr("10.1.1.1"), &pre), Err(AddressError::LevelZero));
    }

    #[test]
    fn offsets() {
        let one = Level(1);
        assert_eq!(offset_address(addr("10.23.1.0"), 50, one), Ok(addr("10.23.51.0")));
        assert_eq!(offset_address(addr("10.23.23.12"), 50, one), Ok(addr("10.23.73.12")));
        assert_eq!(offset_address(addr("10.23.0.0"), 0, one), Ok(addr("10.23.0.0")));
        assert_eq!(offset_address(addr("10.23.250.0"), 10, one), Err(AddressError::OctetOverflow));
        assert_eq!(offset_address(addr("10.23.0.0"), 10, one), Err(AddressError::NotInCluster));
    }

    #[test]
    fn reprefixing() {
        let old = p(10, 23);
        let new = p(10, 12);
        assert_eq!(reprefix(addr("10.23.73.12"), &old, &new), Ok(addr("10.12.73.12")));
        assert_eq!(reprefix(addr("10.23.51.0"), &old, &new), Ok(addr("10.12.51.0")));
        assert_eq!(reprefix(addr("10.23.51.0"), &old, &old), Ok(addr("10.23.51.0")));
        assert_eq!(reprefix(addr("10.24.51.0"), &old, &new), Err(AddressError::PrefixMismatch));
        let short = NetworkPrefix::new(&[10], NetId(1)).unwrap();
        assert_eq!(reprefix(addr("10.23.51.0"), &old, &short), Err(AddressError::LengthMismatch));
    }

    #[test]
    fn deepening_frees_a_prefix_octet() {
        let old = p(10, 12);
        let short = NetworkPrefix::new(&[10], NetId(9)).unwrap();
        let moved = deepen_address(addr("10.12.0.0"), &old, 1).unwrap();
        assert_eq!(moved, addr("10.1.0.0"));
        assert_eq!(level_of(moved, &short), Ok(old.max_level()));
        assert_eq!(short.supreme_address(), addr("10.0.0.0"));
        assert_eq!(level_of(addr("10.0.0.0"), &short), Ok(Level(3)));
    }

    #[test]
    fn suffix_space_of_two_octet_prefix() {
        let pre = p(10, 1);
        assert_eq!(pre.suffix_space(), 65_536);
        assert_eq!(pre.max_level(), Level(2));
        // one supreme, 255 level-1 heads, 255 * 255 level-0 members
        let allocatable = 1 + POOL_SIZE + POOL_SIZE * POOL_SIZE;
        assert_eq!(allocatable, 65_281);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!("10.1.256.0".parse::<Address>().is_err());
        assert!("10.1.2".parse::<Address>().is_err());
        assert!("10.1.2.3.4".parse::<Address>().is_err());
        assert!("10.-1.2.3".parse::<Address>().is_err());
        assert_eq!(addr("10.1.23.4").to_string(), "10.1.23.4");
    }

    fn arb_hier_addr() -> impl Strategy<Value = (NetworkPrefix, Address)> {
        (1usize..=3, any::<[u8; 4]>(), 0u8..=3).prop_map(|(plen, raw, zeros)| {
            let pre = NetworkPrefix::new(&raw[..plen], NetId(7)).unwrap();
            let suffix_len = 4 - plen;
            let zeros = (zeros as usize).min(suffix_len);
            let mut o = raw;
            for (i, slot) in o.iter_mut().enumerate().skip(plen) {
                if i >= 4 - zeros {
                    *slot = 0;
                } else if *slot == 0 {
                    *slot = 1;
                }
            }
            (pre, Address(o))
        })
    }

    proptest! {
        #[test]
        fn pool_children_point_back((pre, a) in arb_hier_addr(), s in 1u8..=255) {
            if let Ok(pool) = pool_of(a, &pre) {
                let child = pool.child(s);
                prop_assert_eq!(cluster_head_of(child, &pre), Ok(a));
                let la = level_of(a, &pre).unwrap().0;
                prop_assert_eq!(level_of(child, &pre).unwrap().0, la - 1);
                prop_assert_eq!(pool.suffix_of(child), Some(s));
            }
        }

        #[test]
        fn head_is_one_level_up((pre, a) in arb_hier_addr()) {
            let la = level_of(a, &pre).unwrap();
            match cluster_head_of(a, &pre) {
                Ok(h) => prop_assert_eq!(level_of(h, &pre).unwrap().0, la.0 + 1),
                Err(e) => {
                    prop_assert_eq!(e, AddressError::IsSupreme);
                    prop_assert_eq!(la, pre.max_level());
                }
            }
        }

        #[test]
        fn offset_and_reprefix_commute(c in 1u8..=100, d in any::<u8>(), off in 0u8..=100, np in any::<u8>()) {
            let old = p(10, 23);
            let new = p(10, np);
            let a = Address::new(10, 23, c, d);
            let x = reprefix(offset_address(a, off, Level(1)).unwrap(), &old, &new).unwrap();
            let y = offset_address(reprefix(a, &old, &new).unwrap(), off, Level(1)).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn display_parse_roundtrip(o in any::<[u8; 4]>()) {
            let a = Address(o);
            prop_assert_eq!(a.to_string().parse::<Address>(), Ok(a));
        }
    }
}
