//! Weak rolling checksum and strong block digest.

use md5::{Digest, Md5};

/// `a + 2^16 * b` where `a = sum(x_i)` and `b = sum((l - i + 1) * x_i)`
/// over 1-indexed bytes, both mod 2^16.
pub fn weak_checksum(block: &[u8]) -> u32 {
    let len = block.len() as u32;
    let (a, b) = block.iter().enumerate().fold((0u32, 0u32), |(a, b), (i, &x)| {
        (a.wrapping_add(x as u32), b.wrapping_add((len - i as u32).wrapping_mul(x as u32)))
    });
    (a & 0xffff) | (b << 16)
}

/// Slides a `len`-byte window one byte right: drops `out_byte` from the
/// front and appends `in_byte`.
pub fn roll(weak: u32, out_byte: u8, in_byte: u8, len: usize) -> u32 {
    let a = weak & 0xffff;
    let b = weak >> 16;
    let a2 = a.wrapping_sub(out_byte as u32).wrapping_add(in_byte as u32) & 0xffff;
    let b2 = b.wrapping_sub((len as u32).wrapping_mul(out_byte as u32)).wrapping_add(a2) & 0xffff;
    a2 | (b2 << 16)
}

/// Drops `out_byte` from the front of a `len`-byte window without
/// appending anything.
pub fn shrink(weak: u32, out_byte: u8, len: usize) -> u32 {
    let a = (weak & 0xffff).wrapping_sub(out_byte as u32) & 0xffff;
    let b = (weak >> 16).wrapping_sub((len as u32).wrapping_mul(out_byte as u32)) & 0xffff;
    a | (b << 16)
}

pub fn strong_checksum(block: &[u8]) -> [u8; 16] {
    Md5::digest(block).into()
}

/// Incremental MD5 for whole-file verification.
#[derive(Default, Clone)]
pub struct FileDigest(Md5);

impl FileDigest {
    pub fn new() -> Self {
        FileDigest(Md5::new())
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish(self) -> [u8; 16] {
        self.0.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_values() {
        assert_eq!(weak_checksum(&[]), 0);
        assert_eq!(weak_checksum(&[0x01]), 65537);
        assert_eq!(weak_checksum(&[0x01, 0x02]), 262147);
    }

    #[test]
    fn roll_examples() {
        let z = weak_checksum(&[0; 16]);
        assert_eq!(roll(z, 0, 0, 16), z);
        assert_eq!(roll(weak_checksum(&[1, 2]), 1, 3, 2), weak_checksum(&[2, 3]));
        assert_eq!(shrink(weak_checksum(&[1, 2, 3]), 1, 3), weak_checksum(&[2, 3]));
    }

    #[test]
    fn rfc1321_digests() {
        let hex = |d: [u8; 16]| d.iter().map(|b| format!("{b:02x}")).collect::<String>();
        assert_eq!(hex(strong_checksum(b"")), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(hex(strong_checksum(b"abc")), "900150983cd24fb0d6963f7d28e17f72");
        assert_eq!(hex(strong_checksum(b"message digest")), "f96b697d7cb7938d525a2f31aaf161d0");
    }

    proptest! {
        #[test]
        fn sums_wrap_mod_2_16(block in proptest::collection::vec(any::<u8>(), 0..4096)) {
            // Reference with wide integers, reduced at the end.
            let l = block.len() as u64;
            let a: u64 = block.iter().map(|&x| x as u64).sum();
            let b: u64 = block.iter().enumerate().map(|(i, &x)| (l - i as u64) * x as u64).sum();
            prop_assert_eq!(weak_checksum(&block), ((a % 65536) + 65536 * (b % 65536)) as u32);
        }
    }
}
