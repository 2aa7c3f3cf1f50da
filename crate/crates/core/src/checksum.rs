//! Internet checksum (RFC 1071).
//!
//! One's complement arithmetic over big-endian 16-bit words. Odd-length input
//! is padded with a single zero byte.

/// Folded one's complement sum of `data`, continuing from `initial`.
///
/// Feed the result back in as `initial` to cover several disjoint regions
/// (pseudo-header followed by segment, for instance).
pub fn ones_complement_sum(data: &[u8], initial: u16) -> u16 {
    let mut sum = u32::from(initial);
    let mut chunks = data.chunks_exact(2);
    for pair in &mut chunks {
        sum += u32::from(u16::from_be_bytes([pair[0], pair[1]]));
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(*last) << 8;
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u16
}

/// The Internet checksum of `data`: complement of the one's complement sum.
///
/// A region that already carries a correct checksum yields `0x0000` here
/// (its sum is `0xFFFF`).
pub fn checksum16(data: &[u8]) -> u16 {
    !ones_complement_sum(data, 0)
}

/// Sum of the TCP/UDP pseudo-header: source, destination, protocol, length.
pub(crate) fn pseudo_header_sum(src: [u8; 4], dst: [u8; 4], protocol: u8, length: u16) -> u16 {
    let mut buf = [0u8; 12];
    buf[0..4].copy_from_slice(&src);
    buf[4..8].copy_from_slice(&dst);
    buf[9] = protocol;
    buf[10..12].copy_from_slice(&length.to_be_bytes());
    ones_complement_sum(&buf, 0)
}
