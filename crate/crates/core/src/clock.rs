//! Host-wide monotonic timestamps.
//!
//! `std::time::Instant` cannot cross a process boundary, but latency is
//! measured between the generator and the engine, which may be separate
//! processes on the same host. Both sides read `CLOCK_MONOTONIC` directly.

/// Nanoseconds on the host's monotonic clock.
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and CLOCK_MONOTONIC is always supported on Linux.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_MONOTONIC) failed");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}
